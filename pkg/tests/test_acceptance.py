"""
Acceptance suite: one test per criterion, each run at its stated tolerance.

Every test records a ``criterion N PASS|FAIL`` line that pytest prints in the
"acceptance criteria" section of the terminal summary.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from glioseg.cli import final_comparison, main
from glioseg.inference import DEFAULT_STEPS, predict_volume, prepare_case, window_positions
from glioseg.metrics import dice_region, hausdorff
from glioseg.network import (
    NetworkConfig,
    PretrainedLoadError,
    build_network,
    count_parameters,
    export_encoder_2d,
    gradient_check,
    lift_kernel_2d_to_3d,
    load_pretrained,
    network_forward,
)
from glioseg.nifti import (
    NiftiError,
    WeightStore,
    WeightStoreError,
    read_labels,
    read_volume,
    read_weights,
    write_volume,
    write_weights,
)
from glioseg.preprocess import RigidTransform, apply_rigid, preprocess_scan, resample_nn, rigid_register
from glioseg.synth import PhantomSpec, Pretrain2DSpec, generate, generate_pretrain_2d
from glioseg.training import AugmentConfig, PretrainConfig, TrainConfig, multiple_dice_loss, pretrain_encoder, train
from glioseg.training.loop import region_dice_scores
from glioseg.volume import LABEL_CODES, MODALITIES, REGIONS, SegmentationMap, Volume3D

# Desk-scale recipes shared with the README.
OVERFIT = dict(patch_shape=(8, 32, 32), batch_size=16, learning_rate=3e-3, epochs=1, batches_per_epoch=200,
               augment=AugmentConfig.off(), inference_steps=(8, 16, 16))
TRANSFER = dict(patch_shape=(8, 32, 32), batch_size=8, learning_rate=3e-3, epochs=10, batches_per_epoch=20,
                augment=AugmentConfig.off(), inference_steps=(8, 16, 16))
TRANSFER_PRETRAIN = PretrainConfig(steps=200, batch_size=16, learning_rate=1e-3, seed=0)


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def test_criterion_01_gradient_correctness(acceptance):
    cfg = NetworkConfig.tiny()
    start = time.perf_counter()
    res = gradient_check(build_network(cfg, seed=0), cfg, probe_count=200, seed=0)
    elapsed = time.perf_counter() - start
    ok = res.max_rel_error < 1e-4 and len(res.probes) >= 200 and elapsed < 300
    acceptance(1, "gradient check", ok,
               f"max rel error {res.max_rel_error:.2e} (< 1e-4) over {len(res.probes)} probes in {elapsed:.0f}s (< 300s)")
    assert ok, res.worst()


# ---------------------------------------------------------------------------
# 2. 2D/3D reduction equivalence
# ---------------------------------------------------------------------------


def _slice_reference(params, cfg, x2d):
    P = {n: torch.from_numpy(np.asarray(v, dtype=np.float64)) for n, v in params.items()}

    def bn(t, p):
        return F.batch_norm(t, P[f"{p}.mean"], P[f"{p}.var"], P[f"{p}.scale"], P[f"{p}.shift"], False, 0.0, 1e-5)

    def conv(t, name, **kw):
        return F.conv2d(t, P[f"{name}.weight"][:, :, 0], **kw)

    e0 = F.relu(bn(conv(torch.from_numpy(x2d), "enc.stage0.block0.conv1", stride=2, padding=cfg.stem_kernel // 2),
                   "enc.stage0.block0.bn1"))
    h, feats = F.max_pool2d(e0, 2), [e0]
    for s, nb in enumerate(cfg.blocks_per_stage, start=1):
        for i in range(nb):
            b, st = f"enc.stage{s}.block{i}", 2 if (s > 1 and i == 0) else 1
            y = bn(conv(F.relu(bn(conv(h, f"{b}.conv1", stride=st, padding=1), f"{b}.bn1")), f"{b}.conv2", padding=1),
                   f"{b}.bn2")
            sc = bn(conv(h, f"{b}.down", stride=st), f"{b}.down_bn") if f"{b}.down.weight" in P else h
            h = F.relu(y + sc)
        feats.append(h)
    d = feats[4]
    for k, skip in enumerate([feats[3], feats[2], feats[1], feats[0], None]):
        u = F.relu(F.conv_transpose2d(d, P[f"dec.block{k}.up.weight"][:, :, 0], stride=2, padding=1))
        d = F.relu(conv(u if skip is None else torch.cat([u, skip], 1), f"dec.block{k}.conv", padding=1))
    return torch.softmax(conv(d, "head") + P["head.bias"][None, :, None, None], 1).numpy()


def test_criterion_02_reduction_equivalence(acceptance):
    cfg = NetworkConfig.tiny(depth_layers_enabled=False)
    rng = np.random.default_rng(0)
    params = build_network(cfg, seed=1, dtype=np.float64)
    for n in params:
        if n.endswith(".mean"):
            params[n] = rng.normal(0, 0.1, params[n].shape)
        elif n.endswith(".var"):
            params[n] = rng.uniform(0.5, 1.5, params[n].shape)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_normal((2, 3, 1, 64, 64))
        ours, _ = network_forward(params, cfg, x)
        worst = max(worst, float(np.abs(ours[:, :, 0] - _slice_reference(params, cfg, x[:, :, 0])).max()))
    ok = worst < 1e-5
    acceptance(2, "2D/3D reduction", ok, f"max abs diff {worst:.2e} (< 1e-5) on 20 inputs")
    assert ok


# ---------------------------------------------------------------------------
# 3. weight-lift fidelity
# ---------------------------------------------------------------------------


def test_criterion_03_weight_lift(acceptance):
    checks = {}
    for name, cfg in (("tiny", NetworkConfig.tiny()), ("full", NetworkConfig.full())):
        src = build_network(cfg, seed=1)
        store = export_encoder_2d(src, cfg)
        lifted = load_pretrained(build_network(cfg, seed=2), store, cfg, strict=True)
        enc = [n for n in src if n.startswith("enc.")]
        checks[f"{name} count"] = count_parameters(lifted) == count_parameters(src) and \
            sum(store[n].size for n in enc) == sum(src[n].size for n in enc)
        checks[f"{name} bit-exact"] = all(lifted[n].tobytes() == src[n].tobytes() for n in enc)
        k = store["enc.stage0.block0.conv1.weight"]
        checks[f"{name} lift"] = lift_kernel_2d_to_3d(k).tobytes() == k.tobytes()
    cfg = NetworkConfig.tiny()
    store = export_encoder_2d(build_network(cfg), cfg)
    missing = WeightStore({n: store[n] for n in store if n != "enc.stage2.block0.down_bn.mean"})
    bad = {n: store[n] for n in store}
    bad["enc.stage1.block0.conv2.weight"] = np.zeros((8, 8, 3, 5), np.float32)
    for label, s in (("missing", missing), ("mismatched", WeightStore(bad))):
        try:
            load_pretrained(build_network(cfg), s, cfg, strict=True)
            checks[f"rejects {label}"] = False
        except PretrainedLoadError:
            checks[f"rejects {label}"] = True
    ok = all(checks.values())
    acceptance(3, "weight lifting", ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. loss / metric oracles
# ---------------------------------------------------------------------------


def _boundary(mask):
    pts = []
    for idx in np.argwhere(mask):
        for axis in range(3):
            for step in (-1, 1):
                nb = idx.copy()
                nb[axis] += step
                if not 0 <= nb[axis] < mask.shape[axis] or not mask[tuple(nb)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64)


def _hd_oracle(a, b, spacing, q):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return np.inf
    pa, pb = _boundary(a) * spacing, _boundary(b) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(np.percentile(d.min(1), q), np.percentile(d.min(0), q))


def test_criterion_04_loss_and_metric_oracles(acceptance):
    rng = np.random.default_rng(4)
    spacing = np.array([1.0, 0.9, 1.2])
    dice_exact, hd_err, loss_err = True, 0.0, 0.0
    for _ in range(100):
        a = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)
        b = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.5)
        sa, sb = set(map(tuple, np.argwhere(a))), set(map(tuple, np.argwhere(b)))
        dice_exact &= dice_region(a, b) == 2 * len(sa & sb) / (len(sa) + len(sb))
        for q in (95, 100):
            hd_err = max(hd_err, abs(hausdorff(a, b, tuple(spacing), q) - _hd_oracle(a, b, spacing, q)))
        logits = rng.standard_normal((1, 4, 8, 8, 8))
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        onehot = np.eye(4)[rng.integers(0, 4, (1, 8, 8, 8))].transpose(0, 4, 1, 2, 3)
        oracle = 1 - np.mean([(2 * (probs[:, c] * onehot[:, c]).sum() + 1e-5) /
                              (probs[:, c].sum() + onehot[:, c].sum() + 1e-5) for c in (1, 2, 3)])
        loss_err = max(loss_err, abs(multiple_dice_loss(probs, onehot)[0] - oracle))
    ref = np.zeros((1, 1, 10), bool)
    pred = np.zeros((1, 1, 10), bool)
    ref[0, 0, :4], pred[0, 0, 1:7] = True, True
    hand = dice_region(pred, ref)
    ok = dice_exact and hd_err <= 1e-9 and loss_err < 1e-12 and hand == 0.6
    acceptance(4, "loss/metric oracles", ok,
               f"dice exact={dice_exact}, hausdorff err {hd_err:.1e} mm (<= 1e-9), loss err {loss_err:.1e}, hand case {hand}")
    assert ok


# ---------------------------------------------------------------------------
# 5. sliding-window oracle
# ---------------------------------------------------------------------------


def test_criterion_05_sliding_window(acceptance):
    cfg = NetworkConfig.tiny()
    params = build_network(cfg, seed=0)
    patch, steps = (8, 32, 32), (4, 16, 16)
    exact = True
    for scan, _ in generate(PhantomSpec(dims=(32, 48, 48), count=2, seed=5)):
        prepared = prepare_case(scan)[0]
        image = prepared.as_array()
        probs, _ = predict_volume(params, cfg, prepared, patch_shape=patch, steps=steps)
        total = np.zeros((4,) + image.shape[1:])
        count = np.zeros(image.shape[1:])
        for z in window_positions(image.shape[1], patch[0], steps[0]):
            for y in window_positions(image.shape[2], patch[1], steps[1]):
                for x in window_positions(image.shape[3], patch[2], steps[2]):
                    sl = (slice(z, z + 8), slice(y, y + 32), slice(x, x + 32))
                    total[(slice(None),) + sl] += network_forward(params, cfg, image[(slice(None),) + sl][None])[0][0]
                    count[sl] += 1
        exact &= probs.probs.tobytes() == (total / count).astype(np.float32).tobytes()
    positions = window_positions(240, 128, 32)
    ok = exact and positions == [0, 32, 64, 96, 112] and DEFAULT_STEPS == (24, 32, 32)
    acceptance(5, "sliding window", ok, f"bit-exact={exact}, positions {positions}, default steps {DEFAULT_STEPS}")
    assert ok


# ---------------------------------------------------------------------------
# 6. desk-scale overfit
# ---------------------------------------------------------------------------


def test_criterion_06_overfit(acceptance):
    cfg = NetworkConfig.tiny()
    cases = [prepare_case(s, g)[:2] for s, g in generate(PhantomSpec(count=5, seed=0))]
    start = time.perf_counter()
    run = train(TrainConfig(**OVERFIT, seed=0), cfg, cases, prepared=True)
    dice = region_dice_scores(run.params, cfg, cases, OVERFIT["patch_shape"], OVERFIT["inference_steps"])
    elapsed = time.perf_counter() - start
    ok = dice["TC"] > 0.9 and elapsed < 900
    acceptance(6, "overfit", ok, f"training TC dice {dice['TC']:.3f} (> 0.9) after 200 iterations in {elapsed:.0f}s "
               f"(< 900s); ET {dice['ET']:.3f}, WT {dice['WT']:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 7. transfer-learning claim
# ---------------------------------------------------------------------------


def test_criterion_07_transfer_learning(acceptance):
    cfg = NetworkConfig.tiny()
    start = time.perf_counter()
    cases = [prepare_case(s, g)[:2] for s, g in generate(PhantomSpec(count=25, seed=100))]
    images, labels = generate_pretrain_2d(Pretrain2DSpec(count=512, size=(64, 64), seed=0))
    store = pretrain_encoder(images, labels, cfg, TRANSFER_PRETRAIN).store(cfg)
    curves = {}
    for seed in range(5):
        for arm in ("pretrained", "random"):
            tcfg = TrainConfig(**TRANSFER, seed=seed, pretrained=arm == "pretrained")
            run = train(tcfg, cfg, cases, val_split=5, prepared=True, pretrained=store if arm == "pretrained" else None)
            curves[(arm, seed)] = {r: run.curve(r) for r in REGIONS}
    elapsed = time.perf_counter() - start
    summary = final_comparison(curves)
    fin = summary["final"]
    table = "; ".join(f"{r} pre {fin['pretrained'][r][0]:.3f}+-{fin['pretrained'][r][1]:.3f} "
                      f"rand {fin['random'][r][0]:.3f}+-{fin['random'][r][1]:.3f}" for r in REGIONS)
    ok = summary["mean_wins"] >= 2 and summary["std_wins"] >= 2 and elapsed < 7200
    acceptance(7, "transfer learning", ok, f"mean wins {summary['mean_wins']}/3 (>= 2), std wins "
               f"{summary['std_wins']}/3 (>= 2), {elapsed:.0f}s (< 7200s); {table}")
    assert ok


# ---------------------------------------------------------------------------
# 8. registration recovery
# ---------------------------------------------------------------------------


def test_criterion_08_registration(acceptance):
    scan, _ = generate(PhantomSpec(dims=(32, 48, 48), count=1, seed=3))[0]
    ref = scan.channels[1]
    rng = np.random.default_rng(0)
    pts = np.argwhere(ref.data != 0)[::50] + 0.5
    worst_t, worst_r = 0.0, 0.0
    for _ in range(10):
        truth = RigidTransform.about(ref, tuple(rng.uniform(-0.1, 0.1, 3)), tuple(rng.uniform(-3, 3, 3)))
        res = rigid_register(apply_rigid(ref, truth), ref)
        residual = res.transform.compose(truth)
        worst_t = max(worst_t, float(np.abs(residual.apply(pts) - pts).max()))
        worst_r = max(worst_r, float(np.degrees(np.abs(residual.angles)).max()))
    # resample_nn: labels stay in the codebook and a down/up round trip keeps dims.
    labels = SegmentationMap(rng.choice(LABEL_CODES, size=(9, 10, 11)).astype(np.uint8), (2.0, 0.7, 1.3))
    codebook = set(np.unique(resample_nn(labels).labels)) <= set(LABEL_CODES)
    vol = Volume3D(rng.normal(size=(8, 8, 8)))
    dims_kept = resample_nn(resample_nn(vol, (2.0, 2.0, 2.0))).dims == vol.dims
    # Pipeline on already-aligned data reduces to crop + normalization.
    res = preprocess_scan(dict(zip(MODALITIES, scan.channels)))
    expected, _, box = prepare_case(scan)
    pipeline = res.box == box and all(np.array_equal(a.data, b.data) for a, b in zip(res.scan.channels, expected.channels))
    ok = worst_t <= 1.0 and worst_r <= 2.0 and codebook and dims_kept and pipeline
    acceptance(8, "registration", ok, f"worst residual {worst_t:.2f} voxel (<= 1), {worst_r:.2f} deg (<= 2) over 10 "
               f"transforms; resample codebook={codebook}, round-trip dims={dims_kept}, pipeline identity={pipeline}")
    assert ok


# ---------------------------------------------------------------------------
# 9. format conformance
# ---------------------------------------------------------------------------


def test_criterion_09_formats(acceptance, tmp_path):
    rng = np.random.default_rng(9)
    checks = {}
    vols = {
        "float32": Volume3D(rng.normal(size=(3, 4, 5)).astype(np.float32), (1.5, 1.0, 0.5)),
        "int16": Volume3D(rng.integers(-999, 999, (3, 4, 5)).astype(np.int16)),
        "labels": SegmentationMap(rng.choice(LABEL_CODES, (3, 4, 5)).astype(np.uint8)),
    }
    for name, v in vols.items():
        path = tmp_path / f"{name}.nii"
        write_volume(v, path)
        back = read_labels(path) if name == "labels" else read_volume(path)
        data_in = v.labels if name == "labels" else v.data
        data_out = back.labels if name == "labels" else back.data
        write_volume(back, tmp_path / f"{name}2.nii")
        checks[name] = data_in.tobytes() == data_out.tobytes() and \
            path.read_bytes() == (tmp_path / f"{name}2.nii").read_bytes()
    store = WeightStore({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4,))})
    write_weights(store, tmp_path / "w")
    back = read_weights(tmp_path / "w")
    checks["weights"] = all(back[n].tobytes() == store[n].tobytes() for n in store)
    raw = bytearray((tmp_path / "float32.nii").read_bytes())
    raw[344:348] = b"bad!"
    (tmp_path / "bad.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match="not a NIfTI-1 file") as info:
        read_volume(tmp_path / "bad.nii")
    checks["magic rejected"] = info.value is not None
    blob = bytearray((tmp_path / "w.blob").read_bytes())
    blob[-1] ^= 0x55
    (tmp_path / "w.blob").write_bytes(bytes(blob))
    with pytest.raises(WeightStoreError, match="checksum mismatch for tensor 'b'"):
        read_weights(tmp_path / "w")
    checks["checksum rejected"] = True
    ok = all(checks.values())
    acceptance(9, "formats", ok, ", ".join(f"{k}={'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------


def _outputs(directory: Path):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_criterion_10_determinism(acceptance, tmp_path):
    tiny = ["--net", "tiny"]
    train_flags = tiny + ["--patch", "2,32,32", "--batch-size", "2", "--steps", "2,32,32", "--epochs", "1",
                          "--batches-per-epoch", "2", "--val-split", "1"]
    d = tmp_path
    case = d / "data" / "case000"
    commands = {
        "synth": ["synth", "--cases", "3", "--dims", "32,48,48", "--seed", "2", "--out", d / "data"],
        "preprocess": ["preprocess", "--flair", case / "flair.nii", "--t1c", case / "t1c.nii", "--t2", case / "t2.nii",
                       "--seg", case / "seg.nii", "--out", d / "prep"],
        "pretrain": ["pretrain", *tiny, "--images", "16", "--size", "32,32", "--train-steps", "2", "--batch-size", "4",
                     "--out", d / "pre"],
        "train": ["train", "--data", d / "data", "--pretrained", d / "pre", *train_flags, "--out", d / "model"],
        "predict": ["predict", "--model", d / "model", "--data", d / "data", "--patch", "8,32,32",
                    "--steps", "8,32,32", "--probs", "--out", d / "pred"],
        "evaluate": ["evaluate", "--pred", d / "pred", "--ref", d / "data", "--out", d / "eval"],
        "compare": ["compare", "--data", d / "data", "--pretrained", d / "pre", "--seeds", "2", *train_flags,
                    "--out", d / "cmp"],
    }
    identical = {}
    for name, argv in commands.items():
        assert main([str(a) for a in argv]) == 0, name
        out = Path(argv[-1])
        manifest = json.loads((out / "manifest.json").read_text())
        assert main(["rerun", str(out / "manifest.json"), "--out", str(d / f"{name}_rerun")]) == 0, name
        identical[name] = bool(manifest["outputs"]) and _outputs(out) == _outputs(d / f"{name}_rerun")
    ok = all(identical.values())
    acceptance(10, "determinism", ok, ", ".join(f"{k}={'identical' if v else 'DIFFERS'}" for k, v in identical.items()))
    assert ok
