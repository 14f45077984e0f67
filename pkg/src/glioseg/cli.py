"""
Command-line entry point: ``glioseg <command> [flags]``.

Every command writes its outputs into ``--out`` together with a
``manifest.json`` holding the exact argument list, so ``glioseg rerun
<manifest> --out <dir>`` reproduces the outputs byte for byte. Failures print
one line ``error: <ExceptionClass>: <message>`` and exit nonzero. Set
``GLIOSEG_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .inference import DEFAULT_STEPS, predict_case
from .metrics import aggregate, evaluate_case, format_cases, format_report
from .network import NetworkConfig, params_from_store, params_to_store
from .nifti import read_labels, read_volume, read_weights, write_volume, write_weights
from .preprocess import preprocess_scan, reorient, resample_nn
from .synth import PhantomSpec, Pretrain2DSpec, generate, generate_pretrain_2d, read_case, read_dataset, write_dataset
from .training import AugmentConfig, PretrainConfig, TrainConfig, pretrain_encoder, train
from .volume import CLASS_NAMES, MODALITIES, REGIONS, SegmentationMap, Volume3D

THREADS_ENV = "GLIOSEG_THREADS"
MANIFEST = "manifest.json"

log = logging.getLogger("glioseg")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# flag parsing helpers
# ---------------------------------------------------------------------------


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _triple(kind):
    def parse(text: str) -> tuple:
        values = kind(text)
        if len(values) != 3:
            raise argparse.ArgumentTypeError(f"expected 3 comma-separated values, got {text!r}")
        return values

    return parse


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--net", choices=("full", "tiny"), default="full", help="network preset (default: full)")
    p.add_argument("--base-width", type=int, help="override the encoder base width")
    p.add_argument("--blocks", type=_ints, help="residual blocks per stage, e.g. 3,4,6,3")
    p.add_argument("--decoder-widths", type=_ints, help="five decoder block widths")


def _net_config(args, depth_layers: bool = True) -> NetworkConfig:
    kw = {"depth_layers_enabled": depth_layers}
    if args.base_width is not None:
        kw["base_width"] = args.base_width
    if args.blocks is not None:
        kw["blocks_per_stage"] = args.blocks
    if args.decoder_widths is not None:
        kw["decoder_widths"] = args.decoder_widths
    cfg = NetworkConfig.tiny(**kw) if args.net == "tiny" else NetworkConfig.full(**kw)
    cfg.validate()
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_net_flags(p)
    p.add_argument("--mode", choices=("2d", "3d"), default="3d", help="2d: 1x128x128 patches, batch 64, no depth layers")
    p.add_argument("--patch", type=_triple(_ints), help="patch D,H,W (default from --mode)")
    p.add_argument("--batch-size", type=int, help="batch size (default from --mode)")
    p.add_argument("--steps", type=_triple(_ints), help="sliding-window steps for validation (default from --mode)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batches-per-epoch", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-split", type=int, default=0, help="number of trailing cases held out for validation")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--freeze-bn", action="store_true", help="normalize with running statistics during training")
    p.add_argument("--prefetch", type=int, default=0, help="batches prepared ahead on a worker thread")


def _train_config(args, seed: int, pretrained: bool) -> TrainConfig:
    preset = TrainConfig.preset_2d if args.mode == "2d" else TrainConfig.preset_3d
    kw = dict(
        epochs=args.epochs,
        batches_per_epoch=args.batches_per_epoch,
        learning_rate=args.lr,
        seed=seed,
        pretrained=pretrained,
        freeze_bn=args.freeze_bn,
        prefetch=args.prefetch,
        augment=AugmentConfig.off() if args.no_augment else AugmentConfig(),
    )
    if args.patch is not None:
        kw["patch_shape"] = args.patch
    if args.batch_size is not None:
        kw["batch_size"] = args.batch_size
    if args.steps is not None:
        kw["inference_steps"] = args.steps
    return preset(**kw)


# ---------------------------------------------------------------------------
# manifests and small I/O helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_manifest(out: Path, command: str, argv: Sequence[str], config: dict, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": _jsonable(config),
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _load_model(model_dir: Path):
    cfg_path = model_dir / "network.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found; --model must be a train output directory")
    cfg = NetworkConfig.from_dict(json.loads(cfg_path.read_text()))
    params = params_from_store(read_weights(model_dir / "weights"), cfg)
    return params, cfg


def _case_dirs(directory: Path) -> List[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.is_dir())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, argv, started) -> None:
    if args.cases < 1:
        raise CliError(f"--cases must be >= 1, got {args.cases}")
    spec = PhantomSpec(dims=args.dims, count=args.cases, seed=args.seed, spacing=args.spacing)
    out = Path(args.out)
    dirs = write_dataset(generate(spec), out)
    config = {"dims": spec.dims, "count": spec.count, "seed": spec.seed, "spacing": spec.spacing,
              "edema_radius": spec.edema_radius, "core_fraction": spec.core_fraction,
              "enhancing_fraction": spec.enhancing_fraction, "offset_jitter": spec.offset_jitter,
              "noise_std": spec.noise_std}
    _write_manifest(out, "synth", argv, config, args.seed, [], dirs, started)
    print(f"wrote {len(dirs)} cases to {out}")


def cmd_preprocess(args, argv, started) -> None:
    paths = {m: getattr(args, m) for m in MODALITIES}
    missing = [m for m, p in paths.items() if p is None]
    if missing:
        raise CliError(f"missing modalities: {', '.join(missing)}")
    volumes = {m: read_volume(p) for m, p in paths.items()}
    mask = read_volume(args.mask) if args.mask else None
    result = preprocess_scan(
        volumes, mask, reference=args.reference, axis_spec=args.axes, target_spacing=args.spacing,
        normalize_region=args.normalize, patient_id=Path(args.out).name,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, ch in zip(MODALITIES, result.scan.channels):
        write_volume(ch, out / f"{name}.nii")
        outputs.append(out / f"{name}.nii")
    if args.seg:
        seg = reorient(read_labels(args.seg), args.axes)
        seg = resample_nn(seg, args.spacing)
        sl = tuple(slice(a, b) for a, b in result.box)
        seg = SegmentationMap(seg.labels[sl].copy(), seg.spacing, seg.orientation)
        write_volume(seg, out / "seg.nii")
        outputs.append(out / "seg.nii")
    config = {
        "reference": args.reference, "axes": args.axes, "spacing": args.spacing, "normalize": args.normalize,
        "crop_box": result.box,
        "transforms": {m: {"angles": t.angles, "translation": t.translation, "center": t.center}
                       for m, t in result.transforms.items()},
        "ncc": result.ncc,
    }
    inputs = [p for p in list(paths.values()) + [args.mask, args.seg] if p]
    _write_manifest(out, "preprocess", argv, config, None, inputs, outputs, started)
    print(f"wrote preprocessed scan {result.scan.dims} to {out}")


def cmd_pretrain(args, argv, started) -> None:
    cfg = _net_config(args, depth_layers=True)
    images, labels = generate_pretrain_2d(Pretrain2DSpec(count=args.images, size=args.size, seed=args.seed))
    pcfg = PretrainConfig(steps=args.train_steps, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed)
    result = pretrain_encoder(images, labels, cfg, pcfg)
    store = result.store(cfg)  # raises on tensor-name collisions between encoder and head
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = list(write_weights(store, out / "encoder"))
    _write_json(out / "network.json", cfg.to_dict())
    (out / "pretrain.log").write_text("step\tloss\n" + "".join(f"{i}\t{l:.6f}\n" for i, l in enumerate(result.losses)))
    config = {"network": cfg.to_dict(), "pretrain": dataclasses.asdict(pcfg),
              "images": args.images, "size": args.size, "accuracy": result.accuracy}
    _write_manifest(out, "pretrain", argv, config, args.seed, [], paths + [out / "pretrain.log"], started)
    print(f"pretrained encoder: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}, accuracy {result.accuracy:.3f}")


def _pretrained_store(path: Optional[str]):
    if path is None:
        return None
    p = Path(path)
    return read_weights(p / "encoder" if p.is_dir() else p)


def cmd_train(args, argv, started) -> None:
    net_cfg = _net_config(args, depth_layers=(args.mode == "3d"))
    cfg = _train_config(args, args.seed, pretrained=args.pretrained is not None)
    store = _pretrained_store(args.pretrained)
    dataset = read_dataset(args.data)
    if not dataset:
        raise CliError(f"no cases found in {args.data}")
    run = train(cfg, net_cfg, dataset, val_split=args.val_split, pretrained=store)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = list(write_weights(params_to_store(run.params), out / "weights"))
    _write_json(out / "network.json", net_cfg.to_dict())
    (out / "train.log").write_text(run.to_log())
    config = {"network": net_cfg.to_dict(), "train": cfg.to_dict(), "val_split": args.val_split}
    inputs = [args.data] + ([args.pretrained] if args.pretrained else [])
    _write_manifest(out, "train", argv, config, args.seed, inputs, paths + [out / "train.log"], started)
    last = run.epochs[-1] if run.epochs else None
    print(f"trained {len(run.epochs)} epochs" + (f", final loss {last.loss:.4f}" if last else ""))


def cmd_predict(args, argv, started) -> None:
    params, cfg = _load_model(Path(args.model))
    data = Path(args.data)
    case_dirs = [data] if (data / "flair.nii").exists() else _case_dirs(data)
    if not case_dirs:
        raise CliError(f"no cases found in {data}")
    out = Path(args.out)
    outputs = []
    for case in case_dirs:
        scan, _ = read_case(case, with_labels=False)
        probs, labels = predict_case(params, cfg, scan, patch_shape=args.patch, steps=args.steps)
        dest = out / case.name
        dest.mkdir(parents=True, exist_ok=True)
        write_volume(SegmentationMap(labels.labels, scan.spacing, scan.channels[0].orientation), dest / "pred.nii")
        outputs.append(dest / "pred.nii")
        if args.probs:
            for k, name in enumerate(CLASS_NAMES):
                write_volume(Volume3D(probs.probs[k], scan.spacing), dest / f"prob_{name}.nii")
                outputs.append(dest / f"prob_{name}.nii")
    config = {"network": cfg.to_dict(), "patch": args.patch, "steps": args.steps, "probs": args.probs}
    _write_manifest(out, "predict", argv, config, None, [args.model, args.data], outputs, started)
    print(f"predicted {len(case_dirs)} cases into {out}")


def cmd_evaluate(args, argv, started) -> None:
    pred_dirs = [Path(p) for p in (args.runs or [])] + ([Path(args.pred)] if args.pred else [])
    if not pred_dirs:
        raise CliError("give --pred or --runs")
    ref_cases = [d for d in _case_dirs(Path(args.ref)) if (d / "seg.nii").exists()]
    if not ref_cases:
        raise CliError(f"no reference cases (seg.nii) found in {args.ref}")
    scores = []
    for run_idx, pdir in enumerate(pred_dirs):
        for case in ref_cases:
            pred_path = pdir / case.name / "pred.nii"
            if not pred_path.exists():
                raise FileNotFoundError(f"prediction for case {case.name} not found at {pred_path}")
            ref = read_labels(case / "seg.nii")
            pred = read_labels(pred_path)
            case_id = case.name if len(pred_dirs) == 1 else f"{pdir.name}/{case.name}"
            scores.append(evaluate_case(pred, ref, ref.spacing, args.percentile, case_id))
    report = aggregate(scores, runs=len(pred_dirs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cases.tsv").write_text(format_cases(scores))
    (out / "report.tsv").write_text(format_report(report))
    config = {"percentile": args.percentile, "runs": len(pred_dirs)}
    _write_manifest(out, "evaluate", argv, config, None, pred_dirs + [Path(args.ref)],
                    [out / "cases.tsv", out / "report.tsv"], started)
    table = "  ".join(f"{r}={report.get('dice', r).mean:.4f}" for r in REGIONS)
    print(f"evaluated {len(scores)} cases: mean dice {table}")


def compare_rows(curves: dict, epochs: int) -> List[str]:
    """Per-epoch ``epoch arm region mean std`` rows from ``{(arm, seed): {region: curve}}``."""
    rows = ["epoch\tarm\tregion\tmean\tstd\tn"]
    arms = sorted({arm for arm, _ in curves})
    for e in range(epochs):
        for arm in arms:
            for r in REGIONS:
                vals = np.array([c[r][e] for (a, _), c in curves.items() if a == arm])
                rows.append(f"{e}\t{arm}\t{r}\t{vals.mean():.6f}\t{vals.std():.6f}\t{vals.size}")
    return rows


def final_comparison(curves: dict) -> dict:
    """Final-epoch mean/std per arm and region plus the two claim checks."""
    final = {}
    for arm in ("pretrained", "random"):
        final[arm] = {}
        for r in REGIONS:
            vals = np.array([c[r][-1] for (a, _), c in curves.items() if a == arm])
            final[arm][r] = (float(vals.mean()), float(vals.std()))
    mean_wins = sum(final["pretrained"][r][0] >= final["random"][r][0] for r in REGIONS)
    std_wins = sum(final["pretrained"][r][1] < final["random"][r][1] for r in REGIONS)
    return {"final": final, "mean_wins": mean_wins, "std_wins": std_wins}


def cmd_compare(args, argv, started) -> None:
    if args.seeds < 1:
        raise CliError(f"--seeds must be >= 1, got {args.seeds}")
    net_cfg = _net_config(args, depth_layers=(args.mode == "3d"))
    store = _pretrained_store(args.pretrained)
    dataset = read_dataset(args.data)
    if len(dataset) <= args.val_split or args.val_split < 1:
        raise CliError(f"need at least one training case and --val-split >= 1, got {len(dataset)} cases / {args.val_split}")
    out = Path(args.out)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    curves = {}
    logs = []
    for seed in range(args.seed, args.seed + args.seeds):
        for arm in ("pretrained", "random"):
            cfg = _train_config(args, seed, pretrained=(arm == "pretrained"))
            run = train(cfg, net_cfg, dataset, val_split=args.val_split, pretrained=store if arm == "pretrained" else None)
            logs.append(out / "runs" / f"{arm}_seed{seed}.log")
            logs[-1].write_text(run.to_log())
            curves[(arm, seed)] = {r: run.curve(r) for r in REGIONS}
            log.info("%s seed %d final %s", arm, seed, {r: round(run.curve(r)[-1], 4) for r in REGIONS})
    (out / "compare.tsv").write_text("\n".join(compare_rows(curves, args.epochs)) + "\n")
    summary = final_comparison(curves)
    lines = ["region\tpretrained_mean\tpretrained_std\trandom_mean\trandom_std"]
    for r in REGIONS:
        pm, ps = summary["final"]["pretrained"][r]
        rm, rs = summary["final"]["random"][r]
        lines.append(f"{r}\t{pm:.6f}\t{ps:.6f}\t{rm:.6f}\t{rs:.6f}")
    lines.append(f"# pretrained mean >= random in {summary['mean_wins']}/3 regions; "
                 f"pretrained std < random in {summary['std_wins']}/3 regions")
    (out / "final.tsv").write_text("\n".join(lines) + "\n")
    config = {"network": net_cfg.to_dict(), "train": _train_config(args, args.seed, True).to_dict(),
              "seeds": list(range(args.seed, args.seed + args.seeds)), "val_split": args.val_split}
    _write_manifest(out, "compare", argv, config, args.seed, [args.data, args.pretrained],
                    [out / "compare.tsv", out / "final.tsv"] + logs, started)
    print(lines[-1].lstrip("# "))


def cmd_rerun(args, argv, started) -> None:
    manifest = json.loads(Path(args.manifest).read_text())
    if manifest.get("command") == "rerun":
        raise CliError("refusing to rerun a rerun manifest")
    new_argv = list(manifest["argv"]) + (["--out", args.out] if args.out else [])
    new_args = build_parser().parse_args(new_argv)
    new_args.func(new_args, new_argv, time.time())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glioseg", description="Brain-lesion segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"glioseg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom cases")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--dims", type=_triple(_ints), default=(32, 64, 64))
    p.add_argument("--spacing", type=_triple(_floats), default=(1.0, 1.0, 1.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="reorient, mask, co-register, resample, normalize and crop one patient")
    for m in MODALITIES:
        p.add_argument(f"--{m}", help=f"{m} .nii path")
    p.add_argument("--mask", help="brain mask .nii (nonzero = brain)")
    p.add_argument("--seg", help="label map on the reference grid, carried through reorient/resample/crop")
    p.add_argument("--reference", choices=MODALITIES, default="t1c")
    p.add_argument("--axes", type=lambda s: tuple(s.split(",")), default=("z", "y", "x"),
                   help="signed axis permutation, e.g. z,x,-y")
    p.add_argument("--spacing", type=_triple(_floats), default=(1.0, 1.0, 1.0))
    p.add_argument("--normalize", choices=("nonzero", "all"), default="nonzero")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="pretrain the 2D encoder on a shape-classification set")
    _add_net_flags(p)
    p.add_argument("--images", type=int, default=512)
    p.add_argument("--size", type=_ints, default=(64, 64))
    p.add_argument("--train-steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pretrained", help="pretrain output directory or encoder store path")
    group.add_argument("--random-init", action="store_true", help="random encoder initialization (default)")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sliding-window prediction")
    p.add_argument("--model", required=True, help="train output directory")
    p.add_argument("--data", required=True, help="a case directory or a directory of cases")
    p.add_argument("--patch", type=_triple(_ints), default=(24, 128, 128))
    p.add_argument("--steps", type=_triple(_ints), default=DEFAULT_STEPS)
    p.add_argument("--probs", action="store_true", help="also write per-class probability volumes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="dice and Hausdorff report against reference labels")
    p.add_argument("--pred", help="prediction directory")
    p.add_argument("--runs", nargs="+", help="several prediction directories merged into one report")
    p.add_argument("--ref", required=True)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="pretrained vs random-init convergence over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True, help="pretrain output directory or encoder store path")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    _add_train_flags(p)
    p.set_defaults(val_split=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("rerun", help="re-execute a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="write outputs here instead of the original location")
    p.set_defaults(func=cmd_rerun)
    return parser


def _run(args, argv) -> None:
    started = time.time()
    threads = os.environ.get(THREADS_ENV)
    if threads:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=int(threads)):
            args.func(args, argv, started)
    else:
        args.func(args, argv, started)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    # The manifest stores flags only; global flags are not needed to reproduce outputs.
    recorded = [a for a in argv if a not in ("-v", "--verbose")]
    try:
        _run(args, recorded)
    except Exception as exc:  # one machine-parseable line per failure
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
