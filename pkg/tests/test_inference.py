from __future__ import annotations

import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glioseg.inference import (
    DEFAULT_STEPS,
    make_plan,
    predict_case,
    predict_volume,
    prepare_case,
    window_positions,
)
from glioseg.network import build_network, network_forward
from glioseg.volume import codes_from_indices


def test_window_positions_worked_example():
    assert window_positions(240, 128, 32) == [0, 32, 64, 96, 112]
    assert window_positions(128, 128, 32) == [0]
    assert window_positions(160, 128, 32) == [0, 32]
    with pytest.raises(ValueError, match="smaller than the patch"):
        window_positions(100, 128, 32)


def test_window_positions_rejects_gapped_steps():
    with pytest.raises(ValueError, match="step"):
        window_positions(100, 8, 9)
    with pytest.raises(ValueError, match="step"):
        window_positions(100, 8, 0)


@given(st.integers(1, 200), st.integers(1, 64), st.data())
@settings(max_examples=200, deadline=None)
def test_window_positions_cover_every_voxel(extent_extra, patch, data):
    step = data.draw(st.integers(1, patch))
    extent = patch + extent_extra - 1
    origins = window_positions(extent, patch, step)
    covered = np.zeros(extent, bool)
    for o in origins:
        assert 0 <= o <= extent - patch
        covered[o : o + patch] = True
    assert covered.all()
    assert origins == sorted(set(origins))


def test_inference_defaults():
    assert DEFAULT_STEPS == (24, 32, 32)
    for fn in (predict_volume, predict_case):
        assert inspect.signature(fn).parameters["steps"].default == (24, 32, 32)


def _oracle(params, cfg, image, patch, steps):
    """Explicit pad / sum-buffer / count-buffer accumulation."""
    dims = image.shape[1:]
    pad = []
    for n, p in zip(dims, patch):
        extra = max(p - n, 0)
        pad.append((extra // 2, extra - extra // 2))
    padded = np.pad(image, [(0, 0)] + pad)
    total = np.zeros((4,) + padded.shape[1:])
    count = np.zeros(padded.shape[1:])
    axes = []
    for n, p, s in zip(padded.shape[1:], patch, steps):
        o = list(range(0, n - p + 1, s))
        if o[-1] != n - p:
            o.append(n - p)
        axes.append(o)
    for z in axes[0]:
        for y in axes[1]:
            for x in axes[2]:
                sl = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                out, _ = network_forward(params, cfg, padded[(slice(None),) + sl][None], mode="eval")
                total[(slice(None),) + sl] += out[0]
                count[sl] += 1
    mean = (total / count)[(slice(None),) + tuple(slice(a, a + n) for (a, _), n in zip(pad, dims))]
    return mean.astype(np.float32)


def test_predict_volume_matches_explicit_accumulation(tiny_cfg, phantoms):
    params = build_network(tiny_cfg, seed=0)
    for scan, _ in phantoms:
        prepared, _, _ = prepare_case(scan)
        image = prepared.as_array()
        patch, steps = (8, 32, 32), (6, 16, 16)
        probs, labels = predict_volume(params, tiny_cfg, prepared, patch_shape=patch, steps=steps)
        expected = _oracle(params, tiny_cfg, image, patch, steps)
        assert probs.probs.tobytes() == expected.tobytes()
        np.testing.assert_array_equal(labels.labels, codes_from_indices(np.argmax(expected, axis=0)))


def test_predict_volume_pads_small_inputs(tiny_cfg):
    params = build_network(tiny_cfg, seed=1)
    image = np.random.default_rng(0).standard_normal((3, 5, 20, 40)).astype(np.float32)
    probs, labels = predict_volume(params, tiny_cfg, image, patch_shape=(8, 32, 32), steps=(8, 16, 16))
    assert probs.probs.shape == (4, 5, 20, 40)
    assert labels.dims == (5, 20, 40)
    np.testing.assert_allclose(probs.probs.sum(axis=0), 1.0, atol=1e-5)
    assert probs.probs.tobytes() == _oracle(params, tiny_cfg, image, (8, 32, 32), (8, 16, 16)).tobytes()


def test_plan_coverage_positive():
    plan = make_plan((30, 70, 90), (8, 32, 32), (8, 16, 16))
    assert plan.coverage().min() >= 1
    assert plan.padded_dims == (30, 70, 90)
    # Steps beyond the patch are clamped so no voxel is skipped.
    clamped = make_plan((30, 70, 90), (8, 32, 32), (24, 32, 32))
    assert clamped.steps == (8, 32, 32) and clamped.coverage().min() >= 1


def test_predict_case_restores_full_grid(tiny_cfg, phantoms):
    scan, _ = phantoms[0]
    params = build_network(tiny_cfg, seed=0)
    probs, labels = predict_case(params, tiny_cfg, scan, patch_shape=(8, 32, 32), steps=(8, 32, 32))
    assert labels.dims == scan.dims
    outside = scan.as_array().any(axis=0)
    _, _, box = prepare_case(scan)
    sl = tuple(slice(a, b) for a, b in box)
    mask = np.ones(scan.dims, bool)
    mask[sl] = False
    assert (labels.labels[mask] == 0).all()
    assert (probs.probs[0][mask] == 1.0).all()
    assert not outside[mask].any()
