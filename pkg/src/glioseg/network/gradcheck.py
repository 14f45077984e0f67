"""Central finite-difference checks of the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .model import NetworkConfig, cast_params, network_backward, network_forward, trainable_names

# Gradients smaller than this are compared in absolute terms; central
# differences cannot resolve them any better at h = 1e-5.
REL_FLOOR = 1e-7


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    """``|a - n| / max(|a|, |n|, floor)``."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckResult:
    max_rel_error: float
    probes: List[Tuple[str, Tuple[int, ...], float, float, float]] = field(default_factory=list)

    def worst(self, n: int = 5):
        return sorted(self.probes, key=lambda p: -p[4])[:n]


def finite_difference_check(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    probes: List[Tuple[str, Tuple[int, ...]]],
    h: float = 1e-5,
) -> GradCheckResult:
    """Compare ``grads`` against central differences of ``loss_fn`` at each probe.

    ``params`` is perturbed in place and restored after every probe.
    """
    rows = []
    for name, idx in probes:
        tensor = params[name]
        orig = tensor[idx]
        tensor[idx] = orig + h
        up = loss_fn(params)
        tensor[idx] = orig - h
        down = loss_fn(params)
        tensor[idx] = orig
        numeric = (up - down) / (2.0 * h)
        analytic = float(grads[name][idx])
        rows.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    worst = max((r[4] for r in rows), default=0.0)
    return GradCheckResult(worst, rows)


def sample_probes(shapes: Dict[str, tuple], count: int, rng: np.random.Generator):
    """Pick a tensor uniformly, then a scalar uniformly inside it, ``count`` times."""
    names = sorted(shapes)
    out = []
    for _ in range(count):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(n)) for n in shapes[name])
        out.append((name, idx))
    return out


def gradient_check(
    params,
    cfg: NetworkConfig,
    probe_count: int = 200,
    seed: int = 0,
    h: float = 1e-5,
    input_shape: Tuple[int, int, int, int] = (2, 2, 32, 32),
    batch: Optional[np.ndarray] = None,
    onehot: Optional[np.ndarray] = None,
) -> GradCheckResult:
    """Check the full network through the multiple dice loss in float64, train-mode batchnorm."""
    from ..training.loss import multiple_dice_loss

    rng = np.random.default_rng(seed)
    p64 = cast_params(params, np.float64)
    b, d, hh, ww = input_shape
    if batch is None:
        batch = rng.standard_normal((b, cfg.in_channels, d, hh, ww))
    if onehot is None:
        labels = rng.integers(0, cfg.out_classes, size=(b, d, hh, ww))
        onehot = np.eye(cfg.out_classes)[labels].transpose(0, 4, 1, 2, 3)
    batch = np.asarray(batch, dtype=np.float64)

    def loss_fn(p):
        probs, _ = network_forward(p, cfg, batch, mode="train")
        return multiple_dice_loss(probs, onehot)[0]

    probs, tape = network_forward(p64, cfg, batch, mode="train")
    _, grad_probs, _ = multiple_dice_loss(probs, onehot)
    grads, _ = network_backward(tape, grad_probs)
    shapes = {n: p64[n].shape for n in trainable_names(cfg)}
    probes = sample_probes(shapes, probe_count, rng)
    return finite_difference_check(loss_fn, p64, grads, probes, h)
