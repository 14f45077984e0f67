"""Multiple Dice Loss over the three foreground classes."""

from __future__ import annotations

import numpy as np

DICE_EPS = 1e-5
FOREGROUND = (1, 2, 3)


def multiple_dice_loss(probs: np.ndarray, ref: np.ndarray, eps: float = DICE_EPS):
    """Return ``(loss, grad, dsc)`` for probabilities and one-hot references.

    Both arrays have shape ``(B, 4, D, H, W)`` (a leading batch axis is
    optional). Voxels are pooled over the batch, the background channel is
    ignored, and each class dice is smoothed as ``(2I + eps) / (R + P + eps)``
    so that a class absent from both reference and prediction scores 1.
    ``dsc`` holds the three per-class scores.
    """
    probs = np.asarray(probs)
    ref = np.asarray(ref)
    if probs.shape != ref.shape:
        raise ValueError(f"probability shape {probs.shape} does not match reference shape {ref.shape}")
    squeeze = probs.ndim == 4
    if squeeze:
        probs, ref = probs[None], ref[None]
    if probs.ndim != 5 or probs.shape[1] != 4:
        raise ValueError(f"expected (B, 4, D, H, W) inputs, got {probs.shape}")

    dtype = probs.dtype if np.issubdtype(probs.dtype, np.floating) else np.float64
    axes = (0, 2, 3, 4)
    r = ref.astype(dtype)
    inter = (r * probs).sum(axis=axes, dtype=np.float64)
    rsum = r.sum(axis=axes, dtype=np.float64)
    psum = probs.sum(axis=axes, dtype=np.float64)
    num = 2.0 * inter + eps
    den = rsum + psum + eps
    dsc_all = num / den

    fg = list(FOREGROUND)
    dsc = dsc_all[fg]
    k = len(fg)
    loss = 1.0 - dsc.sum() / k

    grad = np.zeros_like(probs, dtype=dtype)
    for l in fg:
        # d/dp_n of num/den = (2 r_n den - num) / den^2
        grad[:, l] = -(2.0 * r[:, l] * den[l] - num[l]) / (den[l] ** 2) / k
    if squeeze:
        grad = grad[0]
    return float(loss), grad, dsc
