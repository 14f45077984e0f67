from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from ..volume import MultiModalScan, SegmentationMap, symmetric_pad_widths


def sample_origin(dims: Sequence[int], patch: Sequence[int], rng: np.random.Generator) -> Tuple[int, ...]:
    """Uniform patch origin; ``dims`` must already be >= ``patch`` on every axis."""
    return tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(dims, patch))


def sample_patch(scan, seg, patch_shape: Sequence[int], rng: np.random.Generator):
    """Draw an aligned ``(3, D, H, W)`` input patch and ``(D, H, W)`` label patch.

    ``scan`` is a :class:`MultiModalScan` (or a ``(3, D, H, W)`` array) already
    cropped to its nonzero box; axes shorter than the patch are zero-padded
    symmetrically before the origin is drawn.
    """
    image = scan.as_array() if isinstance(scan, MultiModalScan) else np.asarray(scan)
    labels = seg.labels if isinstance(seg, SegmentationMap) else np.asarray(seg)
    patch_shape = tuple(int(p) for p in patch_shape)
    widths = symmetric_pad_widths(image.shape[1:], patch_shape)
    if any(w != (0, 0) for w in widths):
        image = np.pad(image, ((0, 0),) + widths)
        labels = np.pad(labels, widths)
    origin = sample_origin(image.shape[1:], patch_shape, rng)
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    return image[(slice(None),) + sl].copy(), labels[sl].copy()
