"""
Sliding-window prediction: overlapping patches, softmax outputs averaged per voxel.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .network import NetworkConfig, network_forward
from .volume import (
    ClassProbabilityMap,
    MultiModalScan,
    SegmentationMap,
    codes_from_indices,
    crop,
    nonzero_bounding_box,
    symmetric_pad_widths,
    zscore_normalize,
)

DEFAULT_PATCH = (24, 128, 128)
DEFAULT_STEPS = (24, 32, 32)


def window_positions(extent: int, patch: int, step: int) -> List[int]:
    """Origins ``0, step, 2*step, ...`` plus a final window flush with the far edge."""
    if extent < patch:
        raise ValueError(f"extent {extent} is smaller than the patch {patch}; pad first")
    if not 1 <= step <= patch:
        # Larger steps would leave gaps between windows.
        raise ValueError(f"step must be in [1, patch={patch}], got {step}")
    origins = list(range(0, extent - patch + 1, step))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


@dataclass(frozen=True)
class SlidingWindowPlan:
    patch_shape: Tuple[int, int, int]
    steps: Tuple[int, int, int]
    pad: Tuple[Tuple[int, int], ...]
    padded_dims: Tuple[int, int, int]
    axis_origins: Tuple[Tuple[int, ...], ...]

    @property
    def origins(self) -> List[Tuple[int, int, int]]:
        """All window origins in lexicographic order (the accumulation order)."""
        return list(itertools.product(*self.axis_origins))

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.padded_dims, dtype=np.int32)
        for o in self.origins:
            count[tuple(slice(a, a + p) for a, p in zip(o, self.patch_shape))] += 1
        return count


def make_plan(dims: Sequence[int], patch_shape=DEFAULT_PATCH, steps=DEFAULT_STEPS) -> SlidingWindowPlan:
    patch_shape = tuple(int(p) for p in patch_shape)
    # A step longer than the patch would leave gaps; clamp it to the patch.
    steps = tuple(min(int(s), p) for s, p in zip(steps, patch_shape))
    pad = symmetric_pad_widths(dims, patch_shape)
    padded = tuple(n + a + b for n, (a, b) in zip(dims, pad))
    axis_origins = tuple(tuple(window_positions(n, p, s)) for n, p, s in zip(padded, patch_shape, steps))
    return SlidingWindowPlan(patch_shape, steps, pad, padded, axis_origins)


def predict_volume(params, cfg: NetworkConfig, scan, plan: Optional[SlidingWindowPlan] = None,
                   patch_shape=DEFAULT_PATCH, steps=DEFAULT_STEPS, spacing=None):
    """Overlap-averaged class probabilities and argmax labels for a whole scan.

    ``scan`` is a :class:`MultiModalScan` or a ``(3, D, H, W)`` array that is
    already normalized and cropped. Windows run one at a time in eval mode and
    are accumulated in plan order, so the result is bit-reproducible.
    """
    if isinstance(scan, MultiModalScan):
        image = scan.as_array()
        spacing = scan.spacing if spacing is None else spacing
    else:
        image = np.asarray(scan, dtype=np.float32)
    spacing = (1.0, 1.0, 1.0) if spacing is None else spacing
    dims = image.shape[1:]
    if plan is None:
        plan = make_plan(dims, patch_shape, steps)
    padded = np.pad(image, ((0, 0),) + plan.pad) if any(w != (0, 0) for w in plan.pad) else image

    total = np.zeros((cfg.out_classes,) + plan.padded_dims, dtype=np.float64)
    count = np.zeros(plan.padded_dims, dtype=np.float64)
    for origin in plan.origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, plan.patch_shape))
        probs, _ = network_forward(params, cfg, padded[(slice(None),) + sl][None], mode="eval")
        total[(slice(None),) + sl] += probs[0]
        count[sl] += 1.0
    mean = total / count
    unpad = tuple(slice(a, a + n) for (a, _), n in zip(plan.pad, dims))
    probs = mean[(slice(None),) + unpad].astype(np.float32)
    labels = SegmentationMap(codes_from_indices(np.argmax(probs, axis=0)), spacing)
    return ClassProbabilityMap(probs), labels


def normalize_scan(scan: MultiModalScan, region: str = "nonzero") -> MultiModalScan:
    return MultiModalScan(tuple(zscore_normalize(ch, region) for ch in scan.channels), scan.patient_id)


def prepare_case(scan: MultiModalScan, seg: Optional[SegmentationMap] = None, region: str = "nonzero"):
    """Crop to the nonzero box, then normalize each channel; returns ``(scan, seg, box)``."""
    box = nonzero_bounding_box(scan)
    cropped, seg_c = crop(scan, seg, box)
    return normalize_scan(cropped, region), seg_c, box


def predict_case(params, cfg: NetworkConfig, scan: MultiModalScan, patch_shape=DEFAULT_PATCH, steps=DEFAULT_STEPS):
    """Predict on a full (uncropped, unnormalized) scan and paste results back into its grid."""
    prepared, _, box = prepare_case(scan)
    probs, labels = predict_volume(params, cfg, prepared, patch_shape=patch_shape, steps=steps)
    full = np.zeros((cfg.out_classes,) + scan.dims, dtype=np.float32)
    full[0] = 1.0
    sl = tuple(slice(a, b) for a, b in box)
    full[(slice(None),) + sl] = probs.probs
    full_labels = np.zeros(scan.dims, dtype=np.uint8)
    full_labels[sl] = labels.labels
    return ClassProbabilityMap(full), SegmentationMap(full_labels, scan.spacing)
