"""
In-memory data model: scalar volumes, multi-modal scans, label maps and the
label/region encodings used throughout training and evaluation.

All grids are indexed ``(z, y, x)``; spacings are ``(sz, sy, sx)`` in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

# Label codes in class-axis order. Position in this tuple is the class index.
LABEL_CODES: Tuple[int, ...] = (0, 1, 2, 4)
CLASS_NAMES: Tuple[str, ...] = ("background", "core", "edema", "enhancing")
MODALITIES: Tuple[str, ...] = ("flair", "t1c", "t2")
REGIONS: Tuple[str, ...] = ("ET", "WT", "TC")

Box = Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]


class VolumeError(ValueError):
    pass


def _check_spacing(spacing: Sequence[float]) -> Tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3:
        raise VolumeError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeError(f"spacing must be finite and positive, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume3D:
    """A single-channel scalar grid with voxel spacing.

    ``orientation`` carries the raw orientation block of a NIfTI header so it
    can be written back untouched; nothing in this package interprets it.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3D grid, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray, spacing=None) -> "Volume3D":
        return Volume3D(data, self.spacing if spacing is None else spacing, self.orientation)


@dataclass(frozen=True)
class SegmentationMap:
    """Integer label grid using the codebook {0, 1, 2, 4}."""

    labels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Optional[bytes] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeError(f"label map must be a non-empty 3D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise VolumeError("label map holds non-integral values")
            labels = labels.astype(np.int16)
        check_labels(labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)


@dataclass(frozen=True)
class MultiModalScan:
    """Co-registered (FLAIR, T1c, T2) channels feeding the network's R, G, B inputs."""

    channels: Tuple[Volume3D, Volume3D, Volume3D]
    patient_id: str = ""

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != 3:
            raise VolumeError(f"a scan has exactly 3 channels (FLAIR, T1c, T2), got {len(channels)}")
        first = channels[0]
        for name, ch in zip(MODALITIES, channels):
            if ch.dims != first.dims or ch.spacing != first.spacing:
                raise VolumeError(
                    f"channel {name} has dims {ch.dims} / spacing {ch.spacing}, "
                    f"expected {first.dims} / {first.spacing}"
                )
        object.__setattr__(self, "channels", channels)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.channels[0].dims

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.channels[0].spacing

    def as_array(self, dtype=np.float32) -> np.ndarray:
        """Stack channels into a ``(3, D, H, W)`` network input."""
        return np.stack([ch.data for ch in self.channels]).astype(dtype, copy=False)

    @classmethod
    def from_array(cls, array: np.ndarray, spacing=(1.0, 1.0, 1.0), patient_id: str = "") -> "MultiModalScan":
        return cls(tuple(Volume3D(a, spacing) for a in array), patient_id)


@dataclass(frozen=True)
class ClassProbabilityMap:
    """Per-voxel class probabilities, shape ``(4, D, H, W)`` in codebook order."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs)
        if probs.ndim != 4 or probs.shape[0] != len(LABEL_CODES):
            raise VolumeError(f"probability map must have shape (4, D, H, W), got {probs.shape}")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=0) - 1.0) > 1e-5):
            raise VolumeError("class probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", probs)

    def argmax_labels(self, spacing=(1.0, 1.0, 1.0)) -> SegmentationMap:
        # np.argmax returns the first maximum, i.e. ties go to the lowest class.
        return SegmentationMap(codes_from_indices(np.argmax(self.probs, axis=0)), spacing)


def check_labels(labels: np.ndarray) -> None:
    bad = ~np.isin(labels, LABEL_CODES)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise VolumeError(f"unknown label value {labels[idx]} at voxel {idx}")


def codes_from_indices(indices: np.ndarray) -> np.ndarray:
    return np.asarray(LABEL_CODES, dtype=np.uint8)[indices]


def indices_from_codes(labels: np.ndarray) -> np.ndarray:
    lut = np.zeros(max(LABEL_CODES) + 1, dtype=np.int64)
    lut[list(LABEL_CODES)] = np.arange(len(LABEL_CODES))
    return lut[labels]


def zscore_normalize(vol: Volume3D, region: str = "nonzero") -> Volume3D:
    """Zero-mean / unit population-std normalization over ``region``.

    With ``region="nonzero"`` statistics come from the nonzero voxels only and
    the remaining voxels are written as 0.
    """
    data = vol.data.astype(np.float64)
    if region == "all":
        mask = np.ones(data.shape, dtype=bool)
    elif region == "nonzero":
        mask = data != 0
    else:
        raise VolumeError(f"region must be 'all' or 'nonzero', got {region!r}")
    if not mask.any():
        raise VolumeError("no voxels to normalize")
    values = data[mask]
    mean = values.mean()
    std = values.std()
    out = np.zeros_like(data)
    if std >= 1e-8:
        out[mask] = (values - mean) / std
    return vol.with_data(out.astype(np.float32))


def nonzero_bounding_box(scan: MultiModalScan) -> Box:
    """Tightest half-open box holding every voxel that is nonzero in any channel."""
    mask = np.zeros(scan.dims, dtype=bool)
    for ch in scan.channels:
        mask |= ch.data != 0
    if not mask.any():
        raise VolumeError("empty scan")
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hits = np.flatnonzero(mask.any(axis=other))
        box.append((int(hits[0]), int(hits[-1]) + 1))
    return tuple(box)


def _check_box(box: Box, dims: Sequence[int]) -> Tuple[slice, slice, slice]:
    if len(box) != 3:
        raise VolumeError(f"box needs 3 axis ranges, got {len(box)}")
    for (lo, hi), n in zip(box, dims):
        if not (0 <= lo < hi <= n):
            raise VolumeError(f"box {box} exceeds volume dims {tuple(dims)}")
    return tuple(slice(lo, hi) for lo, hi in box)


def crop_volume(vol: Volume3D, box: Box) -> Volume3D:
    sl = _check_box(box, vol.dims)
    return vol.with_data(vol.data[sl].copy())


def crop(scan: MultiModalScan, seg: Optional[SegmentationMap], box: Box):
    """Crop every channel (and the label map, when given) to ``box``."""
    sl = _check_box(box, scan.dims)
    cropped = MultiModalScan(tuple(crop_volume(ch, box) for ch in scan.channels), scan.patient_id)
    if seg is None:
        return cropped, None
    if seg.dims != scan.dims:
        raise VolumeError(f"label dims {seg.dims} do not match scan dims {scan.dims}")
    return cropped, SegmentationMap(seg.labels[sl].copy(), seg.spacing, seg.orientation)


def symmetric_pad_widths(dims: Sequence[int], patch: Sequence[int]):
    """Per-axis ``(before, after)`` zero padding that lifts ``dims`` to at least ``patch``."""
    widths = []
    for n, p in zip(dims, patch):
        extra = max(int(p) - int(n), 0)
        widths.append((extra // 2, extra - extra // 2))
    return tuple(widths)


def one_hot(seg: SegmentationMap) -> np.ndarray:
    """Binary ``(4, D, H, W)`` encoding, class axis ordered by label code."""
    labels = seg.labels
    check_labels(labels)
    return np.stack([(labels == code) for code in LABEL_CODES]).astype(np.uint8)


def regions_from_labels(seg: SegmentationMap) -> dict:
    """Nested evaluation regions: WT = {1,2,4}, TC = {1,4}, ET = {4}."""
    labels = seg.labels
    check_labels(labels)
    return {
        "ET": labels == 4,
        "WT": labels > 0,
        "TC": (labels == 1) | (labels == 4),
    }
