"""
Synthetic multi-modal tumor phantoms and a 2D shape-classification set for
encoder pretraining.

Phantoms are skull-stripped "brains" (textured blobs with exact-zero
background) holding three nested ellipsoids: edema (2) around core (1)
around enhancing tumor (4). Each region shifts the three channels by its own
intensity offsets, mimicking FLAIR/T1c/T2 contrast differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .nifti import read_labels, read_volume, write_volume
from .volume import MODALITIES, MultiModalScan, SegmentationMap, Volume3D, zscore_normalize

# Mean channel offsets (FLAIR, T1c, T2) relative to healthy tissue.
REGION_OFFSETS = {
    2: (0.8, -0.1, 0.7),
    1: (0.3, -0.5, 1.3),
    4: (0.4, 1.0, 0.3),
}
MIN_REGION_VOXELS = 32


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 64, 64)
    count: int = 5
    seed: int = 0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    edema_radius: Tuple[float, float] = (7.0, 11.0)
    core_fraction: Tuple[float, float] = (0.6, 0.8)
    enhancing_fraction: Tuple[float, float] = (0.5, 0.7)
    offset_jitter: float = 0.1
    noise_std: float = 0.03

    def validate(self) -> None:
        if self.count < 1:
            raise PhantomError(f"count must be >= 1, got {self.count}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise PhantomError(f"invalid dims {self.dims}")
        lo, hi = self.edema_radius
        if not 0 < lo <= hi:
            raise PhantomError(f"invalid edema radius range {self.edema_radius}")
        brain = 0.42 * min(self.dims)
        if hi > brain - 2:
            raise PhantomError(
                f"edema radius up to {hi:.1f} voxels does not fit the brain "
                f"({brain:.1f} voxels) of a {self.dims} volume"
            )


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _one_case(spec: PhantomSpec, rng: np.random.Generator, patient_id: str):
    dims = tuple(spec.dims)
    center = np.array([(n - 1) / 2 for n in dims])
    brain_radii = 0.42 * np.array(dims, dtype=float)
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, brain_radii))
    brain = r2 + 0.12 * _smooth_noise(rng, dims, 4.0) < 1.0

    for _ in range(100):
        outer = rng.uniform(*spec.edema_radius) * rng.uniform(0.8, 1.2, size=3)
        outer = np.minimum(outer, brain_radii - 1.5)
        core = outer * rng.uniform(*spec.core_fraction)
        enh = core * rng.uniform(*spec.enhancing_fraction)
        room = np.maximum(brain_radii - outer - 2.0, 0.0)
        t_center = center + rng.uniform(-0.5, 0.5, size=3) * room
        wt = _ellipsoid(dims, t_center, outer) & brain
        tc = _ellipsoid(dims, t_center + rng.uniform(-0.15, 0.15, size=3) * (outer - core), core) & wt
        et = _ellipsoid(dims, t_center, enh) & tc
        labels = np.zeros(dims, dtype=np.uint8)
        labels[wt] = 2
        labels[tc] = 1
        labels[et] = 4
        counts = [int((labels == code).sum()) for code in (1, 2, 4)]
        if min(counts) >= MIN_REGION_VOXELS:
            break
    else:
        raise PhantomError("could not place a tumor with every region >= 32 voxels; enlarge dims or radii")

    # Anatomy is shared across modalities (so they can be co-registered); each
    # channel adds a weaker texture of its own.
    rim = brain & ~ndimage.binary_erosion(brain, iterations=3)
    anatomy = 0.2 * _smooth_noise(rng, dims, 2.0) + 0.6 * rim
    channels = []
    for c, _name in enumerate(MODALITIES):
        tissue = 1.0 + anatomy + 0.05 * _smooth_noise(rng, dims, 2.0)
        image = tissue * rng.uniform(0.85, 1.15)
        for code, offsets in REGION_OFFSETS.items():
            shift = offsets[c] + rng.uniform(-spec.offset_jitter, spec.offset_jitter)
            image = image + shift * (labels == code)
        image = image + rng.normal(0.0, spec.noise_std, size=dims)
        scale = rng.uniform(50.0, 150.0)
        image = np.clip(image, 0.05, None) * scale * brain
        channels.append(Volume3D(image.astype(np.float32), spec.spacing))
    scan = MultiModalScan(tuple(channels), patient_id)
    return scan, SegmentationMap(labels, spec.spacing)


def generate(spec: PhantomSpec) -> List[Tuple[MultiModalScan, SegmentationMap]]:
    """Deterministic list of ``(scan, labels)`` phantoms; each case has its own seed stream."""
    spec.validate()
    streams = np.random.SeedSequence(spec.seed).spawn(spec.count)
    return [_one_case(spec, np.random.default_rng(s), f"case{i:03d}") for i, s in enumerate(streams)]


# ---------------------------------------------------------------------------
# 2D pretraining set
# ---------------------------------------------------------------------------

PRETRAIN_CLASSES = ("blob", "ring", "pair", "nested")


@dataclass(frozen=True)
class Pretrain2DSpec:
    count: int = 512
    size: Tuple[int, int] = (64, 64)
    seed: int = 0


def _disk(shape, center, radii):
    yy, xx = np.ogrid[: shape[0], : shape[1]]
    return ((yy - center[0]) / radii[0]) ** 2 + ((xx - center[1]) / radii[1]) ** 2 <= 1.0


def _pretrain_image(shape, label: int, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    brain = _disk(shape, center + rng.uniform(-2, 2, 2), 0.42 * np.array(shape) * rng.uniform(0.9, 1.1, 2))
    r = min(shape) * rng.uniform(0.1, 0.16)
    c0 = center + rng.uniform(-0.12, 0.12, 2) * np.array(shape)
    radii = r * rng.uniform(0.8, 1.2, 2)
    masks = []
    if label == 0:
        masks.append((_disk(shape, c0, radii), 0))
    elif label == 1:
        masks.append((_disk(shape, c0, radii) & ~_disk(shape, c0, radii * 0.55), 0))
    elif label == 2:
        d = np.array([0.0, r * 1.3]) if rng.random() < 0.5 else np.array([r * 1.3, 0.0])
        masks.append((_disk(shape, c0 - d, radii * 0.7), 0))
        masks.append((_disk(shape, c0 + d, radii * 0.7), 0))
    else:
        masks.append((_disk(shape, c0, radii), 0))
        masks.append((_disk(shape, c0, radii * 0.5), 1))
    image = np.empty((3, h, w))
    for ch in range(3):
        tissue = 1.0 + 0.1 * ndimage.gaussian_filter(rng.standard_normal(shape), 2.0) * 4
        offsets = rng.uniform(-0.6, 1.2, size=2)
        img = tissue.copy()
        for m, which in masks:
            img = img + offsets[which] * m
        img = img + rng.normal(0.0, 0.05, size=shape)
        img = np.clip(img, 0.05, None) * brain
        vol = zscore_normalize(Volume3D(img[None]), "nonzero")
        image[ch] = vol.data[0]
    return image


def generate_pretrain_2d(spec: Pretrain2DSpec):
    """Balanced shape-classification set: ``images (N, 3, H, W)`` float32 and ``labels (N,)``."""
    if spec.count < 1:
        raise PhantomError(f"count must be >= 1, got {spec.count}")
    streams = np.random.SeedSequence([spec.seed, 2]).spawn(spec.count)
    labels = np.arange(spec.count) % len(PRETRAIN_CLASSES)
    images = np.stack(
        [_pretrain_image(tuple(spec.size), int(lab), np.random.default_rng(s)) for lab, s in zip(labels, streams)]
    )
    return images.astype(np.float32), labels.astype(np.int64)


# ---------------------------------------------------------------------------
# on-disk layout: one directory per patient
# ---------------------------------------------------------------------------


def write_case(scan: MultiModalScan, seg, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ch in zip(MODALITIES, scan.channels):
        write_volume(ch, directory / f"{name}.nii")
    if seg is not None:
        write_volume(seg, directory / "seg.nii")
    return directory


def read_case(directory, with_labels: bool = True):
    directory = Path(directory)
    missing = [m for m in MODALITIES if not (directory / f"{m}.nii").exists()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing modalities: {', '.join(missing)}")
    scan = MultiModalScan(tuple(read_volume(directory / f"{m}.nii") for m in MODALITIES), directory.name)
    seg = read_labels(directory / "seg.nii") if with_labels and (directory / "seg.nii").exists() else None
    return scan, seg


def write_dataset(cases, out_dir) -> List[Path]:
    return [write_case(scan, seg, Path(out_dir) / scan.patient_id) for scan, seg in cases]


def read_dataset(directory, with_labels: bool = True):
    dirs = sorted(p for p in Path(directory).iterdir() if p.is_dir() and (p / "flair.nii").exists())
    return [read_case(d, with_labels) for d in dirs]
