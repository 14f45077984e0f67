"""
Patch augmentation: reflections, elastic deformation, additive noise and blur.

Labels only ever see the geometric transforms, and are resampled with
nearest-neighbour lookups so they stay inside the codebook.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    reflect: bool = True
    elastic: bool = True
    noise: bool = True
    blur: bool = True
    probability: float = 0.5
    elastic_grid: int = 4
    elastic_sigma: float = 2.0
    noise_std_max: float = 0.1
    blur_sigma: Tuple[float, float] = (0.5, 1.5)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(reflect=False, elastic=False, noise=False, blur=False)


def elastic_displacement(shape, grid: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Dense ``(3, D, H, W)`` displacement field from a coarse Gaussian grid, trilinearly upsampled.

    Axes of extent 1 get no displacement (a single slice stays a single slice).
    """
    coarse_shape = tuple(grid if n > 1 else 1 for n in shape)
    coords = np.meshgrid(
        *[np.linspace(0, c - 1, n) for c, n in zip(coarse_shape, shape)], indexing="ij"
    )
    field = np.zeros((3,) + tuple(shape))
    for axis, n in enumerate(shape):
        if n == 1:
            continue
        coarse = rng.normal(0.0, sigma, size=coarse_shape)
        field[axis] = ndimage.map_coordinates(coarse, coords, order=1, mode="nearest")
    return field


def _warp(image: np.ndarray, labels: np.ndarray, field: np.ndarray):
    shape = labels.shape
    base = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    coords = [b + f for b, f in zip(base, field)]
    warped = np.stack(
        [ndimage.map_coordinates(ch, coords, order=1, mode="nearest") for ch in image]
    ).astype(image.dtype)
    warped_labels = ndimage.map_coordinates(labels, coords, order=0, mode="nearest").astype(labels.dtype)
    return warped, warped_labels


def augment_patch(image: np.ndarray, labels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Augment an input patch ``(C, D, H, W)`` and its label patch ``(D, H, W)``."""
    image = np.array(image, copy=True)
    labels = np.array(labels, copy=True)
    p = cfg.probability

    if cfg.reflect:
        for axis in range(3):
            if rng.random() < p:
                image = np.flip(image, axis=axis + 1)
                labels = np.flip(labels, axis=axis)
        image = np.ascontiguousarray(image)
        labels = np.ascontiguousarray(labels)

    if cfg.elastic and rng.random() < p:
        field = elastic_displacement(labels.shape, cfg.elastic_grid, cfg.elastic_sigma, rng)
        image, labels = _warp(image, labels, field)

    if cfg.noise and rng.random() < p:
        std = rng.uniform(0.0, cfg.noise_std_max)
        image = (image + rng.normal(0.0, std, size=image.shape)).astype(image.dtype)

    if cfg.blur and rng.random() < p:
        s = rng.uniform(*cfg.blur_sigma)
        sigma = tuple(s if n > 1 else 0.0 for n in labels.shape)
        image = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in image]).astype(image.dtype)

    return image, labels
