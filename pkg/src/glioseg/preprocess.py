"""
Clinical-style preprocessing: axis reorientation, brain masking, rigid
co-registration to a reference scan and nearest-neighbour resampling to an
isotropic grid.

Physical coordinates are ``(z, y, x)`` millimetres with voxel ``i`` centred at
``(i + 0.5) * spacing``, so a grid spans ``[0, dims * spacing)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volume import (
    MODALITIES,
    MultiModalScan,
    SegmentationMap,
    Volume3D,
    VolumeError,
    crop,
    nonzero_bounding_box,
    zscore_normalize,
)

Grid = Union[Volume3D, SegmentationMap]
AXES = ("z", "y", "x")


class RegistrationError(ValueError):
    pass


def _wrap_angle(a: float) -> float:
    """Map an angle into (-pi, pi]."""
    a = float(np.mod(a + np.pi, 2 * np.pi) - np.pi)
    return np.pi if a <= -np.pi else a


@dataclass(frozen=True)
class RigidTransform:
    """``p' = R (p - center) + center + translation`` in physical (z, y, x) mm.

    ``angles`` are rotations about the z, y and x axes, applied in that order
    (``R = Rx @ Ry @ Rz``).
    """

    angles: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(_wrap_angle(a) for a in self.angles))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def about(cls, grid: Grid, angles=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Transform rotating about the physical centre of ``grid``."""
        return cls(angles, translation, grid_center(grid))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, offset: np.ndarray, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Inverse of :meth:`matrix`: ``p' = rot @ p + offset`` rewritten about ``center``."""
        c = np.asarray(center, dtype=float)
        # Our (z, y, x) axes sit at scipy's component positions (x, y, z).
        angles = Rotation.from_matrix(rot).as_euler("xyz")
        translation = np.asarray(offset, dtype=float) - c + rot @ c
        return cls(tuple(angles), tuple(translation), tuple(c))

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.angles).as_matrix()

    def matrix(self) -> Tuple[np.ndarray, np.ndarray]:
        """``(R, offset)`` with ``p' = R @ p + offset``."""
        r = self.rotation
        c = np.asarray(self.center)
        return r, c + np.asarray(self.translation) - r @ c

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(..., 3)`` physical points."""
        r, off = self.matrix()
        return np.asarray(points, dtype=float) @ r.T + off

    def inverse(self) -> "RigidTransform":
        r, off = self.matrix()
        return RigidTransform.from_matrix(r.T, -r.T @ off, self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        r1, o1 = self.matrix()
        r2, o2 = other.matrix()
        return RigidTransform.from_matrix(r1 @ r2, r1 @ o2 + o1, self.center)

    def is_identity(self, tol: float = 1e-9) -> bool:
        return max(abs(a) for a in self.angles + self.translation) <= tol


def grid_center(grid: Grid) -> Tuple[float, float, float]:
    return tuple(n * s / 2.0 for n, s in zip(grid.dims, grid.spacing))


def _values(grid: Grid) -> np.ndarray:
    return grid.labels if isinstance(grid, SegmentationMap) else grid.data


def _rebuild(grid: Grid, values: np.ndarray, spacing) -> Grid:
    if isinstance(grid, SegmentationMap):
        return SegmentationMap(values, spacing, grid.orientation)
    return Volume3D(values, spacing, grid.orientation)


# ---------------------------------------------------------------------------
# reorientation and masking
# ---------------------------------------------------------------------------


def _parse_axis_spec(axis_spec: Sequence[str]):
    spec = tuple(str(a).strip().lower() for a in axis_spec)
    if len(spec) != 3:
        raise VolumeError(f"axis spec needs 3 entries, got {axis_spec!r}")
    perm, flips = [], []
    for token in spec:
        flip = token.startswith("-")
        name = token.lstrip("+-")
        if name not in AXES:
            raise VolumeError(f"axis spec {axis_spec!r} is not a signed permutation of (z, y, x)")
        perm.append(AXES.index(name))
        flips.append(flip)
    if sorted(perm) != [0, 1, 2]:
        raise VolumeError(f"axis spec {axis_spec!r} is not a signed permutation of (z, y, x)")
    return perm, flips


def reorient(grid: Grid, axis_spec: Sequence[str]) -> Grid:
    """Permute and flip axes: output axis ``i`` is input axis ``axis_spec[i]``.

    Entries are ``"z"``, ``"y"`` or ``"x"``, optionally prefixed with ``-`` to
    reverse that axis, e.g. ``("z", "x", "-y")``.
    """
    perm, flips = _parse_axis_spec(axis_spec)
    data = np.transpose(_values(grid), perm)
    for axis, flip in enumerate(flips):
        if flip:
            data = np.flip(data, axis)
    spacing = tuple(grid.spacing[p] for p in perm)
    return _rebuild(grid, np.ascontiguousarray(data), spacing)


def inverse_axis_spec(axis_spec: Sequence[str]) -> Tuple[str, str, str]:
    perm, flips = _parse_axis_spec(axis_spec)
    out = [""] * 3
    for i, (p, f) in enumerate(zip(perm, flips)):
        out[p] = ("-" if f else "") + AXES[i]
    return tuple(out)


def apply_mask(vol: Volume3D, mask) -> Volume3D:
    """Zero every voxel outside ``mask`` (any nonzero mask value counts as inside)."""
    m = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    if m.shape != vol.dims:
        raise VolumeError(f"mask dims {m.shape} do not match volume dims {vol.dims}")
    return vol.with_data(np.where(m != 0, vol.data, np.zeros((), dtype=vol.data.dtype)))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def resample_nn(grid: Grid, target_spacing=(1.0, 1.0, 1.0)) -> Grid:
    """Nearest-neighbour resampling onto a grid with ``target_spacing``.

    Output dims are ``round(dims * spacing / target)``; output voxel ``j``
    copies input voxel ``floor((j + 0.5) * target / spacing)``.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or not all(np.isfinite(t) and t > 0 for t in target):
        raise VolumeError(f"target spacing must be 3 positive values, got {target_spacing}")
    values = _values(grid)
    index = []
    for n, s, t in zip(grid.dims, grid.spacing, target):
        m = max(int(np.floor(n * s / t + 0.5)), 1)
        j = np.floor((np.arange(m) + 0.5) * t / s).astype(np.int64)
        index.append(np.clip(j, 0, n - 1))
    out = values[np.ix_(*index)]
    return _rebuild(grid, out, target)


def apply_rigid(grid: Grid, t: RigidTransform, reference: Optional[Grid] = None) -> Grid:
    """Resample ``grid`` through ``t`` onto ``reference``'s grid (default: its own).

    Output voxel at physical point ``p`` takes the nearest input voxel to
    ``t⁻¹(p)``; points falling outside the input are 0.
    """
    ref = grid if reference is None else reference
    return _rebuild(grid, _warp(_values(grid), grid.spacing, t, ref.dims, ref.spacing), ref.spacing)


def _warp(values: np.ndarray, spacing, t: RigidTransform, out_dims, out_spacing) -> np.ndarray:
    if t.is_identity(0.0) and tuple(out_dims) == values.shape and tuple(out_spacing) == tuple(spacing):
        return values.copy()
    r, off = t.inverse().matrix()
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(out_dims, out_spacing)]
    # Separable evaluation of the inverse map over the output lattice.
    src = off.reshape(3, 1, 1, 1) + sum(
        r[:, k].reshape(3, 1, 1, 1) * axes[k].reshape([-1 if a == k else 1 for a in range(3)]) for k in range(3)
    )
    idx = [np.floor(src[a] / spacing[a]).astype(np.int64) for a in range(3)]
    inside = np.ones(tuple(out_dims), dtype=bool)
    for a in range(3):
        inside &= (idx[a] >= 0) & (idx[a] < values.shape[a])
    out = np.zeros(tuple(out_dims), dtype=values.dtype)
    out[inside] = values[idx[0][inside], idx[1][inside], idx[2][inside]]
    return out


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    factor: int = 2
    translation_step: float = 4.0  # voxels
    rotation_step: float = 0.1  # radians
    min_translation_step: float = 0.25
    min_rotation_step: float = 0.005
    max_iterations: int = 200
    # Interpolation used inside the objective only; 1 (trilinear) gives the
    # search a continuous landscape, 0 evaluates exactly what apply_rigid does.
    order: int = 1


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    ncc: float
    converged: bool
    iterations: int


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation over voxels nonzero in both arrays."""
    mask = (a != 0) & (b != 0)
    if mask.sum() < 2:
        return -np.inf
    x = a[mask].astype(np.float64)
    y = b[mask].astype(np.float64)
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return -np.inf
    return float((x * y).sum() / denom)


def _warp_linear(values: np.ndarray, spacing, t: RigidTransform, out_dims, out_spacing, order: int) -> np.ndarray:
    if order == 0:
        return _warp(values, spacing, t, out_dims, out_spacing)
    r, off = t.inverse().matrix()
    s_in = np.asarray(spacing, dtype=float)
    s_out = np.asarray(out_spacing, dtype=float)
    # Continuous input index of output voxel j: (R (j + 0.5) s_out + off) / s_in - 0.5
    matrix = (r * s_out[None, :]) / s_in[:, None]
    offset = (r @ (0.5 * s_out) + off) / s_in - 0.5
    return ndimage.affine_transform(values, matrix, offset, output_shape=tuple(out_dims), order=order, mode="constant", cval=0.0)


def _downsample(values: np.ndarray, spacing, factor: int):
    """Block-mean downsampling; trailing voxels that do not fill a block are dropped."""
    dims = [max(n // factor, 1) for n in values.shape]
    f = [factor if n >= factor else 1 for n in values.shape]
    v = values[: dims[0] * f[0], : dims[1] * f[1], : dims[2] * f[2]].astype(np.float64)
    v = v.reshape(dims[0], f[0], dims[1], f[1], dims[2], f[2]).mean(axis=(1, 3, 5))
    return v, tuple(s * k for s, k in zip(spacing, f))


def _check_contrast(vol: Volume3D, name: str) -> None:
    if not np.isfinite(vol.data).all() or np.ptp(vol.data) == 0:
        raise RegistrationError(f"degenerate intensity in {name} volume")


def rigid_register(moving: Volume3D, reference: Volume3D, config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Find ``t`` maximizing NCC between ``apply_rigid(moving, t, reference)`` and ``reference``.

    Coordinate search over the six parameters (three angles, three
    translations) on a coarse-to-fine pyramid; each step size halves whenever
    no single-parameter move improves the objective.
    """
    _check_contrast(moving, "moving")
    _check_contrast(reference, "reference")
    center = grid_center(reference)
    pyramid = [(moving.data.astype(np.float64), moving.spacing, reference.data.astype(np.float64), reference.spacing)]
    for _ in range(config.levels - 1):
        mv, ms, rv, rs = pyramid[-1]
        mv, ms = _downsample(mv, ms, config.factor)
        rv, rs = _downsample(rv, rs, config.factor)
        pyramid.append((mv, ms, rv, rs))

    params = np.zeros(6)  # angles (3), translation (3)
    converged = True
    total = 0
    best = -np.inf
    for mv, ms, rv, rs in reversed(pyramid):
        voxel = min(rs)

        def objective(p):
            t = RigidTransform(tuple(p[:3]), tuple(p[3:]), center)
            return ncc(_warp_linear(mv, ms, t, rv.shape, rs, config.order), rv)

        best = objective(params)
        t_step = config.translation_step * voxel
        r_step = config.rotation_step
        it = 0
        while t_step >= config.min_translation_step * voxel or r_step >= config.min_rotation_step:
            if it >= config.max_iterations:
                converged = False
                break
            it += 1
            improved = False
            for k in range(6):
                step = r_step if k < 3 else t_step
                if (k < 3 and r_step < config.min_rotation_step) or (k >= 3 and t_step < config.min_translation_step * voxel):
                    continue
                for sign in (1.0, -1.0):
                    trial = params.copy()
                    trial[k] += sign * step
                    value = objective(trial)
                    if value > best:
                        best, params, improved = value, trial, True
                        break
            if not improved:
                t_step /= 2.0
                r_step /= 2.0
        total += it
    transform = RigidTransform(tuple(params[:3]), tuple(params[3:]), center)
    return RegistrationResult(transform, float(best), converged, total)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PreprocessResult:
    scan: MultiModalScan
    box: Tuple[Tuple[int, int], Tuple[int, int], Tuple[int, int]]
    transforms: Dict[str, RigidTransform]
    ncc: Dict[str, float]


def preprocess_scan(
    volumes: Dict[str, Volume3D],
    mask: Optional[Volume3D] = None,
    reference: str = "t1c",
    axis_spec: Sequence[str] = ("z", "y", "x"),
    target_spacing=(1.0, 1.0, 1.0),
    normalize_region: str = "nonzero",
    patient_id: str = "",
    registration: RegistrationConfig = RegistrationConfig(),
) -> PreprocessResult:
    """reorient -> mask -> register to ``reference`` -> resample -> normalize -> crop."""
    missing = [m for m in MODALITIES if m not in volumes]
    if missing:
        raise VolumeError(f"missing modalities: {', '.join(missing)}")
    if reference not in volumes:
        raise VolumeError(f"reference modality {reference!r} not among inputs {sorted(volumes)}")
    oriented = {name: reorient(vol, axis_spec) for name, vol in volumes.items()}
    if mask is not None:
        m = reorient(mask, axis_spec)
        oriented = {name: apply_mask(vol, m) for name, vol in oriented.items()}
    ref = oriented[reference]
    transforms, scores = {}, {}
    registered = {}
    for name, vol in oriented.items():
        if name == reference:
            transforms[name], scores[name] = RigidTransform.about(ref), 1.0
            registered[name] = vol
            continue
        res = rigid_register(vol, ref, registration)
        transforms[name], scores[name] = res.transform, res.ncc
        registered[name] = apply_rigid(vol, res.transform, ref)
    channels = tuple(zscore_normalize(resample_nn(registered[m], target_spacing), normalize_region) for m in MODALITIES)
    scan = MultiModalScan(channels, patient_id)
    box = nonzero_bounding_box(scan)
    scan, _ = crop(scan, None, box)
    return PreprocessResult(scan, box, transforms, scores)
