"""
Region dice, boundary Hausdorff distances and the mean/median/boxplot
aggregation used for evaluation reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .volume import REGIONS, SegmentationMap, regions_from_labels

SENTINEL = math.inf
METRICS = ("dice", "hausdorff")

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _check_dims(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ValueError(f"dims mismatch: prediction {pred.shape} vs reference {ref.shape}")


def dice_region(pred: np.ndarray, ref: np.ndarray) -> float:
    """Set dice ``2|A∩B| / (|A| + |B|)``; 1 when both sets are empty."""
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    _check_dims(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / total


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices ``(N, 3)`` of set voxels with at least one 6-neighbour outside the set.

    Voxels on the grid border count as boundary.
    """
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX_NEIGHBOURS, border_value=0)
    return np.argwhere(mask & ~interior)


def directed_distances(src: np.ndarray, dst: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance in mm from every boundary voxel of ``src`` to the nearest boundary voxel of ``dst``."""
    scale = np.asarray(spacing, dtype=np.float64)
    a = boundary_voxels(src) * scale
    b = boundary_voxels(dst) * scale
    dist, _ = cKDTree(b).query(a)
    return dist


def hausdorff(pred: np.ndarray, ref: np.ndarray, spacing=(1.0, 1.0, 1.0), percentile: float = 95) -> float:
    """Symmetric boundary Hausdorff distance in mm.

    ``percentile=100`` is the classical max-min distance; 95 takes the 95th
    percentile of each directed set and returns the larger. Both sets empty
    gives 0, exactly one empty gives ``inf``.
    """
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    _check_dims(pred, ref)
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    has_pred, has_ref = pred.any(), ref.any()
    if not has_pred and not has_ref:
        return 0.0
    if not has_pred or not has_ref:
        return SENTINEL
    d_pr = directed_distances(pred, ref, spacing)
    d_rp = directed_distances(ref, pred, spacing)
    if percentile == 100:
        return float(max(d_pr.max(), d_rp.max()))
    return float(max(np.percentile(d_pr, percentile), np.percentile(d_rp, percentile)))


@dataclass
class CaseScores:
    case_id: str
    dice: Dict[str, float]
    hausdorff: Dict[str, float]

    def value(self, metric: str, region: str) -> float:
        return getattr(self, metric)[region]


def evaluate_case(
    pred: SegmentationMap,
    ref: SegmentationMap,
    spacing=None,
    percentile: float = 95,
    case_id: str = "",
) -> CaseScores:
    if pred.dims != ref.dims:
        raise ValueError(f"dims mismatch: prediction {pred.dims} vs reference {ref.dims}")
    spacing = ref.spacing if spacing is None else spacing
    pr = regions_from_labels(pred)
    rr = regions_from_labels(ref)
    return CaseScores(
        case_id,
        {r: dice_region(pr[r], rr[r]) for r in REGIONS},
        {r: hausdorff(pr[r], rr[r], spacing, percentile) for r in REGIONS},
    )


@dataclass
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: List[float] = field(default_factory=list)


def box_stats(values: Sequence[float]) -> BoxStats:
    """Quartiles, 1.5 IQR whiskers (clamped to data) and the points beyond them."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = [float(x) for x in v if x < lo_fence or x > hi_fence]
    return BoxStats(float(q1), float(med), float(q3), float(inside.min()), float(inside.max()), outliers)


@dataclass
class SummaryStats:
    mean: float
    median: float
    std: float
    n: int
    sentinels: int
    box: Optional[BoxStats]


@dataclass
class AggregateReport:
    cases: int
    runs: int
    stats: Dict[str, Dict[str, SummaryStats]]

    def get(self, metric: str, region: str) -> SummaryStats:
        return self.stats[metric][region]


def aggregate(cases: Sequence[CaseScores], runs: int = 1) -> AggregateReport:
    """Mean, median and population std per metric and region.

    Infinite Hausdorff sentinels are left out of every statistic and counted
    in ``sentinels`` instead.
    """
    if not cases:
        raise ValueError("cannot aggregate an empty list of cases")
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    stats: Dict[str, Dict[str, SummaryStats]] = {}
    for metric in METRICS:
        stats[metric] = {}
        for region in REGIONS:
            values = np.array([c.value(metric, region) for c in cases], dtype=np.float64)
            finite = values[np.isfinite(values)]
            sentinels = int(values.size - finite.size)
            if finite.size:
                s = SummaryStats(
                    float(finite.mean()), float(np.median(finite)), float(finite.std()),
                    int(finite.size), sentinels, box_stats(finite),
                )
            else:
                s = SummaryStats(math.nan, math.nan, math.nan, 0, sentinels, None)
            stats[metric][region] = s
    return AggregateReport(len(cases), runs, stats)


def _fmt(x: float) -> str:
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def format_report(report: AggregateReport, sep: str = "\t") -> str:
    """Machine-readable report: summary rows, a mean (median) table and boxplot rows."""
    lines = [f"# cases={report.cases}{sep}runs={report.runs}"]
    lines.append(sep.join(["summary", "metric", "region", "mean", "median", "std", "n", "sentinels"]))
    for metric in METRICS:
        for region in REGIONS:
            s = report.get(metric, region)
            lines.append(sep.join(["summary", metric, region, _fmt(s.mean), _fmt(s.median), _fmt(s.std), str(s.n), str(s.sentinels)]))
    lines.append(sep.join(["table", "metric"] + list(REGIONS)))
    for metric in METRICS:
        cells = [f"{_fmt(report.get(metric, r).mean)} ({_fmt(report.get(metric, r).median)})" for r in REGIONS]
        lines.append(sep.join(["table", metric] + cells))
    lines.append(sep.join(["boxplot", "metric", "region", "q1", "median", "q3", "whisker_low", "whisker_high", "outliers"]))
    for metric in METRICS:
        for region in REGIONS:
            b = report.get(metric, region).box
            if b is None:
                continue
            outliers = ",".join(_fmt(o) for o in b.outliers) or "-"
            lines.append(sep.join(["boxplot", metric, region, _fmt(b.q1), _fmt(b.median), _fmt(b.q3),
                                   _fmt(b.whisker_low), _fmt(b.whisker_high), outliers]))
    return "\n".join(lines) + "\n"


def format_cases(cases: Sequence[CaseScores], sep: str = "\t") -> str:
    header = ["case"] + [f"{m}_{r}" for m in METRICS for r in REGIONS]
    lines = [sep.join(header)]
    for c in cases:
        lines.append(sep.join([c.case_id] + [_fmt(c.value(m, r)) for m in METRICS for r in REGIONS]))
    return "\n".join(lines) + "\n"
