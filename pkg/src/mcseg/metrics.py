"""
Segmentation metrics: Dice, Jaccard, 95% Hausdorff distance and average
surface distance, plus the all-pairs reference used to check the fast path.

Surfaces are foreground voxels with at least one 6-connected background
neighbour; voxels outside the grid count as background.  Distances are
pooled symmetrically (pred->gt and gt->pred) before taking the percentile
and the mean.
"""

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)


class UndefinedMetricError(ValueError):
    """Surface distances are undefined when either mask is empty."""


@dataclass(frozen=True)
class MetricReport:
    dice: float
    jaccard: float
    hd95: float
    asd: float
    hd95_mm: Optional[float] = None
    asd_mm: Optional[float] = None

    def as_dict(self):
        return asdict(self)


def _binary(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "data", mask)).astype(bool)


def overlap_metrics(pred, gt):
    """Dice and Jaccard in percent.  Two empty masks score (100, 100)."""
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = int(np.count_nonzero(p & g))
    sp, sg = int(p.sum()), int(g.sum())
    union = sp + sg - inter
    if sp + sg == 0:
        return 100.0, 100.0
    return 200.0 * inter / (sp + sg), 100.0 * inter / union


def surface_voxels(mask) -> np.ndarray:
    m = _binary(mask)
    eroded = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return m & ~eroded


def percentile(values, q: float) -> float:
    """Linear-interpolation percentile (position ``q/100 * (n-1)`` in the sorted sample)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 <= q <= 100:
        raise ValueError("q must be within [0, 100]")
    pos = q / 100.0 * (v.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] + (v[hi] - v[lo]) * frac) if frac else float(v[lo])


def _summarize(pooled):
    pooled = np.sort(pooled)
    return percentile(pooled, 95), float(pooled.mean())


def pooled_surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distances from each pred-surface voxel to the gt surface and vice versa."""
    sp, sg = surface_voxels(pred), surface_voxels(gt)
    if not sp.any() or not sg.any():
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    if sp.shape != sg.shape:
        raise ValueError(f"shape mismatch: {sp.shape} vs {sg.shape}")
    spacing = tuple(float(s) for s in spacing)
    dt_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dt_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return np.concatenate([dt_g[sp], dt_p[sg]])


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """``(hd95, asd)`` over the pooled symmetric surface distance set."""
    return _summarize(pooled_surface_distances(pred, gt, spacing))


def brute_force_surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """All-pairs reference for `surface_distances`; O(|S_pred| * |S_gt|)."""
    sp, sg = surface_voxels(pred), surface_voxels(gt)
    if not sp.any() or not sg.any():
        raise UndefinedMetricError("surface distance undefined for an empty mask")
    s = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(sp) * s
    b = np.argwhere(sg) * s
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return _summarize(pooled)


def evaluate(pred, gt, spacing=None) -> MetricReport:
    """All four metrics; distances in voxels, and in mm too when `spacing` is non-unit.

    Undefined surface distances (empty prediction) are reported as NaN.
    """
    dice, jac = overlap_metrics(pred, gt)
    try:
        hd95, asd = surface_distances(pred, gt)
    except UndefinedMetricError:
        hd95 = asd = float("nan")
    hd95_mm = asd_mm = None
    if spacing is not None and tuple(float(s) for s in spacing) != (1.0, 1.0, 1.0):
        try:
            hd95_mm, asd_mm = surface_distances(pred, gt, spacing)
        except UndefinedMetricError:
            hd95_mm = asd_mm = float("nan")
    return MetricReport(dice, jac, hd95, asd, hd95_mm, asd_mm)


def csv_header(report: MetricReport) -> str:
    cols = ["id", "dice", "jaccard", "hd95", "asd"]
    if report.hd95_mm is not None:
        cols += ["hd95_mm", "asd_mm"]
    return ",".join(cols)


def csv_row(case_id: str, report: MetricReport) -> str:
    vals = [report.dice, report.jaccard, report.hd95, report.asd]
    if report.hd95_mm is not None:
        vals += [report.hd95_mm, report.asd_mm]
    return ",".join([str(case_id)] + [f"{v:.4f}" for v in vals])
