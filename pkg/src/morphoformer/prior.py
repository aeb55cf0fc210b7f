"""Model-free statistics of the (footprint ratio, mean height) coupling."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dataset import H_FLOOR

log = logging.getLogger(__name__)

LAMBDA_EDGES = (0.01, 0.05, 0.10, 0.20, 0.35, 0.55, 1.00)
DEFAULT_FAR_LEVELS = (0.5, 1.0, 2.0, 4.0, 8.0)


class UndefinedCorrelationError(ValueError):
    pass


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"series lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two paired values")
    return x, y


def pearson(x, y):
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(np.dot(xc, xc))
    sy = math.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("zero variance in one series")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def spearman(x, y):
    """Rank correlation with average ranks for ties."""
    x, y = _pair(x, y)
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def bin_index(values, edges=LAMBDA_EDGES):
    """Index of the half-open (lo, hi] bin of each value; -1 when outside."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, values, side="left") - 1
    idx[(values <= edges[0]) | (values > edges[-1])] = -1
    return idx


def variance_explained(lambda_p, h_ave, edges=LAMBDA_EDGES):
    """Share of Var(H) carried by the per-bin conditional means of H given footprint bin."""
    lam = np.asarray(lambda_p, dtype=np.float64)
    h = np.asarray(h_ave, dtype=np.float64)
    idx = bin_index(lam, edges)
    inside = idx >= 0
    if not inside.all():
        log.warning("%d values fall outside the bin edges and are ignored", int((~inside).sum()))
    idx, h = idx[inside], h[inside]
    populated = np.unique(idx)
    if populated.size < 2:
        log.warning("only %d populated bin(s); variance explained set to 0", populated.size)
        return 0.0
    total = h.var()
    if total == 0:
        return 0.0
    within = sum(h[idx == b].var() * (idx == b).sum() for b in populated) / h.size
    return float(min(max(1.0 - within / total, 0.0), 1.0))


def rmse_ceiling(v, baseline_rmse):
    """Largest RMSE reduction a predictor explaining a share ``v`` of variance can buy."""
    if not 0 <= v < 1:
        raise ValueError(f"variance share must lie in [0, 1), got {v}")
    if baseline_rmse <= 0:
        raise ValueError("baseline RMSE must be positive")
    return (1.0 - math.sqrt(1.0 - v)) * baseline_rmse


def far_iso_points(far_level, lambda_grid, h_floor=H_FLOOR):
    """Points (lambda_p, H) on the constant floor-area-ratio curve H = FAR * h_floor / lambda_p."""
    if far_level <= 0:
        raise ValueError("FAR level must be positive")
    lam = np.asarray(lambda_grid, dtype=np.float64)
    lam = lam[lam > 0]
    return np.column_stack([lam, far_level * h_floor / lam])


def conditional_bins(lambda_p, h_ave, edges=LAMBDA_EDGES):
    idx = bin_index(lambda_p, edges)
    h = np.asarray(h_ave, dtype=np.float64)
    rows = []
    for b in range(len(edges) - 1):
        sel = h[idx == b]
        row = {"lo": edges[b], "hi": edges[b + 1], "n": int(sel.size)}
        if sel.size:
            q = np.percentile(sel, [25, 50, 75])
            row.update(mean=float(sel.mean()), std=float(sel.std()),
                       q25=float(q[0]), median=float(q[1]), q75=float(q[2]))
        rows.append(row)
    return rows


@dataclass
class CouplingReport:
    n_cells: int
    pearson: float
    spearman: float
    variance_explained: float
    baseline_rmse_m: float
    rmse_ceiling_m: float
    rmse_ceiling_pct: float
    conditional_bins: list = field(default_factory=list)
    far_curve_points: dict = field(default_factory=dict)
    per_city: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def coupling_report(lambda_p, h_ave, baseline_rmse=None, far_levels=DEFAULT_FAR_LEVELS,
                    edges=LAMBDA_EDGES, per_city=None):
    """Full coupling summary. Without ``baseline_rmse`` the constant-predictor RMSE (std of H) is used."""
    lam = np.asarray(lambda_p, dtype=np.float64)
    h = np.asarray(h_ave, dtype=np.float64)
    v = variance_explained(lam, h, edges)
    base = float(h.std()) if baseline_rmse is None else float(baseline_rmse)
    ceiling = rmse_ceiling(v, base)
    grid = np.round(np.linspace(0.02, 1.0, 50), 4)
    curves = {str(f): far_iso_points(f, grid).tolist() for f in far_levels}
    return CouplingReport(
        n_cells=int(lam.size), pearson=pearson(lam, h), spearman=spearman(lam, h),
        variance_explained=v, baseline_rmse_m=base, rmse_ceiling_m=ceiling,
        rmse_ceiling_pct=100.0 * ceiling / base, conditional_bins=conditional_bins(lam, h, edges),
        far_curve_points=curves, per_city=per_city or [])


def hexbin_counts(lambda_p, h_ave, lambda_edges=None, h_edges=None):
    """2-D histogram rows (lambda_lo, lambda_hi, h_lo, h_hi, count) for external plotting."""
    if lambda_edges is None:
        lambda_edges = np.linspace(0.0, 1.0, 41)
    if h_edges is None:
        h_edges = np.linspace(0.0, max(60.0, float(np.max(h_ave))), 41)
    counts, le, he = np.histogram2d(lambda_p, h_ave, bins=[lambda_edges, h_edges])
    rows = []
    for i in range(len(le) - 1):
        for j in range(len(he) - 1):
            rows.append((float(le[i]), float(le[i + 1]), float(he[j]), float(he[j + 1]), int(counts[i, j])))
    return rows
