"""Error metrics, footprint-stratified analysis, gate and surrogate statistics, report formatting."""

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .prior import LAMBDA_EDGES, UndefinedCorrelationError, bin_index, pearson

log = logging.getLogger(__name__)

H_EDGES = (2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 500.0)
MIN_BIN_COUNT = 5


class DataError(ValueError):
    pass


@dataclass
class MetricSet:
    rmse: float
    mae: float
    me: float
    cc: float = None  # None when undefined (constant series or n < 2)
    r2: float = None
    n: int = 0

    def to_dict(self):
        return asdict(self)

    def require(self):
        """Raise if any statistic is undefined."""
        if self.cc is None or self.r2 is None:
            raise UndefinedCorrelationError(f"cc/r2 undefined for this sample (n={self.n})")
        return self


def _aligned(*arrays):
    out = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    if len({a.size for a in out}) != 1:
        raise DataError(f"arrays must be aligned, got lengths {[a.size for a in out]}")
    return out


def metrics(pred, truth):
    pred, truth = _aligned(pred, truth)
    n = pred.size
    if n == 0:
        raise DataError("cannot score an empty sample")
    err = pred - truth
    rmse = math.sqrt(float(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    me = float(np.mean(err))
    cc = r2 = None
    if n >= 2:
        try:
            cc = pearson(pred, truth)
        except UndefinedCorrelationError:
            pass
        ss_tot = float(np.sum((truth - truth.mean()) ** 2))
        if ss_tot > 0:
            r2 = 1.0 - float(np.sum(err * err)) / ss_tot
    return MetricSet(rmse, mae, me, cc, r2, int(n))


# ---------------------------------------------------------------- stratified BH error

@dataclass
class StratifiedReport:
    edges: tuple
    rows: list
    total: int
    excluded: int = 0
    configs: tuple = ()

    def to_dict(self):
        return asdict(self)


def _rmse(err):
    return math.sqrt(float(np.mean(err * err))) if err.size else None


def stratify(pred, truth, lambda_truth, others=None, edges=LAMBDA_EDGES):
    """BH RMSE per (lo, hi] footprint bin; ``others`` maps a config name to its predictions for delta columns."""
    pred, truth, lam = _aligned(pred, truth, lambda_truth)
    others = dict(others or {})
    for k in others:
        others[k] = _aligned(others[k], truth)[0]
    idx = bin_index(lam, edges)
    excluded = int((idx < 0).sum())
    if excluded:
        log.warning("%d cells fall outside the footprint bins (lambda <= %.2f) and are excluded", excluded, edges[0])
    rows = []
    for b in range(len(edges) - 1):
        sel = idx == b
        err = pred[sel] - truth[sel]
        row = {"lo": edges[b], "hi": edges[b + 1], "n": int(sel.sum()), "rmse": _rmse(err),
               "mse": float(np.mean(err * err)) if err.size else None, "delta": {}}
        for name, alt in others.items():
            r_alt = _rmse(alt[sel] - truth[sel])
            row["delta"][name] = None if row["rmse"] is None else r_alt - row["rmse"]
        rows.append(row)
    return StratifiedReport(tuple(edges), rows, int((idx >= 0).sum()), excluded, tuple(others))


def recombine_mse(report):
    """Count-weighted mean of per-bin MSE; equals the aggregate MSE over the binned cells."""
    num = sum(r["n"] * r["mse"] for r in report.rows if r["n"])
    return num / report.total if report.total else float("nan")


# ---------------------------------------------------------------- gate statistics

@dataclass
class GateReport:
    sample_mean: float
    sample_std: float
    histogram: dict
    by_lambda_bin: list
    channel_order: list
    channel_means: list
    channel_stds: list
    frac_below_0_3: float
    frac_above_0_7: float

    def to_dict(self):
        return asdict(self)


def gate_stats(gates, lambda_truth=None, hist_bins=20, edges=LAMBDA_EDGES):
    g = np.asarray(gates, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] == 0:
        raise DataError(f"expected an (n, channels) gate matrix, got shape {g.shape}")
    if not np.all(np.isfinite(g)) or g.min() < 0 or g.max() > 1:
        raise DataError("gate entries must lie in [0, 1]")
    per_sample = g.mean(axis=1)
    counts, hedges = np.histogram(per_sample, bins=hist_bins, range=(0.0, 1.0))
    by_bin = []
    if lambda_truth is not None:
        (lam,) = _aligned(lambda_truth)
        if lam.size != g.shape[0]:
            raise DataError("lambda_truth must have one value per gate row")
        idx = bin_index(lam, edges)
        for b in range(len(edges) - 1):
            sel = per_sample[idx == b]
            by_bin.append({"lo": edges[b], "hi": edges[b + 1], "n": int(sel.size),
                           "mean": float(sel.mean()) if sel.size else None,
                           "std": float(sel.std()) if sel.size else None})
    cmeans = g.mean(axis=0)
    cstds = g.std(axis=0)
    order = np.argsort(cmeans, kind="stable")
    return GateReport(
        sample_mean=float(per_sample.mean()), sample_std=float(per_sample.std()),
        histogram={"edges": hedges.tolist(), "counts": counts.tolist()},
        by_lambda_bin=by_bin, channel_order=order.tolist(),
        channel_means=cmeans[order].tolist(), channel_stds=cstds[order].tolist(),
        frac_below_0_3=float((cmeans < 0.3).mean()), frac_above_0_7=float((cmeans > 0.7).mean()))


# ---------------------------------------------------------------- surrogate

@dataclass
class SurrogateReport:
    surrogate: MetricSet
    main: MetricSet
    rho: float

    def to_dict(self):
        return asdict(self)


def surrogate_stats(h_from_bf, h_main, truth):
    sur, main, truth = _aligned(h_from_bf, h_main, truth)
    try:
        rho = pearson(sur, main)
    except UndefinedCorrelationError:
        rho = None
    return SurrogateReport(metrics(sur, truth), metrics(main, truth), rho)


# ---------------------------------------------------------------- 2-D error grid

def error_grid(pred_h, pred_f, truth_h, truth_f, lambda_edges=LAMBDA_EDGES, h_edges=H_EDGES,
               min_count=MIN_BIN_COUNT):
    """Per (footprint, height) truth bin: n, BH RMSE, BF RMSE; bins below ``min_count`` are flagged blank."""
    ph, pf, th, tf = _aligned(pred_h, pred_f, truth_h, truth_f)
    li = bin_index(tf, lambda_edges)
    hi = bin_index(th, h_edges)
    cells = []
    for a in range(len(lambda_edges) - 1):
        for b in range(len(h_edges) - 1):
            sel = (li == a) & (hi == b)
            n = int(sel.sum())
            blank = n < min_count
            cells.append({"lambda_lo": lambda_edges[a], "lambda_hi": lambda_edges[a + 1],
                          "h_lo": h_edges[b], "h_hi": h_edges[b + 1], "n": n, "blanked": blank,
                          "bh_rmse": None if blank else _rmse(ph[sel] - th[sel]),
                          "bf_rmse": None if blank else _rmse(pf[sel] - tf[sel])})
    outside = int(((li < 0) | (hi < 0)).sum())
    return {"cells": cells, "outside": outside, "total": int(ph.size)}


# ---------------------------------------------------------------- formatting

def _fmt(v, digits=3):
    if v is None:
        return "-"
    return f"{v:.{digits}f}"


def _signed(v):
    return "-" if v is None else f"{v:+.3f}"


def format_metrics_table(rows):
    """Text table with BH and BF metric blocks; ``rows`` is [(label, bh MetricSet, bf MetricSet)]."""
    head = f"{'config':<12} | {'BH RMSE':>8} {'MAE':>7} {'CC':>6} {'R2':>6} | {'BF RMSE':>8} {'MAE':>7} {'CC':>6} {'R2':>6}"
    lines = [head, "-" * len(head)]
    for label, bh, bf in rows:
        lines.append(f"{label:<12} | {_fmt(bh.rmse):>8} {_fmt(bh.mae):>7} {_fmt(bh.cc):>6} {_fmt(bh.r2):>6} | "
                     f"{_fmt(bf.rmse, 4):>8} {_fmt(bf.mae, 4):>7} {_fmt(bf.cc):>6} {_fmt(bf.r2):>6}")
    return "\n".join(lines) + "\n"


def format_stratified(report, labels=None):
    labels = labels or {k: f"d {k}" for k in report.configs}
    cols = [labels[k] for k in report.configs]
    head = f"{'lambda_p bin':<12} {'n':>7} {'full':>8}" + "".join(f" {c:>12}" for c in cols)
    lines = [head, "-" * len(head)]
    for r in report.rows:
        cells = "".join(f" {_signed(r['delta'][k]):>12}" for k in report.configs)
        lines.append(f"{r['lo']:.2f}-{r['hi']:.2f}    {r['n']:>7} {_fmt(r['rmse']):>8}{cells}")
    return "\n".join(lines) + "\n"


def format_surrogate(report):
    lines = [f"{'head':<10} {'RMSE':>7} {'MAE':>7} {'CC':>6} {'R2':>6}"]
    for label, m in (("main", report.main), ("surrogate", report.surrogate)):
        lines.append(f"{label:<10} {_fmt(m.rmse):>7} {_fmt(m.mae):>7} {_fmt(m.cc):>6} {_fmt(m.r2):>6}")
    lines.append(f"pearson(surrogate, main) = {_fmt(report.rho)}")
    return "\n".join(lines) + "\n"


def format_gate(report):
    lines = [f"sample-mean gate: {report.sample_mean:.3f} +/- {report.sample_std:.3f}",
             f"channels with mean < 0.3: {report.frac_below_0_3:.3f}   > 0.7: {report.frac_above_0_7:.3f}"]
    for r in report.by_lambda_bin:
        lines.append(f"  {r['lo']:.2f}-{r['hi']:.2f}  n={r['n']:<6} {_fmt(r['mean'])} +/- {_fmt(r['std'])}")
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return _jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps_report(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_report(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_report(obj))
