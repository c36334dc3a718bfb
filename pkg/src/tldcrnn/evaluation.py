"""Per-node metrics, paired comparisons, signed-rank test, model selection, CV bins, baselines."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .timeseries import SPEED, STEP, TimeSeriesFrame, WindowedDataset, week_slot

logger = logging.getLogger(__name__)

MAPE_FLOOR = 1.0
EXACT_MAX_N = 25


class WilcoxonError(ValueError):
    pass


def fmt(x: float) -> str:
    """Round-trippable float text; used by every CSV writer here."""
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# -- metrics ------------------------------------------------------------------


@dataclass
class NodeMetricTable:
    node_ids: tuple[str, ...]
    mae: np.ndarray
    rmse: np.ndarray
    mape: np.ndarray  # percent; NaN where every truth value is below the floor
    mape_excluded: np.ndarray  # cells dropped from MAPE per node

    def __len__(self):
        return len(self.node_ids)

    def as_dict(self, metric: str = "mae") -> dict[str, float]:
        return dict(zip(self.node_ids, getattr(self, metric).tolist()))

    def mean(self, metric: str = "mae") -> float:
        return float(np.nanmean(getattr(self, metric)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "mae", "rmse", "mape", "mape_excluded"])
            for i, nid in enumerate(self.node_ids):
                w.writerow([nid, fmt(self.mae[i]), fmt(self.rmse[i]), fmt(self.mape[i]), int(self.mape_excluded[i])])

    @classmethod
    def from_csv(cls, path) -> "NodeMetricTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        f = lambda r, k: float(r[k]) if r[k] != "" else math.nan  # noqa: E731
        return cls(
            tuple(r["node_id"] for r in rows),
            np.array([f(r, "mae") for r in rows]),
            np.array([f(r, "rmse") for r in rows]),
            np.array([f(r, "mape") for r in rows]),
            np.array([int(r["mape_excluded"]) for r in rows]),
        )


def node_metrics(forecasts, truth, mask=None, node_ids: Sequence[str] | None = None,
                 mape_floor: float = MAPE_FLOOR) -> NodeMetricTable:
    """MAE, RMSE and MAPE per node over every window and horizon.

    Arrays are [..., N] (a trailing singleton feature axis is dropped) in real
    units. ``mask`` selects the real nodes; the rest are left out of the table.
    MAPE skips cells with ``|y| < mape_floor``.
    """
    f = np.asarray(forecasts, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError(f"forecast shape {f.shape} != truth shape {y.shape}")
    if f.ndim >= 2 and f.shape[-1] == 1:
        f, y = f[..., 0], y[..., 0]
    n = f.shape[-1]
    f = f.reshape(-1, n)
    y = y.reshape(-1, n)
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ids = tuple(node_ids) if node_ids is not None else tuple(str(i) for i in range(n))
    if len(ids) != n or keep.shape != (n,):
        raise ValueError("node_ids/mask length must match the node axis")
    e = f - y
    mae = np.abs(e).mean(axis=0)
    rmse = np.sqrt((e * e).mean(axis=0))
    ok = np.abs(y) >= mape_floor
    counts = ok.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(ok, np.abs(e) / np.where(ok, np.abs(y), 1.0), 0.0)
        mape = np.where(counts > 0, 100.0 * ratio.sum(axis=0) / counts, np.nan)
    excluded = y.shape[0] - counts
    sel = np.flatnonzero(keep)
    return NodeMetricTable(tuple(ids[i] for i in sel), mae[sel], rmse[sel], mape[sel], excluded[sel])


# -- signed-rank test ---------------------------------------------------------


def _prepare(diffs) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise WilcoxonError("differences must be finite")
    d = d[d != 0]
    if d.size < 5:
        raise WilcoxonError(f"need at least 5 nonzero differences, got {d.size}; compare more nodes")
    return d, rankdata(np.abs(d), method="average")


def signed_rank_statistic(diffs) -> float:
    """Sum of the ranks of the positive differences (zeros dropped, average ranks for ties)."""
    d, r = _prepare(diffs)
    return float(r[d > 0].sum())


def _exact_lower_tail(ranks: np.ndarray, t_plus: float) -> float:
    # doubled ranks are integers even with average ranks
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = counts[:-r].copy()
        counts[r:] += shifted
    limit = int(np.floor(2 * t_plus + 1e-9))
    return float(counts[: limit + 1].sum() / 2.0 ** len(doubled))


def _normal_lower_tail(ranks: np.ndarray, t_plus: float) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    if var <= 0:
        return 1.0 if t_plus >= mean else 0.0
    z = (t_plus - mean + 0.5) / math.sqrt(var)
    return float(ndtr(z))


def wilcoxon_one_sided(diffs, method: str = "auto") -> float:
    """p-value of the signed-rank test of ``median(diffs) >= 0`` against ``median < 0``.

    Exact for n <= 25 after dropping zeros (``method="auto"``), normal with
    tie and continuity correction above. ``method`` may force either path.
    """
    d, r = _prepare(diffs)
    t_plus = float(r[d > 0].sum())
    if method == "auto":
        method = "exact" if d.size <= EXACT_MAX_N else "normal"
    if method == "exact":
        return min(1.0, _exact_lower_tail(r, t_plus))
    if method == "normal":
        return _normal_lower_tail(r, t_plus)
    raise ValueError(f"unknown method {method!r}")


def quartile_summary(values) -> dict[str, float]:
    """Box-plot numbers: quartiles and 1.5 IQR whiskers clipped to the data."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values to summarize")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return {"count": int(v.size), "min": float(v[0]), "whisker_low": float(lo), "q1": float(q1),
            "median": float(med), "q3": float(q3), "whisker_high": float(hi), "max": float(v[-1])}


@dataclass
class ComparisonReport:
    """Per-node ``M1 - M2`` MAE differences and the one-sided signed-rank test.

    ``significant`` means M1 has the lower median MAE at level ``alpha``.
    """

    model_1: str
    model_2: str
    node_ids: tuple[str, ...]
    diffs: np.ndarray
    p_value: float
    alpha: float
    quartiles: dict
    manifests: dict = field(default_factory=dict)

    @property
    def significant(self) -> bool:
        return bool(self.p_value < self.alpha)

    @property
    def n_m1_better(self) -> int:
        return int(np.sum(self.diffs < 0))

    @property
    def n_m2_better(self) -> int:
        return int(np.sum(self.diffs > 0))

    @property
    def n_tied(self) -> int:
        return int(np.sum(self.diffs == 0))

    def summary(self) -> dict:
        return {
            "model_1": self.model_1, "model_2": self.model_2, "n_nodes": len(self.node_ids),
            "n_m1_better": self.n_m1_better, "n_m2_better": self.n_m2_better, "n_tied": self.n_tied,
            "p_value": self.p_value, "alpha": self.alpha, "significant": self.significant,
            "quartiles": self.quartiles, "manifests": self.manifests,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "diff"])
            for nid, d in zip(self.node_ids, self.diffs):
                w.writerow([nid, fmt(d)])


def compare(m1: dict[str, float], m2: dict[str, float], name_1: str = "M1", name_2: str = "M2",
            alpha: float = 0.05, manifests: dict | None = None) -> ComparisonReport:
    """Pair two per-node MAE maps on the same node ids."""
    if set(m1) != set(m2):
        missing = sorted(set(m1) ^ set(m2))[:5]
        raise ValueError(f"node id sets differ (e.g. {missing})")
    ids = tuple(sorted(m1))
    diffs = np.array([m1[i] - m2[i] for i in ids])
    p = wilcoxon_one_sided(diffs)
    return ComparisonReport(name_1, name_2, ids, diffs, p, alpha, quartile_summary(diffs), dict(manifests or {}))


# -- model selection for the subgraph-specific ensemble -----------------------


@dataclass
class ModelSelection:
    """How to combine per-subgraph models on a target.

    S and M pick models with target validation data and are marked biased.
    """

    mode: str
    n_models: int
    global_best: int | None = None
    per_group: dict = field(default_factory=dict)
    groups: np.ndarray | None = None

    @property
    def biased(self) -> bool:
        return self.mode in ("S", "M")

    def combine(self, forecasts: Sequence[np.ndarray]) -> np.ndarray:
        """Merge per-model forecasts ([..., N] each) into one forecast."""
        if len(forecasts) != self.n_models:
            raise ValueError(f"expected {self.n_models} model forecasts, got {len(forecasts)}")
        stack = np.stack([np.asarray(f, dtype=np.float64) for f in forecasts])
        if self.mode == "B":
            return stack.mean(axis=0)
        if self.mode == "S":
            return stack[self.global_best].copy()
        out = np.empty_like(stack[0])
        for g, m in self.per_group.items():
            cols = self.groups == g
            out[..., cols] = stack[m][..., cols]
        return out


def select_models(val_forecasts: Sequence[np.ndarray], val_truth, groups, mode: str) -> ModelSelection:
    """Pick S (global best), M (best per target subgraph) or B (mean of all).

    ``val_forecasts`` holds one [..., N] array per model on target validation
    windows; ``groups`` gives each target node's subgraph.
    """
    if not val_forecasts:
        raise ValueError("no models to select from")
    if mode not in ("S", "M", "B"):
        raise ValueError(f"mode must be S, M or B, got {mode!r}")
    k = len(val_forecasts)
    groups = np.asarray(groups)
    if mode == "B":
        return ModelSelection("B", k, groups=groups)
    y = np.asarray(val_truth, dtype=np.float64)
    n = y.shape[-1]
    # [model, node] absolute-error sums
    err = np.stack([np.abs(np.asarray(f) - y).reshape(-1, n).sum(axis=0) for f in val_forecasts])
    best = int(np.argmin(err.sum(axis=1)))
    if mode == "S":
        return ModelSelection("S", k, global_best=best, groups=groups)
    per = {g.item() if hasattr(g, "item") else g: int(np.argmin(err[:, groups == g].sum(axis=1)))
           for g in np.unique(groups)}
    return ModelSelection("M", k, global_best=best, per_group=per, groups=groups)


# -- coefficient of variation -------------------------------------------------


def coefficient_of_variation(frame) -> np.ndarray:
    """Per-node population std / mean of the speed series; NaN where the mean is not positive."""
    speed = frame.speed if isinstance(frame, TimeSeriesFrame) else np.asarray(frame, dtype=np.float64)
    mean = speed.mean(axis=0)
    std = speed.std(axis=0)
    bad = ~(mean > 0)
    if bad.any():
        logger.warning("%d nodes with non-positive mean speed excluded from CV", int(bad.sum()))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(bad, np.nan, std / np.where(bad, 1.0, mean))


@dataclass
class CVBin:
    low: float
    high: float
    values: np.ndarray

    @property
    def count(self) -> int:
        return int(self.values.size)


def bin_mae_by_cv(diffs, cvs, bin_edges) -> list[CVBin]:
    """Group differences into half-open CV bins ``[edge_i, edge_{i+1})``; NaN CVs are skipped."""
    d = np.asarray(diffs, dtype=np.float64)
    c = np.asarray(cvs, dtype=np.float64)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if d.shape != c.shape:
        raise ValueError("diffs and cvs must align")
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin_edges must be increasing with at least two entries")
    return [CVBin(float(lo), float(hi), d[(c >= lo) & (c < hi)]) for lo, hi in zip(edges[:-1], edges[1:])]


def write_cv_report(path, bins: Sequence[CVBin]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["low", "high", "count", "q1", "median", "q3", "whisker_low", "whisker_high"])
        for b in bins:
            if b.count:
                q = quartile_summary(b.values)
                w.writerow([fmt(b.low), fmt(b.high), b.count] +
                           [fmt(q[k]) for k in ("q1", "median", "q3", "whisker_low", "whisker_high")])
            else:
                w.writerow([fmt(b.low), fmt(b.high), 0, "", "", "", "", ""])


# -- baselines ----------------------------------------------------------------


def window_truth(windows: WindowedDataset) -> np.ndarray:
    """[S, Q, N] speed targets."""
    return np.asarray(windows.targets[..., 0], dtype=np.float64)


def persistence_forecast(windows: WindowedDataset, Q: int | None = None) -> np.ndarray:
    """Repeat the last observed speed over the horizon; [S, Q, N]."""
    Q = Q or windows.targets.shape[1]
    last = np.asarray(windows.inputs[:, -1, :, SPEED], dtype=np.float64)
    return np.repeat(last[:, None, :], Q, axis=1)


def target_timestamps(windows: WindowedDataset, P: int, Q: int) -> np.ndarray:
    """[S, Q] timestamps of every forecast target."""
    offs = (np.arange(P, P + Q) * STEP).astype("timedelta64[ns]")
    return windows.sample_start_times[:, None] + offs[None, :]


class HistoricalAverage(BaseEstimator):
    """Mean speed per node and (weekday, time of day) slot over the fitting frame."""

    def fit(self, frame: TimeSeriesFrame, y=None):
        slots = week_slot(frame.timestamps)
        uniq, inv = np.unique(slots, return_inverse=True)
        sums = np.zeros((uniq.size, frame.n_nodes))
        np.add.at(sums, inv, frame.speed)
        counts = np.bincount(inv, minlength=uniq.size)[:, None]
        self.slots_ = uniq
        self.table_ = sums / counts
        self.node_mean_ = frame.speed.mean(axis=0)
        self.node_ids_ = frame.node_ids
        return self

    def predict(self, timestamps) -> np.ndarray:
        """Forecast for any array of timestamps; result has one trailing node axis."""
        if not hasattr(self, "table_"):
            raise NotFittedError("HistoricalAverage is not fitted")
        ts = np.asarray(timestamps, dtype="datetime64[ns]")
        slots = week_slot(ts.ravel())
        idx = np.searchsorted(self.slots_, slots)
        idx_c = np.clip(idx, 0, self.slots_.size - 1)
        hit = self.slots_[idx_c] == slots
        out = np.where(hit[:, None], self.table_[idx_c], self.node_mean_[None, :])
        return out.reshape(ts.shape + (len(self.node_mean_),))
