"""Sensor time-series ingestion, imputation, splitting, scaling and windowing."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

logger = logging.getLogger(__name__)

STEP = np.timedelta64(5, "m")
SPEED, TIME_OF_DAY = 0, 1
_BIN_MAGIC = b"TSF1"


class FrameFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def time_of_day(timestamps: np.ndarray) -> np.ndarray:
    ts = timestamps.astype("datetime64[m]")
    minutes = (ts - ts.astype("datetime64[D]")).astype(np.int64)
    return minutes / 1440.0


@dataclass(frozen=True, eq=False)
class TimeSeriesFrame:
    """Speed and time-of-day observations on a fixed 5-minute grid.

    ``values`` is [T, N, F] with feature 0 = speed (mph) and feature 1 = the
    time-of-day fraction. ``missing_mask`` flags speed cells that were absent
    on load; it survives imputation for auditing.
    """

    values: np.ndarray
    timestamps: np.ndarray
    node_ids: tuple[str, ...]
    missing_mask: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise FrameFormatError(f"values must be [T, N, F], got shape {v.shape}")
        if v.shape[0] != len(self.timestamps) or v.shape[1] != len(self.node_ids):
            raise FrameFormatError("values shape disagrees with timestamps/node_ids")
        if self.missing_mask.shape != v.shape[:2]:
            raise FrameFormatError("missing_mask must be [T, N]")
        for arr in (v, self.timestamps, self.missing_mask):
            arr.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def speed(self) -> np.ndarray:
        return self.values[:, :, SPEED]

    @classmethod
    def from_speed(cls, speed: np.ndarray, timestamps, node_ids: Sequence[str]) -> "TimeSeriesFrame":
        """Build from a [T, N] speed matrix; NaN cells become missing."""
        speed = np.asarray(speed, dtype=np.float64)
        ts = np.asarray(timestamps, dtype="datetime64[ns]")
        _check_grid(ts)
        ids = tuple(str(n) for n in node_ids)
        if len(set(ids)) != len(ids):
            dupes = sorted({n for n in ids if ids.count(n) > 1})
            raise FrameFormatError(f"duplicate node ids: {dupes}")
        tod = np.broadcast_to(time_of_day(ts)[:, None], speed.shape)
        values = np.stack([speed, tod], axis=-1)
        return cls(values, ts, ids, np.isnan(speed))

    def select_nodes(self, node_ids: Sequence[str]) -> "TimeSeriesFrame":
        pos = {n: i for i, n in enumerate(self.node_ids)}
        idx = [pos[n] for n in node_ids]
        return TimeSeriesFrame(
            self.values[:, idx].copy(), self.timestamps, tuple(node_ids), self.missing_mask[:, idx].copy()
        )

    def slice_time(self, start: int, stop: int) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            self.values[start:stop].copy(),
            self.timestamps[start:stop].copy(),
            self.node_ids,
            self.missing_mask[start:stop].copy(),
        )

    def with_speed(self, speed: np.ndarray) -> "TimeSeriesFrame":
        values = self.values.copy()
        values[:, :, SPEED] = speed
        return replace(self, values=values)


def _check_grid(ts: np.ndarray) -> None:
    if ts.size < 2:
        return
    steps = np.diff(ts)
    if np.any(steps != steps[0]):
        bad = int(np.argmax(steps != steps[0]))
        raise FrameFormatError(f"nonuniform timestamp spacing at row {bad + 1}: {ts[bad]} -> {ts[bad + 1]}")
    if steps[0] <= np.timedelta64(0, "ns"):
        raise FrameFormatError("timestamps must be strictly increasing")


# -- I/O ----------------------------------------------------------------------


def load_frame(path, format: str = "csv") -> TimeSeriesFrame:
    """Read a frame; empty CSV cells (or NaN payload values) become missing."""
    if format == "csv":
        with open(path, newline="") as fh:
            header = next(csv.reader(fh), [])[1:]
        if not header:
            raise FrameFormatError(f"{path}: need a timestamp column and at least one node column")
        if len(set(header)) != len(header):
            dupes = sorted({h for h in header if header.count(h) > 1})
            raise FrameFormatError(f"{path}: duplicate node id(s) {dupes}")
        df = pd.read_csv(path, dtype=str, keep_default_na=False, header=0, names=["timestamp", *range(len(header))])
        try:
            ts = pd.to_datetime(df.iloc[:, 0]).to_numpy(dtype="datetime64[ns]")
        except (ValueError, TypeError) as exc:
            raise FrameFormatError(f"{path}: unparseable timestamp ({exc})") from None
        raw = df.iloc[:, 1:].replace("", np.nan)
        try:
            # python float() parsing round-trips repr exactly; pandas' fast parser does not
            speed = raw.to_numpy(dtype=object).astype(np.float64)
        except (ValueError, TypeError) as exc:
            raise FrameFormatError(f"{path}: non-numeric speed cell ({exc})") from None
        return TimeSeriesFrame.from_speed(speed, ts, header)
    if format == "binary":
        return _load_binary(path)
    raise ConfigError(f"unknown frame format {format!r}")


def save_frame(frame: TimeSeriesFrame, path, format: str = "csv") -> None:
    if format == "csv":
        speed = np.where(frame.missing_mask, np.nan, frame.speed)
        stamps = pd.DatetimeIndex(frame.timestamps).strftime("%Y-%m-%dT%H:%M:%S")
        with open(path, "w", newline="") as fh:
            fh.write("timestamp," + ",".join(frame.node_ids) + "\n")
            for t in range(frame.n_steps):
                cells = ["" if np.isnan(x) else repr(float(x)) for x in speed[t]]
                fh.write(stamps[t] + "," + ",".join(cells) + "\n")
    elif format == "binary":
        _save_binary(frame, path)
    else:
        raise ConfigError(f"unknown frame format {format!r}")


def _save_binary(frame: TimeSeriesFrame, path) -> None:
    # header: magic, T, N, F, then start instant and step (ns) plus node ids, then payload
    t, n, f = frame.values.shape
    values = frame.values.copy()
    values[:, :, SPEED] = np.where(frame.missing_mask, np.nan, frame.speed)
    ids = "\n".join(frame.node_ids).encode("utf-8")
    start = int(frame.timestamps[0].astype("datetime64[ns]").astype(np.int64)) if t else 0
    step = int(np.diff(frame.timestamps)[0].astype("timedelta64[ns]").astype(np.int64)) if t > 1 else int(
        STEP.astype("timedelta64[ns]").astype(np.int64)
    )
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<QQQ", t, n, f))
        fh.write(struct.pack("<qq", start, step))
        fh.write(struct.pack("<Q", len(ids)))
        fh.write(ids)
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def _load_binary(path) -> TimeSeriesFrame:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _BIN_MAGIC:
        raise FrameFormatError(f"{path}: bad magic, expected TSF1")
    t, n, f = struct.unpack_from("<QQQ", buf, 4)
    start, step = struct.unpack_from("<qq", buf, 28)
    (id_len,) = struct.unpack_from("<Q", buf, 44)
    pos = 52
    ids = buf[pos:pos + id_len].decode("utf-8").split("\n") if n else []
    pos += id_len
    values = np.frombuffer(buf, dtype="<f8", count=t * n * f, offset=pos).reshape(t, n, f).astype(np.float64)
    ts = (np.int64(start) + np.int64(step) * np.arange(t, dtype=np.int64)).astype("datetime64[ns]")
    return TimeSeriesFrame.from_speed(values[:, :, SPEED], ts, ids)


# -- cleaning -----------------------------------------------------------------


def week_slot(timestamps: np.ndarray) -> np.ndarray:
    """Index of the (weekday, HH:MM) slot for each timestamp."""
    ts = timestamps.astype("datetime64[m]")
    minutes = (ts - ts.astype("datetime64[D]")).astype(np.int64)
    # 1970-01-01 was a Thursday; shift so Monday = 0
    weekday = (ts.astype("datetime64[D]").astype(np.int64) + 3) % 7
    return weekday * 1440 + minutes


def impute_missing(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Fill missing speeds with the node's mean at the same weekday and time of day.

    Slots with no observation at all fall back to the node's overall mean.
    """
    mask = frame.missing_mask
    if not mask.any():
        return frame
    speed = np.where(mask, np.nan, frame.speed)
    empty = np.all(mask, axis=0)
    if empty.any():
        raise ValueError(f"node {frame.node_ids[int(np.argmax(empty))]!r} has no observations to impute from")
    _, slot = np.unique(week_slot(frame.timestamps), return_inverse=True)
    n_slots = slot.max() + 1
    observed = ~mask
    sums = np.zeros((n_slots, frame.n_nodes))
    counts = np.zeros((n_slots, frame.n_nodes))
    np.add.at(sums, slot, np.where(observed, speed, 0.0))
    np.add.at(counts, slot, observed.astype(float))
    node_mean = np.nanmean(speed, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        slot_mean = np.where(counts > 0, sums / counts, node_mean[None, :])
    if np.any(counts == 0):
        logger.warning("%d (node, slot) pairs had no observations; used node means", int((counts == 0).sum()))
    filled = np.where(mask, slot_mean[slot], speed)
    return frame.with_speed(filled)


def split_by_time(frame: TimeSeriesFrame, fractions=(0.7, 0.1, 0.2)):
    """Contiguous train/val/test split with boundaries at floor(T * cumulative fraction)."""
    fr = tuple(float(x) for x in fractions)
    if len(fr) != 3 or any(x <= 0 for x in fr):
        raise ConfigError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fr)}")
    t = frame.n_steps
    a = int(np.floor(t * fr[0] + 1e-9))
    b = int(np.floor(t * (fr[0] + fr[1]) + 1e-9))
    if a == 0 or b == a or b == t:
        raise ConfigError(f"split {fractions} of {t} steps leaves an empty part")
    return frame.slice_time(0, a), frame.slice_time(a, b), frame.slice_time(b, t)


# -- scaling ------------------------------------------------------------------


class SpeedScaler(TransformerMixin, BaseEstimator):
    """Standardizes the speed feature only; time of day passes through.

    Accepts a :class:`TimeSeriesFrame` or a raw array whose last axis is the
    feature axis.
    """

    def fit(self, X, y=None):
        speed = X.speed if isinstance(X, TimeSeriesFrame) else np.asarray(X)[..., SPEED]
        mean = float(np.mean(speed))
        std = float(np.std(speed))
        if not std > 0:
            raise ValueError("training speed has zero variance; cannot standardize")
        self.mean_ = np.array([mean, 0.0])
        self.scale_ = np.array([std, 1.0])
        return self

    def _check(self):
        if not hasattr(self, "mean_"):
            raise NotFittedError("SpeedScaler is not fitted")

    def transform(self, X):
        self._check()
        if isinstance(X, TimeSeriesFrame):
            return X.with_speed((X.speed - self.mean_[0]) / self.scale_[0])
        return (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        self._check()
        if isinstance(X, TimeSeriesFrame):
            return X.with_speed(X.speed * self.scale_[0] + self.mean_[0])
        return np.asarray(X, dtype=np.float64) * self.scale_ + self.mean_

    def inverse_speed(self, speed):
        self._check()
        return np.asarray(speed) * self.scale_[0] + self.mean_[0]

    def scale_speed(self, speed):
        self._check()
        return (np.asarray(speed) - self.mean_[0]) / self.scale_[0]

    @property
    def stats(self) -> dict:
        self._check()
        return {"mean": float(self.mean_[0]), "std": float(self.scale_[0])}


def fit_scaler(train_frame: TimeSeriesFrame) -> SpeedScaler:
    return SpeedScaler().fit(train_frame)


def transform(frame: TimeSeriesFrame, scaler: SpeedScaler) -> TimeSeriesFrame:
    return scaler.transform(frame)


def inverse_transform(frame: TimeSeriesFrame, scaler: SpeedScaler) -> TimeSeriesFrame:
    return scaler.inverse_transform(frame)


# -- windowing ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WindowedDataset:
    """Sliding encoder/decoder windows.

    ``inputs`` is [S, P, n, F]; ``targets`` is [S, Q, n, 1] (speed only);
    ``target_time_of_day`` is [S, Q], the exogenous clock the decoder sees.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_time_of_day: np.ndarray
    sample_start_times: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, start: int, stop: int) -> "WindowedDataset":
        return WindowedDataset(
            self.inputs[start:stop],
            self.targets[start:stop],
            self.target_time_of_day[start:stop],
            self.sample_start_times[start:stop],
        )


def make_windows(frame: TimeSeriesFrame, P: int = 12, Q: int = 12) -> WindowedDataset:
    """All windows with input [s, s+P) and target [s+P, s+P+Q); S = T - P - Q + 1."""
    if P < 1 or Q < 1:
        raise ConfigError("P and Q must be positive")
    t = frame.n_steps
    if t < P + Q:
        raise ValueError(f"need at least P+Q={P + Q} steps, frame has {t}")
    s = t - P - Q + 1
    v = frame.values
    win = np.lib.stride_tricks.sliding_window_view(v, P + Q, axis=0)  # [S, n, F, P+Q]
    win = np.moveaxis(win, -1, 1)
    # strided views; batches are copied out on demand
    inputs = win[:, :P]
    targets = win[:, P:, :, SPEED:SPEED + 1]
    tod = win[:, P:, 0, TIME_OF_DAY] if v.shape[1] else np.zeros((s, Q))
    return WindowedDataset(inputs, targets, tod, frame.timestamps[:s].copy())
