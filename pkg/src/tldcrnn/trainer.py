"""Subgraph-rotation (TL) and per-subgraph (SS) training, plus inference on unseen graphs."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamState, NumericalError
from .graph import SensorGraph, TransitionPair
from .partition import (PaddedSubgraph, PartitionAssignment, extract_subgraph, kway_partition, pad_to)
from .seq2seq import ModelParameters, StepConfig, forward, train_step
from .timeseries import STEP, SpeedScaler, TimeSeriesFrame, WindowedDataset, make_windows, time_of_day

logger = logging.getLogger(__name__)

PAD_PREFIX = "<pad>"


class TrainingDiverged(NumericalError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    P: int = 12
    Q: int = 12
    epochs: int = 30
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_epochs: tuple[int, ...] = (20,)
    max_grad_norm: float = 5.0
    K: int = 2
    L: int = 2
    R: int = 16
    seed: int = 0
    # inverse-sigmoid scheduled sampling; off means pure teacher forcing
    scheduled_sampling: bool = False
    sampling_decay_steps: float = 2000.0
    shuffle_subgraphs: int | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        for name in ("batch_size", "P", "Q", "epochs", "lr", "max_grad_norm", "K", "L", "R",
                     "sampling_decay_steps", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: one decay factor per milestone passed."""
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.decay_epochs)

    def sampling_prob(self, global_step: int) -> float:
        if not self.scheduled_sampling:
            return 1.0
        k = self.sampling_decay_steps
        return k / (k + math.exp(min(global_step / k, 700.0)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


# -- datasets -----------------------------------------------------------------


def pad_frame(frame: TimeSeriesFrame, padded: PaddedSubgraph) -> TimeSeriesFrame:
    """Columns in ``padded.node_map`` order, followed by all-zero padding columns."""
    sub = frame.select_nodes(padded.node_map)
    n = padded.n
    values = np.zeros((frame.n_steps, n, frame.values.shape[2]))
    values[:, : padded.real_count] = sub.values
    missing = np.zeros((frame.n_steps, n), dtype=bool)
    missing[:, : padded.real_count] = sub.missing_mask
    ids = padded.node_map + tuple(f"{PAD_PREFIX}{i}" for i in range(n - padded.real_count))
    return TimeSeriesFrame(values, frame.timestamps, ids, missing)


@dataclass(eq=False)
class SubgraphDataset:
    """One padded subgraph with its scaled train/val/test windows."""

    name: str
    padded: PaddedSubgraph
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    scaler: SpeedScaler
    _supports: TransitionPair | None = field(default=None, repr=False)

    @property
    def supports(self) -> TransitionPair:
        if self._supports is None:
            self._supports = self.padded.supports()
        return self._supports

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self.padded.core_ids


def build_subgraph_dataset(name: str, padded: PaddedSubgraph, splits: Sequence[TimeSeriesFrame],
                           scaler: SpeedScaler, P: int = 12, Q: int = 12) -> SubgraphDataset:
    """Slice, pad and scale each time split of the (real-unit) frame for one subgraph.

    Padding columns stay zero after scaling.
    """
    wins = []
    for split in splits:
        scaled = scaler.transform(split.select_nodes(padded.node_map))
        wins.append(make_windows(pad_frame(scaled, padded), P, Q))
    return SubgraphDataset(name, padded, *wins, scaler=scaler)


def partition_datasets(graph: SensorGraph, assignment: PartitionAssignment, parts: Sequence[int],
                       splits: Sequence[TimeSeriesFrame], scaler: SpeedScaler, n: int, P: int = 12,
                       Q: int = 12, overlap_hops: int = 0) -> list[SubgraphDataset]:
    out = []
    for p in parts:
        padded = pad_to(extract_subgraph(graph, assignment, p, overlap_hops), n)
        out.append(build_subgraph_dataset(f"part{p}", padded, splits, scaler, P, Q))
    return out


# -- training -----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    subgraph: str
    mean_loss: float
    steps: int


@dataclass
class FitResult:
    params: ModelParameters  # best on validation
    final_params: ModelParameters
    history: list[EpochRecord]
    val_history: list[dict[str, float]]  # per epoch: node id -> val MAE (real units)
    best_epoch: int
    opt_state: AdamState
    steps: int

    def val_mae(self, epoch: int) -> float:
        return float(np.mean(list(self.val_history[epoch].values())))


StepLogger = Callable[[int, str, int, float, float], None]


def subgraph_epoch(params: ModelParameters, opt_state: AdamState, sg: SubgraphDataset, cfg: TrainConfig,
                   epoch: int = 0, rng: np.random.Generator | None = None, global_step: int = 0,
                   on_step: StepLogger | None = None) -> list[float]:
    """One pass over ``sg.train`` in time order; returns the per-step losses."""
    S = len(sg.train)
    if S == 0:
        logger.warning("subgraph %s has no training windows; skipped", sg.name)
        return []
    lr = cfg.lr_at(epoch)
    supports = sg.supports
    losses = []
    for i, start in enumerate(range(0, S, cfg.batch_size)):
        batch = sg.train.batch(start, min(S, start + cfg.batch_size))
        step_cfg = StepConfig(lr=lr, max_grad_norm=cfg.max_grad_norm,
                              sampling_prob=cfg.sampling_prob(global_step + i))
        t0 = time.perf_counter()
        try:
            res = train_step(batch, params, opt_state, step_cfg, supports, sg.padded.loss_mask,
                             rng=rng, node_mask=sg.padded.mask)
        except NumericalError as exc:
            raise TrainingDiverged(f"epoch {epoch}, subgraph {sg.name}, step {i}: {exc}") from exc
        losses.append(res.loss)
        if on_step is not None:
            on_step(epoch, sg.name, i, res.loss, (time.perf_counter() - t0) * 1000.0)
    return losses


def predict_scaled(params: ModelParameters, windows: WindowedDataset, supports: TransitionPair,
                   node_mask: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Closed-loop forecasts [S, Q, n] in scaled units."""
    S, Q = len(windows), windows.targets.shape[1]
    out = np.empty((S, Q, windows.inputs.shape[2]))
    for start in range(0, S, batch_size):
        b = windows.batch(start, min(S, start + batch_size))
        fc = forward(params, b.inputs, supports, b.target_time_of_day, Q, node_mask=node_mask)
        out[start:start + len(b)] = fc.predictions.data[..., 0]
    return out


def evaluate_split(params: ModelParameters, sg: SubgraphDataset, split: str = "val",
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(forecast, truth) in real units on the core nodes, each [S, Q, n_core]."""
    wins = getattr(sg, split)
    pred = predict_scaled(params, wins, sg.supports, sg.padded.mask, batch_size)
    core = int(sg.padded.loss_mask.sum())
    pred = sg.scaler.inverse_speed(pred[..., :core])
    truth = sg.scaler.inverse_speed(np.asarray(wins.targets[..., :core, 0], dtype=np.float64))
    return pred, truth


def per_node_mae(params: ModelParameters, subgraphs: Sequence[SubgraphDataset], split: str = "val",
                 batch_size: int = 256) -> dict[str, float]:
    out = {}
    for sg in subgraphs:
        pred, truth = evaluate_split(params, sg, split, batch_size)
        out.update(zip(sg.node_ids, np.abs(pred - truth).mean(axis=(0, 1)).tolist()))
    return out


def _init(cfg: TrainConfig, input_dim: int) -> ModelParameters:
    rng = np.random.default_rng(cfg.seed)
    return ModelParameters.init(rng, input_dim=input_dim, hidden=cfg.R, K=cfg.K, layers=cfg.L,
                                decoder_input_dim=2, output_dim=1)


def _fit(subgraphs: Sequence[SubgraphDataset], cfg: TrainConfig, params: ModelParameters | None,
         on_step: StepLogger | None, on_epoch: Callable[[int, dict], None] | None) -> FitResult:
    if not subgraphs:
        raise ValueError("no subgraphs to train on")
    n = {sg.padded.n for sg in subgraphs}
    if len(n) != 1:
        raise ValueError(f"subgraphs must share one padded size, got {sorted(n)}")
    params = params or _init(cfg, subgraphs[0].train.inputs.shape[-1])
    opt = AdamState(params.parameters())
    rng = np.random.default_rng([cfg.seed, 1])
    order = list(range(len(subgraphs)))
    shuffler = None if cfg.shuffle_subgraphs is None else np.random.default_rng(cfg.shuffle_subgraphs)
    history, val_history = [], []
    best, best_epoch, best_mae = params.state_dict(), -1, np.inf
    steps = 0
    for epoch in range(cfg.epochs):
        if shuffler is not None:
            order = shuffler.permutation(len(subgraphs)).tolist()
        for idx in order:
            sg = subgraphs[idx]
            losses = subgraph_epoch(params, opt, sg, cfg, epoch, rng, steps, on_step)
            steps += len(losses)
            history.append(EpochRecord(epoch, sg.name, float(np.mean(losses)) if losses else math.nan, len(losses)))
        val = per_node_mae(params, subgraphs, "val", cfg.eval_batch_size)
        val_history.append(val)
        mae = float(np.mean(list(val.values())))
        logger.info("epoch %d: train loss %.4f, val MAE %.4f", epoch,
                    np.nanmean([h.mean_loss for h in history[-len(order):]]), mae)
        if mae < best_mae:
            best, best_epoch, best_mae = params.state_dict(), epoch, mae
        if on_epoch is not None:
            on_epoch(epoch, val)
    final = params
    best_params = _init(cfg, subgraphs[0].train.inputs.shape[-1])
    best_params.load_state_dict(best)
    return FitResult(best_params, final, history, val_history, best_epoch, opt, steps)


def fit_tl(subgraphs: Sequence[SubgraphDataset], cfg: TrainConfig, params: ModelParameters | None = None,
           on_step: StepLogger | None = None, on_epoch=None) -> FitResult:
    """Rotate subgraph epochs over the source subgraphs with one shared model.

    Each global epoch visits the subgraphs in ascending order (or a seeded
    shuffle) and then scores per-node validation MAE; the best epoch's
    parameters are kept alongside the final ones.
    """
    if len(subgraphs) < 2:
        logger.warning("transfer training with %d subgraph(s); this is plain per-subgraph training",
                       len(subgraphs))
    return _fit(subgraphs, cfg, params, on_step, on_epoch)


def fit_ss(subgraph: SubgraphDataset, cfg: TrainConfig, on_step: StepLogger | None = None,
           on_epoch=None) -> FitResult:
    """Plain DCRNN training on one fixed subgraph."""
    return _fit([subgraph], cfg, None, on_step, on_epoch)


# -- inference on an unseen graph ---------------------------------------------


@dataclass
class UnseenForecast:
    node_ids: tuple[str, ...]  # target graph order
    forecasts: np.ndarray  # [S, Q, N'] real units
    truth: np.ndarray | None
    assignment: PartitionAssignment


def _target_parts(graph: SensorGraph, k: int, n: int, seed: int, balance_tol: float, overlap_hops: int):
    assignment = kway_partition(graph, k, balance_tol, seed)
    padded = []
    for p in range(k):
        sub = extract_subgraph(graph, assignment, p, overlap_hops)
        if sub.real_count > n:
            raise ValueError(
                f"target part {p} has {sub.real_count} nodes but the model was trained on n={n}; "
                "use a larger n or more parts")
        padded.append(pad_to(sub, n))
    return assignment, padded


def infer_unseen(params: ModelParameters, scaler: SpeedScaler, graph: SensorGraph, k: int,
                 frame: TimeSeriesFrame, n: int, cfg: TrainConfig, seed: int = 0,
                 balance_tol: float = 0.10, overlap_hops: int = 0) -> UnseenForecast:
    """Forecast every window of ``frame`` on a graph the model never saw.

    The graph is partitioned into ``k`` parts, each padded to the training
    size ``n`` and scaled with the training scaler; forecasts are decoded
    closed-loop, unscaled and put back in ``graph.node_ids`` order.
    """
    if set(frame.node_ids) != set(graph.node_ids):
        raise ValueError("frame and graph must cover the same node ids")
    S = frame.n_steps - cfg.P - cfg.Q + 1
    if S < 1:
        raise ValueError(f"frame needs at least P+Q={cfg.P + cfg.Q} steps")
    assignment, parts = _target_parts(graph, k, n, seed, balance_tol, overlap_hops)
    pos = graph.index_of()
    out = np.full((S, cfg.Q, graph.n_nodes), np.nan)
    truth = np.full_like(out, np.nan)
    for padded in parts:
        wins = make_windows(pad_frame(scaler.transform(frame.select_nodes(padded.node_map)), padded), cfg.P, cfg.Q)
        pred = scaler.inverse_speed(predict_scaled(params, wins, padded.supports(), padded.mask,
                                                   cfg.eval_batch_size))
        cols = [pos[nid] for nid in padded.core_ids]
        core = len(cols)
        out[..., cols] = pred[..., :core]
        truth[..., cols] = scaler.inverse_speed(np.asarray(wins.targets[..., :core, 0]))
    return UnseenForecast(graph.node_ids, out, truth, assignment)


def forecast_next(params: ModelParameters, scaler: SpeedScaler, graph: SensorGraph, k: int,
                  frame: TimeSeriesFrame, n: int, cfg: TrainConfig, seed: int = 0,
                  balance_tol: float = 0.10, overlap_hops: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Forecast the ``Q`` steps after the last ``P`` rows of ``frame``.

    Returns (target timestamps [Q], forecasts [Q, N'] in ``graph.node_ids`` order).
    """
    if set(frame.node_ids) != set(graph.node_ids):
        raise ValueError("frame and graph must cover the same node ids")
    if frame.n_steps < cfg.P:
        raise ValueError(f"need at least P={cfg.P} steps of history, got {frame.n_steps}")
    window = frame.slice_time(frame.n_steps - cfg.P, frame.n_steps)
    step = window.timestamps[1] - window.timestamps[0] if cfg.P > 1 else STEP.astype("timedelta64[ns]")
    future = window.timestamps[-1] + step * np.arange(1, cfg.Q + 1)
    tod = time_of_day(future)[None, :]
    _, parts = _target_parts(graph, k, n, seed, balance_tol, overlap_hops)
    pos = graph.index_of()
    out = np.full((cfg.Q, graph.n_nodes), np.nan)
    for padded in parts:
        x = pad_frame(scaler.transform(window.select_nodes(padded.node_map)), padded).values[None]
        fc = forward(params, x, padded.supports(), tod, cfg.Q, node_mask=padded.mask)
        pred = scaler.inverse_speed(fc.predictions.data[0, :, :, 0])
        cols = [pos[nid] for nid in padded.core_ids]
        out[:, cols] = pred[:, : len(cols)]
    return future, out
