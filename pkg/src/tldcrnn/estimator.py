"""scikit-learn style wrapper over partition -> train -> infer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .graph import SensorGraph
from .partition import extract_subgraph, kway_partition
from .timeseries import ConfigError, SpeedScaler, TimeSeriesFrame, impute_missing, split_by_time
from .trainer import TrainConfig, fit_ss, fit_tl, forecast_next, infer_unseen, partition_datasets


def _check_inputs(X, graph) -> None:
    if not isinstance(X, TimeSeriesFrame):
        raise TypeError(f"X must be a TimeSeriesFrame, got {type(X).__name__}")
    if not isinstance(graph, SensorGraph):
        raise TypeError(f"graph must be a SensorGraph, got {type(graph).__name__}")
    if set(X.node_ids) != set(graph.node_ids):
        raise ValueError("frame and graph must cover the same node ids")


class DCRNNForecaster(BaseEstimator):
    """Partition a source graph, train one shared DCRNN across the parts, forecast anywhere.

    ``mode="tl"`` rotates subgraph epochs over ``source_parts`` (all parts by
    default); ``mode="ss"`` trains on the single part ``source_parts[0]``.
    """

    def __init__(self, n_parts=4, source_parts=None, mode="tl", balance_tol=0.10, overlap_hops=0,
                 pad_size=None, partition_seed=0, P=12, Q=12, K=2, L=2, R=16, batch_size=64, epochs=30,
                 lr=0.01, lr_decay=0.1, decay_epochs=(20,), max_grad_norm=5.0,
                 scheduled_sampling=False, sampling_decay_steps=2000.0, split=(0.7, 0.1, 0.2), seed=0):
        self.n_parts = n_parts
        self.source_parts = source_parts
        self.mode = mode
        self.balance_tol = balance_tol
        self.overlap_hops = overlap_hops
        self.pad_size = pad_size
        self.partition_seed = partition_seed
        self.P = P
        self.Q = Q
        self.K = K
        self.L = L
        self.R = R
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_epochs = decay_epochs
        self.max_grad_norm = max_grad_norm
        self.scheduled_sampling = scheduled_sampling
        self.sampling_decay_steps = sampling_decay_steps
        self.split = split
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, P=self.P, Q=self.Q, epochs=self.epochs, lr=self.lr,
                           lr_decay=self.lr_decay, decay_epochs=tuple(self.decay_epochs),
                           max_grad_norm=self.max_grad_norm, K=self.K, L=self.L, R=self.R, seed=self.seed,
                           scheduled_sampling=self.scheduled_sampling,
                           sampling_decay_steps=self.sampling_decay_steps)

    def _validate(self):
        if self.mode not in ("tl", "ss"):
            raise ConfigError(f"mode must be 'tl' or 'ss', got {self.mode!r}")
        if self.n_parts < 1:
            raise ConfigError("n_parts must be positive")
        if self.pad_size is not None and self.pad_size < 1:
            raise ConfigError("pad_size must be positive")

    def fit(self, X: TimeSeriesFrame, y=None, graph: SensorGraph | None = None):
        self._validate()
        _check_inputs(X, graph)
        cfg = self.train_config()
        frame = impute_missing(X)
        assignment = kway_partition(graph, self.n_parts, self.balance_tol, self.partition_seed)
        parts = list(range(self.n_parts)) if self.source_parts is None else list(self.source_parts)
        if self.mode == "ss":
            parts = parts[:1]
        splits = split_by_time(frame, self.split)
        src = [nid for p in parts for nid in assignment.members(p)]
        scaler = SpeedScaler().fit(splits[0].select_nodes(src))
        largest = max(extract_subgraph(graph, assignment, p, self.overlap_hops).real_count for p in parts)
        n = self.pad_size or largest
        datasets = partition_datasets(graph, assignment, parts, splits, scaler, n, cfg.P, cfg.Q,
                                      self.overlap_hops)
        result = fit_tl(datasets, cfg) if self.mode == "tl" else fit_ss(datasets[0], cfg)
        self.assignment_ = assignment
        self.scaler_ = scaler
        self.n_ = n
        self.result_ = result
        self.params_ = result.params
        self.datasets_ = datasets
        return self

    def predict(self, X: TimeSeriesFrame, graph: SensorGraph, k: int = 1) -> np.ndarray:
        """Forecasts [S, Q, N] for every window of ``X``, nodes in ``graph.node_ids`` order."""
        check_is_fitted(self, "params_")
        _check_inputs(X, graph)
        uf = infer_unseen(self.params_, self.scaler_, graph, k, impute_missing(X), self.n_, self.train_config(),
                          self.partition_seed, self.balance_tol, self.overlap_hops)
        return uf.forecasts

    def predict_next(self, X: TimeSeriesFrame, graph: SensorGraph, k: int = 1):
        """(timestamps [Q], forecasts [Q, N]) following the last ``P`` rows of ``X``."""
        check_is_fitted(self, "params_")
        _check_inputs(X, graph)
        return forecast_next(self.params_, self.scaler_, graph, k, impute_missing(X), self.n_,
                             self.train_config(), self.partition_seed, self.balance_tol, self.overlap_hops)
