"""Diffusion-convolutional GRU cell."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graph import TransitionPair

GATES = ("reset", "update", "candidate")


@dataclass
class DiffusionFilter:
    """Per-step, per-direction filters stacked into one ``[2K * F_in, R]`` block.

    Rows ``[2dF, (2d+1)F)`` hold the forward-walk weights for step ``d`` and
    the next ``F`` rows the reverse-walk weights. Both ``d = 0`` blocks act on
    the untouched signal.
    """

    weight: Tensor
    bias: Tensor
    K: int

    @property
    def input_dim(self) -> int:
        return self.weight.shape[0] // (2 * self.K)

    @property
    def output_dim(self) -> int:
        return self.weight.shape[1]

    def block(self, d: int, direction: str) -> np.ndarray:
        f = self.input_dim
        start = 2 * d * f + (0 if direction == "forward" else f)
        return self.weight.data[start:start + f]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, output_dim: int, K: int, bias: float = 0.0):
        if K < 1:
            raise ValueError("K must be at least 1")
        fan_in = 2 * K * input_dim
        limit = np.sqrt(6.0 / (fan_in + output_dim))
        w = rng.uniform(-limit, limit, size=(fan_in, output_dim))
        return cls(Tensor(w, requires_grad=True), Tensor(np.full(output_dim, bias), requires_grad=True), K)


@dataclass
class DCGRUCellParams:
    reset: DiffusionFilter
    update: DiffusionFilter
    candidate: DiffusionFilter

    @property
    def hidden(self) -> int:
        return self.candidate.output_dim

    @property
    def K(self) -> int:
        return self.candidate.K

    @property
    def input_dim(self) -> int:
        return self.candidate.input_dim - self.hidden

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden: int, K: int) -> "DCGRUCellParams":
        f = input_dim + hidden
        # gates start biased open, as in the reference DCRNN cell
        return cls(
            DiffusionFilter.init(rng, f, hidden, K, bias=1.0),
            DiffusionFilter.init(rng, f, hidden, K, bias=1.0),
            DiffusionFilter.init(rng, f, hidden, K, bias=0.0),
        )

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for gate in GATES:
            filt = getattr(self, gate)
            out.append((f"{prefix}{gate}.weight", filt.weight))
            out.append((f"{prefix}{gate}.bias", filt.bias))
        return out


def diffusion_features(x: Tensor, supports: TransitionPair, K: int) -> Tensor:
    """Walk terms ``[x; F x; R x; F^2 x; R^2 x; ...]`` stacked on the node axis.

    Signals are node-major: ``x`` is [n, F] or [n, B, F]; the result is
    [(2K-1) n, ..., F]. The identity term appears once; :func:`effective_weight`
    folds both ``d = 0`` filter blocks onto it.
    """
    if x.shape[0] != supports.n_nodes:
        raise ShapeError(f"signal has {x.shape[0]} nodes, supports have {supports.n_nodes}")
    if K == 1:
        return x
    terms = [x, ad.spmm(supports.stacked, x)]
    for _ in range(2, K):
        terms.append(ad.spmm(supports.block, terms[-1]))
    return ad.concat(terms, axis=0)


def effective_weight(filt: DiffusionFilter) -> Tensor:
    """``[(2K-1) F, R]`` weight matching :func:`diffusion_features`."""
    f = filt.input_dim
    w = filt.weight
    identity = ad.add(ad.slice_axis(w, 0, f, axis=0), ad.slice_axis(w, f, 2 * f, axis=0))
    if filt.K == 1:
        return identity
    return ad.concat([identity, ad.slice_axis(w, 2 * f, w.shape[0], axis=0)], axis=0)


def _apply(features: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.block_matmul(features, weight), bias)


def diffusion_conv(x: Tensor, filt: DiffusionFilter, supports: TransitionPair) -> Tensor:
    """Bidirectional K-step diffusion convolution of ``x`` ([n, F] or [n, B, F])."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != filt.input_dim:
        raise ShapeError(f"input has {x.shape[-1]} features, filter expects {filt.input_dim}")
    return _apply(diffusion_features(x, supports, filt.K), effective_weight(filt), filt.bias)


def dcgru_step(x_t, h_prev: Tensor, params: DCGRUCellParams, supports: TransitionPair) -> Tensor:
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if x_t.shape[:-1] != h_prev.shape[:-1] or h_prev.shape[-1] != params.hidden:
        raise ShapeError(f"cell input {x_t.shape} and state {h_prev.shape} do not conform")
    if x_t.shape[-1] != params.input_dim:
        raise ShapeError(f"cell expects {params.input_dim} input features, got {x_t.shape[-1]}")
    R = params.hidden
    feats = diffusion_features(ad.concat([x_t, h_prev], axis=-1), supports, params.K)
    # reset and update gates share one matmul
    w_ru = ad.concat([effective_weight(params.reset), effective_weight(params.update)], axis=1)
    b_ru = ad.concat([params.reset.bias, params.update.bias], axis=0)
    ru = ad.sigmoid(_apply(feats, w_ru, b_ru))
    r = ad.slice_axis(ru, 0, R)
    u = ad.slice_axis(ru, R, 2 * R)
    c = ad.tanh(diffusion_conv(ad.concat([x_t, ad.hadamard(r, h_prev)], axis=-1), params.candidate, supports))
    return ad.add(ad.hadamard(u, h_prev), ad.hadamard(ad.one_minus(u), c))


def stack_layers(
    x_t, hidden_states: Sequence[Tensor], layer_params: Sequence[DCGRUCellParams], supports: TransitionPair
) -> tuple[list[Tensor], Tensor]:
    """Advance every layer one step; returns the new states and the top output."""
    if len(layer_params) < 1 or len(hidden_states) != len(layer_params):
        raise ShapeError("need one hidden state per layer and at least one layer")
    new_states = []
    inp = x_t
    for h, p in zip(hidden_states, layer_params):
        inp = dcgru_step(inp, h, p, supports)
        new_states.append(inp)
    return new_states, inp
