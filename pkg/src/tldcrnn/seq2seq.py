"""Encoder-decoder over stacked DCGRU layers, masked MAE loss and one training step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, ShapeError, Tape, Tensor
from .dcgru import DCGRUCellParams, stack_layers
from .graph import TransitionPair


@dataclass
class ModelParameters:
    """All encoder/decoder weights.

    Flat order (checkpoints, gradient checks): encoder layers bottom-up, then
    decoder layers bottom-up, each as reset/update/candidate weight+bias, then
    ``projection.weight`` and ``projection.bias``.
    """

    encoder: list[DCGRUCellParams]
    decoder: list[DCGRUCellParams]
    proj_weight: Tensor
    proj_bias: Tensor

    @property
    def hidden(self) -> int:
        return self.encoder[0].hidden

    @property
    def n_layers(self) -> int:
        return len(self.encoder)

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int = 2, hidden: int = 16, K: int = 2,
             layers: int = 2, decoder_input_dim: int = 2, output_dim: int = 1) -> "ModelParameters":
        enc = [DCGRUCellParams.init(rng, input_dim if i == 0 else hidden, hidden, K) for i in range(layers)]
        dec = [DCGRUCellParams.init(rng, decoder_input_dim if i == 0 else hidden, hidden, K) for i in range(layers)]
        limit = np.sqrt(6.0 / (hidden + output_dim))
        w = Tensor(rng.uniform(-limit, limit, size=(hidden, output_dim)), requires_grad=True)
        b = Tensor(np.zeros(output_dim), requires_grad=True)
        return cls(enc, dec, w, b)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.encoder):
            out += layer.named_parameters(f"encoder.{i}.")
        for i, layer in enumerate(self.decoder):
            out += layer.named_parameters(f"decoder.{i}.")
        out += [("projection.weight", self.proj_weight), ("projection.bias", self.proj_bias)]
        for name, t in out:
            t.name = name
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> list[tuple[str, np.ndarray]]:
        return [(name, t.data.copy()) for name, t in self.named_parameters()]

    def load_state_dict(self, state) -> None:
        current = self.named_parameters()
        state = list(state)
        if [n for n, _ in state] != [n for n, _ in current]:
            raise ValueError("state names do not match model layout")
        for (name, t), (_, arr) in zip(current, state):
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))


@dataclass
class ForecastBatch:
    predictions: Tensor
    mask: np.ndarray


def _zero_states(params: ModelParameters, batch: int, n: int) -> list[Tensor]:
    return [Tensor(np.zeros((n, batch, params.hidden))) for _ in range(params.n_layers)]


def encode(inputs: np.ndarray, params: ModelParameters, supports: TransitionPair) -> list[Tensor]:
    """Run the encoder over ``inputs`` [B, P, n, F] from zero state.

    Returned states are node-major, [n, B, R].
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4:
        raise ShapeError(f"encoder inputs must be [B, P, n, F], got {inputs.shape}")
    b, p, n, f = inputs.shape
    if n != supports.n_nodes:
        raise ShapeError(f"inputs have {n} nodes, supports have {supports.n_nodes}")
    states = _zero_states(params, b, n)
    steps = np.ascontiguousarray(inputs.transpose(1, 2, 0, 3))
    for t in range(p):
        states, _ = stack_layers(Tensor(steps[t]), states, params.encoder, supports)
    return states


def decode(
    states: list[Tensor],
    Q: int,
    params: ModelParameters,
    supports: TransitionPair,
    target_time_of_day: np.ndarray,
    teacher: np.ndarray | None = None,
    sampling_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    node_mask: np.ndarray | None = None,
) -> ForecastBatch:
    """Roll the decoder forward ``Q`` steps from a zero GO frame.

    At each step after the first the speed input is the teacher frame with
    probability ``sampling_prob``, otherwise the previous prediction. The
    target step's time of day rides along as a second input channel.
    """
    n, b, _ = states[0].shape
    if teacher is None and sampling_prob > 0:
        raise ValueError("sampling_prob > 0 needs a teacher sequence")
    if teacher is not None and teacher.shape != (b, Q, n, 1):
        raise ShapeError(f"teacher must be {(b, Q, n, 1)}, got {teacher.shape}")
    tod = np.asarray(target_time_of_day, dtype=np.float64)
    if tod.shape != (b, Q):
        raise ShapeError(f"target_time_of_day must be {(b, Q)}, got {tod.shape}")
    mask = np.ones(n, dtype=bool) if node_mask is None else np.asarray(node_mask, dtype=bool)
    # node-major per step: [Q, n, B, 1]
    clock = tod.T[:, None, :, None] * mask[None, :, None, None]
    teacher_nm = None if teacher is None else np.ascontiguousarray(teacher.transpose(1, 2, 0, 3))
    prev = Tensor(np.zeros((n, b, 1)))
    outputs = []
    for q in range(Q):
        step_in = ad.concat([prev, Tensor(clock[q])], axis=-1)
        states, top = stack_layers(step_in, states, params.decoder, supports)
        out = ad.add(ad.matmul(top, params.proj_weight), params.proj_bias)
        outputs.append(out)
        use_teacher = teacher is not None and (
            sampling_prob >= 1.0 or (sampling_prob > 0 and rng is not None and rng.random() < sampling_prob)
        )
        prev = Tensor(teacher_nm[q]) if use_teacher else out
    return ForecastBatch(ad.transpose(ad.stack(outputs, axis=0), (2, 0, 1, 3)), mask)


def forward(params, inputs, supports, target_time_of_day, Q, teacher=None, sampling_prob=0.0,
            rng=None, node_mask=None) -> ForecastBatch:
    states = encode(inputs, params, supports)
    return decode(states, Q, params, supports, target_time_of_day, teacher, sampling_prob, rng, node_mask)


def masked_mae(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean ``|pred - target|`` over unmasked nodes; ``pred`` is [B, Q, n, 1]."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pred.shape[2],):
        raise ShapeError(f"mask must have length {pred.shape[2]}, got {mask.shape}")
    if not mask.any():
        raise ValueError("mask excludes every node")
    weights = mask.astype(np.float64)[None, None, :, None]
    return ad.reduce_mean_abs(ad.sub(pred, Tensor(target)), weights)


@dataclass
class StepConfig:
    lr: float = 0.01
    max_grad_norm: float = 5.0
    sampling_prob: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    clipped: bool
    grads: list = field(default_factory=list, repr=False)


def train_step(batch, params: ModelParameters, opt_state: AdamState, config: StepConfig,
               supports: TransitionPair, loss_mask: np.ndarray, rng: np.random.Generator | None = None,
               node_mask: np.ndarray | None = None) -> StepResult:
    """Forward, masked MAE, backward, global-norm clip, Adam. Reports the pre-update loss."""
    Q = batch.targets.shape[1]
    plist = params.parameters()
    with Tape() as tape:
        fc = forward(params, batch.inputs, supports, batch.target_time_of_day, Q,
                     teacher=batch.targets, sampling_prob=config.sampling_prob, rng=rng,
                     node_mask=node_mask)
        loss = masked_mae(fc.predictions, batch.targets, loss_mask)
    value = float(loss.data)
    if not np.isfinite(value):
        times = batch.sample_start_times
        raise NumericalError(f"non-finite loss on batch starting {times[0]} .. {times[-1]}")
    grads = tape.gradient(loss, plist)
    grads, norm = ad.clip_global_norm(grads, config.max_grad_norm)
    ad.adam_update(plist, grads, opt_state, lr=config.lr, betas=config.betas, eps=config.eps)
    return StepResult(value, norm, norm > config.max_grad_norm, grads)
