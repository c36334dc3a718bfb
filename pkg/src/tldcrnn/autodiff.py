"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the active :class:`Tape` (entered as a context
manager). Only the primitives needed by the DCGRU encoder-decoder exist here;
there is no general broadcasting beyond trailing-axis bias addition.

Example
-------
>>> w = Tensor(np.ones((2, 2)), requires_grad=True)
>>> with Tape() as tape:
...     loss = reduce_mean_abs(matmul(Tensor(np.eye(2)), w))
>>> grads = tape.gradient(loss, [w])
"""
from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "SparseMatrix",
    "Tape",
    "ShapeError",
    "NumericalError",
    "matmul",
    "block_matmul",
    "spmm",
    "add",
    "sub",
    "hadamard",
    "concat",
    "stack",
    "transpose",
    "slice_axis",
    "sigmoid",
    "tanh",
    "scalar_mul",
    "one_minus",
    "reduce_mean_abs",
    "backward",
    "global_norm",
    "clip_global_norm",
    "AdamState",
    "adam_update",
    "save_checkpoint",
    "load_checkpoint",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NumericalError(FloatingPointError):
    """A NaN or Inf reached a place where it is not admitted."""


class Tensor:
    """Dense float64 array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


class SparseMatrix:
    """Immutable sparse matrix with sorted, unique, nonzero triplets.

    Backed by CSR storage; multiplication never densifies the matrix.
    """

    __slots__ = ("_csr", "_csr_t")

    def __init__(self, matrix):
        csr = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        csr.eliminate_zeros()
        csr.sum_duplicates()
        csr.sort_indices()
        self._csr = csr
        self._csr_t = csr.T.tocsr()

    @classmethod
    def from_triplets(cls, rows: int, cols: int, triplets: Iterable[tuple[int, int, float]]):
        trip = list(triplets)
        if not trip:
            return cls(sp.csr_matrix((rows, cols)))
        r, c, v = zip(*trip)
        return cls(sp.coo_matrix((v, (r, c)), shape=(rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(sp.identity(n, format="csr"))

    @property
    def shape(self) -> tuple[int, int]:
        return self._csr.shape

    @property
    def rows(self) -> int:
        return self._csr.shape[0]

    @property
    def cols(self) -> int:
        return self._csr.shape[1]

    @property
    def nnz(self) -> int:
        return self._csr.nnz

    @property
    def triplets(self) -> list[tuple[int, int, float]]:
        coo = self._csr.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return [(int(coo.row[i]), int(coo.col[i]), float(coo.data[i])) for i in order]

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr.copy()

    def toarray(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self._csr_t)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._csr.sum(axis=1)).ravel()

    def apply(self, x: np.ndarray, transpose: bool = False) -> np.ndarray:
        """Multiply along axis 0 of ``x`` (node-major: [n, ...])."""
        m = self._csr_t if transpose else self._csr
        if x.ndim == 2:
            return m @ x
        out = m @ x.reshape(x.shape[0], -1)
        return out.reshape((m.shape[0],) + x.shape[1:])


class Tape:
    """Ordered record of primitive applications for reverse-mode replay."""

    _active: list["Tape"] = []

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._active.remove(self)

    def __len__(self) -> int:
        return len(self._entries)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._active[-1] if cls._active else None

    def record(self, out: Tensor, inputs: tuple, adjoint: Callable) -> None:
        self._entries.append((out, inputs, adjoint))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``params``; zeros for untouched ones."""
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if not any(entry[0] is loss for entry in reversed(self._entries)):
            raise RuntimeError("loss was not produced on this tape; run the forward pass first")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # arrays we allocated ourselves may be accumulated into in place
        owned: set[int] = set()
        for out, inputs, adjoint in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, contrib in zip(inputs, adjoint(g)):
                if contrib is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key not in grads:
                    grads[key] = contrib
                elif key in owned:
                    grads[key] += contrib
                else:
                    grads[key] = grads[key] + contrib
                    owned.add(key)
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return tape.gradient(loss, params)


def _emit(data: np.ndarray, inputs: tuple, adjoint: Callable) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = Tape.current()
    if needs and tape is not None:
        tape.record(out, inputs, adjoint)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitives ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, r]``; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    lead = ad.shape[:-1]
    a2 = ad.reshape(-1, ad.shape[-1])

    def adjoint(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _emit((a2 @ bd).reshape(lead + (bd.shape[1],)), (a, b), adjoint)


def block_matmul(a, w) -> Tensor:
    """Sum of per-block products: ``a`` is [J*n, ..., F], ``w`` is [J*F, R].

    Block ``j`` of ``a`` (rows ``j*n .. (j+1)*n`` on the leading axis) meets
    rows ``j*F .. (j+1)*F`` of ``w``. Equivalent to concatenating the blocks
    along the feature axis and calling :func:`matmul`, without the copy.
    """
    a, w = _as_tensor(a), _as_tensor(w)
    f = a.shape[-1]
    if w.ndim != 2 or w.shape[0] % f or a.shape[0] % (w.shape[0] // f):
        raise ShapeError(f"block_matmul shape mismatch: {a.shape} with {w.shape}")
    j = w.shape[0] // f
    lead = (a.shape[0] // j,) + a.shape[1:-1]
    a3 = a.data.reshape(j, -1, f)
    w3 = w.data.reshape(j, f, w.shape[1])

    def adjoint(g):
        g2 = g.reshape(1, -1, g.shape[-1])
        ga = np.matmul(g2, w3.transpose(0, 2, 1)).reshape(a.shape) if a.requires_grad else None
        gw = np.matmul(a3.transpose(0, 2, 1), g2).reshape(w.shape) if w.requires_grad else None
        return ga, gw

    out = np.matmul(a3, w3).sum(axis=0).reshape(lead + (w.shape[1],))
    return _emit(out, (a, w), adjoint)


def spmm(s: SparseMatrix, x) -> Tensor:
    """Sparse ``s`` applied along the leading (node) axis of ``x``."""
    x = _as_tensor(x)
    if x.ndim < 2 or x.shape[0] != s.cols:
        raise ShapeError(f"spmm shape mismatch: {s.shape} x {x.shape}")

    def adjoint(g):
        return (s.apply(g, transpose=True),)

    return _emit(s.apply(x.data), (x,), adjoint)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad transpose axes {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def adjoint(g):
        return (g.transpose(inverse),)

    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), adjoint)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def _check_bias(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op} shape mismatch: {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may match only the trailing axes of ``a`` (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias(a, b, "add")

    def adjoint(g):
        return g, _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias(a, b, "sub")

    def adjoint(g):
        return g, -_unbroadcast(g, b.shape)

    return _emit(a.data - b.data, (a, b), adjoint)


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shape mismatch: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def adjoint(g):
        return g * bd, g * ad

    return _emit(ad * bd, (a, b), adjoint)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    ref = ts[0]
    ax = axis % ref.ndim
    for t in ts[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat shape mismatch: {ref.shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def adjoint(g):
        index = [slice(None)] * g.ndim
        parts = []
        for i in range(len(ts)):
            index[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(index)])
        return tuple(parts)

    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts, adjoint)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack shape mismatch: {ts[0].shape} and {t.shape}")

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit(np.stack([t.data for t in ts], axis=axis), ts, adjoint)


def slice_axis(a, start: int, stop: int, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {ax} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def adjoint(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(a.data[index].copy(), (a,), adjoint)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def adjoint(g):
        return (g * s * (1.0 - s),)

    return _emit(s, (a,), adjoint)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)

    def adjoint(g):
        return (g * (1.0 - t * t),)

    return _emit(t, (a,), adjoint)


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)

    def adjoint(g):
        return (g * c,)

    return _emit(a.data * c, (a,), adjoint)


def one_minus(a) -> Tensor:
    a = _as_tensor(a)

    def adjoint(g):
        return (-g,)

    return _emit(1.0 - a.data, (a,), adjoint)


def reduce_mean_abs(a, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean of ``|a|``: ``sum(w|a|) / sum(w)``; subgradient 0 at 0."""
    a = _as_tensor(a)
    if weights is None:
        w = np.ones_like(a.data)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), a.shape)
    total = w.sum()
    if total <= 0:
        raise ValueError("reduce_mean_abs needs positive total weight")
    sign = np.sign(a.data)

    def adjoint(g):
        return (g * w * sign / total,)

    return _emit(np.array((w * np.abs(a.data)).sum() / total), (a,), adjoint)


# -- optimisation -------------------------------------------------------------


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], threshold: float) -> tuple[list[np.ndarray], float]:
    """Rescale so the joint L2 norm is at most ``threshold``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class AdamState:
    """First/second moment buffers plus step count."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def copy(self) -> "AdamState":
        new = AdamState.__new__(AdamState)
        new.m = [x.copy() for x in self.m]
        new.v = [x.copy() for x in self.v]
        new.t = self.t
        return new


def adam_update(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, applied in place to ``params``."""
    if len(params) != len(state.m):
        raise ShapeError("optimizer state does not match parameter list")
    b1, b2 = betas
    t = state.t + 1
    new_values = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state shape {m.shape} != parameter {p.shape}")
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        m_hat = m_new / (1 - b1**t)
        v_hat = v_new / (1 - b2**t)
        value = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite update for parameter {p.name or '?'} at step {t}")
        new_values.append((value, m_new, v_new))
    for i, (p, (value, m_new, v_new)) in enumerate(zip(params, new_values)):
        p.data = value
        state.m[i] = m_new
        state.v[i] = v_new
    state.t = t


# -- checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"DCP1"


def save_checkpoint(path, named: Sequence[tuple[str, np.ndarray]]) -> None:
    """Write named float64 tensors: magic, count, then (name, dims, payload) records."""
    chunks = [_CKPT_MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a DCP1 checkpoint")
    try:
        return _parse_checkpoint(buf, path)
    except struct.error:
        raise ValueError(f"{path}: truncated checkpoint") from None


def _parse_checkpoint(buf: bytes, path) -> list[tuple[str, np.ndarray]]:
    pos = 4
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        if pos + 8 * size > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
        out.append((name, arr))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out
