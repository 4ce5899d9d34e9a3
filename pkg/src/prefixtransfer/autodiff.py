"""Reverse-mode automatic differentiation on an explicit gradient tape.

Tensors are dense numpy arrays with an optional gradient slot. Ops record
onto the innermost active ``GradientTape``; ``backward()`` replays the tape
once in reverse and then marks it consumed. Training runs in float32; wrap
code in ``check_mode()`` to build float64 tensors for finite-difference
verification.

Every op checks that its output is finite and raises ``NumericsError``
otherwise, so a NaN/Inf can never propagate silently.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericsError, ShapeError, StateError

_DTYPE = np.float32
_TAPES: list["GradientTape"] = []


def default_dtype():
    """dtype for newly created tensors (float32, float64 in check mode)."""
    return _DTYPE


@contextmanager
def check_mode():
    """Temporarily build float64 tensors (for gradient verification)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = previous


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible PRNG stream keyed by (seed, name)."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    scale = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-scale, scale, size=shape).astype(default_dtype())


class Tensor:
    """Dense n-d array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=default_dtype())
        if arr.size and not np.isfinite(arr).all():
            raise NumericsError(f"tensor {name or '<anonymous>'} holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class GradientTape:
    """Ordered record of ops; supports exactly one backward pass."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def _active_tape() -> GradientTape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(op_name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if out_data.size and not np.isfinite(out_data).all():
        raise NumericsError(f"{op_name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable requires_grad leaf; consume the tape."""
    tape = loss._tape
    if tape is None:
        raise StateError("loss is not the output of a live gradient tape")
    if tape._consumed:
        raise StateError("backward already ran for this tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape._consumed = True
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        grad_out = flowing.pop(id(out), None)
        if grad_out is None:
            continue
        for tensor, grad in zip(inputs, backward_fn(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor._tape is tape:
                seen = flowing.get(id(tensor))
                flowing[id(tensor)] = grad if seen is None else seen + grad
            else:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


def zero_grad(params: Iterable[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# ops


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")

    def backward_fn(g):
        return g, g

    return _emit("add", a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g * bd, g * ad

    return _emit("mul", ad * bd, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _emit("scale", x.data * factor, (x,), backward_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias with bias broadcast over all leading dimensions."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit last dim of {x.shape}")
    width = bias.shape[0]

    def backward_fn(g):
        return g, g.reshape(-1, width).sum(axis=0)

    return _emit("add_bias", x.data + bias.data, (x, bias), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", ad @ bd, (a, b), backward_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product over identical leading dimensions."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"bmm expects stacked operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return np.matmul(g, bd.swapaxes(-1, -2)), np.matmul(ad.swapaxes(-1, -2), g)

    return _emit("bmm", np.matmul(ad, bd), (a, b), backward_fn)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of axes of {x.shape}")
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _emit("permute", np.transpose(x.data, axes), (x,), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {old} -> {shape}: {exc}") from None

    def backward_fn(g):
        return (g.reshape(old),)

    return _emit("reshape", out, (x,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one input")
    sizes = [p.shape[axis] for p in parts]
    offsets = list(np.cumsum(sizes))[:-1]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _emit("concat", out, tuple(parts), backward_fn)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    full_shape = x.shape

    def backward_fn(g):
        grad = np.zeros(full_shape, dtype=g.dtype)
        grad[index] = g
        return (grad,)

    return _emit("slice", x.data[index], (x,), backward_fn)


def expand_batch(x: Tensor, repeats: int) -> Tensor:
    """Replicate x along a new leading axis (broadcast view in forward)."""
    if repeats < 0:
        raise ShapeError(f"expand_batch: negative repeat count {repeats}")
    out = np.broadcast_to(x.data, (repeats,) + x.shape)

    def backward_fn(g):
        return (g.sum(axis=0),)

    return _emit("expand_batch", out, (x,), backward_fn)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id outside table of {table.shape[0]} rows "
            f"(min={ids.min()}, max={ids.max()})"
        )
    width = table.shape[1]
    table_shape = table.shape

    def backward_fn(g):
        grad = np.zeros(table_shape, dtype=g.dtype)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, width))
        return (grad,)

    return _emit("embedding", table.data[ids], (table,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _emit("relu", np.maximum(x.data, 0), (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", out, (x,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit last dim {width}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gain_data = gain.data

    def backward_fn(g):
        dgain = (g * xhat).reshape(-1, width).sum(axis=0)
        dbias = g.reshape(-1, width).sum(axis=0)
        gy = g * gain_data
        dx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _emit("layer_norm", xhat * gain_data + bias.data, (x, gain, bias), backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate == 0 or no rng is supplied."""
    if rate < 0 or rate >= 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    mask = keep / np.asarray(1.0 - rate, dtype=x.data.dtype)

    def backward_fn(g):
        return (g * mask,)

    return _emit("dropout", x.data * mask, (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward_fn)


def cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: [n, vocab]; targets: n integer ids. Positions whose target is
    ``pad_id`` contribute nothing; if every position is padding, that is a
    DataError (the loss would be empty).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [n, vocab] logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {t.shape} targets for {logits.shape[0]} rows")
    vocab = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise ShapeError(f"cross_entropy: target id outside vocab of {vocab}")
    live = t != pad_id
    n_live = int(live.sum())
    if n_live == 0:
        raise DataError("cross_entropy: every target position is padding")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(t.shape[0])
    nll = (lse[:, 0] - z[rows, t]) * live
    probs = np.exp(z - lse)

    def backward_fn(g):
        grad = probs.copy()
        grad[rows, t] -= 1.0
        grad *= (live * (g / n_live))[:, None]
        return (grad,)

    out = np.asarray(nll.sum() / n_live, dtype=logits.data.dtype)
    return _emit("cross_entropy", out, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment arrays plus the shared step counter."""

    def __init__(self, params, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0.0 < beta1 < 1.0) or not (0.0 < beta2 < 1.0):
            raise ConfigError(f"adam betas must lie in (0, 1), got {beta1}, {beta2}")
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        params = list(params)
        self.learning_rate = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update, applied in registration order."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params:
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if name not in state.m:
            raise StateError(f"parameter {name!r} unknown to this optimizer state")
        if p.grad.shape != p.data.shape:
            raise StateError(f"parameter {name!r}: gradient shape {p.grad.shape} mismatch")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
