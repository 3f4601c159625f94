"""Dense-tensor arithmetic with tape-based reverse-mode gradients.

Just enough of a deep-learning substrate to train the denoiser: float32
tensors over numpy, a gradient tape, a handful of primitives with analytic
backward rules, an adaptive-moment optimizer with linear warmup, and a
seeded Gaussian sampler.  Single-threaded and deterministic by design.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the dtype of newly created tensors.

    float32 is the production default; float64 exists so finite-difference
    verification is not drowned in single-precision rounding noise.
    """
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN/Inf values."""


# The active tape, if any.  Tapes do not nest.
_ACTIVE_TAPE: "GradTape | None" = None


class Tensor:
    """Immutable dense value.  ``data`` is never written after construction,
    except for trainable parameters whose storage is replaced wholesale by
    the optimizer between tape lifetimes.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, "GradTape"], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar; constants are promoted to plain tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def parameter(data, name: str, dtype=None) -> Tensor:
    """A named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class GradTape:
    """Records primitive ops so gradients can be replayed in reverse.

    Usage::

        with GradTape() as tape:
            loss = ...            # composed primitives
        grads = tape.gradients(loss)
        g = grads[some_parameter]

    Creation order of recorded nodes is a topological order of the compute
    graph, so reverse iteration is a valid reverse-topological sweep.  A tape
    is confined to one thread and is not reentrant.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("GradTape does not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _record(self, out: Tensor) -> None:
        self.nodes.append(out)

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        if g.shape != t.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {t.data.shape}"
            )
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g

    def gradients(self, loss: Tensor) -> "Gradients":
        """Reverse sweep from a scalar loss; returns per-tensor gradients."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self.nodes:
            raise ValueError("tape is empty")
        self._grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = self._grads.get(id(node))
            if g is None or node._backward is None:
                continue
            node._backward(g, self)
        return Gradients(self._grads)


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, table: dict[int, np.ndarray]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table

    def of(self, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self[p] for name, p in params.items()}


def _needs_tape(*tensors: Tensor) -> bool:
    if _ACTIVE_TAPE is None:
        return False
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _finish(out: Tensor, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray, GradTape], None] | None,
            op: str, check_finite: bool = True) -> Tensor:
    if check_finite and not np.isfinite(out.data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    if _ACTIVE_TAPE is not None and backward is not None and _needs_tape(*parents):
        out._parents = parents
        out._backward = backward
        _ACTIVE_TAPE._record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to the operand's original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, _unbroadcast(g, a.shape))
        tape._accumulate(b, _unbroadcast(g, b.shape))

    return _finish(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, _unbroadcast(g, a.shape))
        tape._accumulate(b, _unbroadcast(-g, b.shape))

    return _finish(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, _unbroadcast(g * b.data, a.shape))
        tape._accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _finish(out, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, _unbroadcast(g / b.data, a.shape))
        tape._accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _finish(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, -g)

    return _finish(out, (a,), backward, "neg")


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * (2.0 * a.data))

    return _finish(out, (a,), backward, "square")


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * (0.5 / out.data))

    return _finish(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * out.data)

    return _finish(out, (a,), backward, "exp")


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * (a.data > 0).astype(a.data.dtype))

    return _finish(out, (a,), backward, "relu")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x); the smooth nonlinearity used throughout the model."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * sig, dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _finish(out, (a,), backward, "silu")


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g * (1.0 - out.data * out.data))

    return _finish(out, (a,), backward, "tanh")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batch dims broadcast per numpy matmul semantics."""
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: operands must have ndim >= 1, got {a.shape} @ {b.shape}")
    if a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data), dtype=a.data.dtype)

    def backward(g, tape):
        ad, bd = a.data, b.data
        if ad.ndim == 1:
            ad = ad[None, :]
        if bd.ndim == 1:
            bd = bd[:, None]
        gm = g
        if a.ndim == 1 and b.ndim == 1:
            gm = g.reshape(1, 1)
        elif a.ndim == 1:
            gm = np.expand_dims(g, -2)
        elif b.ndim == 1:
            gm = np.expand_dims(g, -1)
        ga = np.matmul(gm, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), gm)
        if a.ndim == 1:
            ga = np.squeeze(ga, -2)
        if b.ndim == 1:
            gb = np.squeeze(gb, -1)
        tape._accumulate(a, _unbroadcast(ga, a.shape))
        tape._accumulate(b, _unbroadcast(gb, b.shape))

    return _finish(out, (a, b), backward, "matmul")


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose_last: need ndim >= 2, got {a.shape}")
    out = Tensor(np.swapaxes(a.data, -1, -2), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, np.swapaxes(g, -1, -2))

    return _finish(out, (a,), backward, "transpose_last")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, g.reshape(a.shape))

    return _finish(out, (a,), backward, "reshape")


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: leading shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), dtype=a.data.dtype)
    na = a.shape[-1]

    def backward(g, tape):
        tape._accumulate(a, g[..., :na])
        tape._accumulate(b, g[..., na:])

    return _finish(out, (a, b), backward, "concat_last")


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return _finish(out, (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.mean(a.data), dtype=a.data.dtype)
    n = a.data.size

    def backward(g, tape):
        tape._accumulate(a, np.broadcast_to(g / n, a.shape).astype(a.data.dtype))

    return _finish(out, (a,), backward, "mean_all")


def mean_last(a: Tensor, keepdims: bool = True) -> Tensor:
    out = Tensor(np.mean(a.data, axis=-1, keepdims=keepdims), dtype=a.data.dtype)
    n = a.shape[-1]

    def backward(g, tape):
        gg = g if keepdims else np.expand_dims(g, -1)
        tape._accumulate(a, np.broadcast_to(gg / n, a.shape).astype(a.data.dtype))

    return _finish(out, (a,), backward, "mean_last")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    n = a.shape[axis]

    def backward(g, tape):
        gg = g if keepdims else np.expand_dims(g, axis)
        tape._accumulate(a, np.broadcast_to(gg / n, a.shape).astype(a.data.dtype))

    return _finish(out, (a,), backward, "mean_axis")


def expand_dims(a: Tensor, axis: int) -> Tensor:
    out = Tensor(np.expand_dims(a.data, axis), dtype=a.data.dtype)

    def backward(g, tape):
        tape._accumulate(a, np.squeeze(g, axis=axis))

    return _finish(out, (a,), backward, "expand_dims")


def softmax(a: Tensor, exclude: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with hard-exclusion mask semantics.

    ``exclude`` is a boolean array broadcastable to ``a.shape``; excluded
    slots receive exactly zero weight (equivalent to a -inf logit).  -inf
    values already present in ``a`` are honoured the same way.  A row with
    every slot excluded is defined as uniform, and a warning is logged --
    this prevents NaN from an all-masked attention row.
    """
    x = a.data
    if exclude is not None:
        excl = np.broadcast_to(np.asarray(exclude, dtype=bool), x.shape)
        x = np.where(excl, -np.inf, x)
    finite_any = np.isfinite(x).any(axis=-1, keepdims=True)
    if not finite_any.all():
        log.warning("softmax: fully masked row(s); falling back to uniform weights")
    m = np.max(np.where(np.isfinite(x), x, -np.inf), axis=-1, keepdims=True)
    m = np.where(finite_any, m, 0.0)
    e = np.exp(np.where(np.isfinite(x), x - m, -np.inf))
    e = np.where(np.isfinite(e), e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    uniform = np.full_like(e, 1.0 / x.shape[-1])
    p = np.where(finite_any, e / np.where(denom == 0.0, 1.0, denom), uniform)
    out = Tensor(p.astype(a.data.dtype), dtype=a.data.dtype)

    def backward(g, tape):
        pd = out.data
        dot = np.sum(g * pd, axis=-1, keepdims=True)
        tape._accumulate(a, (pd * (g - dot)).astype(a.data.dtype))

    return _finish(out, (a,), backward, "softmax")


def unfold(a: Tensor, k: int, stride: int = 1) -> Tensor:
    """Sliding windows of width ``k`` (step ``stride``) over the last axis.

    (..., L) -> (..., n, k) with n = (L-k)//stride + 1; the building block
    for 1-D convolutions (unfold then matmul against the filter matrix).
    """
    L = a.shape[-1]
    if k < 1 or k > L:
        raise ShapeError(f"unfold: window {k} invalid for length {L}")
    if stride < 1:
        raise ShapeError(f"unfold: stride must be >= 1, got {stride}")
    n = (L - k) // stride + 1
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(k)[None, :]
    out = Tensor(a.data[..., idx], dtype=a.data.dtype)

    def backward(g, tape):
        ga = np.zeros(a.shape, dtype=a.data.dtype)
        flat = ga.reshape(-1, L)
        gflat = g.reshape(-1, n, k)
        # for fixed j the window positions are distinct, so += is safe
        for j in range(k):
            flat[:, starts + j] += gflat[:, :, j]
        tape._accumulate(a, ga)

    return _finish(out, (a,), backward, "unfold")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; composed from primitives so the
    gradient falls out of the tape."""
    m = mean_last(a, keepdims=True)
    centered = sub(a, m)
    var = mean_last(square(centered), keepdims=True)
    inv = div(constant(np.array(1.0, dtype=a.data.dtype)),
              sqrt(add(var, constant(np.array(eps, dtype=a.data.dtype)))))
    return add(mul(mul(centered, inv), gain), bias)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state with linear learning-rate warmup.

    Effective learning rate at step t is ``lr * min(1, t / warmup)``.
    """

    lr: float
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, self.step / self.warmup)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> OptimizerState:
    """One in-place adaptive-moment update over named parameters."""
    state.step += 1
    lr = state.effective_lr()
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"optimizer_step: gradient shape {g.shape} does not match "
                f"parameter {name!r} shape {p.data.shape}"
            )
        if not np.isfinite(g).all():
            raise NonFiniteError(f"optimizer_step: non-finite gradient for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
        g64 = g.astype(np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g64
        v = state.beta2 * v + (1.0 - state.beta2) * (g64 * g64)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        upd = lr * mhat / (np.sqrt(vhat) + state.eps)
        p.data = (p.data.astype(np.float64) - upd).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# random
# ---------------------------------------------------------------------------

def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """A deterministic generator for (seed, stream...) tuples."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + stream)))


def seeded_gaussian(shape: Sequence[int] | int, seed: int, dtype=None) -> Tensor:
    """Standard-normal tensor, bit-deterministic for (shape, seed, dtype)."""
    dt = dtype if dtype is not None else _DEFAULT_DTYPE
    gen = np.random.Generator(np.random.PCG64(seed))
    data = gen.standard_normal(size=shape, dtype=np.float64).astype(dt)
    return Tensor(data, dtype=dt)


def gaussian_array(gen: np.random.Generator, shape, dtype=None) -> np.ndarray:
    dt = dtype if dtype is not None else _DEFAULT_DTYPE
    return gen.standard_normal(size=shape, dtype=np.float64).astype(dt)


# ---------------------------------------------------------------------------
# verification helpers
# ---------------------------------------------------------------------------

def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g
