"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the operator networks and their losses need are
provided. Every primitive is a plain function that computes its forward
value with numpy and, when a :class:`Tape` is active and any input requires
a gradient, records a vector-Jacobian closure on that tape.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(square(x))
    tape.backward(loss)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class GradientError(RuntimeError):
    """Raised for invalid backward calls or non-finite gradients."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], tuple]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. Use as a context manager; tapes nest, and only
    the innermost one records.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _tape()
    if needs and tape is not None:
        out.is_leaf = False
        tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss.is_leaf or not loss.requires_grad:
        raise GradientError("backward: loss was not produced on this tape from any trainable leaf")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    bm = b.data.T if transpose_b else b.data
    if a.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} and {b.shape} (transpose_b={transpose_b})")
    A = a.data

    def vjp(g):
        ga = g @ bm.T if a.requires_grad else None
        if not b.requires_grad:
            return ga, None
        gb = g.T @ A if transpose_b else A.T @ g
        return ga, gb

    return _result(A @ bm, (a, b), vjp)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis of ``x``."""
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")

    def vjp(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return g, gb

    return _result(x.data + bias.data, (x, bias), vjp)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_lastdim: leading shapes differ, {a.shape} vs {b.shape}")
    n = a.shape[-1]

    def vjp(g):
        return g[..., :n], g[..., n:]

    return _result(np.concatenate([a.data, b.data], axis=-1), (a, b), vjp)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    # ties route the gradient to the first operand
    _check_same("maximum", a, b)
    pick_a = a.data >= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_same("minimum", a, b)
    pick_a = a.data <= b.data
    return _result(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    on = x.data > 0
    factor = np.where(on, 1.0, slope)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    X = x.data
    return _result(np.log(X), (x,), lambda g: (g / X,))


def square(x: Tensor) -> Tensor:
    X = x.data
    return _result(X * X, (x,), lambda g: (2.0 * g * X,))


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis.

    The gradient at an exactly-zero row is taken as zero (a subgradient).
    """
    X = x.data
    n = np.sqrt(np.sum(X * X, axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[..., None], X / safe[..., None], 0.0) * g[..., None],)

    return _result(n, (x,), vjp)


def bce_with_logits(scores: Tensor, targets, weights=None) -> Tensor:
    """Per-sample binary cross-entropy summed over classes.

    ``targets`` may be soft (entries in [0, 1]). ``weights`` is an optional
    per-class multiplier (used to restrict the loss to a label subset).
    Uses ``softplus(s) - l*s``, which is finite for every finite score.
    """
    S = scores.data
    T = np.asarray(targets, dtype=DTYPE)
    if T.shape != S.shape:
        raise ShapeError(f"bce_with_logits: scores {S.shape} vs labels {T.shape}")
    if np.any(T < 0) or np.any(T > 1):
        raise ValueError("bce_with_logits: label entries must lie in [0, 1]")
    W = np.ones(S.shape[-1]) if weights is None else np.asarray(weights, dtype=DTYPE)
    softplus = np.maximum(S, 0.0) + np.log1p(np.exp(-np.abs(S)))
    per = (softplus - T * S) * W
    out = per.sum(axis=-1)

    def vjp(g):
        return ((_sigmoid(S) - T) * W * np.expand_dims(g, -1),)

    return _result(out, (scores,), vjp)


# ---------------------------------------------------------------- reductions


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), vjp)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- normalization / regularization


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, n: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormStats":
        return cls(np.zeros(n), np.ones(n), momentum, eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchNormStats, train: bool) -> Tensor:
    """Per-feature batch normalization of a (batch, features) tensor.

    Train mode normalizes with the biased batch variance and updates the
    running statistics in place (unbiased variance, like the common
    frameworks). Eval mode is a fixed affine map.
    """
    X = x.data
    if X.ndim != 2 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    G = gamma.data
    if not train:
        inv = 1.0 / np.sqrt(stats.running_var + stats.eps)
        xhat = (X - stats.running_mean) * inv

        def vjp_eval(g):
            return g * G * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _result(xhat * G + beta.data, (x, gamma, beta), vjp_eval)

    n = X.shape[0]
    if n < 2:
        raise ShapeError(f"batch_norm: train mode needs at least 2 rows, got {x.shape}")
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (X - mu) * inv
    m = stats.momentum
    stats.running_mean[...] = (1 - m) * stats.running_mean + m * mu
    stats.running_var[...] = (1 - m) * stats.running_var + m * var * n / (n - 1)

    def vjp(g):
        dxhat = g * G
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * G + beta.data, (x, gamma, beta), vjp)


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped entries, 1/(1-rate) otherwise."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(
    x: Tensor,
    rate: float,
    train: bool,
    rng: Optional[np.random.Generator] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0.

    A precomputed ``mask`` (from :func:`dropout_mask`) may be supplied so that
    several forward passes share one realization.
    """
    if not train or rate == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout: train mode needs an rng or a mask")
        mask = dropout_mask(x.shape, rate, rng)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout: mask {mask.shape} vs input {x.shape}")
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- optimization


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``grads`` defaults to each parameter's ``.grad``; a parameter without a
    gradient is treated as having a zero gradient.
    """
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientError(f"adam_step: non-finite gradient for parameter {name!r}")
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {name!r} {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves only if ``best - loss > threshold`` (strict).
    """

    lr: float = 1e-3
    factor: float = 0.3
    patience: int = 5
    threshold: float = 1e-4
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, epoch_loss: float) -> float:
        return plateau_step(self, epoch_loss)


def plateau_step(sched: PlateauScheduler, epoch_loss: float) -> float:
    if not math.isfinite(epoch_loss):
        raise ValueError(f"plateau_step: epoch loss is not finite ({epoch_loss})")
    if sched.best - epoch_loss > sched.threshold:
        sched.best = epoch_loss
        sched.bad_epochs = 0
    else:
        sched.bad_epochs += 1
        if sched.bad_epochs >= sched.patience:
            sched.lr *= sched.factor
            sched.bad_epochs = 0
    return sched.lr
