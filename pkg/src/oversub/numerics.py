"""Dense float64 tensors with reverse-mode gradients.

Everything trainable in this package is expressed through the small set of
primitives below (elementwise arithmetic, matmul, tanh/sigmoid/log/exp,
square, axis reductions, concat/stack/reshape, row gather).  Each primitive
records how to push gradients back to its parents; ``Tensor.backward`` runs
the reverse sweep.  Index selections (argmin/argmax for cluster assignment
and nearest-neighbour lookups) are always done outside the graph on raw
arrays and treated as constants.

Every operation checks its result for NaN/Inf and raises ``NumericError``
naming the first offending primitive, so divergence is caught at the source
instead of surfacing as a corrupted update many steps later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

Array = np.ndarray


def _check_finite(data: Array, op: str) -> Array:
    # summing first keeps this a single cheap reduction: any NaN/Inf poisons the sum
    if not math.isfinite(float(data.sum())):
        if np.all(np.isfinite(data)):  # opposing infinities cancelled in the sum
            return data
        raise NumericError(f"non-finite value produced by '{op}'", op=op)
    return data


# ops that map finite inputs to finite outputs need no output check;
# leaves are always checked since raw data enters the graph there
_SAFE_OPS = frozenset({
    "neg", "tanh", "sigmoid", "clamp_min", "reshape", "transpose",
    "getitem", "concat", "stack", "take_rows",
})


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode grads."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if op in _SAFE_OPS else _check_finite(arr, op)
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[Array], Sequence[Array | None]] | None = _backward
        self.op = op

    # -- basics ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data + other.data, _parents=(self, other), op="add")
        out._backward = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), op="neg")
        out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data - other.data, _parents=(self, other), op="sub")
        out._backward = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))
        return out

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data * other.data, _parents=(self, other), op="mul")
        out._backward = lambda g: (
            _unbroadcast(g * other.data, self.shape),
            _unbroadcast(g * self.data, other.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = Tensor(self.data / other.data, _parents=(self, other), op="div")
        out._backward = lambda g: (
            _unbroadcast(g / other.data, self.shape),
            _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
        )
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        out = Tensor(a @ b, _parents=(self, other), op="matmul")

        def backward(g: Array):
            if a.ndim == 2 and b.ndim == 2:
                return g @ b.T, a.T @ g
            if a.ndim == 2 and b.ndim == 1:
                return np.outer(g, b), a.T @ g
            if a.ndim == 1 and b.ndim == 2:
                return g @ b.T, np.outer(a, g)
            if a.ndim == 1 and b.ndim == 1:
                return g * b, g * a
            raise ContractViolation(f"matmul supports 1D/2D operands, got {a.ndim}D @ {b.ndim}D")

        out._backward = backward
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,), op="getitem")

        def backward(g: Array):
            full = np.zeros_like(self.data)
            if isinstance(idx, (int, np.integer, slice)):
                full[idx] = g  # basic indexing cannot alias
            else:
                np.add.at(full, idx, g)
            return (full,)

        out._backward = backward
        return out

    # -- nonlinearities ----------------------------------------------------

    def tanh(self):
        t = np.tanh(self.data)
        out = Tensor(t, _parents=(self,), op="tanh")
        out._backward = lambda g: (g * (1.0 - t * t),)
        return out

    def sigmoid(self):
        s = _sigmoid(self.data)
        out = Tensor(s, _parents=(self,), op="sigmoid")
        out._backward = lambda g: (g * s * (1.0 - s),)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), op="log")
        out._backward = lambda g: (g / self.data,)
        return out

    def exp(self):
        e = np.exp(self.data)
        out = Tensor(e, _parents=(self,), op="exp")
        out._backward = lambda g: (g * e,)
        return out

    def square(self):
        out = Tensor(self.data * self.data, _parents=(self,), op="square")
        out._backward = lambda g: (g * 2.0 * self.data,)
        return out

    def clamp_min(self, floor: float):
        """Lower clamp; gradient passes only where the input was above the floor."""
        mask = self.data > floor
        out = Tensor(np.where(mask, self.data, floor), _parents=(self,), op="clamp_min")
        out._backward = lambda g: (g * mask,)
        return out

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")

        def backward(g: Array):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.shape).copy(),)

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,), op="reshape")
        out._backward = lambda g: (g.reshape(self.shape),)
        return out

    @property
    def T(self):
        out = Tensor(self.data.T, _parents=(self,), op="transpose")
        out._backward = lambda g: (g.T,)
        return out

    # -- reverse sweep -------------------------------------------------------

    def backward(self) -> None:
        if self.size != 1:
            raise ContractViolation("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # copy: g may alias an array another parent also receives
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad += g


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors), op="concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), _parents=tuple(tensors), op="stack")
    out._backward = lambda g: tuple(np.moveaxis(g, axis, 0))
    return out


def take_rows(x: Tensor, idx: Array) -> Tensor:
    """Gather rows of a 2D tensor by an integer index array (selection is constant)."""
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx], _parents=(x,), op="take_rows")

    def backward(g: Array):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    out._backward = backward
    return out


def _sigmoid(x: Array) -> Array:
    # tanh form: overflow-free in one vectorised pass
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(x: Array) -> Array:
    """Numerically safe sigmoid on plain arrays (graph-free paths)."""
    return _sigmoid(np.asarray(x, dtype=np.float64))


# -- gradient evaluation ------------------------------------------------------


def grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[Array]:
    """Evaluate d loss / d param for every parameter tensor.

    ``loss_fn`` takes no arguments and must build a scalar Tensor from the
    given parameter tensors.  Parameters that do not influence the loss get
    zero gradients.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractViolation("loss_fn must return a scalar Tensor")
    _check_finite(loss.data, "loss")
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def finite_diff_grad(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> list[Array]:
    """Central-difference gradient estimate, coordinate by coordinate.

    The oracle against which every analytic gradient in this package is
    checked.  Perturbs the parameter arrays in place and restores them.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractViolation(f"eps must lie in [1e-7, 1e-3], got {eps}")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], *, eps: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-6) -> float:
    """Compare analytic and finite-difference gradients; returns the worst
    relative error and raises AssertionError if it exceeds ``rtol``."""
    analytic = grad(loss_fn, params)
    numeric = finite_diff_grad(loss_fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
        rel = float(np.max(np.abs(a - n) / denom))
        worst = max(worst, rel)
    if worst > rtol:
        raise AssertionError(f"gradient check failed: relative error {worst:.3e} > {rtol:.0e}")
    return worst


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for a fixed set of parameters."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float = 1e-2, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ContractViolation("decay coefficients must lie in (0, 1)")
        if lr <= 0 or eps <= 0:
            raise ContractViolation("learning rate and epsilon must be positive")
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state

    def reset_slot(self, i: int, shape: tuple[int, ...]) -> None:
        """Zero the moments of one parameter after a structural shape change."""
        self.m[i] = np.zeros(shape)
        self.v[i] = np.zeros(shape)


def optimizer_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[Array]) -> None:
    """One bias-corrected adaptive-moment update, in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ContractViolation("parameter/gradient/state lengths disagree")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = _check_finite(p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), "adam")


# -- small numeric helpers ----------------------------------------------------


def shannon_entropy(p: Iterable[float]) -> float:
    """-sum(p ln p) with 0 ln 0 taken as 0; input must be a probability vector."""
    arr = np.asarray(list(p) if not isinstance(p, np.ndarray) else p, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractViolation("entropy requires a non-empty 1D vector")
    if np.any(arr < 0):
        raise ContractViolation("probabilities must be non-negative")
    if abs(float(arr.sum()) - 1.0) > 1e-9:
        raise ContractViolation(f"probabilities must sum to 1, got {arr.sum()!r}")
    nz = arr[arr > 0]
    return float(-(nz * np.log(nz)).sum())


def softmax(x: Array) -> Array:
    z = np.asarray(x, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def stable_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
