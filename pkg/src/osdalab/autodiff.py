"""Dense float64 tensors with reverse-mode automatic differentiation.

Small on purpose: only the operations the training laboratory needs, all
backed by numpy arrays. Every op records its inputs and a backward closure;
``backward`` walks the recorded graph once in reverse topological order and
accumulates gradients into every participating tensor that requires them.

Two graph-surgery nodes are provided because the adversarial objective
needs them: ``gradient_reversal`` (identity forward, negated gradient) and
``stop_gradient`` (identity forward, no gradient). ``nuclear_norm`` computes
the sum of singular values with a hand-rolled one-sided Jacobi SVD so that
library SVDs remain available as an independent check.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "backward",
    "constant",
    "gradient_reversal",
    "no_grad",
    "nuclear_norm",
    "parameter",
    "stop_gradient",
]


class NumericError(RuntimeError):
    """A computation produced non-finite values or failed to converge."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-mode forwards)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed value that can participate in the gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r})"

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _coerce(other)

        def bwd(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape))

        return _record(self.data + other.data, (self, other), "add", bwd)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _coerce(other)

        def bwd(g):
            return (_unbroadcast(g, self.data.shape), _unbroadcast(-g, other.data.shape))

        return _record(self.data - other.data, (self, other), "sub", bwd)

    def __rsub__(self, other) -> "Tensor":
        return _coerce(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = _coerce(other)

        def bwd(g):
            return (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            )

        return _record(self.data * other.data, (self, other), "mul", bwd)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _coerce(other)

        def bwd(g):
            return (
                _unbroadcast(g / other.data, self.data.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape),
            )

        return _record(self.data / other.data, (self, other), "div", bwd)

    def __rtruediv__(self, other) -> "Tensor":
        return _coerce(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        def bwd(g):
            return (-g,)

        return _record(-self.data, (self,), "neg", bwd)

    def __pow__(self, exponent: float) -> "Tensor":
        exponent = float(exponent)

        def bwd(g):
            return (g * exponent * self.data ** (exponent - 1.0),)

        return _record(self.data**exponent, (self,), "pow", bwd)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = _coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects two rank-2 tensors")

        def bwd(g):
            return (g @ other.data.T, self.data.T @ g)

        return _record(self.data @ other.data, (self, other), "matmul", bwd)

    __matmul__ = matmul

    # -- nonlinearities and reductions ------------------------------------

    def relu(self) -> "Tensor":
        def bwd(g):
            return (g * (self.data > 0.0),)

        return _record(np.maximum(self.data, 0.0), (self,), "relu", bwd)

    def exp(self) -> "Tensor":
        out = np.exp(self.data)

        def bwd(g):
            return (g * out,)

        return _record(out, (self,), "exp", bwd)

    def log(self) -> "Tensor":
        def bwd(g):
            return (g / self.data,)

        return _record(np.log(self.data), (self,), "log", bwd)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        inside = (self.data >= lo) & (self.data <= hi)

        def bwd(g):
            return (g * inside,)

        return _record(np.clip(self.data, lo, hi), (self,), "clamp", bwd)

    def clip_value(self, lo: float, hi: float) -> "Tensor":
        """Clip the forward value; gradients pass through unchanged.

        A numeric guard, not an optimization barrier: use it to bound loss
        terms (e.g. floors under logarithms) without silencing the
        gradient signal the unbounded expression would carry.
        """

        def bwd(g):
            return (g,)

        return _record(np.clip(self.data, lo, hi), (self,), "clip_value", bwd)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            expanded = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(expanded, self.data.shape).copy(),)

        return _record(out, (self,), "sum", bwd)

    def mean(self) -> "Tensor":
        size = self.data.size

        def bwd(g):
            return (np.broadcast_to(g / size, self.data.shape).copy(),)

        return _record(self.data.mean(), (self,), "mean", bwd)

    def __getitem__(self, key) -> "Tensor":
        def bwd(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return (full,)

        return _record(self.data[key], (self,), "slice", bwd)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data, inputs: tuple[Tensor, ...], op: str, bwd) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        out._inputs = inputs
        out._backward = bwd
    return out


def constant(data) -> Tensor:
    """A tensor that never tracks gradients."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def backward(loss: Tensor) -> None:
    """Populate `.grad` for every tensor that fed into the scalar `loss`.

    Repeated calls accumulate; callers zero grads between steps. Raises
    NumericError when the loss is non-finite or a backward closure emits NaN.
    """
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ValueError("backward expects a scalar tensor")
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss value {float(loss.data)!r}")

    # Iterative postorder so deep graphs cannot overflow the stack.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node._inputs:
            if child.requires_grad and id(child) not in seen:
                stack.append((child, False))

    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for child, child_grad in zip(node._inputs, node._backward(g)):
            if child_grad is None or not child.requires_grad:
                continue
            if np.isnan(child_grad).any():
                raise NumericError(f"NaN gradient produced by op {node._op!r}")
            prev = flows.get(id(child))
            flows[id(child)] = child_grad if prev is None else prev + child_grad


def gradient_reversal(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -coeff."""
    coeff = float(coeff)
    if coeff <= 0.0:
        raise ValueError("gradient reversal coefficient must be positive")

    def bwd(g):
        return ((-coeff) * g,)

    return _record(x.data.copy(), (x,), "gradient_reversal", bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the gradient graph is cut here."""
    return Tensor(x.data.copy())


_SVD_TOL = 1e-12
_SVD_MAX_SWEEPS = 100


def _jacobi_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by cyclic one-sided Jacobi rotations.

    Returns (u, sigma, v) with a = u @ diag(sigma) @ v.T, sigma descending.
    Columns belonging to zero singular values are left as zeros in u, which
    realizes the usual subgradient choice for the nuclear norm.
    """
    transposed = a.shape[0] < a.shape[1]
    b = a.T.copy() if transposed else a.copy()
    n = b.shape[1]
    v = np.eye(n)

    for _ in range(_SVD_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = float(b[:, i] @ b[:, i])
                beta = float(b[:, j] @ b[:, j])
                gamma = float(b[:, i] @ b[:, j])
                if gamma == 0.0 or abs(gamma) <= _SVD_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                col_i = b[:, i].copy()
                b[:, i] = c * col_i - s * b[:, j]
                b[:, j] = s * col_i + c * b[:, j]
                rot_i = v[:, i].copy()
                v[:, i] = c * rot_i - s * v[:, j]
                v[:, j] = s * rot_i + c * v[:, j]
        if not rotated:
            break
    else:
        raise NumericError("singular value iteration did not converge")

    sigma = np.sqrt((b * b).sum(axis=0))
    u = np.zeros_like(b)
    nonzero = sigma > 0.0
    u[:, nonzero] = b[:, nonzero] / sigma[nonzero]
    order = np.argsort(-sigma, kind="stable")
    sigma, u, v = sigma[order], u[:, order], v[:, order]
    if transposed:
        return v, sigma, u
    return u, sigma, v


def nuclear_norm(a: Tensor) -> Tensor:
    """Sum of singular values of a rank-2 tensor; subgradient u @ v.T."""
    if a.data.ndim != 2:
        raise ValueError("nuclear norm expects a rank-2 tensor")
    if not np.isfinite(a.data).all():
        raise NumericError("nuclear norm input contains non-finite entries")
    u, sigma, v = _jacobi_svd(a.data)
    subgrad = u @ v.T

    def bwd(g):
        return (g * subgrad,)

    return _record(np.asarray(sigma.sum()), (a,), "nuclear_norm", bwd)
