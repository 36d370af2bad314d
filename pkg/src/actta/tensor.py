"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that involves a tensor with ``requires_grad`` records its
parents and a backward rule on the output. :func:`backward` linearises the
recorded graph into a :class:`Tape` (topological order) and walks it in
reverse, accumulating gradients additively.

Broadcasting is deliberately limited to scalar-with-tensor; the only other
broadcast is :func:`add_rowvec`, which adds a bias vector to every row.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str, *inputs: np.ndarray) -> None:
    if np.isfinite(out).all():
        return
    if all(np.isfinite(a).all() for a in inputs):
        idx = int(np.flatnonzero(~np.isfinite(out.reshape(-1)))[0])
        raise NumericError(f"{op} produced a non-finite value at flat index {idx}", index=idx)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation, recording it when needed.

    ``backward_fn`` maps the upstream gradient to one gradient per parent
    (``None`` for parents that need none). Other modules use this to
    register fused operations.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _binary_operands(a, b, op: str):
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.size != 1 and a.size != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")
        return a, b
    return a, Tensor(float(b))


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Undo scalar broadcast.
    if g.shape == shape:
        return g
    return np.full(shape, g.sum()) if shape else np.array(g.sum())


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    out = a.data + b.data
    _check_finite(out, "add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    out = a.data - b.data
    _check_finite(out, "sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd
    _check_finite(out, "mul", ad, bd)
    return make_result(
        out, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        idx = int(np.flatnonzero(np.reshape(bd, -1) == 0)[0])
        raise DomainError(f"div: zero divisor at flat index {idx}", index=idx)
    out = ad / bd
    _check_finite(out, "div", ad, bd)
    return make_result(
        out,
        (a, b),
        lambda g: (_reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp", a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    bad = np.reshape(a.data <= 0, -1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"log: non-positive element {a.data.reshape(-1)[idx]!r} at flat index {idx}", index=idx
        )
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "neg": neg,
    "sin": sin,
}
_UNARY = {"exp", "log", "neg", "sin"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"{kind} needs two operands")
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return make_result(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """``x[i, :] + v`` for every row ``i``."""
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise DimensionError(f"add_rowvec: {x.shape} vs bias {v.shape}")
    return make_result(x.data + v.data, (x, v), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """``x[i, :] * v`` for every row ``i``."""
    if x.ndim != 2 or v.shape != (x.shape[1],):
        raise DimensionError(f"mul_rowvec: {x.shape} vs scale {v.shape}")
    xd, vd = x.data, v.data
    return make_result(xd * vd, (x, v), lambda g: (g * vd, (g * xd).sum(axis=0)), "mul_rowvec")


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return make_result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return make_result(
        out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ContractError("mean of an empty tensor")
    return div(tsum(a), float(a.size))


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a ``[batch, classes]`` tensor."""
    if x.ndim != 2:
        raise DimensionError(f"log_softmax expects 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_result(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Operation records in forward (topological) order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ContractError(f"step size must be positive, got {h}")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def probe(v: np.ndarray, i: int) -> float:
        with no_grad():
            r = f(Tensor(v.reshape(base.shape)))
        val = r.item() if isinstance(r, Tensor) else float(r)
        if not np.isfinite(val):
            raise NumericError(f"non-finite probe value at coordinate {i}", index=i)
        return val

    for i in range(flat.size):
        v = flat.copy()
        v[i] = flat[i] + h
        fp = probe(v, i)
        v[i] = flat[i] - h
        fm = probe(v, i)
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))
