"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the poolers, the probe head and the frozen encoder need is
implemented. A graph is differentiated once: calling ``backward`` a second
time on the same root raises ``GraphError``.
"""

import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigError, GraphError, LabelError, NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that records how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")
    __array_ufunc__ = None  # numpy defers to the reflected Tensor operators

    def __init__(self, data: "Tensor | np.ndarray | float | Sequence", requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._consumed = False
        return out

    # properties

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic

    def __add__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        out = a**exponent
        return Tensor._result(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: "Tensor | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._result(a @ b, (self, other), backward)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._result(self.data[index], (self,), backward)

    # reductions

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else math.prod(
            self.shape[a] for a in ((axis,) if isinstance(axis, int) else axis)
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # shape

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes: int) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._result(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    # elementwise

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = special.expit(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def gelu(self) -> "Tensor":
        """Exact (erf) GELU."""
        a = self.data
        cdf = 0.5 * (1.0 + special.erf(a / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        return Tensor._result(a * cdf, (self,), lambda g: (g * (cdf + a * pdf),))

    # autodiff

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it."""
        if self.ndim != 0:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward already ran on this graph")
        self._consumed = True
        if not self.requires_grad:
            return

        pending: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(_topological_order(self)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node._parents if p.requires_grad and id(p) not in visited)
    return order


def as_tensor(value: "Tensor | np.ndarray | float | Sequence") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, splits, axis=axis)

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([as_tensor(t).reshape(_expanded(t.shape, axis)) for t in tensors], axis=axis)


def _expanded(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis if axis >= 0 else len(shape) + 1 + axis
    return shape[:axis] + (1,) + shape[axis:]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = x @ weight
    return y if bias is None else y + bias


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"{op}: input contains NaN or Inf")


def softmax(x: "Tensor | np.ndarray | Sequence[float]", axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    x = as_tensor(x)
    _check_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x: "Tensor | np.ndarray | Sequence[float]", axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward)


def layer_norm(
    x: "Tensor | np.ndarray | Sequence[float]",
    gamma: "Tensor | np.ndarray | Sequence[float]",
    beta: "Tensor | np.ndarray | Sequence[float]",
    eps: float = 1e-5,
) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {width}"
        )
    if eps < 0:
        raise ConfigError(f"layer_norm: eps must be >= 0, got {eps}")
    return _normalize(x, eps) * gamma + beta


def _normalize(x: Tensor, eps: float) -> Tensor:
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    denom = (centered * centered).mean(axis=-1, keepdims=True) + eps
    # a constant row with eps = 0 normalizes to zeros
    safe = np.where(denom > 0, denom, 1.0)
    inv = np.where(denom > 0, safe**-0.5, 0.0)
    out = centered * inv

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_mean = g.mean(axis=-1, keepdims=True)
        proj = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - out * proj),)

    return Tensor._result(out, (x,), backward)


def cross_entropy(
    logits: "Tensor | np.ndarray | Sequence[float]", labels: "int | np.ndarray | Sequence[int]"
) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is (K,) with an integer label, or (B, K) with B labels.
    """
    logits = as_tensor(logits)
    num_classes = logits.shape[-1]
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise LabelError(f"label out of range for {num_classes} classes: {labels}")
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        if labels.ndim != 0:
            raise ShapeError("single logit vector needs a single label")
        return -logp[int(labels)]
    if labels.shape != logits.shape[:1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    return -logp[np.arange(len(labels)), labels].mean()


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    n_coords: int = 20,
    h: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-2,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``n_coords`` coordinates are drawn uniformly across all parameters.
    The denominator is ``max(|analytic|, |numeric|, floor)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for index in flat:
        which = int(np.searchsorted(offsets, index, side="right") - 1)
        param, local = params[which], int(index - offsets[which])
        coord = np.unravel_index(local, param.shape)
        original = param.data[coord]
        param.data[coord] = original + h
        up = loss_fn().item()
        param.data[coord] = original - h
        down = loss_fn().item()
        param.data[coord] = original
        numeric = (up - down) / (2.0 * h)
        exact = analytic[which].reshape(-1)[local]
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst
