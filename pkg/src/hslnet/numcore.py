"""Dense float64 tensors with reverse-mode differentiation.

Every operation records a closure that maps the gradient of its output to
gradients of its inputs. ``backward`` walks the recorded graph in reverse
topological order and accumulates gradients on leaf tensors that have
``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

MASK_FILL = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # Leaf values may be swapped wholesale (optimizer steps, finite differences),
    # never mutated in place.
    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise ValueError(f"shape mismatch: {arr.shape} vs {self._data.shape}")
        _check_finite(arr, "assignment")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self._data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.setflags(write=False)
    out._data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


_BINARY = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": np.divide}


def _binary(symbol: str, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return _BINARY[symbol](a.data, b.data)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} {symbol} {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _binary("+", a, b),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _binary("-", a, b),
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        _binary("*", a, b),
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary("/", a, b)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        "where",
    )


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), back, "matmul")


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` applied over the last axis of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise ValueError(f"affine: shape mismatch {x.shape} @ {weight.shape} + {bias.shape}")

    def back(g):
        flat_g = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat_g if weight.requires_grad else None
        gb = flat_g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), back, "affine")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def back(g):
        g_normed = g * gamma.data
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _result(normed * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), back, "getitem")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    table = as_tensor(table)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    return getitem(table, ids)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
        "stack",
    )


# ---------------------------------------------------------------------------
# reductions


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _result(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand(g, a.shape, axis, keepdims),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum_(a, axis, keepdims), float(count))


def _check_mask(mask: np.ndarray, shape, axis) -> np.ndarray:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    if not np.all(np.any(mask, axis=axis)):
        raise ValueError("all-masked row in masked reduction")
    return mask


def masked_mean(a, mask, axis: int, keepdims: bool = False) -> Tensor:
    """Mean over ``axis`` counting only positions where ``mask`` is true."""
    a = as_tensor(a)
    mask = _check_mask(mask, a.shape, axis)
    weights = mask.astype(np.float64)
    count = weights.sum(axis=axis, keepdims=keepdims)
    return div(sum_(mul(a, weights), axis, keepdims), count)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    a = as_tensor(a)
    z = a.data
    if mask is not None:
        mask = _check_mask(mask, a.shape, axis)
        z = np.where(mask, z, MASK_FILL)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    probs = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * probs,)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "logsumexp")


def l2norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (g * np.where(out > 0, a.data / safe, 0.0),)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), back, "l2norm")


def dot(a, b, axis: int = -1) -> Tensor:
    return sum_(mul(a, b), axis=axis)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        seen = state.get(key)
        if seen == 2:
            continue
        if seen == 1:
            raise RuntimeError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and state.get(id(parent)) != 2:
                if state.get(id(parent)) == 1:
                    raise RuntimeError("cycle detected in computation graph")
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Fresh gradients of ``loss`` for named parameters (zeros where unused)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in params.items()}


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {f"p{i}": p for i, p in enumerate(params)}


def grad_check_report(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients, per parameter.

    Error for a parameter tensor is
    ``|a - n| / max(1e-8, |a| + |n|)`` with ``|.|`` the Euclidean norm over
    the tensor's entries.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    named = _as_named(params)
    analytic = gradients(f(), named)
    report = {}
    for name, p in named.items():
        base = p.data
        numeric = np.zeros(p.shape)
        try:
            with no_grad():
                for idx in np.ndindex(p.shape):
                    shifted = base.copy()
                    shifted[idx] = base[idx] + h
                    p.data = shifted
                    f_plus = f().item()
                    shifted[idx] = base[idx] - h
                    p.data = shifted
                    f_minus = f().item()
                    numeric[idx] = (f_plus - f_minus) / (2.0 * h)
        finally:
            p.data = base
        _check_finite(numeric, "finite difference")
        a = analytic[name]
        report[name] = float(np.linalg.norm(a - numeric) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(numeric)))
    return report


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5) -> float:
    """Max over parameters of the relative analytic/numeric gradient error."""
    report = grad_check_report(f, params, h)
    return max(report.values(), default=0.0)
