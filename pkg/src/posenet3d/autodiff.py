"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation that touches a tensor requiring gradients creates a node with a
monotonically increasing sequence number.  ``backward`` collects the ancestors of
the loss and replays their local gradient rules in strictly decreasing sequence
order, which is the exact reverse of recording order.  This fixes the order of
floating point accumulation, so repeated runs are bit-identical.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "ShapeError",
    "ConfigError",
    "BatchTooSmallError",
    "as_tensor",
    "backward",
    "check_gradients",
    "linear",
    "conv1d",
    "batchnorm",
    "relu",
    "dropout",
    "softmax_rows",
    "softplus",
    "reduce",
    "stack",
    "concat",
    "maximum",
    "sqrt",
    "exp",
    "log",
    "matmul",
    "set_default_dtype",
]

_DTYPE = np.float64
_counter = itertools.count()


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class BatchTooSmallError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch new tensors to ``float32`` for speed.  Gradient checks need float64."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- methods mirroring numpy -----------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, "mean", axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return reduce(self, "var", axis, keepdims)


class Graph:
    """The recorded operations reachable from a tensor, in recording order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            if t._consumed:
                raise GraphError("graph contains tensors already consumed by a previous backward")
            seen[id(t)] = t
            stack.extend(t._parents)
        return cls(sorted(seen.values(), key=lambda t: t._seq))

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data: np.ndarray, parents: Iterable[Tensor], grad_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not retain_graph:
        for node in graph.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max(a, floor); the flat branch has zero gradient (ties included).
    NaN propagates so divergence is not masked."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


def relu(x) -> Tensor:
    return maximum(x, 0.0)


def softplus(x) -> Tensor:
    """log(1 + exp(x)) in a form that does not overflow."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * sig,))


def dropout(x, p: float, rng: np.random.Generator | None = None, mode: str = "train") -> Tensor:
    """Inverted dropout: identity in eval mode, masks scaled by 1/(1-p) in train mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if mode != "train" or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), grad_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, grad_fn)


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce(x, op: str, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / population variance over ``axes``."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.broadcast_to(expand(g), x.shape).copy(),))
    if op == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.broadcast_to(expand(g) / count, x.shape).copy(),))
    if op == "var":
        centered = x.data - x.data.mean(axis=axes, keepdims=True)
        out = (centered**2).mean(axis=axes, keepdims=keepdims)
        return _make(out, (x,), lambda g: (expand(g) * 2.0 * centered / count,))
    raise ConfigError(f"unknown reduction {op!r}")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """numpy.matmul with batch broadcasting; both operands at least 2-d."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), grad_fn)


def linear(x, weight, bias=None) -> Tensor:
    """out[b, o] = sum_i x[b, i] * weight[o, i] + bias[o]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects x [B,F_in] and weight [F_out,F_in], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x axis 1 has {x.shape[1]} features but weight axis 1 has {weight.shape[1]}")
    parents = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != weight axis 0 ({weight.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, grad_fn)


def conv1d(x, kernel, bias=None, dilation: int = 1) -> Tensor:
    """Dilated cross-correlation with zero 'same' padding of dilation*(ks-1)/2 per side."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects x [B,C_in,L] and kernel [C_out,C_in,ks], got {x.shape}, {kernel.shape}")
    c_out, c_in, ks = kernel.shape
    if ks % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {ks}")
    if dilation < 1:
        raise ConfigError(f"dilation must be positive, got {dilation}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv1d: x axis 1 has {x.shape[1]} channels but kernel axis 1 has {c_in}")
    B, _, L = x.shape
    pad = dilation * (ks - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    # cols[b, c, k, l] = xp[b, c, l + k*dilation]
    cols = np.stack([xp[:, :, k * dilation : k * dilation + L] for k in range(ks)], axis=2)
    out = np.einsum("bckl,ock->bol", cols, kernel.data, optimize=True)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def grad_fn(g):
        gk = np.einsum("bol,bckl->ock", g, cols, optimize=True)
        gcols = np.einsum("bol,ock->bckl", g, kernel.data, optimize=True)
        gxp = np.zeros_like(xp)
        for k in range(ks):
            gxp[:, :, k * dilation : k * dilation + L] += gcols[:, :, k, :]
        grads = [gxp[:, :, pad : pad + L], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _make(out, parents, grad_fn)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization for [B,C,L] or [B,F] inputs.

    Train mode normalizes with the biased batch variance and, when running
    buffers are given, updates them in place (running variance unbiased).
    Eval mode normalizes with the running buffers.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        axes = (0, 2)
        shape = (1, x.shape[1], 1)
    elif x.ndim == 2:
        axes = (0,)
        shape = (1, x.shape[1])
    else:
        raise ShapeError(f"batchnorm expects [B,C,L] or [B,F], got {x.shape}")
    gamma = as_tensor(gamma).reshape(shape)
    beta = as_tensor(beta).reshape(shape)
    if mode == "train":
        count = int(np.prod([x.shape[a] for a in axes]))
        if count < 2:
            raise BatchTooSmallError(f"batchnorm in train mode needs at least 2 values per channel, got {count}")
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        if running_mean is not None:
            m = mean.data.reshape(-1)
            v = var.data.reshape(-1) * count / (count - 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * m
            running_var *= 1.0 - momentum
            running_var += momentum * v
        xhat = (x - mean) / sqrt(var + eps)
    else:
        if running_mean is None or running_var is None:
            raise ConfigError("batchnorm in eval mode needs running statistics")
        xhat = (x - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
    return xhat * gamma + beta


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), grad_fn)


# -- gradient checking ----------------------------------------------------

def check_gradients(f: Callable, x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``x`` is an array or a sequence of arrays; ``f`` takes the same number of
    tensors and returns a scalar tensor.  Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|).
    """
    single = isinstance(x, np.ndarray) or np.isscalar(x)
    xs = [np.array(x, dtype=np.float64)] if single else [np.array(v, dtype=np.float64) for v in x]
    leaves = [Tensor(v.copy(), requires_grad=True) for v in xs]
    out = f(*leaves)
    backward(out)
    worst = 0.0
    for k, v in enumerate(xs):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v)
        numeric = np.zeros_like(v)
        flat = v.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*[Tensor(u) for u in xs]).item()
            flat[i] = orig - eps
            fm = f(*[Tensor(u) for u in xs]).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
