"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learnable computation in this library runs on the `Tensor` class
below.  A forward pass records the operation graph on the result nodes
(parents plus a local backward closure); `backward` on a scalar loss
walks that graph once in reverse topological order and accumulates
gradients into every tensor that requires them.  Graphs are per-forward
recordings, there is no cross-pass state.

Conventions:
  - all values are 64-bit floats in row-major numpy arrays
  - binary elementwise ops broadcast like numpy; the backward pass sums
    gradients over broadcast axes
  - gradients accumulate additively, so calling backward twice on the
    same graph without zeroing doubles every accumulated gradient
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "pow_const",
    "clamp",
    "huber",
    "softmax",
    "tsum",
    "tmean",
    "tmax",
    "gather_rows",
    "group_max",
    "concat",
    "slice_rows",
    "slice_cols",
    "backward",
    "LinearLayer",
    "Mlp",
    "NormLayer",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "finite_difference_loss_grad",
    "max_relative_error",
]


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense n-dimensional float64 array with gradient accumulation.

    `data` holds the values, `grad` (lazily allocated) the accumulated
    gradient of the most recent backward passes.  Operation results keep
    references to their parent tensors and a closure computing the local
    vector-Jacobian product.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Iterable[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcasting introduced for `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors, gradients to both operands."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0.0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = _wrap(a)
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def pow_const(a, p: float) -> Tensor:
    """a ** p for a constant exponent; domain is the caller's problem."""
    a = _wrap(a)
    data = a.data**p
    return Tensor._from_op(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only where not clipped."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return Tensor._from_op(data, (a,), lambda g: (g * mask,))


def huber(a, delta: float) -> Tensor:
    """Elementwise smooth-L1: 0.5*x^2/delta inside |x| < delta, |x| - delta/2 outside."""
    a = _wrap(a)
    absx = np.abs(a.data)
    inside = absx < delta
    data = np.where(inside, 0.5 * a.data * a.data / delta, absx - 0.5 * delta)

    def vjp(g):
        return (g * np.where(inside, a.data / delta, np.sign(a.data)),)

    return Tensor._from_op(data, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def softmax(a, axis: int) -> Tensor:
    """Numerically stabilized softmax along `axis`; outputs sum to one."""
    a = _wrap(a)
    if a.data.ndim == 0 or a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (a,), vjp)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=np.float64)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return Tensor._from_op(data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient flows to the first argmax entry."""
    a = _wrap(a)
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), gg, axis=axis)
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


def gather_rows(a, index) -> Tensor:
    """Select rows of `a` by integer index; duplicates accumulate gradient."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.intp)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


def group_max(a, index: np.ndarray) -> Tensor:
    """Channelwise max over small row groups of a [N, C] tensor.

    `index` is [S, K] with -1 padding; row s of the result is the
    per-channel maximum over the valid rows a[index[s, k]].  Every group
    must contain at least one valid entry.  The gradient flows to the
    first maximizing row of each (group, channel).
    """
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 2:
        raise ShapeError(f"group_max index must be [S, K], got {idx.shape}")
    valid = idx >= 0
    if not valid.any(axis=1).all():
        raise ContractError("group_max: a group has no valid members")
    gathered = a.data[np.where(valid, idx, 0)]  # [S, K, C]
    gathered = np.where(valid[:, :, None], gathered, -np.inf)
    arg = np.argmax(gathered, axis=1)  # [S, C]
    data = np.take_along_axis(gathered, arg[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        out = np.zeros_like(a.data)
        rows = np.take_along_axis(idx, arg, axis=1)  # [S, C] row ids in a
        cols = np.broadcast_to(np.arange(a.shape[1]), rows.shape)
        np.add.at(out, (rows.ravel(), cols.ravel()), g.ravel())
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(data, tuple(tensors), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    data = a.data[start:stop].copy()

    def vjp(g):
        out = np.zeros_like(a.data)
        out[start:stop] = g
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.shape}")
    data = a.data[:, start:stop].copy()

    def vjp(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dt into `t.grad` for every tensor requiring grad.

    `loss` must be a scalar produced by recorded operations.  Repeated
    calls keep adding, so gradients of independent branches (and of
    repeated backward passes) combine additively.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward on non-scalar tensor of shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ContractError("backward on non-finite loss")
    if not loss.requires_grad:
        return

    # Iterative depth-first topological order; graphs easily exceed the
    # interpreter recursion limit.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = flow.get(id(parent))
            if acc is None:
                # Own the stored array: a vjp may hand back the incoming
                # gradient itself (or a view of it), and this slot is
                # mutated in place by later contributions.
                flow[id(parent)] = pg.copy()
            else:
                acc += pg


# ---------------------------------------------------------------------------
# layers


class LinearLayer:
    """Affine map y = x W^T + b with weight [out, in] and bias [out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, size=(out_dim,)), requires_grad=True)

    @classmethod
    def from_arrays(cls, weight, bias) -> "LinearLayer":
        obj = cls.__new__(cls)
        obj.weight = Tensor(weight, requires_grad=True)
        obj.bias = Tensor(bias, requires_grad=True)
        if obj.weight.shape[0] != obj.bias.shape[0]:
            raise ShapeError("weight/bias output dimensions disagree")
        return obj

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, transpose(self.weight)), self.bias)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class Mlp:
    """Stack of linear layers with ReLU between them and none after the last."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ShapeError("an MLP needs at least one layer")
        self.layers = [LinearLayer(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]

    @classmethod
    def from_layers(cls, layers: Sequence[LinearLayer]) -> "Mlp":
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError("consecutive MLP layer dimensions do not chain")
        obj = cls.__new__(cls)
        obj.layers = list(layers)
        return obj

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        return self.layers[-1](x)

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}l{i}.")


class NormLayer:
    """Normalization over channels of [N, C] inputs.

    kind "layer" normalizes each row over its channels.  kind "batch"
    normalizes each channel over the rows, keeps running statistics
    during training, and uses them when `training` is False.
    """

    def __init__(self, channels: int, kind: str = "layer", eps: float = 1e-5, momentum: float = 0.1):
        if kind not in ("layer", "batch"):
            raise ConfigError(f"unknown norm kind {kind!r}")
        if eps <= 0.0:
            raise ConfigError("norm epsilon must be positive")
        self.kind = kind
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        if kind == "batch":
            self.running_mean = np.zeros(channels)
            self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        axis = 1 if self.kind == "layer" else 0
        if self.kind == "batch" and not training:
            centered = sub(x, self.running_mean)
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            return add(mul(mul(centered, inv), self.scale), self.shift)
        m = tmean(x, axis=axis, keepdims=True)
        centered = sub(x, m)
        var = tmean(mul(centered, centered), axis=axis, keepdims=True)
        inv = pow_const(add(var, self.eps), -0.5)
        if self.kind == "batch" and training:
            n = x.shape[0]
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * m.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        return add(mul(mul(centered, inv), self.scale), self.shift)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "scale", self.scale
        yield prefix + "shift", self.shift

    def named_buffers(self, prefix: str = ""):
        if self.kind == "batch":
            yield prefix + "running_mean", self.running_mean
            yield prefix + "running_var", self.running_var

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        if self.kind != "batch":
            raise ContractError("layer-kind norm has no buffers")
        if name == "running_mean":
            self.running_mean = value.copy()
        elif name == "running_var":
            self.running_var = value.copy()
        else:
            raise ContractError(f"unknown norm buffer {name!r}")


# ---------------------------------------------------------------------------
# optimization


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction, deterministic given inputs.

    lr = 0 is a valid no-op (moments still advance); negative rates are rejected.
    """
    if lr < 0.0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    state.t += 1
    t = state.t
    for name in params:
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    """Write one JSON document of parameter path -> {shape, data}.

    Values are serialized through Python float repr, which round-trips
    64-bit floats exactly.
    """
    doc = {
        name: {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}
        for name, arr in named_arrays.items()
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for name, entry in doc.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        out[name] = arr
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_loss_grad(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every element of `param`.

    `loss_fn` must rebuild the forward pass from current parameter values.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn().item()
        flat[i] = keep - h
        down = loss_fn().item()
        flat[i] = keep
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(param.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
