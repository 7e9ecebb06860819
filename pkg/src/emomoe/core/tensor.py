"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every value is a row-major float64 numpy array wrapped in a :class:`Tensor`.
Ops record their inputs and a vector-Jacobian closure on the output tensor;
``backward`` replays the tape in reverse topological order and accumulates
gradients onto leaf tensors that were created with ``requires_grad=True``.

The op set is intentionally small: exactly what attention blocks, low-rank
adapters, a VQ tokenizer and a tiny decoder-only LM need.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """A documented precondition of an operation was violated."""


class NumericFault(FloatingPointError):
    """A non-finite value appeared in the forward computation."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / generation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array plus optional autodiff bookkeeping.

    ``grad`` holds the accumulated gradient for leaf tensors after a
    ``backward`` call; intermediate nodes never keep a persistent grad.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

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
        return f"Tensor(shape={self.shape}, op={self.op!r}{tag})"

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (the stop-gradient primitive)."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swap_last2(self):
        return swap_last2(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out.op = op
    return out


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _node(data, (a, b), vjp, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data**exponent

    def vjp(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(data, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _node(data, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)  # non-finite results surface via the backward NaN scan

    def vjp(g):
        return (g / a.data,)

    return _node(data, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / data,)

    return _node(data, (a,), vjp, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _node(data, (a,), vjp, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - data * data),)

    return _node(data, (a,), vjp, "tanh")


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _node(data, (a,), vjp, "mean")


# -- shape manipulation -----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)

    def vjp(g):
        inv = None if axes is None else tuple(np.argsort(axes))
        return (g.transpose(inv),)

    return _node(data, (a,), vjp, "transpose")


def swap_last2(a) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _node(data, (a,), vjp, "swap_last2")


def getitem(a, key) -> Tensor:
    """Basic slicing only; integer-array lookups go through ``rows``/``take_batch``."""
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _node(data, (a,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(
            piece if t.requires_grad else None for piece, t in zip(pieces, tensors)
        )

    return _node(data, tensors, vjp, "concat")


def rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: gather rows of a 2-D ``table`` by an integer id array."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def vjp(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _node(data, (table,), vjp, "rows")


def take_batch(a, idx: np.ndarray) -> Tensor:
    """Select rows along axis 0 with an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = a.data[idx]

    def vjp(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _node(data, (a,), vjp, "take_batch")


def scatter_batch(a, idx: np.ndarray, batch: int) -> Tensor:
    """Place rows of ``a`` at positions ``idx`` of a zero tensor with ``batch`` rows."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    data = np.zeros((batch,) + a.shape[1:], dtype=np.float64)
    data[idx] = a.data

    def vjp(g):
        return (g[idx],)

    return _node(data, (a,), vjp, "scatter_batch")


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim >= 3 and b.ndim == 2:
        data = a.data @ b.data

        def vjp(g):
            ga = g @ b.data.T if a.requires_grad else None
            gb = (
                a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                if b.requires_grad
                else None
            )
            return ga, gb

    elif a.ndim == b.ndim:
        data = a.data @ b.data

        def vjp(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            if gb is not None:
                gb = _unbroadcast(gb, b.shape)
            if ga is not None:
                ga = _unbroadcast(ga, a.shape)
            return ga, gb

    else:
        raise ContractViolation(
            f"matmul: unsupported operand ranks {a.ndim} @ {b.ndim}"
        )
    return _node(data, (a, b), vjp, "matmul")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis and apply a learned affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        ggamma = (
            _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        )
        gbeta = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), vjp, "layer_norm")


def cross_entropy_rows(logits, targets: np.ndarray) -> Tensor:
    """Per-row negative log likelihood of integer ``targets`` under ``logits``.

    ``logits`` is (N, V); returns a length-N tensor. The backward pass is the
    classic softmax-minus-onehot form.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ContractViolation(
            f"cross_entropy_rows: logits {logits.shape} vs targets {targets.shape}"
        )
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = logits.shape[0]
    data = -logp[np.arange(n), targets]

    def vjp(g):
        probs = np.exp(logp)
        probs[np.arange(n), targets] -= 1.0
        return (probs * g[:, None],)

    return _node(data, (logits,), vjp, "cross_entropy")


def conv1d(x, weight, bias, stride: int, pad_left: int, pad_right: int) -> Tensor:
    """Temporal convolution on (B, T, C_in) input.

    ``weight`` is (K, C_in, C_out). Output length is
    (T + pad_left + pad_right - K) // stride + 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k = weight.shape[0]
    xp = np.pad(x.data, ((0, 0), (pad_left, pad_right), (0, 0)))
    t_out = (xp.shape[1] - k) // stride + 1
    if t_out < 1:
        raise ContractViolation(
            f"conv1d: input length {x.shape[1]} too short for kernel {k}"
        )
    out = np.tile(bias.data, (x.shape[0], t_out, 1))
    hi = stride * (t_out - 1) + 1
    for j in range(k):
        out += xp[:, j : j + hi : stride, :] @ weight.data[j]

    def vjp(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for j in range(k):
                seg = xp[:, j : j + hi : stride, :]
                gw[j] = np.einsum("bti,bto->io", seg, g)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + hi : stride, :] += g @ weight.data[j].T
            gx = gxp[:, pad_left : xp.shape[1] - pad_right, :]
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _node(out, (x, weight, bias), vjp, "conv1d")


def repeat_time(x, factor: int) -> Tensor:
    """Repeat each step of a (B, T, C) tensor ``factor`` times along T."""
    x = as_tensor(x)
    data = np.repeat(x.data, factor, axis=1)

    def vjp(g):
        b, t, c = x.shape
        return (g.reshape(b, t, factor, c).sum(axis=2),)

    return _node(data, (x,), vjp, "repeat_time")


# -- tape replay -------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child = stack[-1]
        if child < len(node._parents):
            stack[-1] = (node, child + 1)
            parent = node._parents[child]
            if id(parent) not in seen and parent.requires_grad:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``.grad`` of every reachable leaf with ``requires_grad``
    and returns a name-keyed gradient map for the named ones. A non-finite
    loss triggers a graph scan that raises :class:`NumericFault` naming the
    earliest offending op.
    """
    if loss.shape != ():
        raise ContractViolation(f"backward: loss must be scalar, got {loss.shape}")
    order = _toposort(loss)
    if not np.isfinite(loss.data):
        for node in order:
            if not np.all(np.isfinite(node.data)):
                raise NumericFault(f"non-finite value in forward op {node.op!r}")
        raise NumericFault("non-finite loss with finite graph values")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        else:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                out[node.name] = node.grad
    return out


def parameter(data, name: str, rng=None) -> Tensor:
    """Shorthand for a named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def mean_over_mask(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``values`` restricted to boolean ``mask`` positions."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ContractViolation("mean_over_mask: empty mask")
    return tsum(mul(values, Tensor(mask))) * (1.0 / count)
