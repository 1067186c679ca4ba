"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is implicit: every operation stamps its output with a globally
increasing creation id and a closure that pushes gradients to its parents.
``backward`` replays the closures in exact reverse creation order, which is
a valid topological order because inputs always exist before their
consumers. Gradients accumulate into ``.grad``; callers zero them between
optimization steps.

Everything is float64 and single-threaded per graph. Tensors are treated
as immutable once they participate in a graph; only optimizers mutate leaf
parameter data, after the step's graph has been consumed.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractError, DimensionError, LabelError, ParameterError

_NODE_COUNTER = itertools.count()
_GRAD_ENABLED = True

# im2col materializes B*T'*C_in*k doubles; beyond this we fall back to a
# tap loop with identical arithmetic.
_IM2COL_MAX_BYTES = 128 * 1024 * 1024


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward", "_node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = "leaf"
        self._parents = ()
        self._backward = None
        self._node_id = next(_NODE_COUNTER)

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def assert_finite(self, what="tensor"):
        """Raise if any stored value is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            raise ContractError(f"{what} contains non-finite values")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward_fn):
    """Create an op output; record the closure only when grads can flow."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- graph traversal -------------------------------------------------------

def graph_nodes(root: Tensor):
    """All tensors reachable from ``root``, ordered by creation id.

    Exposed so tests can assert the topological invariant: every parent id
    precedes its consumer's id.
    """
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._node_id in seen:
            continue
        seen[node._node_id] = node
        stack.extend(node._parents)
    return [seen[i] for i in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor feeding ``loss``.

    Gradients accumulate; callers zero them between steps. Visits nodes in
    exact reverse creation order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(graph_nodes(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise and reduction ops -----------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def push(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), "add", push)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def push(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), "sub", push)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def push(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), "mul", push)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def push(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), "div", push)


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: a._accumulate(-g) if a.requires_grad else None)


def power(a, exponent):
    a = _as_tensor(a)
    if not np.isscalar(exponent):
        raise ParameterError("power supports scalar exponents only")
    data = a.data ** exponent

    def push(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(data, (a,), f"pow{exponent}", push)


def exp(a):
    a = _as_tensor(a)
    data = np.exp(a.data)

    def push(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), "exp", push)


def log(a):
    a = _as_tensor(a)

    def push(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), "log", push)


def sqrt(a):
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def push(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), "sqrt", push)


def tanh(a):
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def push(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), "tanh", push)


def relu(a):
    """Elementwise max(0, x). Subgradient at 0 is 0."""
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def push(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, (a,), "relu", push)


def tensor_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def push(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gk = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gk, a.data.shape).copy())

    return _make(data, (a,), "sum", push)


def tensor_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]
    )

    def push(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.data.shape).copy())
            return
        gk = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gk / count, a.data.shape).copy())

    return _make(data, (a,), "mean", push)


def logsumexp(a, axis=-1):
    """Numerically stable log(sum(exp(a))) along ``axis``."""
    a = _as_tensor(a)
    zmax = a.data.max(axis=axis, keepdims=True)
    ez = np.exp(a.data - zmax)
    sez = ez.sum(axis=axis, keepdims=True)
    data = np.squeeze(np.log(sez) + zmax, axis=axis)

    def push(g):
        if a.requires_grad:
            a._accumulate(np.expand_dims(g, axis) * (ez / sez))

    return _make(data, (a,), "logsumexp", push)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    original = a.data.shape

    def push(g):
        if a.requires_grad:
            a._accumulate(g.reshape(original))

    return _make(a.data.reshape(shape), (a,), "reshape", push)


def transpose(a, axes=None):
    a = _as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)

    def push(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make(data, (a,), "transpose", push)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def push(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, tuple(tensors), "concat", push)


def narrow(a, axis, start, length):
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}) exceeds extent {a.data.shape[axis]}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def push(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[index] = g
            a._accumulate(buf)

    return _make(a.data[index].copy(), (a,), "narrow", push)


def take_rows(a, idx):
    """Gather rows along axis 0; backward scatter-adds into the source."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError("take_rows index out of range")

    def push(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    return _make(a.data[idx], (a,), "take_rows", push)


def pad_last(a, left, right):
    """Zero-pad the final axis by (left, right)."""
    a = _as_tensor(a)
    if left < 0 or right < 0:
        raise ParameterError("padding must be non-negative")
    width = [(0, 0)] * (a.data.ndim - 1) + [(left, right)]
    data = np.pad(a.data, width)
    T = a.data.shape[-1]

    def push(g):
        if a.requires_grad:
            a._accumulate(g[..., left:left + T])

    return _make(data, (a,), "pad_last", push)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def push(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), "matmul", push)


def dense(x, weight, bias=None):
    """Affine map: out[b, o] = sum_i x[b, i] * W[i, o] + b[o]."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    out = matmul(x, weight)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (weight.data.shape[1],):
            raise DimensionError(
                f"bias shape {bias.data.shape} does not match output width "
                f"{weight.data.shape[1]}"
            )
        out = add(out, bias)
    return out


def pairwise_scores(a, candidates):
    """Dot product of each row of ``a`` with its K candidate rows.

    a: (B, d), candidates: (B, K, d) -> (B, K).
    """
    a, candidates = _as_tensor(a), _as_tensor(candidates)
    if a.data.ndim != 2 or candidates.data.ndim != 3:
        raise DimensionError("pairwise_scores expects (B, d) and (B, K, d)")
    if a.data.shape[0] != candidates.data.shape[0] or a.data.shape[1] != candidates.data.shape[2]:
        raise DimensionError(
            f"pairwise_scores shapes disagree: {a.data.shape} vs {candidates.data.shape}"
        )
    data = np.einsum("bd,bkd->bk", a.data, candidates.data, optimize=True)

    def push(g):
        if a.requires_grad:
            a._accumulate(np.einsum("bk,bkd->bd", g, candidates.data, optimize=True))
        if candidates.requires_grad:
            candidates._accumulate(np.einsum("bk,bd->bkd", g, a.data, optimize=True))

    return _make(data, (a, candidates), "pairwise_scores", push)


def normalize_rows(a, eps=1e-12):
    """Scale the last axis to unit Euclidean norm (built from primitives)."""
    a = _as_tensor(a)
    norm = sqrt(add(tensor_sum(mul(a, a), axis=-1, keepdims=True), eps))
    return div(a, norm)


# -- convolution --------------------------------------------------------------

def _conv_out_length(T, k, stride, padding):
    if T + 2 * padding < k:
        raise DimensionError(
            f"kernel {k} longer than padded input {T + 2 * padding}"
        )
    return (T + 2 * padding - k) // stride + 1


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation over the last axis.

    x: (B, C_in, T), weight: (C_out, C_in, k), bias: (C_out,) or None.
    Output: (B, C_out, T') with T' = floor((T + 2*padding - k)/stride) + 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError("conv1d expects x (B,C,T) and weight (C_out,C_in,k)")
    B, C_in, T = x.data.shape
    C_out, C_w, k = weight.data.shape
    if C_w != C_in:
        raise DimensionError(f"conv1d channels disagree: input {C_in}, kernel {C_w}")
    if stride < 1 or padding < 0:
        raise ParameterError("conv1d needs stride >= 1 and padding >= 0")
    T_out = _conv_out_length(T, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (T_out - 1) + 1
    use_im2col = B * T_out * C_in * k * 8 <= _IM2COL_MAX_BYTES

    if use_im2col:
        win = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :T_out]
        cols = win.transpose(0, 2, 1, 3).reshape(B * T_out, C_in * k)
        out = cols @ weight.data.reshape(C_out, C_in * k).T
        data = out.reshape(B, T_out, C_out).transpose(0, 2, 1)
    else:
        cols = None
        data = np.zeros((B, C_out, T_out))
        for j in range(k):
            xs = xp[:, :, j:j + span:stride]
            data += np.tensordot(xs, weight.data[:, :, j], axes=([1], [1])).transpose(0, 2, 1)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (C_out,):
            raise DimensionError(f"conv1d bias shape {bias.data.shape} != ({C_out},)")
        data = data + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def push(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        if use_im2col:
            g2 = g.transpose(0, 2, 1).reshape(B * T_out, C_out)
            if need_w:
                weight._accumulate((g2.T @ cols).reshape(C_out, C_in, k))
            if need_x:
                dcols = (g2 @ weight.data.reshape(C_out, C_in * k)).reshape(
                    B, T_out, C_in, k
                )
                dxp = np.zeros_like(xp)
                for j in range(k):
                    dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
                x._accumulate(dxp[:, :, padding:padding + T] if padding else dxp)
        else:
            dxp = np.zeros_like(xp) if need_x else None
            dw = np.zeros_like(weight.data) if need_w else None
            for j in range(k):
                xs = xp[:, :, j:j + span:stride]
                if need_w:
                    dw[:, :, j] = np.tensordot(g, xs, axes=([0, 2], [0, 2]))
                if need_x:
                    dxp[:, :, j:j + span:stride] += np.tensordot(
                        g, weight.data[:, :, j], axes=([1], [0])
                    ).transpose(0, 2, 1)
            if need_w:
                weight._accumulate(dw)
            if need_x:
                x._accumulate(dxp[:, :, padding:padding + T] if padding else dxp)

    return _make(data, parents, "conv1d", push)


def depthwise_conv1d(x, weight, stride=1, padding=0):
    """Per-channel temporal filter: x (B, C, T), weight (C, k) -> (B, C, T')."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 2:
        raise DimensionError("depthwise_conv1d expects x (B,C,T) and weight (C,k)")
    B, C, T = x.data.shape
    C_w, k = weight.data.shape
    if C_w != C:
        raise DimensionError(f"depthwise channels disagree: {C} vs {C_w}")
    if stride < 1 or padding < 0:
        raise ParameterError("depthwise_conv1d needs stride >= 1 and padding >= 0")
    T_out = _conv_out_length(T, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (T_out - 1) + 1
    data = np.zeros((B, C, T_out))
    for j in range(k):
        data += xp[:, :, j:j + span:stride] * weight.data[None, :, j:j + 1]

    def push(g):
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for j in range(k):
                dw[:, j] = (g * xp[:, :, j:j + span:stride]).sum(axis=(0, 2))
            weight._accumulate(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + span:stride] += g * weight.data[None, :, j:j + 1]
            x._accumulate(dxp[:, :, padding:padding + T] if padding else dxp)

    return _make(data, (x, weight), "depthwise_conv1d", push)


def channel_mix(x, weight):
    """Mix the channel axis independently per filter bank.

    x: (B, F, C, T), weight: (F, C, M) -> (B, F, M, T).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 3:
        raise DimensionError("channel_mix expects x (B,F,C,T) and weight (F,C,M)")
    if x.data.shape[1] != weight.data.shape[0] or x.data.shape[2] != weight.data.shape[1]:
        raise DimensionError(
            f"channel_mix shapes disagree: {x.data.shape} vs {weight.data.shape}"
        )
    data = np.einsum("bfct,fcm->bfmt", x.data, weight.data, optimize=True)

    def push(g):
        if x.requires_grad:
            x._accumulate(np.einsum("bfmt,fcm->bfct", g, weight.data, optimize=True))
        if weight.requires_grad:
            weight._accumulate(np.einsum("bfmt,bfct->fcm", g, x.data, optimize=True))

    return _make(data, (x, weight), "channel_mix", push)


# -- losses ------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-ndarray softmax over the last axis, max-stabilized."""
    z = np.asarray(logits, dtype=np.float64)
    ez = np.exp(z - z.max(axis=-1, keepdims=True))
    return ez / ez.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label].

    logits: Tensor (B, K); labels: int array (B,) with entries in [0, K).
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got shape {logits.data.shape}")
    B, K = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {B}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integers")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise LabelError(f"labels must lie in [0, {K})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    data = np.asarray(-logp[np.arange(B), labels].mean())

    def push(g):
        if logits.requires_grad:
            p = ez / sez
            p[np.arange(B), labels] -= 1.0
            logits._accumulate(p * (g / B))

    return _make(data, (logits,), "softmax_cross_entropy", push)
