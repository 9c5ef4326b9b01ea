"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: exactly what a graph-convolution
encoder and log-ratio contrastive losses need. Binary ops support
"leading-axis" broadcasting only: the smaller operand's shape must be a
suffix of the larger's (scalars count), and it is repeated over the leading
axes. Anything fancier is rejected with an error naming the primitive.

Tensors are immutable once created as far as the tape is concerned;
parameter arrays may be rewritten in place *between* training steps, after
the step's graph has been consumed. ``backward`` walks the tape in reverse
insertion order and sums gradient contributions across fan-out.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "gather",
    "grad_check",
    "no_grad",
    "temporal_conv",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus the hooks reverse mode needs.

    ``requires_grad`` marks leaves that want gradients; results of ops on
    such tensors carry the flag and record a vector-Jacobian closure.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._parents = ()
        self._vjp = None

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
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor) or not np.isscalar(scalar):
            raise ValueError("div: only division by a python scalar is supported")
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shaped ops ------------------------------------------------------
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def transpose(self, axes):
        return transpose(self, axes)

    def reshape(self, shape):
        return reshape(self, shape)

    def logsumexp(self):
        return logsumexp(self)

    def l2_normalize(self):
        return l2_normalize(self)

    def gather(self, indices):
        return gather(self, indices)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data, parents, vjp) -> Tensor:
    """Wrap an op result, recording the tape entry only when needed."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._vjp = vjp
        return out
    return Tensor(data)


def _suffix_check(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ValueError(
        f"{op}: shapes {sa} and {sb} do not align "
        "(only suffix/leading-axis broadcasting is supported)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_check("add", a.shape, b.shape)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _op(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_check("sub", a.shape, b.shape)

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _op(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_check("mul", a.shape, b.shape)

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _op(a.data * b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (k, n); the right operand must be a plain matrix.

    Leading axes are flattened into one BLAS call rather than looped as
    many small batched products.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ValueError(f"matmul: need (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")
    k, n = a.shape[-1], b.shape[1]
    if k != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    lead = a.shape[:-1]
    a2 = a.data.reshape(-1, k)
    out_data = (a2 @ b.data).reshape(lead + (n,))

    def vjp(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _op(out_data, (a, b), vjp)


def left_matmul(a, b) -> Tensor:
    """(m, k) @ (..., k, n): a plain matrix applied across leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim < 2:
        raise ValueError(f"left_matmul: need (m, k) @ (..., k, n), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[-2]:
        raise ValueError(f"left_matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    lead_axes = tuple(range(b.ndim - 2))

    def vjp(g):
        if a.requires_grad:
            ga = np.tensordot(g, b.data, axes=(lead_axes + (b.ndim - 1,),
                                               lead_axes + (b.ndim - 1,)))
        else:
            ga = None
        gb = np.matmul(a.data.T, g) if b.requires_grad else None
        return ga, gb

    return _op(np.matmul(a.data, b.data), (a, b), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def vjp(g):
        return ((a.data > 0.0) * g,)

    return _op(out_data, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _op(out_data, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input has non-positive entries")

    def vjp(g):
        return (g / a.data,)

    return _op(np.log(a.data), (a,), vjp)


def power(a, exponent) -> Tensor:
    """Elementwise x**p for a scalar p."""
    a = as_tensor(a)
    p = float(exponent)
    if not p.is_integer() and np.any(a.data < 0.0):
        raise ValueError(f"power: negative base with non-integer exponent {p}")
    if p < 1.0 and p != 0.0 and np.any(a.data == 0.0):
        raise ValueError(f"power: zero base with exponent {p} < 1")
    out_data = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _op(out_data, (a,), vjp)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(ax % ndim for ax in axes))
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: repeated axes {axes}")
    return axes


def _expand_reduced(g, shape, axes):
    out = g
    for ax in axes:
        out = np.expand_dims(out, ax)
    return np.broadcast_to(out, shape)


def reduce_sum(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)

    def vjp(g):
        return (_expand_reduced(g, a.shape, axes),)

    return _op(a.data.sum(axis=axes), (a,), vjp)


def reduce_mean(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def vjp(g):
        return (_expand_reduced(g, a.shape, axes) / count,)

    return _op(a.data.mean(axis=axes), (a,), vjp)


def transpose(a, axes) -> Tensor:
    """Axis permutation, materialized so downstream kernels stay contiguous."""
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _op(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _op(a.data.reshape(shape), (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ValueError(f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}")
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        slices = []
        for i, t in enumerate(tensors):
            if not t.requires_grad:
                slices.append(None)
                continue
            index = [slice(None)] * ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            slices.append(g[tuple(index)])
        return tuple(slices)

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def gather(a, indices) -> Tensor:
    """Select entries along the last axis; gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != a.ndim or idx.shape[:-1] != a.shape[:-1]:
        raise ValueError(f"gather: index shape {idx.shape} does not match data shape {a.shape}")
    m = a.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise ValueError(f"gather: index out of range for axis of length {m}")

    def vjp(g):
        ga = np.zeros(a.shape, dtype=np.float64)
        flat = ga.reshape(-1, m)
        idx2 = idx.reshape(-1, idx.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, idx2), g.reshape(idx2.shape))
        return (ga,)

    return _op(np.take_along_axis(a.data, idx, axis=-1), (a,), vjp)


def logsumexp(a) -> Tensor:
    """log(sum(exp(x))) over the last axis, max-subtracted for stability."""
    a = as_tensor(a)
    if a.shape[-1] == 0:
        raise ValueError("logsumexp: empty last axis")
    m = a.data.max(axis=-1, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=-1, keepdims=True)
    out_data = (np.log(total) + m)[..., 0]

    def vjp(g):
        return (g[..., None] * (shifted / total),)

    return _op(out_data, (a,), vjp)


def l2_normalize(a) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        rows = np.argwhere(norms[..., 0] == 0.0)
        raise ValueError(f"l2_normalize: zero-norm row at index {rows[0].tolist()}")
    out_data = a.data / norms

    def vjp(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        return ((g - out_data * inner) / norms,)

    return _op(out_data, (a,), vjp)


def _conv_band(kernel: np.ndarray, t_len: int) -> np.ndarray:
    """(C, T, T) banded matrices equivalent to a zero-padded 'same' conv."""
    c, k = kernel.shape
    half = k // 2
    band = np.zeros((c, t_len, t_len))
    for j in range(k):
        off = j - half
        idx = np.arange(max(0, -off), min(t_len, t_len - off))
        band[:, idx, idx + off] = kernel[:, j][:, None]
    return band


def temporal_conv(x, kernel) -> Tensor:
    """Depthwise 1-D convolution along the time axis of a (B, C, T, V) tensor.

    One length-k kernel per channel, odd k, 'same' zero padding. Runs as a
    batched matmul against per-channel banded matrices, which beats a
    strided window contraction by a wide margin at these sizes.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError(f"temporal_conv: expected (B, C, T, V) input, got {x.shape}")
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"temporal_conv: kernel {kernel.shape} does not match channels of {x.shape}")
    k = kernel.shape[1]
    if k % 2 != 1:
        raise ValueError(f"temporal_conv: kernel width {k} must be odd")
    t_len = x.shape[2]
    band = _conv_band(kernel.data, t_len)
    out_data = np.matmul(band[None], x.data)

    def vjp(g):
        gx = np.matmul(band.transpose(0, 2, 1)[None], g) if x.requires_grad else None
        if kernel.requires_grad:
            half = k // 2
            pad = ((0, 0), (0, 0), (half, half), (0, 0))
            windows = np.lib.stride_tricks.sliding_window_view(np.pad(x.data, pad),
                                                               k, axis=2)
            gk = np.einsum("bctvk,bctv->ck", windows, g)
        else:
            gk = None
        return gx, gk

    return _op(out_data, (x, kernel), vjp)


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss over its tape.

    Returns a dict mapping every reachable requires_grad tensor to its
    gradient array; fan-out contributions are summed. Leaf gradients are
    mirrored onto ``tensor.grad``.
    """
    if not isinstance(loss, Tensor):
        raise ValueError("backward: loss must be a Tensor")
    if loss.shape != ():
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[Tensor, np.ndarray] = {loss: np.ones((), dtype=np.float64)}
    for node in reversed(_toposort(loss)):
        if node._vjp is None:
            continue
        g = grads[node]
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            have = grads.get(parent)
            grads[parent] = pg if have is None else have + pg
    for tensor, g in grads.items():
        tensor.grad = g
    return grads


def grad_check(fn, x, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    ``fn`` maps a Tensor to a scalar Tensor. Relative error per coordinate
    is |analytic - difference| / max(|analytic|, |difference|, 1e-8).
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    base = Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    out = fn(base)
    if out.shape != ():
        raise ValueError("grad_check: fn must return a scalar")
    if not np.isfinite(out.data):
        raise ValueError("grad_check: non-finite value at the base point")
    grads = backward(out)
    analytic = grads.get(base)
    if analytic is None:
        analytic = np.zeros(base.shape, dtype=np.float64)
    analytic = analytic.ravel()

    worst = 0.0
    flat = base.data.ravel()
    for i in range(flat.size):
        probe = base.data.copy()
        probe.ravel()[i] = flat[i] + step
        hi = float(fn(Tensor(probe)).data)
        probe.ravel()[i] = flat[i] - step
        lo = float(fn(Tensor(probe)).data)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"grad_check: non-finite probe value at coordinate {i}")
        diff = (hi - lo) / (2.0 * step)
        rel = abs(analytic[i] - diff) / max(abs(analytic[i]), abs(diff), 1e-8)
        worst = max(worst, rel)
    return worst
