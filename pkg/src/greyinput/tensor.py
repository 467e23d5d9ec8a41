"""A small dense tensor type with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` whose ``data`` is a numpy
array of the default dtype: float64 unless changed with :func:`default_dtype`.  When any input requires a gradient, the result remembers its
parents and a closure mapping the upstream gradient to one gradient per
parent.  :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from . import _kernels
from .errors import ContractError, DimensionError, ParameterError

_GRAD_ENABLED = True
_DTYPE = np.float64
DTYPES = {"float64": np.float64, "float32": np.float32}

# Upper bound on the size (in bytes) of one im2col buffer inside conv2d.
_IM2COL_BYTES = 64 * 2**20
# stride-1 convs with at most this many (out, in) channel pairs use the direct loops
_DIRECT_PAIRS = 16
# patch matrices up to this total are kept from forward for reuse in backward
_COL_CACHE_BYTES = 256 * 2**20


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def default_dtype(dtype):
    """Create tensors as ``dtype`` (float64 or float32) inside the block."""
    global _DTYPE
    resolved = DTYPES.get(dtype, dtype) if isinstance(dtype, str) else np.dtype(dtype).type
    if resolved not in DTYPES.values():
        raise ParameterError(f"unsupported dtype {dtype!r}; expected float64 or float32")
    prev = _DTYPE
    _DTYPE = resolved
    try:
        yield
    finally:
        _DTYPE = prev


def get_default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE, copy=True) if not (
            isinstance(data, np.ndarray) and data.dtype == _DTYPE
        ) else data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, keep_intermediate: bool = True) -> None:
        """Back-propagate from this scalar tensor.

        Leaf tensors accumulate into ``grad`` across calls.  Intermediate
        tensors get their gradient overwritten (or not stored at all when
        ``keep_intermediate`` is false, which saves memory in training).
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if keep_intermediate:
                node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


class Graph:
    """Topologically ordered view of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def topological_order(root: Tensor) -> list[Tensor]:
    """Return nodes reachable from ``root`` with parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    return _result(
        a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
    )


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out, dtype=_DTYPE), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; every other extent must agree."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise DimensionError(
                f"concat extent mismatch: {ref} vs {t.shape} (only axis {ax} may differ)"
            )
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Stack tensors along axis 1."""
    return concat(tensors, axis=1)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, widths)
    return _result(out, (a,), lambda g: (g[..., pad:-pad, pad:-pad],))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g)
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# activations and regularisation


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ParameterError("train-mode dropout with p > 0 needs an rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def adaptive_avg_pool2d(x: Tensor, output_size: int | tuple[int, int] = 1) -> Tensor:
    """Average each channel down to 1x1 (the only supported target)."""
    if output_size not in (1, (1, 1)):
        raise ParameterError(f"only a 1x1 pooling target is supported, got {output_size}")
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d expects B x C x H x W, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(
        out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),)
    )


# ---------------------------------------------------------------------------
# batch normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the batch statistics normalise the input and the
    running estimates are updated in place (unbiased variance, as is
    customary).  In eval mode the running estimates are used.
    """
    if eps <= 0:
        raise ParameterError(f"batchnorm eps must be positive, got {eps}")
    if x.ndim < 2:
        raise DimensionError(f"batchnorm expects at least 2 axes, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm affine shape {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    n = x.data.size // c
    if n < 1:
        raise DimensionError("batchnorm needs at least one element per channel")

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if momentum:
            unbiased = var * n / (n - 1) if n > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), backward)


def batchnorm2d(x: Tensor, gamma, beta, running_stats, training: bool, momentum=0.1, eps=1e-5):
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects B x C x H x W, got {x.shape}")
    rm, rv = running_stats
    return batch_norm(x, gamma, beta, rm, rv, training, momentum, eps)


def batchnorm1d(x: Tensor, gamma, beta, running_stats, training: bool, momentum=0.1, eps=1e-5):
    if x.ndim != 2:
        raise DimensionError(f"batchnorm1d expects B x F, got {x.shape}")
    rm, rv = running_stats
    return batch_norm(x, gamma, beta, rm, rv, training, momentum, eps)


# ---------------------------------------------------------------------------
# convolution


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(b, C, Hp, Wp) -> (C*k*k, b*ho*wo) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: (b, C, ho, wo, k, k)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(xp.shape[1] * k * k, -1)


def _col2im_add(gxp: np.ndarray, gcols: np.ndarray, k: int, stride: int, ho: int, wo: int) -> None:
    b, c = gxp.shape[:2]
    gcols = gcols.reshape(c, k, k, b, ho, wo)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, i, j
            ].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is B x C x H x W, ``w`` is O x C x k x k.  The batch is processed
    in chunks so the patch matrix never exceeds a fixed memory budget.
    Stride-1 layers with few channels skip the patch matrix and use direct
    loops instead.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    bsz, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c2 != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if kh != kw:
        raise DimensionError(f"conv2d supports square kernels only, got {w.shape}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias shape {bias.shape} for {o} output channels")
    k = kh
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise DimensionError(
            f"conv2d kernel {k}x{k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    wmat = w.data.reshape(o, -1)
    pointwise = k == 1 and stride == 1 and pad == 0
    direct = not pointwise and stride == 1 and o * c <= _DIRECT_PAIRS
    cache: dict[int, np.ndarray] = {}

    if direct:
        dtype = np.result_type(x.data, w.data)
        xp = np.ascontiguousarray(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))), dtype=dtype)
        wk = np.ascontiguousarray(w.data, dtype=dtype)
        out = np.zeros((bsz, o, ho, wo), dtype=dtype)
        _kernels.conv_forward(xp, wk, out)
        chunk = bsz
    elif pointwise:
        out = np.einsum("oc,bchw->bohw", wmat, x.data, optimize=True)
        xp = None
        chunk = bsz
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        per_sample = c * k * k * ho * wo * xp.itemsize
        chunk = max(1, min(bsz, _IM2COL_BYTES // max(per_sample, 1)))
        out = np.empty((bsz, o, ho, wo), dtype=np.result_type(xp, wmat))
        keep = _GRAD_ENABLED and (w.requires_grad or x.requires_grad) and per_sample * bsz <= _COL_CACHE_BYTES
        for b0 in range(0, bsz, chunk):
            b1 = min(bsz, b0 + chunk)
            cols = _im2col(xp[b0:b1], k, stride, ho, wo)
            if keep:
                cache[b0] = cols
            out[b0:b1] = (wmat @ cols).reshape(o, b1 - b0, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if pointwise:
            gw = np.einsum("bohw,bchw->oc", g, x.data, optimize=True).reshape(w.shape)
            gx = np.einsum("oc,bohw->bchw", wmat, g, optimize=True) if x.requires_grad else None
            return gx, gw, gb
        if direct:
            g = np.ascontiguousarray(g, dtype=dtype)
            gw = np.zeros_like(wk)
            if w.requires_grad:
                _kernels.conv_grad_weight(xp, g, gw)
            gx = None
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                _kernels.conv_grad_input(wk, g, gxp)
                gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
            return gx, gw, gb
        gw = np.zeros_like(wmat)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for b0 in range(0, bsz, chunk):
            b1 = min(bsz, b0 + chunk)
            gmat = g[b0:b1].transpose(1, 0, 2, 3).reshape(o, -1)
            cols = cache.pop(b0) if b0 in cache else _im2col(xp[b0:b1], k, stride, ho, wo)
            if w.requires_grad:
                gw += gmat @ cols.T
            if gxp is not None:
                _col2im_add(gxp[b0:b1], wmat.T @ gmat, k, stride, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw.reshape(w.shape), gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, backward)
