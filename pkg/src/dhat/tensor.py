"""Dense tensors with reverse-mode automatic differentiation.

Every forward op records a tape node (parent tensors plus a backward
closure) whenever at least one operand requires gradients.  ``backward``
on a scalar walks the recorded nodes in exact reverse creation order,
which is a valid reverse topological order because parents always exist
before their children.  Gradients accumulate additively at fan-out
points and are deposited into the ``.grad`` buffer of every reachable
leaf that requires them; repeated ``backward`` calls without clearing
keep accumulating.

Double precision is the default, single precision is opt-in via the
``dtype`` argument of :class:`Tensor`.  Ops are broadcasting-free: the
only scalar broadcast permitted is multiplication/addition of a python
scalar.  Every op validates that its result is finite and raises
:class:`NumericError` otherwise.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ArgumentError, DimensionError, NumericError

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_seq_counter = itertools.count()


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense n-d float array that can participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq_counter)

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ArgumentError(f"expected a scalar tensor, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A view of the same buffer cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = "grad" if self.requires_grad else "const"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {flags})"

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Visits recorded nodes in exact reverse creation order and adds
        each leaf's gradient into its ``.grad`` buffer.
        """
        if self.size != 1:
            raise ArgumentError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ArgumentError("backward on a tensor that does not require gradients")
        order = _reachable_in_reverse_order(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(id(parent))
                flowing[id(parent)] = pg if held is None else held + pg


def _reachable_in_reverse_order(root: Tensor) -> list[Tensor]:
    seen = {id(root)}
    stack = [root]
    nodes = [root]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                nodes.append(parent)
                stack.append(parent)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ArgumentError(f"{op} expects Tensor operands")
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ArgumentError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ----------------------------------------------------------------------
# arithmetic
# ----------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    _binary_check(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of two same-shape tensors."""
    _binary_check(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _binary_check(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    """Add a python scalar."""
    s = float(s)
    return _make(a.data + s, (a,), lambda g: (g,), "add_scalar")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ArgumentError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0.  Gradient is zero everywhere."""
    return _make(np.sign(a.data), (a,), lambda g: (np.zeros_like(a.data),), "sign")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes through inside the range."""
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise ArgumentError(f"clamp: lo {lo} exceeds hi {hi}")
    mask = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * mask,)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clamp")


def log(a: Tensor) -> Tensor:
    """Elementwise natural logarithm (positive domain)."""
    if np.any(a.data <= 0):
        raise ArgumentError("log requires strictly positive entries")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim for ax in axis)
    if len(set(axes)) != len(axes):
        raise ArgumentError(f"duplicate axes in {axis}")
    return axes


def sum_(a: Tensor, axis=None) -> Tensor:
    """Sum over all elements or over the given axes."""
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        expanded = np.expand_dims(g, axes) if g.ndim != a.ndim else g
        return (np.broadcast_to(expanded, a.shape).copy(),)

    return _make(a.data.sum(axis=axes), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    """Mean over all elements or over the given axes."""
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty extent")

    def backward(g):
        expanded = np.expand_dims(g, axes) if g.ndim != a.ndim else g
        return (np.broadcast_to(expanded, a.shape) / count,)

    return _make(a.data.mean(axis=axes), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) not in (a.size,) and -1 not in shape:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    out_data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out_data, (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first into one."""
    if a.ndim < 2:
        raise DimensionError(f"flatten expects at least 2 axes, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def concat(tensors, axis: int) -> Tensor:
    """Concatenate same-dtype tensors along one axis."""
    tensors = tuple(tensors)
    if not tensors:
        raise ArgumentError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim:
            raise DimensionError("concat: rank mismatch")
        if t.dtype != first.dtype:
            raise ArgumentError("concat: dtype mismatch")
        for ax in range(first.ndim):
            if ax != axis and t.shape[ax] != first.shape[ax]:
                raise DimensionError(f"concat: shape mismatch {t.shape} vs {first.shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather entries along one axis; backward scatter-adds (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    if idx.ndim != 1:
        raise ArgumentError("take expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ArgumentError(f"take: index out of range for axis extent {a.shape[axis]}")

    def backward(g):
        buf = np.zeros_like(a.data)
        buf_moved = np.moveaxis(buf, axis, 0)
        np.add.at(buf_moved, idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return _make(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def select_index(a: Tensor, indices) -> Tensor:
    """Per-row gather from a 2-d tensor: out[i] = a[i, indices[i]]."""
    if a.ndim != 2:
        raise DimensionError(f"select_index expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    n, c = a.shape
    if idx.shape != (n,):
        raise DimensionError(f"select_index: index shape {idx.shape} does not match rows {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ArgumentError(f"select_index: index out of range for {c} columns")
    rows = np.arange(n)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        return (buf,)

    return _make(a.data[rows, idx], (a,), backward, "select_index")


def sum_excluding(a: Tensor, indices) -> Tensor:
    """Per-row sum of a 2-d tensor skipping one column per row.

    Computed by direct summation of the kept entries, so no cancellation
    occurs even when the skipped entry is close to the row total.
    """
    if a.ndim != 2:
        raise DimensionError(f"sum_excluding expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    n, c = a.shape
    if idx.shape != (n,):
        raise DimensionError(f"sum_excluding: index shape {idx.shape} does not match rows {n}")
    mask = np.ones_like(a.data)
    mask[np.arange(n), idx] = 0.0

    def backward(g):
        return (g[:, None] * mask,)

    return _make(np.where(mask > 0, a.data, 0.0).sum(axis=1), (a,), backward, "sum_excluding")


# ----------------------------------------------------------------------
# activations and pooling
# ----------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def avg_pool(a: Tensor, window: int, stride: int, axis: int) -> Tensor:
    """Average strided windows along exactly one axis.

    Output extent along ``axis`` is floor((extent - window) / stride) + 1.
    """
    window, stride = int(window), int(stride)
    if window < 1 or stride < 1:
        raise ArgumentError(f"avg_pool: window {window} and stride {stride} must be >= 1")
    axis = axis % a.ndim
    extent = a.shape[axis]
    if extent < window:
        raise DimensionError(f"avg_pool: window {window} exceeds axis extent {extent}")
    out_extent = (extent - window) // stride + 1
    moved = np.moveaxis(a.data, axis, -1)
    starts = np.arange(out_extent) * stride
    windows = np.stack([moved[..., s:s + window] for s in starts], axis=-2)
    out = np.moveaxis(windows.mean(axis=-1), -1, axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        buf_moved = np.moveaxis(buf, axis, -1)
        g_moved = np.moveaxis(g, axis, -1)
        for i, s in enumerate(starts):
            buf_moved[..., s:s + window] += g_moved[..., i:i + 1] / window
        return (buf,)

    return _make(out, (a,), backward, "avg_pool")


# ----------------------------------------------------------------------
# convolution and normalization
# ----------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input.

    Output spatial extents follow floor((extent + 2*padding - k) / stride) + 1;
    a kernel that does not fit inside the padded input is a DimensionError.
    """
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {x.shape}")
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-d kernel, got shape {kernel.shape}")
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ArgumentError(f"conv2d: bad stride {stride} or padding {padding}")
    n, c, h, w = x.shape
    k_out, k_in, kh, kw = kernel.shape
    if k_in != c:
        raise DimensionError(f"conv2d: kernel expects {k_in} input channels, input has {c}")
    if x.dtype != kernel.dtype:
        raise ArgumentError(f"conv2d: dtype mismatch {x.dtype} vs {kernel.dtype}")
    if bias is not None and bias.shape != (k_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {k_out} kernels")

    def out_extent(e, k):
        num = e + 2 * padding - k
        if num < 0:
            raise DimensionError(
                f"conv2d: kernel extent {k} exceeds padded input extent {e + 2 * padding}")
        return num // stride + 1

    oh, ow = out_extent(h, kh), out_extent(w, kw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp, shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        d_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                part = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                d_xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    part.transpose(0, 3, 1, 2)
        d_x = d_xp[:, :, padding:padding + h, padding:padding + w] if padding else d_xp
        grads = [d_x, d_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    In train mode normalizes with biased batch statistics, updates the
    running buffers in place (unbiased variance), and needs batch size
    of at least 2.  In eval mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if train and n < 2:
        raise ArgumentError("batch_norm: train mode requires batch size >= 2")
    m = n * h * w

    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1) if m > 1 else 1.0)
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        d_gamma = (g * xhat).sum(axis=(0, 2, 3))
        d_beta = g.sum(axis=(0, 2, 3))
        d_xhat = g * gamma.data[None, :, None, None]
        if train:
            sum_dxhat = d_xhat.sum(axis=(0, 2, 3))
            sum_dxhat_xhat = (d_xhat * xhat).sum(axis=(0, 2, 3))
            d_x = (inv_std[None, :, None, None] / m) * (
                m * d_xhat
                - sum_dxhat[None, :, None, None]
                - xhat * sum_dxhat_xhat[None, :, None, None])
        else:
            d_x = d_xhat * inv_std[None, :, None, None]
        return d_x, d_gamma, d_beta

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of a batch of rows: x @ weight.T + bias."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: {x.shape[1]} features vs weight fan-in {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match fan-out {weight.shape[0]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def pair_conv(features: Tensor, first: np.ndarray, second: np.ndarray,
              kernels: Tensor, bias: Tensor) -> Tensor:
    """Class-pair mixing convolution.

    For features of shape (N, K, C) and P index pairs, every 2-tap
    kernel m produces out[n, m, k, p] = v[m,0]*feat[n,k,i_p] +
    v[m,1]*feat[n,k,j_p] + c[m].
    """
    if features.ndim != 3:
        raise DimensionError(f"pair_conv expects (N, K, C) features, got {features.shape}")
    first = np.asarray(first, dtype=np.int64)
    second = np.asarray(second, dtype=np.int64)
    if first.shape != second.shape or first.ndim != 1:
        raise DimensionError("pair_conv: pair index arrays must be 1-d and equal length")
    c_extent = features.shape[2]
    for idx in (first, second):
        if idx.size and (idx.min() < 0 or idx.max() >= c_extent):
            raise ArgumentError("pair_conv: pair index out of class range")
    if kernels.ndim != 2 or kernels.shape[1] != 2:
        raise DimensionError(f"pair_conv expects (M, 2) kernels, got {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"pair_conv: bias shape {bias.shape} does not match {kernels.shape[0]} kernels")

    fi = features.data[:, :, first]
    fj = features.data[:, :, second]
    v = kernels.data
    out = (v[None, :, 0, None, None] * fi[:, None]
           + v[None, :, 1, None, None] * fj[:, None]
           + bias.data[None, :, None, None])

    def backward(g):
        gi = np.tensordot(g, v[:, 0], axes=([1], [0]))
        gj = np.tensordot(g, v[:, 1], axes=([1], [0]))
        d_feat = np.zeros_like(features.data)
        d_feat_t = np.moveaxis(d_feat, 2, 0)
        np.add.at(d_feat_t, first, np.moveaxis(gi, 2, 0))
        np.add.at(d_feat_t, second, np.moveaxis(gj, 2, 0))
        d_v = np.stack([
            np.einsum("nmkp,nkp->m", g, fi),
            np.einsum("nmkp,nkp->m", g, fj),
        ], axis=1)
        d_c = g.sum(axis=(0, 2, 3))
        return d_feat, d_v, d_c

    return _make(out, (features, kernels, bias), backward, "pair_conv")


# ----------------------------------------------------------------------
# softmax-family losses (log-sum-exp stabilized)
# ----------------------------------------------------------------------


def _rowwise(z: Tensor, op: str) -> None:
    if z.ndim not in (1, 2):
        raise DimensionError(f"{op} expects a vector or a batch of rows, got shape {z.shape}")


def softmax(z: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    _rowwise(z, "softmax")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (z,), backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    """Log-softmax along the last axis via the log-sum-exp trick."""
    _rowwise(z, "log_softmax")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (z,), backward, "log_softmax")


def cross_entropy(z: Tensor, labels) -> Tensor:
    """Per-sample negative log-likelihood of integer labels under softmax(z).

    Returns a vector of per-sample losses for a 2-d logits batch and a
    scalar for a single logits vector.  Callers take the mean for the
    usual batch reduction.
    """
    _rowwise(z, "cross_entropy")
    squeeze = z.ndim == 1
    z2 = reshape(z, (1, -1)) if squeeze else z
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z2.shape
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy: {y.shape[0]} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ArgumentError(f"cross_entropy: label out of range for {c} classes")
    losses = -select_index(log_softmax(z2), y)
    return reshape(losses, ()) if squeeze else losses


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) along the last axis for strictly positive distributions.

    Inputs must sum to 1 within 1e-6 per row.  Returns a scalar for
    vectors and a per-row vector for batches.
    """
    _binary_check(p, q, "kl_divergence")
    _rowwise(p, "kl_divergence")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data <= 0.0):
            raise ArgumentError(f"kl_divergence: {name} must be strictly positive")
        sums = t.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ArgumentError(f"kl_divergence: {name} rows must sum to 1 within 1e-6")
    log_ratio = np.log(p.data) - np.log(q.data)
    out = (p.data * log_ratio).sum(axis=-1)

    def backward(g):
        g_col = g[..., None]
        return g_col * (log_ratio + 1.0), g_col * (-p.data / q.data)

    return _make(out, (p, q), backward, "kl_divergence")


def one_hot(labels, num_classes: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Plain numpy one-hot rows, handy for oracle arithmetic."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.zeros((y.size, num_classes), dtype=dtype)
    out[np.arange(y.size), y] = 1.0
    return out
