"""Dense tensor core: numpy-backed tensors with reverse-mode autodiff.

Everything downstream (feature aggregation, the selective scan block, keypoint
transfer, the training loss) is built from the ops in this module, so each op
carries its own vector-Jacobian product. Buffers are row-major float32 by
default; float64 is allowed so gradient checks can run in extended precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A dense row-major array plus the bookkeeping for reverse accumulation.

    Invariants: rank >= 1, no zero extents, dtype float32 or float64.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(e == 0 for e in arr.shape):
            raise ShapeError(f"zero-extent dimension in shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- graph plumbing ---------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._prev = ()
        out._backward = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._prev = parents
            out._backward = backward
        return out

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar (size-1) tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._prev, grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                if parent.grad is None:
                    parent.grad = g.copy() if g.base is not None else g
                else:
                    parent.grad = parent.grad + g

    def zero_grad(self):
        self.grad = None

    # -- convenience ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data + b.data

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(out, (a, b), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data * b.data

        def bwd(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._from_op(out, (a, b), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def bwd(g):
            return (-g,)

        return Tensor._from_op(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = a.data / b.data

        def bwd(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._from_op(out, (a, b), bwd)

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError("matmul supports 2-D operands only")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def bwd(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._from_op(out, (a, b), bwd)

    # -- shape ops --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        out = a.data.reshape(shape)

        def bwd(g):
            return (g.reshape(old),)

        return Tensor._from_op(out, (a,), bwd)

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.data.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = np.ascontiguousarray(a.data.transpose(axes))

        def bwd(g):
            return (g.transpose(tuple(inv)),)

        return Tensor._from_op(out, (a,), bwd)

    def narrow(self, axis: int, start: int, length: int):
        """Contiguous slice along one axis."""
        a = self
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        out = np.ascontiguousarray(a.data[idx])

        def bwd(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        return Tensor._from_op(out, (a,), bwd)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        if out.ndim == 0:
            out = out.reshape(1)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return Tensor._from_op(out, (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities --------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)

        def bwd(g):
            return (g * out,)

        return Tensor._from_op(out, (a,), bwd)

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)

        def bwd(g):
            return (g / (2.0 * out),)

        return Tensor._from_op(out, (a,), bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return Tensor._from_op(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gate/stream nonlinearity of the scan block."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = d * s

    def bwd(g):
        return (g * (s * (1.0 + d * (1.0 - s))),)

    return Tensor._from_op(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(np.asarray(0.0, dtype=x.dtype), x.data)

    def bwd(g):
        d = x.data
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return Tensor._from_op(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rejects NaN input."""
    if np.isnan(x.data).any():
        raise ValueError("softmax: NaN in input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Scale slices along `axis` to unit L2 norm; slices with norm <= eps map to zero."""
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True))
    norm = norm.astype(x.dtype)
    active = norm > eps
    safe = np.where(active, norm, 1.0)
    out = np.where(active, x.data / safe, 0.0).astype(x.dtype)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(active, (g - out * dot) / safe, 0.0)
        return (gx,)

    return Tensor._from_op(out, (x,), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map per row: x[n, d_in] @ weight[d_out, d_in]^T + bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: inner extents differ ({x.shape} vs {weight.shape})")
    out = x @ weight.transpose()
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear: bias extent must match d_out")
        out = out + bias
    return out


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows by a constant index array; scatter-add on the way back."""
    idx = np.asarray(indices, dtype=np.int64)
    out = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (x,), bwd)


# -- convolutions ---------------------------------------------------------


def _corr2d(arr: np.ndarray, kernel: np.ndarray, pad: int) -> np.ndarray:
    """Cross-correlation with zero padding; arr is (..., C, H, W)."""
    batched = arr.ndim == 4
    if not batched:
        arr = arr[None]
    k = kernel.shape[-1]
    p = np.pad(arr, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(p, (k, k), axis=(2, 3))
    out = np.einsum("lcijuv,ocuv->loij", cols, kernel, optimize=True)
    out = np.ascontiguousarray(out, dtype=arr.dtype)
    return out if batched else out[0]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Same-size 2D cross-correlation with zero padding.

    x is (C_in, H, W) or batched (L, C_in, H, W); kernel is (C_out, C_in, k, k)
    with odd k, padding (k-1)/2 so spatial extents are preserved.
    """
    k = kernel.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel width must be odd, got {k}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("conv2d: kernel must be (C_out, C_in, k, k)")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError("conv2d: padding must be (k-1)/2 to preserve extents")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError("conv2d: input must be (C,H,W) or (L,C,H,W)")
    c_axis = 1 if batched else 0
    if x.shape[c_axis] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[c_axis]} != kernel C_in {kernel.shape[1]}"
        )

    out = _corr2d(x.data, kernel.data, padding)
    parents = [x, kernel]

    def bwd_core(g):
        garr = g if batched else g[None]
        xarr = x.data if batched else x.data[None]
        kt = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gx = _corr2d(garr, kt, padding)
        p = np.pad(xarr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = np.lib.stride_tricks.sliding_window_view(p, (k, k), axis=(2, 3))
        gk = np.einsum("loij,lcijuv->ocuv", garr, cols, optimize=True)
        return (gx if batched else gx[0]), gk

    if bias is None:
        def bwd(g):
            return bwd_core(g)

        return Tensor._from_op(out, (x, kernel), bwd)

    if bias.shape != (kernel.shape[0],):
        raise ShapeError("conv2d: bias extent must equal C_out")
    out = out + bias.data[..., None, None]

    def bwd_b(g):
        gx, gk = bwd_core(g)
        gb = g.sum(axis=(0, 2, 3)) if batched else g.sum(axis=(1, 2))
        return gx, gk, gb

    return Tensor._from_op(out, (x, kernel, bias), bwd_b)


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise convolution over the sequence axis with left zero padding.

    x is (n, d), kernel is (d, k); output[t, i] depends on x[t-k+1 .. t, i].
    """
    if x.data.ndim != 2 or kernel.data.ndim != 2:
        raise ShapeError("causal_conv1d expects (n, d) input and (d, k) kernel")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError("causal_conv1d: channel extents differ")
    k = kernel.shape[1]
    pad = np.pad(x.data, ((k - 1, 0), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, k, axis=0)  # (n, d, k)
    out = np.einsum("tdk,dk->td", win, kernel.data, optimize=True).astype(x.dtype)

    def bwd(g):
        gk = np.einsum("td,tdk->dk", g, win, optimize=True)
        gpad = np.pad(g, ((0, k - 1), (0, 0)))
        gwin = np.lib.stride_tricks.sliding_window_view(gpad, k, axis=0)
        # gx[t, i] = sum_u kernel[i, u] * g[t + (k-1) - u, i]
        gx = np.einsum("tdk,dk->td", gwin, kernel.data[:, ::-1], optimize=True)
        return gx.astype(x.dtype), gk

    return Tensor._from_op(out, (x, kernel), bwd)


# -- permutations ---------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    """A bijection on 0..n-1, stored as the index array of the reordering."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise ShapeError("permutation indices must be 1-D")
        n = idx.shape[0]
        seen = np.zeros(n, dtype=bool)
        if idx.min(initial=0) < 0 or idx.max(initial=-1) >= n:
            raise ValueError("permutation indices out of range")
        seen[idx] = True
        if not seen.all():
            raise ValueError("permutation indices are not a bijection")

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.indices)
        inv[self.indices] = np.arange(len(self), dtype=np.int64)
        return Permutation(inv)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr)[self.indices]


def argsort_desc_stable(scores: np.ndarray) -> Permutation:
    """Stable descending argsort; ties keep their original relative order."""
    s = np.asarray(scores)
    if s.ndim != 1:
        raise ShapeError("argsort_desc_stable expects a 1-D score array")
    if np.isnan(s).any():
        raise ValueError("argsort_desc_stable: NaN in scores")
    return Permutation(np.argsort(-s.astype(np.float64), kind="stable"))
