"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the rest of the pipeline needs are implemented, on a
numpy backend. Storage is row-major contiguous float32 or float64; there is
no broadcasting beyond scalar-with-tensor.

float64 matmuls and axis reductions accumulate in a fixed sequential order
so that results are bit-identical to naive scalar loops; float32 matmuls go
through BLAS for speed. Gradients always accumulate (add into .grad), never
overwrite, and backward replays recorded operations in exact reverse
execution order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32
LOG_EPS = 1e-12

_SEQ = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable operation recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # float64 keeps a deterministic k-order so scalar-loop oracles match bitwise
    if a.dtype == np.float64:
        return _seq_matmul(a, b)
    return a @ b


def _seq_sum(x: np.ndarray, axis) -> np.ndarray:
    """Sum with strict left-to-right accumulation (bitwise loop-equivalent)."""
    if x.size == 0:
        return np.zeros((), dtype=x.dtype) if axis is None else np.sum(x, axis=axis)
    if axis is None:
        return np.cumsum(x.ravel())[-1]
    moved = np.moveaxis(x, axis, 0)
    return np.cumsum(moved, axis=0)[-1]


class OpRecord:
    """One executed differentiable operation on the tape."""

    __slots__ = ("name", "inputs", "out", "backward", "seq")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.seq = next(_SEQ)

    def __repr__(self):
        return f"OpRecord({self.name}, seq={self.seq})"


class Tensor:
    """A dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # ------------------------------------------------------------------
    def _accum_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Propagate gradients from this tensor to all recorded inputs.

        Visits operations in exact reverse execution order, accumulating
        into .grad buffers (shared subexpressions add both paths).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")
        self._accum_grad(grad)
        for rec in reversed(execution_trace(self)):
            if rec.out.grad is not None:
                rec.backward(rec.out.grad)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_match(self, other, "add")
            out_data = self.data + other.data
            return _record("add", (self, other), out_data, _add_backward(self, other))
        c = self.data.dtype.type(other)
        out_data = self.data + c
        return _record("add_scalar", (self,), out_data, lambda g, t=self: t._grad_if_needed(g))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_match(self, other, "mul")
            out_data = self.data * other.data
            def bwd(g, a=self, b=other):
                a._grad_if_needed(g * b.data)
                b._grad_if_needed(g * a.data)
            return _record("mul", (self, other), out_data, bwd)
        c = self.data.dtype.type(other)
        out_data = self.data * c
        return _record("mul_scalar", (self,), out_data, lambda g, t=self, k=c: t._grad_if_needed(g * k))

    __rmul__ = __mul__

    def __neg__(self):
        return _record("neg", (self,), -self.data, lambda g, t=self: t._grad_if_needed(-g))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __matmul__(self, other):
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise ShapeError("matmul requires a Tensor operand")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(f"matmul needs rank-2 operands, got {self.shape} and {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul inner extents differ: {self.shape} x {other.shape}")
        _check_dtype(self, other)
        out_data = _mm(self.data, other.data)
        def bwd(g, a=self, b=other):
            a._grad_if_needed(_mm(g, b.data.T))
            b._grad_if_needed(_mm(a.data.T, g))
        return _record("matmul", (self, other), out_data, bwd)

    # -- pointwise nonlinearities ---------------------------------------
    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0)
        def bwd(g, t=self):
            t._grad_if_needed(g * (t.data > 0))
        return _record("relu", (self,), out_data, bwd)

    def sigmoid(self) -> "Tensor":
        x = self.data
        pos = x >= 0
        ex = np.exp(np.where(pos, -x, x))  # argument always <= 0, no overflow
        out_data = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        out_data = out_data.astype(self.data.dtype, copy=False)
        def bwd(g, t=self, s=out_data):
            t._grad_if_needed(g * s * (1.0 - s))
        return _record("sigmoid", (self,), out_data, bwd)

    def log(self) -> "Tensor":
        # inputs clamped at LOG_EPS; clamped elements get zero gradient
        clamped = np.maximum(self.data, self.data.dtype.type(LOG_EPS))
        out_data = np.log(clamped)
        def bwd(g, t=self, c=clamped):
            live = t.data >= LOG_EPS
            t._grad_if_needed(g * live / c)
        return _record("log", (self,), out_data, bwd)

    # -- reductions ------------------------------------------------------
    def sum(self, axis=None) -> "Tensor":
        _check_axis(self, axis)
        out_data = _seq_sum(self.data, axis)
        def bwd(g, t=self, ax=axis):
            if ax is None:
                t._grad_if_needed(np.full_like(t.data, g))
            else:
                t._grad_if_needed(np.repeat(np.expand_dims(g, ax), t.data.shape[ax], axis=ax))
        return _record("sum", (self,), out_data, bwd)

    def mean(self, axis=None) -> "Tensor":
        _check_axis(self, axis)
        n = self.data.size if axis is None else self.data.shape[axis]
        if n == 0:
            raise ShapeError("mean over empty extent")
        k = self.data.dtype.type(n)
        out_data = _seq_sum(self.data, axis) / k
        def bwd(g, t=self, ax=axis, kk=k):
            if ax is None:
                t._grad_if_needed(np.full_like(t.data, g / kk))
            else:
                t._grad_if_needed(np.repeat(np.expand_dims(g / kk, ax), t.data.shape[ax], axis=ax))
        return _record("mean", (self,), out_data, bwd)

    def sorted_sum(self, axis: int) -> "Tensor":
        """Sum over an axis with summands accumulated in ascending value order.

        The result depends only on the multiset of values, so it is exactly
        invariant to permutations along the reduced axis.
        """
        _check_axis(self, axis)
        moved = np.moveaxis(self.data, axis, 0)
        out_data = np.cumsum(np.sort(moved, axis=0), axis=0)[-1] if moved.shape[0] else np.zeros(moved.shape[1:], self.data.dtype)
        def bwd(g, t=self, ax=axis):
            t._grad_if_needed(np.repeat(np.expand_dims(g, ax), t.data.shape[ax], axis=ax))
        return _record("sorted_sum", (self,), out_data, bwd)

    # -- layout ------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        def bwd(g, t=self):
            t._grad_if_needed(g.reshape(t.data.shape))
        return _record("reshape", (self,), np.ascontiguousarray(out_data), bwd)

    def transpose_last_two(self) -> "Tensor":
        if self.data.ndim < 2:
            raise ShapeError(f"transpose_last_two needs rank >= 2, got shape {self.shape}")
        out_data = np.ascontiguousarray(np.swapaxes(self.data, -1, -2))
        def bwd(g, t=self):
            t._grad_if_needed(np.swapaxes(g, -1, -2))
        return _record("transpose_last_two", (self,), out_data, bwd)

    def softmax(self) -> "Tensor":
        """Softmax over the last axis; rows sum to one."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out_data = (e / e.sum(axis=-1, keepdims=True)).astype(self.data.dtype, copy=False)
        def bwd(g, t=self, s=out_data):
            inner = (g * s).sum(axis=-1, keepdims=True)
            t._grad_if_needed((g - inner) * s)
        return _record("softmax", (self,), out_data, bwd)

    def __getitem__(self, key) -> "Tensor":
        out_data = np.ascontiguousarray(self.data[key])
        def bwd(g, t=self, k=key):
            buf = np.zeros_like(t.data)
            buf[k] = g
            t._grad_if_needed(buf)
        return _record("slice", (self,), out_data, bwd)

    def gather_rows(self, indices) -> "Tensor":
        """Select rows (axis 0) by integer index; duplicate indices allowed."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("gather_rows expects a flat index list")
        if idx.size and (idx.min() < 0 or idx.max() >= self.data.shape[0]):
            raise ShapeError(f"gather_rows index out of range for extent {self.data.shape[0]}")
        out_data = self.data[idx]
        def bwd(g, t=self, ii=idx):
            buf = np.zeros_like(t.data)
            np.add.at(buf, ii, g)
            t._grad_if_needed(buf)
        return _record("gather_rows", (self,), np.ascontiguousarray(out_data), bwd)

    # ------------------------------------------------------------------
    def _grad_if_needed(self, g: np.ndarray):
        if self.requires_grad:
            self._accum_grad(np.asarray(g, dtype=self.data.dtype))


def _add_backward(a: Tensor, b: Tensor):
    def bwd(g):
        a._grad_if_needed(g)
        b._grad_if_needed(g)
    return bwd


def _check_match(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape {a.shape} != shape {b.shape}")
    _check_dtype(a, b)


def _check_dtype(a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _check_axis(t: Tensor, axis):
    if axis is None:
        return
    if not isinstance(axis, int) or not (-t.data.ndim <= axis < t.data.ndim):
        raise ShapeError(f"invalid axis {axis!r} for shape {t.shape}")


def _record(name, inputs, out_data, backward) -> Tensor:
    out = Tensor(out_data)
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out.op = OpRecord(name, inputs, out, backward)
    return out


def make_op(name, inputs, out_data, backward) -> Tensor:
    """Register a custom differentiable operation (used by conv, fake-quant)."""
    return _record(name, inputs, out_data, backward)


def execution_trace(out: Tensor):
    """All operations reachable from `out`, in execution order."""
    seen = set()
    records = []
    stack = [out]
    while stack:
        t = stack.pop()
        rec = t.op
        if rec is None or id(rec) in seen:
            continue
        seen.add(id(rec))
        records.append(rec)
        stack.extend(rec.inputs)
    records.sort(key=lambda r: r.seq)
    return records


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis, preserving operand order."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0]
    for t in tensors[1:]:
        _check_dtype(ref, t)
        if t.data.ndim != ref.data.ndim:
            raise ShapeError(f"concat rank mismatch: {ref.shape} vs {t.shape}")
    _check_axis(ref, axis)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bwd(g, parts=tensors, offs=offsets, ax=axis):
        for t, lo, hi in zip(parts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            t._grad_if_needed(g[tuple(sl)])
    return _record("concat", tuple(tensors), out_data, bwd)


# ---------------------------------------------------------------------------
# Spatial operations for the convolutional stem.
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = np.empty((oh * ow, c * kh * kw), dtype=x.dtype)
    n = 0
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw]
            cols[n] = patch.ravel()
            n += 1
    return cols, oh, ow, xp.shape


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on a single [C,H,W] image; weight is [OC,C,KH,KW]."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [OC,C,KH,KW], got {x.shape}, {weight.shape}")
    if x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    _check_dtype(x, weight)
    oc, c, kh, kw = weight.data.shape
    cols, oh, ow, padded_shape = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(oc, c * kh * kw).T
    out2d = _mm(cols, wmat) + bias.data[None, :]
    out_data = np.ascontiguousarray(out2d.reshape(oh, ow, oc).transpose(2, 0, 1))

    def bwd(g, xi=x, wi=weight, bi=bias):
        g2d = g.transpose(1, 2, 0).reshape(oh * ow, oc)
        wi._grad_if_needed(_mm(cols.T, g2d).T.reshape(oc, c, kh, kw))
        bi._grad_if_needed(_seq_sum(g2d, 0))
        if xi.requires_grad:
            dcols = _mm(g2d, wmat.T)
            buf = np.zeros(padded_shape, dtype=xi.data.dtype)
            n = 0
            for i in range(oh):
                for j in range(ow):
                    buf[:, i * stride : i * stride + kh, j * stride : j * stride + kw] += dcols[n].reshape(c, kh, kw)
                    n += 1
            if padding:
                buf = buf[:, padding:-padding, padding:-padding]
            xi._grad_if_needed(buf)

    return _record("conv2d", (x, weight, bias), out_data, bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on a [C,H,W] tensor."""
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    v = x.data.reshape(c, h // 2, 2, w // 2, 2)
    q = x.data.dtype.type(0.25)
    out_data = (((v[:, :, 0, :, 0] + v[:, :, 0, :, 1]) + v[:, :, 1, :, 0]) + v[:, :, 1, :, 1]) * q
    def bwd(g, t=x, k=q):
        buf = np.empty_like(t.data)
        bv = buf.reshape(c, h // 2, 2, w // 2, 2)
        gq = g * k
        for a in range(2):
            for b in range(2):
                bv[:, :, a, :, b] = gq
        t._grad_if_needed(buf)
    return _record("avg_pool2", (x,), out_data, bwd)
