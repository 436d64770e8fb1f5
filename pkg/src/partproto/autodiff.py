"""Reverse-mode automatic differentiation on numpy float64 arrays.

A small tape-based tensor library: each op returns a new Tensor wired to its
parents with a backward closure. Calling backward() on a scalar loss walks
the tape in reverse topological order and accumulates gradients into every
tensor that requires them. Everything is float64; there is no broadcasting
beyond "both shapes equal" or "one side is a scalar".
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "AutodiffError",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_bias",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "conv2d",
    "tsum",
    "tmean",
    "amax",
    "amin",
    "max_with_argmax",
    "min_with_argmax",
    "smallest_k_mean",
    "sq_l2",
    "l2norm",
    "pairwise_sqdist",
    "softmax_cross_entropy",
    "softmax_cross_entropy_mean",
    "reshape",
    "transpose",
    "concat",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class AutodiffError(RuntimeError):
    """Raised on tape misuse (repeated backward) or non-finite values in debug mode."""


_debug_checks = False


def set_debug_checks(enabled: bool) -> bool:
    """Toggle NaN/Inf detection after every forward op. Returns the previous setting."""
    global _debug_checks
    prev = _debug_checks
    _debug_checks = bool(enabled)
    return prev


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 ndarray plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_used")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"
        self._used = False  # set once backward() has run from this node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backprop from a scalar. Calling twice on the same node is an error:
        the tape holds no state to make a second pass meaningful, and silent
        re-accumulation is a classic double-counting bug."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        if self._used:
            raise AutodiffError("backward() already called on this tensor; rebuild the graph or zero_grad()")
        self._used = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division only supports a python scalar divisor")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[Tensor], None] | None) -> Tensor:
    out = Tensor(data)
    out._op = op
    if _debug_checks and not np.isfinite(data).all():
        raise AutodiffError(f"non-finite values produced by op '{op}'")
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if any(p.requires_grad for p in parents) and backward is not None:
        out.requires_grad = True
        out._parents = parents
        out._backward = lambda: backward(out)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # A scalar operand collects gradient from every output element.
    if t.shape == g.shape:
        return g
    return np.full(t.shape, g.sum()) if t.size == 1 else g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")

    def back(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_reduce_to(out.grad, a))
        if b.requires_grad:
            b._accum(_reduce_to(out.grad, b))

    return _make(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")

    def back(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_reduce_to(out.grad, a))
        if b.requires_grad:
            b._accum(_reduce_to(-out.grad, b))

    return _make(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")

    def back(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(_reduce_to(out.grad * b.data, a))
        if b.requires_grad:
            b._accum(_reduce_to(out.grad * a.data, b))

    return _make(a.data * b.data, (a, b), "mul", back)


def neg(a) -> Tensor:
    a = _coerce(a)

    def back(out: Tensor) -> None:
        a._accum(-out.grad)

    return _make(-a.data, (a,), "neg", back)


def scale(a, s: float) -> Tensor:
    a = _coerce(a)
    s = float(s)

    def back(out: Tensor) -> None:
        a._accum(out.grad * s)

    return _make(a.data * s, (a,), "scale", back)


def add_bias(x, b) -> Tensor:
    """x[..., c] + b[c]: channel bias over the last axis."""
    x, b = _coerce(x), _coerce(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")

    def back(out: Tensor) -> None:
        if x.requires_grad:
            x._accum(out.grad)
        if b.requires_grad:
            b._accum(out.grad.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(x.data + b.data, (x, b), "add_bias", back)


# -- elementwise nonlinearities -------------------------------------------


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def back(out: Tensor) -> None:
        a._accum(out.grad * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), "relu", back)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # Split by sign to avoid exp overflow on large negatives.
    d = a.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def back(out: Tensor) -> None:
        a._accum(out.grad * y * (1.0 - y))

    return _make(y, (a,), "sigmoid", back)


def exp(a) -> Tensor:
    a = _coerce(a)
    y = np.exp(a.data)

    def back(out: Tensor) -> None:
        a._accum(out.grad * y)

    return _make(y, (a,), "exp", back)


def log(a) -> Tensor:
    """Natural log. Inputs must be strictly positive."""
    a = _coerce(a)

    def back(out: Tensor) -> None:
        a._accum(out.grad / a.data)

    return _make(np.log(a.data), (a,), "log", back)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    y = np.sqrt(a.data)

    def back(out: Tensor) -> None:
        a._accum(out.grad * 0.5 / y)

    return _make(y, (a,), "sqrt", back)


# -- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def back(out: Tensor) -> None:
        if a.requires_grad:
            a._accum(out.grad @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ out.grad)

    return _make(a.data @ b.data, (a, b), "matmul", back)


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid 2-D convolution (really cross-correlation, as everywhere in deep
    learning) over channel-last images.

    x: (n, w, h, c) or (w, h, c); kernels: (c_out, kw, kh, c).
    Output spatial dims are floor((w - kw) / stride) + 1.
    """
    x, kernels = _coerce(x), _coerce(kernels)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: expected image (n,w,h,c) and kernels (o,kw,kh,c), got {x.shape}, {kernels.shape}")
    n, w, h, c = xd.shape
    c_out, kw, kh, kc = kernels.shape
    if kc != c or kw > w or kh > h:
        raise ShapeError(f"conv2d: kernels {kernels.shape} do not fit input {x.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")

    # windows: (n, w', h', c, kw, kh) via stride tricks, then one big tensordot.
    win = np.lib.stride_tricks.sliding_window_view(xd, (kw, kh), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    out_data = np.tensordot(win, kernels.data, axes=([4, 5, 3], [1, 2, 3]))
    wo, ho = out_data.shape[1], out_data.shape[2]

    def back(out: Tensor) -> None:
        g = out.grad.reshape(n, wo, ho, c_out)
        if kernels.requires_grad:
            # (o, kw, kh, c) <- sum over n, w', h'
            gk = np.tensordot(g, win, axes=([0, 1, 2], [0, 1, 2]))  # (o, c, kw, kh)
            kernels._accum(np.transpose(gk, (0, 2, 3, 1)))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            t = np.tensordot(g, kernels.data, axes=([3], [0]))  # (n, w', h', kw, kh, c)
            for i in range(kw):
                for j in range(kh):
                    gx[:, i:i + wo * stride:stride, j:j + ho * stride:stride, :] += t[:, :, :, i, j, :]
            x._accum(gx[0] if squeeze else gx)

    shaped = out_data[0] if squeeze else out_data
    return _make(shaped, (x, kernels), "conv2d", back)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)

    def back(out: Tensor) -> None:
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def back(out: Tensor) -> None:
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape) / count)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", back)


def _extreme(a: Tensor, axis, op: str) -> Tensor:
    """Shared max/min reduction. Ties route the whole gradient to the
    first index in row-major order, matching np.argmax/np.argmin."""
    take_max = op == "max"
    if axis is None:
        flat_idx = int(np.argmax(a.data) if take_max else np.argmin(a.data))
        val = a.data.reshape(-1)[flat_idx]

        def back(out: Tensor) -> None:
            g = np.zeros(a.size)
            g[flat_idx] = float(out.grad)
            a._accum(g.reshape(a.shape))

        return _make(np.float64(val), (a,), op, back)

    idx = np.argmax(a.data, axis=axis) if take_max else np.argmin(a.data, axis=axis)
    val = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(idx, axis),
                          np.expand_dims(out.grad, axis), axis=axis)
        a._accum(g)

    return _make(val, (a,), op, back)


def amax(a, axis=None) -> Tensor:
    return _extreme(_coerce(a), axis, "max")


def amin(a, axis=None) -> Tensor:
    return _extreme(_coerce(a), axis, "min")


def max_with_argmax(a) -> tuple[Tensor, int]:
    """Global max and its flat row-major index (first index on ties)."""
    a = _coerce(a)
    idx = int(np.argmax(a.data))
    return _extreme(a, None, "max"), idx


def min_with_argmax(a) -> tuple[Tensor, int]:
    a = _coerce(a)
    idx = int(np.argmin(a.data))
    return _extreme(a, None, "min"), idx


def smallest_k_mean(a, k: int) -> Tensor:
    """Mean of the k smallest elements (flattened). Ties at the cut are
    resolved by first flat index; each selected element gets gradient 1/k."""
    a = _coerce(a)
    if not 1 <= k <= a.size:
        raise ShapeError(f"smallest_k_mean: k={k} out of range for size {a.size}")
    order = np.argsort(a.data.reshape(-1), kind="stable")[:k]

    def back(out: Tensor) -> None:
        g = np.zeros(a.size)
        g[order] = float(out.grad) / k
        a._accum(g.reshape(a.shape))

    return _make(np.float64(a.data.reshape(-1)[order].mean()), (a,), "smallest_k_mean", back)


# -- fused ops ------------------------------------------------------------


def sq_l2(a, b) -> Tensor:
    """Squared L2 distance between two same-shape tensors, as a scalar."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data

    def back(out: Tensor) -> None:
        g = 2.0 * float(out.grad) * diff
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(np.float64((diff * diff).sum()), (a, b), "sq_l2", back)


def l2norm(a) -> Tensor:
    """Euclidean norm of the flattened tensor. Subgradient 0 at the origin."""
    a = _coerce(a)
    n = float(np.sqrt((a.data * a.data).sum()))

    def back(out: Tensor) -> None:
        if n > 0.0:
            a._accum(float(out.grad) * a.data / n)

    return _make(np.float64(n), (a,), "l2norm", back)


def pairwise_sqdist(p, q) -> Tensor:
    """All squared distances between rows: p (m, d), q (n, d) -> (m, n).

    Computed via the expansion |p|^2 + |q|^2 - 2 p.q with a clamp at zero;
    the clamp only shields tiny negative rounding, the gradient is the exact
    2(p - q) form either way.
    """
    p, q = _coerce(p), _coerce(q)
    if p.data.ndim != 2 or q.data.ndim != 2 or p.shape[1] != q.shape[1]:
        raise ShapeError(f"pairwise_sqdist: need (m,d) and (n,d), got {p.shape}, {q.shape}")
    pp = (p.data * p.data).sum(axis=1)[:, None]
    qq = (q.data * q.data).sum(axis=1)[None, :]
    d = np.maximum(pp + qq - 2.0 * (p.data @ q.data.T), 0.0)

    def back(out: Tensor) -> None:
        g = out.grad
        if p.requires_grad:
            p._accum(2.0 * (g.sum(axis=1)[:, None] * p.data - g @ q.data))
        if q.requires_grad:
            q._accum(2.0 * (g.sum(axis=0)[:, None] * q.data - g.T @ p.data))

    return _make(d, (p, q), "pairwise_sqdist", back)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, label: int) -> Tensor:
    """Cross-entropy of one logit vector against an integer label,
    stabilized by max subtraction."""
    logits = _coerce(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy: expected 1-d logits, got {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    ls = _log_softmax(logits.data)

    def back(out: Tensor) -> None:
        g = np.exp(ls)
        g[label] -= 1.0
        logits._accum(float(out.grad) * g)

    return _make(np.float64(-ls[label]), (logits,), "softmax_ce", back)


def softmax_cross_entropy_mean(logits, labels) -> Tensor:
    """Mean cross-entropy over a batch: logits (n, v), labels (n,) ints."""
    logits = _coerce(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy_mean: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise IndexError("label out of range")
    n = logits.shape[0]
    ls = _log_softmax(logits.data)

    def back(out: Tensor) -> None:
        g = np.exp(ls)
        g[np.arange(n), labels] -= 1.0
        logits._accum(float(out.grad) * g / n)

    return _make(np.float64(-ls[np.arange(n), labels].mean()), (logits,), "softmax_ce_mean", back)


# -- shape ops ------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    shape = tuple(shape)

    def back(out: Tensor) -> None:
        a._accum(out.grad.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", back)


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    axes_t = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes_t)

    def back(out: Tensor) -> None:
        a._accum(np.transpose(out.grad, inv))

    return _make(np.transpose(a.data, axes_t), (a,), "transpose", back)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(out: Tensor) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, "concat", back)


def _getitem(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints and slices); gradient scatters back."""
    view = a.data[key]

    def back(out: Tensor) -> None:
        g = np.zeros_like(a.data)
        g[key] += out.grad
        a._accum(g)

    return _make(np.array(view, copy=True), (a,), "getitem", back)
