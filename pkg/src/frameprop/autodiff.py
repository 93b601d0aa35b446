"""Minimal dense-tensor autodiff engine.

Tensors wrap numpy arrays in the fixed [batch, channels, height, width]
layout (lower-rank arrays are allowed for scalars, biases and logits) and
record a reverse-mode tape while ``grad_enabled()`` is true.  Double
precision is the default; single precision is available for benchmark
runs via the ``dtype`` argument of the constructors.

Broadcasting is deliberately restricted to two cases used by the model:
bias-add inside ``conv2d`` and channel-wise scaling ([B,C,1,1] against
[B,C,H,W]).  Every other shape mismatch raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient and tape record.

    ``grad`` is lazily allocated by ``backward`` and accumulates across
    separate backward passes; call ``zero_grad`` (or an optimizer's
    ``zero_grad``) between iterations.  Replaying ``backward`` on the
    same graph twice raises, which keeps accumulation semantics
    unambiguous.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._done = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, cut off from the tape (stop-gradient)."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- graph construction ------------------------------------------------

    def _accumulate(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from a scalar root.

        Populates ``grad`` on every reachable tensor with
        ``requires_grad`` set.  The graph is consumed: a second call on
        the same root raises RuntimeError.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        if self._done:
            raise RuntimeError("backward already ran on this graph; rebuild it")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {}
        if seed is None:
            seed = np.ones_like(self.data)
        grads[id(self)] = np.asarray(seed, dtype=self.data.dtype).reshape(self.data.shape)
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad and parent._backward is None:
                        continue
                    acc = grads.get(id(parent))
                    # never mutate stored arrays in place: backward closures may
                    # hand out views or the same array to several parents
                    grads[id(parent)] = pg if acc is None else acc + pg
                node._done = True
        self._done = True

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def _topo_order(root: Tensor) -> list:
    """Reverse topological order; iterative to survive deep graphs."""
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
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _binary_mode(a: Tensor, b: Tensor) -> str:
    """Classify the allowed shape pairings for elementwise binary ops."""
    if a.shape == b.shape:
        return "same"
    if a.data.size == 1 or b.data.size == 1:
        return "scalar"
    if (
        len(a.shape) == 4
        and len(b.shape) == 4
        and a.shape[:2] == b.shape[:2]
        and (a.shape[2:] == (1, 1) or b.shape[2:] == (1, 1))
    ):
        return "channel"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return grad.sum().reshape(shape)
    # channel-wise case: collapse the spatial axes
    return grad.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _binary_mode(a, b)
    data = a.data + b.data

    def backward(g):
        return ((a, _reduce_to(g, a.shape)), (b, _reduce_to(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _binary_mode(a, b)
    data = a.data * b.data

    def backward(g):
        return (
            (a, _reduce_to(g * b.data, a.shape)),
            (b, _reduce_to(g * a.data, b.shape)),
        )

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_mode(a, b)
    data = a.data / b.data

    def backward(g):
        return (
            (a, _reduce_to(g / b.data, a.shape)),
            (b, _reduce_to(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _make(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return ((x, g * (x.data > 0)),)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for stability at large |x|
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        return ((x, g * data * (1.0 - data)),)

    return _make(data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        return ((x, g * data),)

    return _make(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    data = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return _make(data, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    data = np.abs(x.data)

    def backward(g):
        return ((x, g * np.sign(x.data)),)

    return _make(data, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)

    def backward(g):
        inside = (x.data >= lo) & (x.data <= hi)
        return ((x, g * inside),)

    return _make(data, (x,), backward)


def tsum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.data.dtype)

    def backward(g):
        if axis is None:
            return ((x, np.broadcast_to(g.reshape(()), x.shape).astype(x.data.dtype)),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((x, np.broadcast_to(gg, x.shape)),)

    return _make(data, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(tsum(x), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.shape)),)

    return _make(data, (x,), backward)


def permute(x: Tensor, axes: tuple) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((x, np.transpose(g, inverse)),)

    return _make(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return _make(data, tuple(tensors), backward)


def gradient_reversal(x: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    data = x.data.copy()

    def backward(g):
        return ((x, g * (-lam)),)

    return _make(data, (x,), backward)


# -- structured operations ---------------------------------------------------


def softmax(x: Tensor, axis: int, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stabilized softmax over ``axis``.

    ``mask`` (boolean, same shape) restricts normalization to the true
    entries; masked entries come out exactly 0.  A slice with no valid
    entry is an error rather than 0/0.
    """
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax: some slice is fully masked")
        logits = np.where(mask, x.data, -np.inf)
    else:
        logits = x.data
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        inner = np.sum(g * s, axis=axis, keepdims=True)
        return ((x, s * (g - inner)),)

    return _make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        soft = np.exp(data)
        return ((x, g - soft * np.sum(g, axis=axis, keepdims=True)),)

    return _make(data, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B,C,H,W] -> [B,C,1,1]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool on empty spatial extent")
    data = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return ((x, np.broadcast_to(g / (h * w), x.shape)),)

    return _make(data, (x,), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B,M,K] @ [B,K,N] -> [B,M,N]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("bmm expects rank-3 operands")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes {a.shape} and {b.shape} do not chain")
    data = a.data @ b.data

    def backward(g):
        return (
            (a, g @ b.data.transpose(0, 2, 1)),
            (b, a.data.transpose(0, 2, 1) @ g),
        )

    return _make(data, (a, b), backward)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(
            f"kernel {kernel} larger than padded extent {size + 2 * padding}"
        )
    if span % stride != 0:
        raise ShapeError(
            f"non-integer output extent: ({size} + 2*{padding} - {kernel}) / {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    ho = conv_output_extent(h, kh, stride, padding)
    wo = conv_output_extent(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo), ho, wo


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,Cin,H,W], got {x.shape}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Cout,Cin,kh,kw], got {weight.shape}")
    cout, cin, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"input channels ({x.shape[1]}) != kernel in_channels ({cin})"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride/padding: {stride}/{padding}")
    b = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gflat = g.reshape(b, cout, ho * wo)
        dw = np.einsum("bop,bkp->ok", gflat, cols).reshape(weight.shape)
        dcols = np.einsum("ok,bop->bkp", wmat, gflat)
        dx = _col2im(dcols, x.shape, kh, kw, stride, padding, ho, wo)
        grads = [(x, dx), (weight, dw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def _col2im(dcols, xshape, kh, kw, stride, padding, ho, wo):
    b, c, h, w = xshape
    dpad = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    dcols = dcols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    if padding:
        return dpad[:, :, padding:-padding, padding:-padding]
    return dpad


# -- windowed pair operations (the attention workhorses) ---------------------


def window_offsets(window: int):
    """Row-major (di, dj) offsets for an odd window; index = (di+r)*L + dj+r."""
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be odd and >= 1, got {window}")
    r = window // 2
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]


def window_valid_mask(batch: int, height: int, width: int, window: int) -> np.ndarray:
    """Boolean [B, L*L, H, W]: which window offsets land inside the map."""
    mask = np.zeros((batch, window * window, height, width), dtype=bool)
    for idx, (di, dj) in enumerate(window_offsets(window)):
        i0, i1 = max(0, -di), min(height, height - di)
        j0, j1 = max(0, -dj), min(width, width - dj)
        if i0 < i1 and j0 < j1:
            mask[:, idx, i0:i1, j0:j1] = True
    return mask


def window_inner(a: Tensor, b: Tensor, window: int) -> Tensor:
    """Channel inner products of ``a`` against a local window of ``b``.

    out[n, idx(di,dj), i, j] = sum_c a[n,c,i,j] * b[n,c,i+di,j+dj];
    out-of-bounds offsets yield 0.  Shape [B, L*L, H, W].
    """
    if a.shape != b.shape:
        raise ShapeError(f"window_inner shapes differ: {a.shape} vs {b.shape}")
    if a.data.ndim != 4:
        raise ShapeError(f"window_inner expects [B,C,H,W], got {a.shape}")
    bsz, c, h, w = a.shape
    offsets = window_offsets(window)
    out = np.zeros((bsz, window * window, h, w), dtype=a.data.dtype)
    for idx, (di, dj) in enumerate(offsets):
        i0, i1 = max(0, -di), min(h, h - di)
        j0, j1 = max(0, -dj), min(w, w - dj)
        if i0 >= i1 or j0 >= j1:
            continue
        out[:, idx, i0:i1, j0:j1] = np.sum(
            a.data[:, :, i0:i1, j0:j1]
            * b.data[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj],
            axis=1,
        )

    def backward(g):
        da = np.zeros_like(a.data)
        db = np.zeros_like(b.data)
        for idx, (di, dj) in enumerate(offsets):
            i0, i1 = max(0, -di), min(h, h - di)
            j0, j1 = max(0, -dj), min(w, w - dj)
            if i0 >= i1 or j0 >= j1:
                continue
            gs = g[:, idx : idx + 1, i0:i1, j0:j1]
            da[:, :, i0:i1, j0:j1] += gs * b.data[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj]
            db[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj] += gs * a.data[:, :, i0:i1, j0:j1]
        return ((a, da), (b, db))

    return _make(out, (a, b), backward)


def window_weighted_sum(weights: Tensor, values: Tensor, window: int) -> Tensor:
    """Weighted gather over a local window.

    out[n, c, i, j] = sum_{(di,dj)} weights[n, idx, i, j] * values[n, c, i+di, j+dj]
    with out-of-bounds offsets contributing nothing.
    """
    if values.data.ndim != 4 or weights.data.ndim != 4:
        raise ShapeError("window_weighted_sum expects rank-4 operands")
    bsz, c, h, w = values.shape
    if weights.shape != (bsz, window * window, h, w):
        raise ShapeError(
            f"weights shape {weights.shape} != ({bsz}, {window * window}, {h}, {w})"
        )
    offsets = window_offsets(window)
    out = np.zeros_like(values.data)
    for idx, (di, dj) in enumerate(offsets):
        i0, i1 = max(0, -di), min(h, h - di)
        j0, j1 = max(0, -dj), min(w, w - dj)
        if i0 >= i1 or j0 >= j1:
            continue
        out[:, :, i0:i1, j0:j1] += (
            weights.data[:, idx : idx + 1, i0:i1, j0:j1]
            * values.data[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj]
        )

    def backward(g):
        dw = np.zeros_like(weights.data)
        dv = np.zeros_like(values.data)
        for idx, (di, dj) in enumerate(offsets):
            i0, i1 = max(0, -di), min(h, h - di)
            j0, j1 = max(0, -dj), min(w, w - dj)
            if i0 >= i1 or j0 >= j1:
                continue
            gs = g[:, :, i0:i1, j0:j1]
            vs = values.data[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj]
            dw[:, idx, i0:i1, j0:j1] = np.sum(gs * vs, axis=1)
            dv[:, :, i0 + di : i1 + di, j0 + dj : j1 + dj] += (
                weights.data[:, idx : idx + 1, i0:i1, j0:j1] * gs
            )
        return ((weights, dw), (values, dv))

    return _make(out, (weights, values), backward)


# -- gradient checking --------------------------------------------------------


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` must be deterministic and is re-evaluated with each leaf element
    perturbed by +-eps.  Returns the max relative error over all leaf
    elements, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("finite_difference_check requires double precision leaves")
        leaf.zero_grad()
        leaf.requires_grad = True
    out = f(leaves)
    if out.data.size != 1:
        raise ShapeError("finite_difference_check needs a scalar-valued f")
    out.backward()
    analytic = [
        leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
    worst = 0.0
    with no_grad():
        for leaf, ana in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                hi = f(leaves).item()
                flat[k] = orig - eps
                lo = f(leaves).item()
                flat[k] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise ValueError("non-finite value at perturbed point")
                numeric = (hi - lo) / (2.0 * eps)
                a = ana.reshape(-1)[k]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
