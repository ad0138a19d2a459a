"""Dense f64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Tape` whose inputs require
gradients are recorded together with their backward rule. Outside a tape
every op is a plain numpy computation, which is what frozen inference uses.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "FlopCounter",
    "apply_op",
    "backward",
    "as_tensor",
]


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_TAPES: list["Tape"] = []
_COUNTERS: list["FlopCounter"] = []


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError("non-finite value in tensor input")


def _count(flops: int) -> None:
    for c in _COUNTERS:
        c.flops += int(flops)


class FlopCounter:
    """Counts matmul/conv FLOPs (2 per multiply-add) executed while active."""

    def __init__(self) -> None:
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if requires_grad:
            _check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.parents = parents
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the list is already topologically
    sorted. A tape supports exactly one backward pass.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(out, parents, fn))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        """Accumulate d loss / d leaf into ``.grad`` of every leaf requiring grad.

        ``params`` that the loss never touched receive an all-zero gradient.
        Gradients overwrite (not add to) any existing ``.grad``.
        """
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced on this tape")
        _check_finite(loss.data)
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in self._outputs:
                    leaves[key] = p
        for key, leaf in leaves.items():
            leaf.grad = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        if params is not None:
            for p in params:
                if id(p) not in leaves:
                    p.grad = np.zeros_like(p.data)
        self.nodes = []


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    tape.backward(loss, params)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; record ``fn`` if a tape wants it.

    ``fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _TAPES[-1].record(out, tuple(parents), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return apply_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return apply_op(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    return apply_op(x**p, (a,), lambda g: (g * p * x ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return apply_op(np.log(x), (a,), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return apply_op(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + _GELU_A * x2))
    half1t = 0.5 * (1.0 + t)

    def fn(g):
        return (g * (half1t + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)),)

    return apply_op(x * half1t, (a,), fn)


# reductions and shape ops ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return apply_op(np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return apply_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return apply_op(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing goes through ``gather``."""
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return apply_op(a.data[idx], (a,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row gather: ``a`` is (B, N, ...), ``idx`` is (B, n) -> (B, n, ...)."""
    idx = np.asarray(idx, dtype=np.int64)
    b = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, (b, idx), g)
        return (out,)

    return apply_op(a.data[b, idx], (a,), fn)


# linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a`` (..., m, k) @ ``b`` (..., k, n) with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    _check_finite(ad, bd)
    out = ad @ bd
    _count(2 * out.size * ad.shape[-1])

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return apply_op(out, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalization / attention primitives ---------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = a.data
    _check_finite(x)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return apply_op(out, (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    _check_finite(x)
    s = x - x.max(axis=-1, keepdims=True)
    out = s - np.log(np.exp(s).sum(axis=-1, keepdims=True))

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return apply_op(out, (a,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    _check_finite(xd)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    red = tuple(range(xd.ndim - 1))

    def fn(g):
        gx = ggam = gbet = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggam = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gbet = g.sum(axis=red)
        return gx, ggam, gbet

    return apply_op(xhat * gd + beta.data, (x, gamma, beta), fn)


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero vector is 0."""
    x = a.data
    n = np.sqrt((x * x).sum(axis=-1))

    def fn(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        return (x * scale[..., None],)

    return apply_op(n, (a,), fn)


# convolution ---------------------------------------------------------------------

def _conv_out(extent: int, k: int, s: int, axis: str) -> int:
    if k > extent or (extent - k) % s != 0:
        raise ShapeError(f"conv3d: {axis} extent {extent} incompatible with kernel {k}, stride {s}")
    return (extent - k) // s + 1


def conv3d(x: Tensor, w: Tensor, stride: Sequence[int], bias: Tensor | None = None) -> Tensor:
    """Valid 3D cross-correlation.

    ``x`` is (C, T, H, W) or (B, C, T, H, W); ``w`` is (O, C, kt, kh, kw).
    """
    batched = x.ndim == 5
    if not batched:
        if x.ndim != 4:
            raise ShapeError(f"conv3d expects a 4D or 5D input, got {x.shape}")
        x = reshape(x, (1,) + x.shape)
    if w.ndim != 5 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: kernel {w.shape} vs input channels {x.shape[1]}")
    _check_finite(x.data, w.data)
    st, sh, sw = stride
    O, C, kt, kh, kw = w.shape
    B, _, T, H, W = x.shape
    To = _conv_out(T, kt, st, "temporal")
    Ho = _conv_out(H, kh, sh, "height")
    Wo = _conv_out(W, kw, sw, "width")
    if (kt, kh, kw) == (st, sh, sw):
        # non-overlapping windows: a reshape followed by one matmul
        cols = reshape(x, (B, C, To, kt, Ho, kh, Wo, kw))
        cols = transpose(cols, (0, 2, 4, 6, 1, 3, 5, 7))
        cols = reshape(cols, (B * To * Ho * Wo, C * kt * kh * kw))
        y = matmul(cols, transpose(reshape(w, (O, C * kt * kh * kw)), (1, 0)))
        y = transpose(reshape(y, (B, To, Ho, Wo, O)), (0, 4, 1, 2, 3))
    else:
        y = _conv3d_strided(x, w, (st, sh, sw), (To, Ho, Wo))
    if bias is not None:
        y = add(y, reshape(bias, (1, O, 1, 1, 1)))
    if not batched:
        y = reshape(y, y.shape[1:])
    return y


def _conv3d_strided(x: Tensor, w: Tensor, stride, out_shape) -> Tensor:
    st, sh, sw = stride
    To, Ho, Wo = out_shape
    xd, wd = x.data, w.data
    O, C, kt, kh, kw = wd.shape
    win = np.lib.stride_tricks.sliding_window_view(xd, (kt, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::st, ::sh, ::sw]
    out = np.tensordot(win, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # B,To,Ho,Wo,O
    _count(2 * out.size * C * kt * kh * kw)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    def fn(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        contrib = np.tensordot(g, wd[:, :, a, b, c], axes=([1], [0]))
                        gx[
                            :,
                            :,
                            a : a + st * To : st,
                            b : b + sh * Ho : sh,
                            c : c + sw * Wo : sw,
                        ] += np.moveaxis(contrib, -1, 1)
        return gx, gw

    return apply_op(out, (x, w), fn)


def conv_transpose3d(
    x: Tensor, w: Tensor, stride: Sequence[int], bias: Tensor | None = None
) -> Tensor:
    """Transposed conv with kernel == stride (exact inverse geometry of the fast conv path).

    ``x`` is (B, C, T, H, W); ``w`` is (C, O, kt, kh, kw).
    """
    C, O, kt, kh, kw = w.shape
    if tuple(stride) != (kt, kh, kw):
        raise ShapeError("conv_transpose3d supports kernel == stride only")
    if x.ndim != 5 or x.shape[1] != C:
        raise ShapeError(f"conv_transpose3d: input {x.shape} vs kernel {w.shape}")
    B, _, T, H, W = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 4, 1)), (B * T * H * W, C))
    y = matmul(rows, reshape(w, (C, O * kt * kh * kw)))
    y = reshape(y, (B, T, H, W, O, kt, kh, kw))
    y = transpose(y, (0, 4, 1, 5, 2, 6, 3, 7))
    y = reshape(y, (B, O, T * kt, H * kh, W * kw))
    if bias is not None:
        y = add(y, reshape(bias, (1, O, 1, 1, 1)))
    return y
