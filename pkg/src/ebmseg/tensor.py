"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything downstream (energy model, Langevin chains, the segmentation
generator and its losses) runs on these ops.  Tensors are immutable values;
gradients live on the Tape that recorded them, never on the tensor itself.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "TensorError", "ShapeError", "NonFiniteError",
    "TapeError", "add", "sub", "mul", "div", "neg", "matmul", "tsum",
    "tmean", "log", "clip", "sigmoid", "gelu", "conv2d", "avg_pool2",
    "upsample2", "concat", "tile_spatial", "as_tensor",
    "reshape", "sample_standard_normal",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class TapeError(TensorError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data",)

    def __init__(self, data, check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if check:
            _check_finite(arr, "tensor")
        arr = arr.copy() if arr.base is not None or arr.flags.writeable else arr
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape

_ACTIVE: list["Tape"] = []


class Tape:
    """Records ops in execution order; backward replays them reversed.

    Only tensors reachable from watched leaves are tracked, so a chain that
    only needs d/dz never pays for parameter gradients.
    """

    def __init__(self):
        self._nodes: list = []          # (out Tensor, [(in Tensor, vjp), ...])
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._grads: dict[int, np.ndarray] | None = None
        self._used = False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._watched.append(t)
            self._tracked.add(id(t))

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        popped = _ACTIVE.pop()
        assert popped is self

    def backward(self, out: Tensor) -> None:
        if self._used:
            raise TapeError("backward already ran on this tape")
        if out.size != 1:
            raise ShapeError("backward target must be a scalar")
        self._used = True
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node_out, inputs in reversed(self._nodes):
            g = grads.get(id(node_out))
            if g is None:
                continue
            for inp, vjp in inputs:
                gi = vjp(g)
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        if self._grads is None:
            raise TapeError("backward has not run yet")
        return self._grads.get(id(t))


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _record(out: Tensor, pairs) -> None:
    tape = _tape()
    if tape is None:
        return
    live = [(x, vjp) for x, vjp in pairs if id(x) in tape._tracked]
    if live:
        tape._nodes.append((out, live))
        tape._tracked.add(id(out))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _out(raw: np.ndarray, op: str, pairs) -> Tensor:
    _check_finite(raw, op)
    t = Tensor.__new__(Tensor)
    raw = np.ascontiguousarray(raw)
    raw.flags.writeable = False
    object.__setattr__(t, "data", raw)
    _record(t, pairs)
    return t


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    raw = a.data + b.data
    return _out(raw, "add", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    raw = a.data - b.data
    return _out(raw, "sub", [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    raw = a.data * b.data
    return _out(raw, "mul", [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    raw = a.data / b.data
    return _out(raw, "div", [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _out(-a.data, "neg", [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D/2-D operands")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul mismatch {a.shape} @ {b.shape}")
    raw = a.data @ b.data

    def grad_a(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T
        if a.ndim == 2:                      # b 1-D, out [m]
            return np.outer(g, b.data)
        if b.ndim == 2:                      # a 1-D, out [n]
            return b.data @ g
        return g * b.data                    # both 1-D, scalar out

    def grad_b(g):
        if a.ndim == 2 and b.ndim == 2:
            return a.data.T @ g
        if a.ndim == 2:
            return a.data.T @ g
        if b.ndim == 2:
            return np.outer(a.data, g)
        return g * a.data

    return _out(raw, "matmul", [(a, grad_a), (b, grad_b)])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    raw = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gx = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gx, a.shape).copy()

    return _out(np.asarray(raw), "sum", [(a, vjp)])


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    raw = np.asarray(a.data.mean())
    return _out(raw, "mean",
                [(a, lambda g: np.broadcast_to(g / n, a.shape).copy())])


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise TensorError("log of non-positive value; clip first")
    raw = np.log(a.data)
    return _out(raw, "log", [(a, lambda g: g / a.data)])


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    raw = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _out(raw, "clip", [(a, lambda g: g * inside)])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    raw = 1.0 / (1.0 + np.exp(-a.data))
    return _out(raw, "sigmoid", [(a, lambda g: g * raw * (1.0 - raw))])


def gelu(a) -> Tensor:
    # exact Gaussian-CDF form: x * Phi(x)
    a = as_tensor(a)
    phi_cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    raw = a.data * phi_cdf
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
    return _out(raw, "gelu", [(a, lambda g: g * (phi_cdf + a.data * pdf))])


# ---------------------------------------------------------------------------
# spatial ops (NCHW layout)

def conv2d(x, w, b=None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution (cross-correlation), stride 1 or 2, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x[B,C,H,W], w[O,C,kh,kw]")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: {C} vs {Cw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    raw = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def grad_x(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                dxp[:, :, u:u + Ho * stride:stride,
                    v:v + Wo * stride:stride] += dcols[:, :, :, :, u, v]
        if pad:
            return dxp[:, :, pad:-pad, pad:-pad]
        return dxp

    def grad_w(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        return (gmat.T @ cols).reshape(O, C, kh, kw)

    pairs = [(x, grad_x), (w, grad_w)]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError(f"conv2d bias shape {b.shape}, expected ({O},)")
        raw = raw + b.data[None, :, None, None]
        pairs.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _out(np.ascontiguousarray(raw), "conv2d", pairs)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError("avg_pool2 needs even spatial extents")
    raw = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25

    return _out(raw, "avg_pool2", [(x, vjp)])


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    raw = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))

    return _out(raw, "upsample2", [(x, vjp)])


def concat(parts, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of empty sequence")
    raw = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make_vjp(i):
        sl = [slice(None)] * raw.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _out(raw, "concat", [(p, make_vjp(i)) for i, p in enumerate(parts)])


def tile_spatial(v, h: int, w: int) -> Tensor:
    """Broadcast a [B,C] map to [B,C,h,w] (constant over space)."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise ShapeError("tile_spatial expects [B,C]")
    raw = np.broadcast_to(v.data[:, :, None, None],
                          (v.shape[0], v.shape[1], h, w)).copy()
    return _out(raw, "tile_spatial", [(v, lambda g: g.sum(axis=(2, 3)))])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    raw = a.data.reshape(shape)
    return _out(raw, "reshape", [(a, lambda g: g.reshape(a.shape))])


def sample_standard_normal(gen: np.random.Generator, shape) -> Tensor:
    """I.i.d. N(0,1) draws as an untracked tensor."""
    return Tensor(gen.standard_normal(shape))
