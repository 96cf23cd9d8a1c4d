"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every primitive records its inputs and a backward rule on the output
tensor (define-by-run).  ``Tensor.backward`` orders the recorded graph
into a :class:`Tape` and walks it in reverse.

Shapes are never broadcast implicitly.  The only exceptions are the
explicit ``scale`` (scalar constant) and ``add_bias`` (vector along the
last axis) primitives, and ``matmul`` sharing a 2-D right operand across
leading batch dimensions.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "InputTooShortError",
    "no_grad",
    "op_counter",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "log",
    "add_bias",
    "elementwise",
    "sum",
    "mean",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "index",
    "softmax",
    "layer_norm",
    "conv1d",
    "conv1d_transpose",
    "lstm_direction",
    "lstm_sequence",
    "LstmParams",
]

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class InputTooShortError(ValueError):
    pass


_grad_enabled = True
_counters: list[Counter] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def op_counter():
    """Count primitive applications by name while the block is active."""
    counts: Counter = Counter()
    _counters.append(counts)
    try:
        yield counts
    finally:
        _counters.remove(counts)


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError("tensors must have at least one element")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum(self, axis)

    def backward(self) -> None:
        if self.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        tape = Tape.from_output(self)
        tape.backward(self)


class Tape:
    """Recorded primitive applications reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor) -> None:
        if not out.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    for counts in _counters:
        counts[op] += 1
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=DTYPE)
    if data.ndim == 0:
        data = data.reshape(1)
    data.flags.writeable = False
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise primitive by name, e.g. ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` along the last axis of ``x``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % x.ndim
    out = x.data.sum(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)

    def backward(g):
        g = g.reshape(shape[:axis] + (1,) + shape[axis + 1 :])
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has
    exactly the same leading axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    nd = xs[0].ndim
    axis = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or x.shape[:axis] + x.shape[axis + 1 :] != xs[0].shape[:axis] + xs[0].shape[axis + 1 :]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def index(x, key) -> Tensor:
    """Basic or advanced numpy indexing; gradients scatter-add back."""
    x = _as_tensor(x)
    shape = x.shape
    out = x.data[key]
    raw_shape = np.shape(out)
    if out.ndim == 0:
        out = out.reshape(1)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g.reshape(raw_shape))
        return (full,)

    return _result(np.array(out), (x,), backward, "index")


# ---------------------------------------------------------------------------
# normalization


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis``, then apply gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs axis size {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gv = gain.data.reshape(bshape)
    bv = bias.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx_hat = g * gv
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _result(xhat * gv + bv, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# convolution


def _frames(x: np.ndarray, width: int, stride: int, n: int) -> np.ndarray:
    """View [..., T] as [..., n, width] windows taken every ``stride`` samples."""
    x = np.ascontiguousarray(x)
    shape = x.shape[:-1] + (n, width)
    strides = x.strides[:-1] + (x.strides[-1] * stride, x.strides[-1])
    return as_strided(x, shape=shape, strides=strides, writeable=False)


def _overlap_add(cols: np.ndarray, stride: int, length: int) -> np.ndarray:
    """Inverse of ``_frames``: sum [..., n, width] windows into [..., length]."""
    n, width = cols.shape[-2:]
    out = np.zeros(cols.shape[:-2] + (length,), dtype=DTYPE)
    for w in range(width):
        out[..., w : w + stride * (n - 1) + 1 : stride] += cols[..., w]
    return out


def _conv_in(x: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    # x [b, C_in, T], k [C_out, C_in, W] -> [b, C_out, L]
    width = k.shape[-1]
    n = (x.shape[-1] - width) // stride + 1
    fr = _frames(x, width, stride, n)  # [b, C_in, L, W]
    return np.einsum("bclw,ocw->bol", fr, k, optimize=True)


def _conv_adjoint(y: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    # y [b, C_out, L], k [C_out, C_in, W] -> [b, C_in, (L-1)*stride + W]
    n = y.shape[-1]
    cols = np.einsum("bol,ocw->bclw", y, k, optimize=True)
    return _overlap_add(cols, stride, (n - 1) * stride + k.shape[-1])


def _kernel_grad(y: np.ndarray, x: np.ndarray, width: int, stride: int) -> np.ndarray:
    # y [b, C_out, L] pairs with x [b, C_in, T] -> [C_out, C_in, W]
    n = y.shape[-1]
    fr = _frames(x, width, stride, n)
    return np.einsum("bol,bclw->ocw", y, fr, optimize=True)


def _batched(x: Tensor, op: str) -> bool:
    if x.ndim == 2:
        return False
    if x.ndim == 3:
        return True
    raise DimensionError(f"{op}: expected [C, T] or [batch, C, T], got {x.shape}")


def conv1d(x, kernels, stride: int = 1) -> Tensor:
    """Strided cross-correlation, no padding, no kernel flip.

    ``x`` is [C_in, T] (or [batch, C_in, T]); ``kernels`` is [C_out, C_in, W].
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    batched = _batched(x, "conv1d")
    if stride < 1:
        raise ValueError("conv1d: stride must be positive")
    if kernels.ndim != 3 or kernels.shape[1] != x.shape[-2]:
        raise DimensionError(f"conv1d: kernels {kernels.shape} do not match input {x.shape}")
    width = kernels.shape[-1]
    t = x.shape[-1]
    if t < width:
        raise InputTooShortError(f"conv1d: input length {t} is shorter than kernel width {width}")
    xd = x.data if batched else x.data[None]
    kd = kernels.data
    out = _conv_in(xd, kd, stride)
    used = (out.shape[-1] - 1) * stride + width

    def backward(g):
        g = g if batched else g[None]
        gx = np.zeros(xd.shape, dtype=DTYPE)
        gx[..., :used] = _conv_adjoint(g, kd, stride)
        gk = _kernel_grad(g, xd, width, stride)
        return (gx if batched else gx[0]), gk

    return _result(out if batched else out[0], (x, kernels), backward, "conv1d")


def conv1d_transpose(x, kernels, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` with the same kernels and stride.

    ``x`` is [C_in, L] (or batched); ``kernels`` is [C_in, C_out, W]; the
    output has (L - 1) * stride + W samples.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    batched = _batched(x, "conv1d_transpose")
    if stride < 1:
        raise ValueError("conv1d_transpose: stride must be positive")
    if kernels.ndim != 3 or kernels.shape[0] != x.shape[-2]:
        raise DimensionError(f"conv1d_transpose: kernels {kernels.shape} do not match input {x.shape}")
    width = kernels.shape[-1]
    xd = x.data if batched else x.data[None]
    kd = kernels.data
    out = _conv_adjoint(xd, kd, stride)

    def backward(g):
        g = g if batched else g[None]
        gx = _conv_in(g, kd, stride)
        gk = _kernel_grad(xd, g, width, stride)
        return (gx if batched else gx[0]), gk

    return _result(out if batched else out[0], (x, kernels), backward, "conv1d_transpose")


# ---------------------------------------------------------------------------
# LSTM


def _lstm_forward(xs: np.ndarray, w_ih: np.ndarray, w_hh: np.ndarray, b: np.ndarray):
    """Run ``n`` independent LSTMs stacked on axis 0, time-major.

    xs [n, T, M, D]; w_ih [n, D, 4H]; w_hh [n, H, 4H]; b [n, 4H].
    Stacking lets both directions of a bidirectional layer share each
    numpy call.
    """
    n, t_len, m, d = xs.shape
    h4 = w_hh.shape[-1]
    hid = h4 // 4
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so one tanh covers all four gates
    pre = np.full(h4, 0.5)
    pre[2 * hid : 3 * hid] = 1.0
    shift = np.full(h4, 0.5)
    shift[2 * hid : 3 * hid] = 0.0
    zx = np.matmul(xs.reshape(n, t_len * m, d), w_ih).reshape(n, t_len, m, h4)
    zx += b[:, None, None, :]
    zx *= pre
    zx = np.ascontiguousarray(zx.transpose(1, 0, 2, 3))
    wh = w_hh * pre
    gates = np.empty((t_len, n, m, h4))
    cs = np.zeros((t_len + 1, n, m, hid))
    hs = np.zeros((t_len + 1, n, m, hid))
    tc = np.empty((t_len, n, m, hid))
    for t in range(t_len):
        z = gates[t]
        np.matmul(hs[t], wh, out=z)
        z += zx[t]
        np.tanh(z, out=z)
        z *= pre
        z += shift
        c = cs[t + 1]
        np.multiply(z[..., hid : 2 * hid], cs[t], out=c)
        c += z[..., :hid] * z[..., 2 * hid : 3 * hid]
        np.tanh(c, out=tc[t])
        np.multiply(z[..., 3 * hid :], tc[t], out=hs[t + 1])
    return gates, cs, hs, tc


def _lstm_backward(g, xs, w_ih, w_hh, gates, cs, hs, tc):
    """BPTT for :func:`_lstm_forward`; ``g`` is [T, n, M, H]."""
    t_len, n, m, hid = g.shape
    d = xs.shape[-1]
    h4 = 4 * hid
    i_g, f_g = gates[..., :hid], gates[..., hid : 2 * hid]
    c_g, o_g = gates[..., 2 * hid : 3 * hid], gates[..., 3 * hid :]
    # local derivatives that do not depend on the recurrence
    dc_dh = o_g * (1.0 - tc * tc)
    local = np.empty((t_len, n, m, 3, hid))
    local[..., 0, :] = c_g * i_g * (1.0 - i_g)
    local[..., 1, :] = cs[:-1] * f_g * (1.0 - f_g)
    local[..., 2, :] = i_g * (1.0 - c_g * c_g)
    do_dh = tc * o_g * (1.0 - o_g)
    f_copy = np.ascontiguousarray(f_g)
    dz = np.empty((t_len, n, m, 4, hid))
    dh_next = np.zeros((n, m, hid))
    dc_next = np.zeros((n, m, hid))
    wt = np.ascontiguousarray(np.swapaxes(w_hh, -1, -2))
    for t in range(t_len - 1, -1, -1):
        dh = g[t] + dh_next
        dc = dh * dc_dh[t]
        dc += dc_next
        np.multiply(dc[..., None, :], local[t], out=dz[t, :, :, :3])
        np.multiply(dh, do_dh[t], out=dz[t, :, :, 3])
        dc_next = dc * f_copy[t]
        dh_next = np.matmul(dz[t].reshape(n, m, h4), wt)
    flat = np.ascontiguousarray(dz.reshape(t_len, n, m, h4).transpose(1, 0, 2, 3)).reshape(n, t_len * m, h4)
    gx = np.matmul(flat, np.swapaxes(w_ih, -1, -2)).reshape(n, t_len, m, d)
    g_ih = np.matmul(np.swapaxes(xs.reshape(n, t_len * m, d), -1, -2), flat)
    h_prev = np.ascontiguousarray(hs[:-1].transpose(1, 0, 2, 3)).reshape(n, t_len * m, hid)
    g_hh = np.matmul(np.swapaxes(h_prev, -1, -2), flat)
    return gx, g_ih, g_hh, flat.sum(axis=1)


def _check_lstm_shapes(x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor) -> None:
    if x.ndim != 3:
        raise DimensionError(f"lstm: expected [M, T, D] input, got {x.shape}")
    d = x.shape[-1]
    h4 = w_hh.shape[-1]
    if w_ih.shape != (d, h4) or w_hh.shape != (h4 // 4, h4) or b.shape != (h4,) or h4 % 4:
        raise DimensionError(
            f"lstm: parameter shapes {w_ih.shape}, {w_hh.shape}, {b.shape} inconsistent with D={d}"
        )


def _lstm(x: Tensor, directions: Sequence[Sequence[Tensor]], reverse: Sequence[bool]) -> Tensor:
    """Fused primitive: one or more LSTM directions over x [M, T, D], outputs concatenated."""
    for p in directions:
        _check_lstm_shapes(x, *p)
    xt = x.data.transpose(1, 0, 2)  # [T, M, D]
    xs = np.stack([xt[::-1] if r else xt for r in reverse])
    w_ih = np.stack([p[0].data for p in directions])
    w_hh = np.stack([p[1].data for p in directions])
    bias = np.stack([p[2].data for p in directions])
    gates, cs, hs, tc = _lstm_forward(xs, w_ih, w_hh, bias)
    outs = [hs[:0:-1, k] if r else hs[1:, k] for k, r in enumerate(reverse)]  # each [T, M, H]
    out = np.concatenate(outs, axis=-1).transpose(1, 0, 2)
    hid = w_hh.shape[1]

    def backward(g):
        gt = g.transpose(1, 0, 2)
        parts = [gt[..., k * hid : (k + 1) * hid] for k in range(len(reverse))]
        gs = np.stack([p[::-1] if r else p for p, r in zip(parts, reverse)], axis=1)
        gx, g_ih, g_hh, g_b = _lstm_backward(gs, xs, w_ih, w_hh, gates, cs, hs, tc)
        total = np.zeros(xt.shape)
        for k, r in enumerate(reverse):
            total += gx[k, ::-1] if r else gx[k]
        grads = [np.ascontiguousarray(total.transpose(1, 0, 2))]
        for k in range(len(reverse)):
            grads += [g_ih[k], g_hh[k], g_b[k]]
        return tuple(grads)

    parents = [x] + [t for p in directions for t in p]
    return _result(np.ascontiguousarray(out), parents, backward, "lstm")


def lstm_direction(x, w_ih, w_hh, b, reverse: bool = False) -> Tensor:
    """One LSTM direction over ``x`` [M, T, D] with zero initial state.

    Gate order in the 4H axis is input, forget, cell candidate, output.
    Returns hidden states [M, T, H] aligned with the input time axis.
    """
    x, w_ih, w_hh, b = (_as_tensor(t) for t in (x, w_ih, w_hh, b))
    return _lstm(x, [(w_ih, w_hh, b)], [reverse])


class LstmParams:
    """Weights for one or two LSTM directions.

    Each direction is a tuple ``(w_ih [D, 4H], w_hh [H, 4H], b [4H])``.
    """

    def __init__(self, forward: Sequence[Tensor], backward: Sequence[Tensor] | None = None):
        self.forward = tuple(forward)
        self.backward = tuple(backward) if backward is not None else None

    def tensors(self) -> Iterable[Tensor]:
        yield from self.forward
        if self.backward is not None:
            yield from self.backward


def lstm_sequence(x, params: LstmParams, bidirectional: bool = True) -> Tensor:
    """Run an LSTM over ``x`` ([T, D] or [M, T, D]).

    The bidirectional output concatenates forward and backward hidden
    states on the last axis, giving 2H features.
    """
    x = _as_tensor(x)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if bidirectional:
        if params.backward is None:
            raise ValueError("bidirectional LSTM needs backward-direction parameters")
        out = _lstm(x, [params.forward, params.backward], [False, True])
    else:
        out = _lstm(x, [params.forward], [False])
    if single:
        out = reshape(out, out.shape[1:])
    return out
