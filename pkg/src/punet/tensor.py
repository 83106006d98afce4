"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active, and that touch at least one tensor requiring a
gradient, are recorded in execution order; :func:`backward` walks the tape in
reverse and accumulates gradients into a name-keyed map for the trainable
entries of a :class:`ParamStore`.

Layout is row-major, channels last: feature maps are ``H x W x C`` (or
``B x H x W x C``), token sequences are ``N x d`` (or ``B x N x d``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ArgumentError, ContractError, DimensionError

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used by :func:`tensor` (f32 or f64)."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """An immutable n-d value, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    """Build a tensor, casting to the default (or given) floating dtype."""
    arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# Tape


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records primitive applications in topological (execution) order."""

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._node_of: dict[int, int] = {}
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._node_of.get(key)
        if nid is None:
            nid = len(self._nodes)
            self._node_of[key] = nid
            self._nodes.append(t)
        return nid

    def has(self, t: Tensor) -> bool:
        return id(t) in self._node_of

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, fn) -> None:
        ids = tuple(self.node_id(t) for t in inputs)
        self.entries.append(TapeEntry(op, ids, self.node_id(output), fn))

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.op] = counts.get(e.op, 0) + 1
        return counts


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, parents, out, fn)
    return out


# --------------------------------------------------------------------------
# Parameters


@dataclass
class Param:
    value: Tensor
    frozen: bool = False
    group: str = "other"


class ParamStore:
    """Ordered map of hierarchical names to parameters with freeze flags."""

    def __init__(self, tensors: dict[str, Tensor] | None = None) -> None:
        self._entries: dict[str, Param] = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, value: Tensor | np.ndarray, group: str = "other", frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value))
        t.name = name
        t.requires_grad = not frozen
        self._entries[name] = Param(t, frozen, group)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def entry(self, name: str) -> Param:
        return self._entries[name]

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._entries.items())

    def group(self, name: str) -> str:
        return self._entries[name].group

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def set_frozen(self, name: str, frozen: bool) -> None:
        p = self._entries[name]
        p.frozen = frozen
        p.value.requires_grad = not frozen

    def freeze_all(self, frozen: bool = True) -> None:
        for name in self._entries:
            self.set_frozen(name, frozen)

    def trainable(self) -> list[str]:
        return [n for n, p in self._entries.items() if not p.frozen]

    def set_value(self, name: str, data: np.ndarray) -> None:
        """Replace a parameter's buffer in place (the Tensor object is kept)."""
        t = self._entries[name].value
        data = np.asarray(data, dtype=t.dtype)
        if data.shape != t.shape:
            raise DimensionError(f"{name}: expected shape {t.shape}, got {data.shape}")
        t.data = data

    def astype(self, dtype) -> None:
        for p in self._entries.values():
            p.value.data = p.value.data.astype(dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.value.data.copy() for n, p in self._entries.items()}


def backward(loss: Tensor, tape: Tape, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from scalar ``loss``.

    Returns a gradient for every non-frozen parameter in ``params`` (zeros
    when the parameter did not influence ``loss``); frozen parameters are
    absent from the result.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if tape.has(loss):
        grads[tape.node_id(loss)] = np.ones_like(loss.data)
    nodes = tape._nodes
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for nid, ig in zip(entry.inputs, in_grads):
            if ig is None or not nodes[nid].requires_grad:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + ig
            else:
                grads[nid] = ig
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if p.frozen:
            continue
        t = p.value
        g = grads.get(tape.node_id(t)) if tape.has(t) else None
        out[name] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
    return out


# --------------------------------------------------------------------------
# Elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", fn)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), "mul", fn)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), "div", fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), "exp", lambda g: (g * y,))


# --------------------------------------------------------------------------
# Shape manipulation and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inverse),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), "sum", fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def take(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of ``x`` along axis 0 (gradients scatter-add back)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ArgumentError(f"take: index out of range for leading extent {x.shape[0]}")

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), "take", fn)


def concat(a: Tensor, b: Tensor, axis: int = -2) -> Tensor:
    """Join ``a`` and ``b`` along ``axis`` (token rows by default)."""
    if a.ndim != b.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if i != ax and m != n:
            raise DimensionError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    na = a.shape[ax]

    def fn(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ga, gb

    return _make(np.concatenate([a.data, b.data], axis=ax), (a, b), "concat", fn)


def split(x: Tensor, at: int, axis: int = -2) -> tuple[Tensor, Tensor]:
    """Inverse of :func:`concat`: rows ``[0, at)`` and ``[at, N)``."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if not 0 <= at <= n:
        raise ArgumentError(f"split: position {at} outside [0, {n}]")
    head_data, tail_data = np.split(x.data, [at], axis=ax)

    def fn_head(g):
        pad = list(x.shape)
        pad[ax] = n - at
        return (np.concatenate([g, np.zeros(pad, dtype=g.dtype)], axis=ax),)

    def fn_tail(g):
        pad = list(x.shape)
        pad[ax] = at
        return (np.concatenate([np.zeros(pad, dtype=g.dtype), g], axis=ax),)

    return (
        _make(np.ascontiguousarray(head_data), (x,), "split", fn_head),
        _make(np.ascontiguousarray(tail_data), (x,), "split", fn_tail),
    )


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), "matmul", fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    y = z

    def fn(g):
        gy = g * y
        return (gy - y * gy.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), "softmax", fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then scale and shift."""
    if eps <= 0:
        raise ArgumentError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx = gg = gb = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), "layer_norm", fn)


# --------------------------------------------------------------------------
# Convolution and resampling


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation) on channels-last maps.

    ``x`` is ``H x W x Cin`` or ``B x H x W x Cin``; ``w`` is
    ``kh x kw x Cin x Cout``; optional bias ``b`` has shape ``(Cout,)``.
    """
    if stride < 1 or padding < 0:
        raise ArgumentError(f"conv2d: stride={stride}, padding={padding}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: expected HxWxC input and 4-d kernel, got {x.shape}, {w.shape}")
    xd = x.data if batched else x.data[None]
    B, H, W, C = xd.shape
    kh, kw, cin, cout = w.shape
    if cin != C:
        raise DimensionError(f"conv2d: input channels {C} != kernel channels {cin} ({x.shape} vs {w.shape})")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = w.data.reshape(kh * kw * C, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(B, Ho, Wo, cout)
    if not batched:
        out = out[0]
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad and stride == 1 and padding <= min(kh, kw) - 1:
            # stride-1 input gradient is a full correlation with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(g.reshape(B, Ho, Wo, cout), ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(1, 2))[:, :H, :W]
            gcols2 = gwin.transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, kh * kw * cout)
            wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, C)
            gx = (gcols2 @ wflip).reshape(B, H, W, C)
            if not batched:
                gx = gx[0]
        elif x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += gcols[:, :, :, i, j]
            gx = gxp[:, padding : padding + H, padding : padding + W] if padding else gxp
            if not batched:
                gx = gx[0]
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, "conv2d", fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a ``factor x factor`` block."""
    if factor < 1:
        raise ArgumentError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"upsample_nearest: expected HxWxC input, got {x.shape}")
    if factor == 1:
        return _make(x.data, (x,), "upsample", lambda g: (g,))
    h_ax = x.ndim - 3
    out = np.repeat(np.repeat(x.data, factor, axis=h_ax), factor, axis=h_ax + 1)

    def fn(g):
        shp = list(x.shape)
        H, W = shp[h_ax], shp[h_ax + 1]
        g6 = g.reshape(*shp[:h_ax], H, factor, W, factor, shp[-1])
        return (g6.sum(axis=(h_ax + 1, h_ax + 3)),)

    return _make(out, (x,), "upsample", fn)
