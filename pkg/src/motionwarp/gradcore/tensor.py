"""Dense float64 tensors with reverse-mode differentiation.

Every primitive builds its output with :func:`_node`, attaching the inputs and
a closure mapping the upstream gradient to one gradient per input.  Nothing is
recorded when no input requires a gradient or inside :func:`no_grad`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from ..errors import ContractError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_inputs", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- tape


@dataclass(frozen=True)
class TapeEntry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Topologically ordered record of the operations behind one output.

    Entry ``i`` only consumes leaves or outputs of entries ``j < i``.
    """

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t._inputs:
                if parent._backward is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls([TapeEntry(t._inputs, t, t._backward) for t in order])

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for e in self.entries:
            for t in e.inputs:
                if t._backward is None and t.requires_grad:
                    found.setdefault(id(t), t)
        return list(found.values())

    def backward(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        if not self.entries:
            return {}
        grads: dict[int, np.ndarray] = {id(self.entries[-1].output): seed}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for t, gi in zip(entry.inputs, entry.rule(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def grad(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to its leaves.

    Returns a mapping from each leaf that requires a gradient (or each tensor
    in ``wrt``) to an array of the leaf's shape.  Leaves are not modified.
    """
    if loss.data.size != 1:
        raise ContractError(f"grad: loss must be scalar, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    leaves = list(wrt) if wrt is not None else tape.leaves()
    if loss._backward is None:
        return {t: (np.ones_like(t.data) if t is loss else np.zeros_like(t.data)) for t in leaves}
    raw = tape.backward(np.ones_like(loss.data))
    out = {}
    for t in leaves:
        g = raw.get(id(t))
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0.0)
    return _node(y, (a,), lambda g: (g * (y > 0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(a, index) -> Tensor:
    """Slice (basic or integer-array indexing)."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ContractError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), back, "slice")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("take: indices must be one-dimensional")
    n = a.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"take: index out of range for axis of length {n}")
    shape = a.shape

    def back(g):
        gm = np.moveaxis(g, axis, 0)
        rest = gm.shape[1:]
        scatter = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
        full = np.asarray(scatter @ gm.reshape(idx.size, -1)).reshape((n,) + rest)
        return (np.moveaxis(full, 0, axis),)

    return _node(np.take(a.data, idx, axis=axis), (a,), back, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concatenate: empty input list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ContractError(f"concatenate: shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concatenate")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- softmax


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, True = allowed) sets the rest to -inf.

    Raises :class:`DegenerateMaskError` when a row has no allowed entry.
    """
    from ..errors import DegenerateMaskError

    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        dead = ~mask.any(axis=-1)
        if dead.any():
            raise DegenerateMaskError(f"row-softmax: {int(dead.sum())} line(s) fully masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), back, "row-softmax")


# ---------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride: tuple[int, int] = (1, 1)) -> Tensor:
    """Valid 2D convolution (cross-correlation) on NHWC input.

    ``x``: (N, H, W, Cin); ``w``: (kh, kw, Cin, Cout); ``b``: (Cout,).
    Output: (N, (H - kh)//sh + 1, (W - kw)//sw + 1, Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ContractError(f"2D-convolution: input {x.shape} and kernel {w.shape} do not conform")
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    sh, sw = stride
    if h < kh or wd < kw:
        raise ContractError(f"2D-convolution: input {x.shape} smaller than kernel {w.shape}")
    oh, ow = (h - kh) // sh + 1, (wd - kw) // sw + 1
    if (kh, kw, sh, sw) in ((1, 3, 1, 2), (3, 1, 2, 1)):
        return _conv_k3s2(x, w, b, axis=2 if kw == 3 else 1)
    xd = np.ascontiguousarray(x.data)
    s0, s1, s2, s3 = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd, shape=(n, oh, ow, kh, kw, cin), strides=(s0, s1 * sh, s2 * sw, s1, s2, s3), writeable=False
    )
    cols = win.reshape(n * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ContractError(f"2D-convolution: bias {b.shape} does not match {cout} channels")
        out += b.data
        inputs = (x, w, b)
    out = out.reshape(n, oh, ow, cout)
    wshape = w.shape

    def back(g):
        g2 = g.reshape(n * oh * ow, cout)
        gw = (cols.T @ g2).reshape(wshape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
            gx = np.zeros((n, h, wd, cin))
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :] += gcols[:, :, :, i, j, :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _node(out, inputs, back, "2D-convolution")


def _conv_k3s2(x: Tensor, w: Tensor, b, axis: int) -> Tensor:
    """Kernel-3, stride-2 convolution along H (axis 1) or W (axis 2) without im2col.

    The conv axis is padded to an even length 2(o + 1) and viewed as o + 1
    pairs; taps 0 and 1 act on a whole pair, tap 2 on the first half of the
    next pair.
    """
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    length = x.shape[axis]
    o = (length - 3) // 2 + 1
    padded_len = 2 * (o + 1)
    xd = x.data
    if padded_len > length:
        pad = [(0, 0)] * 4
        pad[axis] = (0, padded_len - length)
        xd = np.pad(xd, pad)
    xd = np.ascontiguousarray(xd)
    taps = w.data.reshape(3, cin, cout)
    if axis == 2:
        # rows of pairs: (n * h * (o + 1), 2 cin)
        pairs = xd.reshape(-1, 2 * cin)
        first = pairs[:, :cin]
        w01 = taps[:2].reshape(2 * cin, cout)
        y1 = (pairs @ w01).reshape(n * h, o + 1, cout)
        y2 = (first @ taps[2]).reshape(n * h, o + 1, cout)
        out = y1[:, :o] + y2[:, 1:]
        out_shape = (n, h, o, cout)
    else:
        # pairs of rows: (n * (o + 1), 2, wd, cin)
        pairs = xd.reshape(n * (o + 1), 2 * wd * cin)
        even = pairs[:, : wd * cin].reshape(n * (o + 1), wd, cin)
        odd = pairs[:, wd * cin :].reshape(n * (o + 1), wd, cin)
        y1 = (even @ taps[0] + odd @ taps[1]).reshape(n, o + 1, wd, cout)
        y2 = (even @ taps[2]).reshape(n, o + 1, wd, cout)
        out = y1[:, :o] + y2[:, 1:]
        out_shape = (n, o, wd, cout)
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ContractError(f"2D-convolution: bias {b.shape} does not match {cout} channels")
        out += b.data
        inputs = (x, w, b)
    out = out.reshape(out_shape)
    wshape = w.shape

    def back(g):
        if axis == 2:
            g3 = g.reshape(n * h, o, cout)
            g1 = np.zeros((n * h, o + 1, cout))
            g1[:, :o] = g3
            g2 = np.zeros((n * h, o + 1, cout))
            g2[:, 1:] = g3
            g1 = g1.reshape(-1, cout)
            g2 = g2.reshape(-1, cout)
            gw = None
            if w.requires_grad:
                gw = np.concatenate([(pairs.T @ g1).reshape(2, cin, cout), (first.T @ g2)[None]]).reshape(wshape)
            gx = None
            if x.requires_grad:
                gp = g1 @ w01.T
                gp[:, :cin] += g2 @ taps[2].T
                gx = gp.reshape(n, h, padded_len, cin)[:, :, :wd]
        else:
            g1 = np.zeros((n, o + 1, wd, cout))
            g1[:, :o] = g
            g2 = np.zeros((n, o + 1, wd, cout))
            g2[:, 1:] = g
            g1 = g1.reshape(n * (o + 1), wd, cout)
            g2 = g2.reshape(n * (o + 1), wd, cout)
            gw = None
            if w.requires_grad:
                e2 = even.reshape(-1, cin)
                o2 = odd.reshape(-1, cin)
                g1f, g2f = g1.reshape(-1, cout), g2.reshape(-1, cout)
                gw = np.stack([e2.T @ g1f, o2.T @ g1f, e2.T @ g2f]).reshape(wshape)
            gx = None
            if x.requires_grad:
                gp = np.empty((n * (o + 1), 2, wd, cin))
                gp[:, 0] = g1 @ taps[0].T + g2 @ taps[2].T
                gp[:, 1] = g1 @ taps[1].T
                gx = gp.reshape(n, padded_len, wd, cin)[:, :h]
        gb = None if b is None else g.reshape(-1, cout).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _node(out, inputs, back, "2D-convolution")


def conv_output_size(n: int, kernel: int = 3, stride: int = 2) -> int:
    return (n - kernel) // stride + 1


# ---------------------------------------------------------------- recurrent cell


def lstm_cell(x, hc, w, b) -> Tensor:
    """One LSTM step.

    ``x``: (B, D); ``hc``: (B, 2H) with hidden then cell state; ``w``: (D + H, 4H)
    with gate blocks ordered input, forget, candidate, output; ``b``: (4H,).
    Returns the next (B, 2H) state.
    """
    x, hc, w, b = (as_tensor(t) for t in (x, hc, w, b))
    bsz, d = x.shape if x.ndim == 2 else (None, None)
    if x.ndim != 2 or hc.ndim != 2 or hc.shape[0] != bsz or hc.shape[1] % 2:
        raise ContractError(f"recurrent-cell-step: input {x.shape} and state {hc.shape} do not conform")
    hdim = hc.shape[1] // 2
    if w.shape != (d + hdim, 4 * hdim) or b.shape != (4 * hdim,):
        raise ContractError(f"recurrent-cell-step: weights {w.shape}/{b.shape} for D={d}, H={hdim}")
    h_prev, c_prev = hc.data[:, :hdim], hc.data[:, hdim:]
    z = np.concatenate([x.data, h_prev], axis=1)
    pre = z @ w.data + b.data
    i = _sigmoid(pre[:, :hdim])
    f = _sigmoid(pre[:, hdim : 2 * hdim])
    gc = np.tanh(pre[:, 2 * hdim : 3 * hdim])
    o = _sigmoid(pre[:, 3 * hdim :])
    c = f * c_prev + i * gc
    tc = np.tanh(c)
    h = o * tc
    wd = w.data

    def back(g):
        gh, gcell = g[:, :hdim], g[:, hdim:]
        dc = gcell + gh * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc * gc * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gc * gc),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dz = dpre @ wd.T
        dhc = np.concatenate([dz[:, d:], dc * f], axis=1)
        return dz[:, :d], dhc, z.T @ dpre, dpre.sum(axis=0)

    return _node(np.concatenate([h, c], axis=1), (x, hc, w, b), back, "recurrent-cell-step")


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "row-softmax": softmax,
    "2D-convolution": conv2d,
    "recurrent-cell-step": lstm_cell,
    "concatenate": concat,
    "slice": getitem,
    "sum": tsum,
    "mean": mean,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the named primitives; see each function for its shape contract."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}; expected one of {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)
