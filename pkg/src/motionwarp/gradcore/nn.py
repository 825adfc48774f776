"""Layers and the Adam optimiser shared by the alignment encoders and the regressor."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterable

import numpy as np

from ..errors import ContractError
from . import tensor as T
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Module:
    """Anything holding named parameter tensors, possibly in child modules."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    out.update(m.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"state is missing parameters {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class Dense(Module):
    def __init__(self, rng, n_in: int, n_out: int, init: str = "he", bias: bool = True):
        if init == "he":
            w = he_normal(rng, (n_in, n_out), n_in)
        elif init == "glorot":
            w = glorot_uniform(rng, (n_in, n_out), n_in, n_out)
        elif init == "identity":
            w = np.eye(n_in, n_out)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise ContractError(f"unknown init {init!r}")
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LSTM(Module):
    """Single-layer LSTM over (B, T, D) batches; the state starts at zero per sample."""

    def __init__(self, rng, n_in: int, hidden: int, forget_bias: float = 1.0):
        self.hidden = hidden
        self.w = Tensor(glorot_uniform(rng, (n_in + hidden, 4 * hidden), n_in + hidden, 4 * hidden), requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        self.b = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3:
            raise ContractError(f"LSTM expects (B, T, D) input, got {x.shape}")
        bsz, steps, _ = x.shape
        hc = Tensor(np.zeros((bsz, 2 * self.hidden)))
        outs = []
        for t in range(steps):
            hc = T.lstm_cell(x[:, t, :], hc, self.w, self.b)
            outs.append(hc[:, : self.hidden])
        return T.stack(outs, axis=1)


class ConvTrunk(Module):
    """Frequency then short-term temporal convolutions over (N, 41, 128, 3) blocks.

    The frequency layers see one spectrogram row at a time, so they run on the
    distinct rows of the batch only and the result is gathered back; the
    output is identical to convolving every row.  The temporal layers are
    evaluated the same way: an output depends only on which three input rows
    it reads, so it is computed once per distinct triple of row identities.
    """

    def __init__(self, rng, n_time: int = 41, n_freq: int = 128, n_chan: int = 3, width: int = 64,
                 freq_layers: int = 3, time_layers: int = 2):
        self.n_time, self.n_freq, self.n_chan = n_time, n_freq, n_chan
        self.freq = []
        cin = n_chan
        f = n_freq
        for _ in range(freq_layers):
            self.freq.append(_Conv(rng, (1, 3), (1, 2), cin, width))
            cin = width
            f = T.conv_output_size(f)
        self.time = []
        t = n_time
        for _ in range(time_layers):
            self.time.append(_Conv(rng, (3, 1), (2, 1), cin, width))
            t = T.conv_output_size(t)
        if f < 1 or t < 1:
            raise ContractError("convolution stack reduces an axis below one")
        self.out_shape = (t, f, width)
        self.out_dim = t * f * width

    def __call__(self, blocks) -> Tensor:
        x = blocks.data if isinstance(blocks, Tensor) else np.asarray(blocks, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (self.n_time, self.n_freq, self.n_chan):
            raise ContractError(f"trunk expects (N, {self.n_time}, {self.n_freq}, {self.n_chan}) blocks, got {x.shape}")
        n = x.shape[0]
        rows = x.reshape(n * self.n_time, self.n_freq * self.n_chan)
        first, inverse = unique_rows(rows)
        h = Tensor(rows[first].reshape(-1, 1, self.n_freq, self.n_chan))
        for layer in self.freq:
            h = T.relu(layer(h))
        f, c = h.shape[2], h.shape[3]
        table = T.reshape(h, (h.shape[0], f * c))
        ids = inverse.reshape(n, self.n_time)
        for layer in self.time:
            table, ids = self._time_layer(layer, table, ids, f)
        out = T.take(table, ids.reshape(-1), axis=0)
        return T.reshape(out, (n, self.out_dim))

    @staticmethod
    def _time_layer(layer: "_Conv", table: Tensor, ids: np.ndarray, f: int) -> tuple[Tensor, np.ndarray]:
        """Kernel-3 stride-2 convolution over row identities ``ids`` (N, L) into ``table`` rows."""
        o = T.conv_output_size(ids.shape[1])
        taps = [ids[:, k : k + 2 * o - 1 : 2].reshape(-1).astype(np.int64) for k in range(3)]
        base = int(table.shape[0])
        key = (taps[0] * base + taps[1]) * base + taps[2]
        _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
        cin, cout = layer.w.shape[2], layer.w.shape[3]
        w = T.reshape(layer.w, (3, cin, cout))
        y = None
        for k in range(3):
            rows = T.reshape(T.take(table, taps[k][first], axis=0), (first.size * f, cin))
            term = T.matmul(rows, w[k])
            y = term if y is None else T.add(y, term)
        y = T.relu(T.add(y, layer.b))
        return T.reshape(y, (first.size, f * cout)), inverse.reshape(ids.shape[0], o)


def unique_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the first occurrence of each distinct row, and the inverse map.

    Rows are bucketed by a random projection and the grouping is then verified
    exactly; a projection collision falls back to a byte-wise sort.
    """
    probe = np.random.default_rng(12345).normal(size=rows.shape[1])
    _, first, inverse = np.unique(rows @ probe, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    if not np.array_equal(rows[first][inverse], rows):
        flat = np.ascontiguousarray(rows)
        keys = flat.view(np.dtype((np.void, flat.itemsize * flat.shape[1]))).reshape(-1)
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
    return first, inverse


class _Conv(Module):
    def __init__(self, rng, kernel, stride, cin, cout):
        kh, kw = kernel
        self.stride = stride
        self.w = Tensor(he_normal(rng, (kh, kw, cin, cout), kh * kw * cin), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.stride)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.99,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
