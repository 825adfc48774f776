"""Jointly learned view encoders and attentional warping trained to maximise total canonical correlation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from . import audiofeat
from . import warp as W
from .errors import ContractError, TrainingFailure
from .gradcore import tensor as T
from .gradcore.correlation import DEFAULT_RIDGE, nuclear_correlation
from .gradcore.nn import LSTM, Adam, ConvTrunk, Dense, Module
from .gradcore.tensor import Tensor, grad, no_grad

log = logging.getLogger(__name__)

ENCODER_KINDS = ("linear", "recurrent", "conv")


class ViewEncoder(Module):
    """Maps one view to a ``d_out x T`` feature sequence, one column per input frame.

    ``linear``: a single affine map of d x T features (identity-initialised).
    ``recurrent``: dense 128 + ReLU, LSTM 128, linear projection.
    ``conv``: the frequency/temporal convolution trunk over 41x128x3 mel
    blocks, then dense 128 + ReLU, LSTM 128, linear projection.
    """

    def __init__(self, kind: str, d_in: int, d_out: int = 64, hidden: int = 128, seed: int = 0):
        if kind not in ENCODER_KINDS:
            raise ContractError(f"unknown encoder kind {kind!r}")
        rng = np.random.Generator(np.random.PCG64(seed))
        self.spec = {"kind": kind, "d_in": d_in, "d_out": d_out, "hidden": hidden, "seed": seed}
        if kind == "linear":
            self.proj = Dense(rng, d_in, d_out, init="identity")
            return
        if kind == "conv":
            self.trunk = ConvTrunk(rng, audiofeat.CONTEXT, audiofeat.N_MELS, 3)
            d_in = self.trunk.out_dim
        self.dense = Dense(rng, d_in, hidden, init="he")
        self.lstm = LSTM(rng, hidden, hidden)
        self.proj = Dense(rng, hidden, d_out, init="glorot")

    @property
    def kind(self) -> str:
        return self.spec["kind"]

    @property
    def d_out(self) -> int:
        return self.spec["d_out"]

    def __call__(self, X) -> Tensor:
        """Features ``(d_out, T)`` for a ``(d_in, T)`` sequence or a ``(T, 41, 128, 3)`` stack."""
        if isinstance(X, audiofeat.MelFrameStack):
            X = X.frames
        if isinstance(X, W.FeatureSequence):
            X = X.H
        x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
        if self.kind == "conv":
            if x.ndim != 4 or x.shape[1:] != (audiofeat.CONTEXT, audiofeat.N_MELS, 3):
                raise ContractError(f"conv encoder expects (T, 41, 128, 3) blocks, got {x.shape}")
            rows = self.trunk(x)
        else:
            if x.ndim != 2 or x.shape[0] != self.spec["d_in"] or x.shape[1] < 1:
                raise ContractError(f"{self.kind} encoder expects ({self.spec['d_in']}, T) input, got {x.shape}")
            rows = T.transpose(X if isinstance(X, Tensor) else Tensor(x))
        if self.kind == "linear":
            return T.transpose(self.proj(rows))
        h = T.relu(self.dense(rows))
        h = self.lstm(T.reshape(h, (1,) + h.shape))
        h = T.reshape(h, h.shape[1:])
        return T.transpose(self.proj(h))


def encode_view(X, enc: ViewEncoder) -> W.FeatureSequence:
    with no_grad():
        return W.FeatureSequence(enc(X).data, enc.kind)


@dataclass
class DCAWModel(Module):
    encoder_1: ViewEncoder
    encoder_2: ViewEncoder
    attention: W.AttentionParams
    ridge: float = DEFAULT_RIDGE
    band_width: float | None = W.DEFAULT_BAND
    axis: str = W.SOURCE

    def __post_init__(self):
        if self.encoder_1.d_out != self.encoder_2.d_out or self.attention.dim != self.encoder_1.d_out:
            raise ContractError("encoders and attention must share the feature dimension")

    @classmethod
    def create(cls, kind: str, d_in1: int, d_in2: int | None = None, d_out: int = 64, d_a: int = 64,
               seed: int = 0, **kwargs) -> "DCAWModel":
        ss = np.random.SeedSequence([seed, 11])
        s1, s2, s3 = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        enc1 = ViewEncoder(kind, d_in1, d_out, seed=s1)
        enc2 = ViewEncoder(kind, d_in2 if d_in2 is not None else d_in1, d_out, seed=s2)
        att = W.AttentionParams.init(np.random.Generator(np.random.PCG64(s3)), d_out, d_a)
        return cls(enc1, enc2, att, **kwargs)

    def attention_for(self, H1: Tensor, H2: Tensor) -> Tensor:
        return W.attention_matrix(W.attention_scores(H1, H2, self.attention), self.axis, self.band_width)

    def config(self) -> dict:
        return {"encoder_1": self.encoder_1.spec, "encoder_2": self.encoder_2.spec,
                "d_a": self.attention.v.shape[0], "ridge": self.ridge, "band_width": self.band_width,
                "axis": self.axis}

    def save(self, path, meta: dict | None = None):
        from .io import write_container

        return write_container(path, self.state_dict(), {"kind": "dcaw", "config": self.config(), **(meta or {})})

    @classmethod
    def load(cls, path) -> "DCAWModel":
        from .io import read_container

        arrays, meta = read_container(path)
        if meta.get("kind") != "dcaw":
            raise ContractError(f"{path} is not a DCAW model file")
        c = meta["config"]
        e1, e2 = ViewEncoder(**c["encoder_1"]), ViewEncoder(**c["encoder_2"])
        d = e1.d_out
        att = W.AttentionParams(np.zeros(c["d_a"]), np.zeros((c["d_a"], d)), np.zeros((c["d_a"], d)))
        model = cls(e1, e2, att, c["ridge"], c["band_width"], c["axis"])
        model.load_state_dict(arrays)
        return model


def dcaw_loss(X1, X2, model: DCAWModel, warp=None) -> Tensor:
    """Total canonical correlation between the attention-warped view 1 and view 2.

    ``warp`` replaces the learned attention by a fixed T1 x T2 matrix.
    """
    H1 = model.encoder_1(X1)
    H2 = model.encoder_2(X2)
    if warp is None:
        A = model.attention_for(H1, H2)
    else:
        A = Tensor(np.asarray(warp, dtype=np.float64))
    return nuclear_correlation(W.apply_warp(H1, A), H2, model.ridge)


def align(model: DCAWModel, X1, X2) -> list[tuple[int, int]]:
    with no_grad():
        A = model.attention_for(model.encoder_1(X1), model.encoder_2(X2))
    return W.extract_path(A)


def attention_for_pair(model: DCAWModel, X1, X2) -> np.ndarray:
    with no_grad():
        return model.attention_for(model.encoder_1(X1), model.encoder_2(X2)).data


# ---------------------------------------------------------------- training


@dataclass
class DCAWTrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 50
    max_epochs: int = 200
    seed: int = 0
    patience: int = 20
    min_delta: float = 1e-6

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ContractError(f"invalid DCAW training config {asdict(self)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DCAWHistory:
    loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0


def train_dcaw(pairs, cfg: DCAWTrainConfig, model: DCAWModel) -> tuple[DCAWModel, DCAWHistory]:
    """Adam ascent on the summed pair objective; keeps the best epoch and stops on plateau."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("train_dcaw needs at least one pair")
    for k, pair in enumerate(pairs):
        if not all(np.all(np.isfinite(getattr(x, "frames", x))) for x in pair):
            raise ContractError(f"pair {k} contains non-finite values")
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 13])))
    hist = DCAWHistory()
    best, best_loss, stale = model.state_dict(), -np.inf, 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(pairs)) if len(pairs) > 1 else np.zeros(1, dtype=int)
        total = 0.0
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k : k + cfg.batch_size]
            loss = T.tsum(T.stack([dcaw_loss(*pairs[i], model) for i in idx]))
            g = grad(T.scale(loss, -1.0), params)
            hist.steps += 1
            grads = [g[p] for p in params]
            if not np.isfinite(loss.item()) or not all(np.all(np.isfinite(x)) for x in grads):
                raise TrainingFailure("non-finite DCAW objective", hist.steps)
            opt.step(grads)
            total += loss.item()
        hist.loss.append(total / len(pairs))
        if hist.loss[-1] > best_loss + cfg.min_delta:
            best, best_loss, hist.best_epoch, stale = model.state_dict(), hist.loss[-1], epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    with no_grad():
        final = float(np.mean([dcaw_loss(*p, model).item() for p in pairs]))
    if final > best_loss:
        hist.best_epoch = len(hist.loss)
    else:
        model.load_state_dict(best)
    return model, hist


# ---------------------------------------------------------------- multiple views


@dataclass
class MultiViewModel(Module):
    """One encoder per view plus a shared attention that warps every view onto ``reference``."""

    encoders: list[ViewEncoder]
    attention: W.AttentionParams
    reference: int = -1
    ridge: float = DEFAULT_RIDGE
    band_width: float | None = W.DEFAULT_BAND
    axis: str = W.SOURCE


def multiset_loss(views, model: MultiViewModel, warps=None) -> Tensor:
    """Sum over unordered view pairs of the total canonical correlation after warping.

    ``warps[k]`` optionally fixes the T_k x T_ref matrix for view ``k``.
    """
    views = list(views)
    if len(views) < 2:
        raise ContractError("multiset_loss needs at least two views")
    if len(model.encoders) != len(views):
        raise ContractError(f"{len(views)} views but {len(model.encoders)} encoders")
    ref = model.reference % len(views)
    H = [enc(x) for enc, x in zip(model.encoders, views)]
    aligned = []
    for k, h in enumerate(H):
        if k == ref:
            aligned.append(h)
            continue
        if warps is not None and warps[k] is not None:
            A = Tensor(np.asarray(warps[k], dtype=np.float64))
        else:
            scores = W.attention_scores(h, H[ref], model.attention)
            A = W.attention_matrix(scores, model.axis, model.band_width)
        aligned.append(W.apply_warp(h, A))
    terms = [nuclear_correlation(aligned[i], aligned[j], model.ridge) for i, j in combinations(range(len(views)), 2)]
    return T.tsum(T.stack(terms))


def train_per_word(pairs: dict, cfg: DCAWTrainConfig, make_model) -> dict:
    """One independently seeded model per word id: ``{word: train_dcaw([pair], ...)[0]}``.

    ``make_model(word, seed)`` builds the untrained model; seeds derive from
    ``(cfg.seed, word)`` so removing a word leaves every other model unchanged.
    """
    out = {}
    for word in sorted(pairs):
        seed = int(np.random.SeedSequence([cfg.seed, int(word)]).generate_state(1)[0])
        model = make_model(word, seed)
        out[word] = train_dcaw([pairs[word]], DCAWTrainConfig(**{**cfg.to_dict(), "seed": seed}), model)[0]
    return out
