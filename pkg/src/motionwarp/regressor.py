"""Speech to shape-parameter sequence regression trained with a weighted concordance loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audiofeat
from .errors import ContractError, TooShortError, TrainingFailure
from .gradcore import tensor as T
from .gradcore.nn import LSTM, Adam, ConvTrunk, Dense, Module
from .gradcore.tensor import Tensor, grad, no_grad

log = logging.getLogger(__name__)

N_PARAMS = 28


# ---------------------------------------------------------------- concordance


def ccc(x, y) -> float:
    """Concordance correlation with population moments.

    Two constant series give 1 when equal and 0 otherwise.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size or x.size < 2:
        raise ContractError(f"ccc needs two series of equal length >= 2, got {x.size} and {y.size}")
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    denom = vx + vy + (mx - my) ** 2
    if denom == 0.0:
        return 1.0
    return float(2.0 * np.mean((x - mx) * (y - my)) / denom)


def ccc_per_param(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.array([ccc(pred[:, k], target[:, k]) for k in range(pred.shape[1])])


def ccc_loss(pred, target, weights, mask=None) -> Tensor:
    """sum_k w_k (1 - rho_c^k) over the unmasked rows of (T, K) predictions."""
    pred = T.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if pred.ndim != 2 or pred.shape != target.shape or w.shape != (pred.shape[1],):
        raise ContractError(f"ccc_loss: pred {pred.shape}, target {target.shape}, weights {w.shape}")
    if mask is not None:
        keep = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
        if keep.size == 0:
            raise ContractError("ccc_loss: every frame is masked")
        pred = T.take(pred, keep, axis=0)
        target = target[keep]
    n = target.shape[0]
    if n < 2:
        raise ContractError("ccc_loss: need at least two unmasked frames")
    my = target.mean(axis=0)
    yc = target - my
    vy = (yc * yc).mean(axis=0)
    mx = T.mean(pred, axis=0)
    xc = T.sub(pred, mx)
    vx = T.mean(T.square(xc), axis=0)
    cov = T.mean(T.mul(xc, yc), axis=0)
    denom = T.add(T.add(vx, vy), T.square(T.sub(mx, my)))
    # equal constant series: force rho = 1 instead of 0/0
    degenerate = (denom.data == 0.0).astype(np.float64)
    rho = T.div(T.add(T.scale(cov, 2.0), degenerate), T.add(denom, degenerate))
    return T.tsum(T.mul(T.sub(1.0, rho), w))


# ---------------------------------------------------------------- network


@dataclass
class MaskedBatch:
    inputs: np.ndarray  # (B, T, 41, 128, 3)
    targets: np.ndarray  # (B, T, K)
    mask: np.ndarray  # (B, T) bool

    @classmethod
    def from_sequences(cls, blocks: list[np.ndarray], targets: list[np.ndarray] | None = None,
                       n_params: int = N_PARAMS) -> "MaskedBatch":
        lengths = [len(b) for b in blocks]
        tmax = max(lengths)
        b = len(blocks)
        inputs = np.zeros((b, tmax) + blocks[0].shape[1:])
        tgt = np.zeros((b, tmax, n_params))
        mask = np.zeros((b, tmax), dtype=bool)
        for k, blk in enumerate(blocks):
            inputs[k, : lengths[k]] = blk
            mask[k, : lengths[k]] = True
            if targets is not None:
                if len(targets[k]) != lengths[k]:
                    raise ContractError(f"sample {k}: {lengths[k]} frames but {len(targets[k])} targets")
                tgt[k, : lengths[k]] = targets[k]
        return cls(inputs, tgt, mask)


class RegressorNet(Module):
    """Frequency convs, temporal convs, dense 128, LSTM 128, linear head."""

    def __init__(self, seed: int = 0, n_params: int = N_PARAMS, width: int = 64, hidden: int = 128):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.config = {"seed": seed, "n_params": n_params, "width": width, "hidden": hidden}
        self.trunk = ConvTrunk(rng, audiofeat.CONTEXT, audiofeat.N_MELS, 3, width)
        self.dense = Dense(rng, self.trunk.out_dim, hidden, init="he")
        self.lstm = LSTM(rng, hidden, hidden)
        self.head = Dense(rng, hidden, n_params, init="he")
        self.in_mean = np.zeros(3)
        self.in_std = np.ones(3)

    @property
    def n_params(self) -> int:
        return self.config["n_params"]

    def frame_parameters(self) -> list[Tensor]:
        return self.trunk.parameters() + self.dense.parameters()

    def sequence_parameters(self) -> list[Tensor]:
        return self.lstm.parameters() + self.head.parameters()

    def fit_input_stats(self, stacks) -> None:
        s = np.zeros(3)
        s2 = np.zeros(3)
        n = 0
        for blk in stacks:
            s += blk.sum(axis=(0, 1, 2))
            s2 += (blk * blk).sum(axis=(0, 1, 2))
            n += blk.shape[0] * blk.shape[1] * blk.shape[2]
        self.in_mean = s / n
        self.in_std = np.sqrt(np.maximum(s2 / n - self.in_mean**2, 1e-12))

    def frame_features(self, blocks: np.ndarray) -> Tensor:
        x = (np.asarray(blocks, dtype=np.float64) - self.in_mean) / self.in_std
        return T.relu(self.dense(self.trunk(x)))

    def sequence_head(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        """Scatter per-frame features into (B, T) slots (zeros where masked) and decode."""
        b, tmax = mask.shape
        flat = mask.reshape(-1)
        slot = np.full(b * tmax, feats.shape[0], dtype=np.intp)
        slot[flat] = np.arange(feats.shape[0])
        padded = T.concat([feats, Tensor(np.zeros((1, feats.shape[1])))], axis=0)
        seq = T.reshape(T.take(padded, slot, axis=0), (b, tmax, feats.shape[1]))
        h = self.lstm(seq)
        out = self.head(T.reshape(h, (b * tmax, h.shape[2])))
        return T.reshape(out, (b, tmax, self.n_params))

    def save(self, path, meta: dict | None = None):
        from .io import write_container

        arrays = dict(self.state_dict())
        arrays["in_mean"], arrays["in_std"] = self.in_mean, self.in_std
        return write_container(path, arrays, {"kind": "regressor", "config": self.config, **(meta or {})})

    @classmethod
    def load(cls, path) -> "RegressorNet":
        from .io import read_container

        arrays, meta = read_container(path)
        if meta.get("kind") != "regressor":
            raise ContractError(f"{path} is not a regressor file")
        net = cls(**meta["config"])
        net.in_mean, net.in_std = arrays.pop("in_mean"), arrays.pop("in_std")
        net.load_state_dict(arrays)
        return net


def _check_batch(batch: MaskedBatch, net: RegressorNet) -> None:
    x = batch.inputs
    if x.ndim != 5 or x.shape[2:] != (audiofeat.CONTEXT, audiofeat.N_MELS, 3) or batch.mask.shape != x.shape[:2]:
        raise ContractError(f"batch inputs {x.shape} / mask {batch.mask.shape} violate (B, T, 41, 128, 3)")


def forward(batch: MaskedBatch, net: RegressorNet) -> Tensor:
    """(B, T, K) predictions; padded frames never touch the network."""
    _check_batch(batch, net)
    frames = batch.inputs.reshape((-1,) + batch.inputs.shape[2:])[batch.mask.reshape(-1)]
    feats = net.frame_features(frames)
    return net.sequence_head(feats, batch.mask)


def predict_batch(batch: MaskedBatch, net: RegressorNet, chunk: int = 512) -> np.ndarray:
    _check_batch(batch, net)
    frames = batch.inputs.reshape((-1,) + batch.inputs.shape[2:])[batch.mask.reshape(-1)]
    with no_grad():
        feats = np.concatenate([net.frame_features(frames[k : k + chunk]).data for k in range(0, len(frames), chunk)])
        return net.sequence_head(Tensor(feats), batch.mask).data


def loss_and_grads(batch: MaskedBatch, net: RegressorNet, weights, chunk: int = 1024):
    """Loss value and gradients for every parameter of ``net``.

    Per-frame features are recomputed chunk by chunk during the backward pass
    so that peak memory is bounded by ``chunk`` frames.
    """
    _check_batch(batch, net)
    mask = batch.mask
    frames = batch.inputs.reshape((-1,) + batch.inputs.shape[2:])[mask.reshape(-1)]
    targets = batch.targets.reshape(-1, batch.targets.shape[-1])
    frame_params = net.frame_parameters()
    seq_params = net.sequence_parameters()
    if len(frames) <= chunk:
        feats = net.frame_features(frames)
        pred = net.sequence_head(feats, mask)
        loss = ccc_loss(T.reshape(pred, (-1, net.n_params)), targets, weights, mask)
        g = grad(loss, frame_params + seq_params)
        return loss.item(), [g[p] for p in frame_params + seq_params]
    with no_grad():
        cached = np.concatenate([net.frame_features(frames[k : k + chunk]).data for k in range(0, len(frames), chunk)])
    leaf = Tensor(cached, requires_grad=True)
    pred = net.sequence_head(leaf, mask)
    loss = ccc_loss(T.reshape(pred, (-1, net.n_params)), targets, weights, mask)
    g = grad(loss, [leaf] + seq_params)
    upstream = g[leaf]
    acc = [np.zeros_like(p.data) for p in frame_params]
    for k in range(0, len(frames), chunk):
        f = net.frame_features(frames[k : k + chunk])
        gc = grad(T.tsum(T.mul(f, upstream[k : k + chunk])), frame_params)
        for a, p in zip(acc, frame_params):
            a += gc[p]
    return loss.item(), acc + [g[p] for p in seq_params]


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch_size: int = 50
    epochs: int = 30
    seed: int = 0
    augment: bool = True
    min_keep: float = 0.5
    chunk: int = 1024

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    blocks: np.ndarray  # (T, 41, 128, 3)
    params: np.ndarray  # (T, K)
    speaker: int = 0
    word: int = 0


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_ccc: list[float] = field(default_factory=list)
    best_epoch: int = -1


def augment_time_segment(length: int, rng: np.random.Generator, min_keep: float = 0.5) -> tuple[int, int]:
    """Random contiguous crop [start, stop) keeping at least ceil(min_keep * length) frames."""
    if length < 2:
        return 0, length
    lo = max(1, math.ceil(min_keep * length))
    keep = int(rng.integers(lo, length + 1))
    start = int(rng.integers(0, length - keep + 1))
    return start, start + keep


def crop_sample(sample: Sample, rng: np.random.Generator, min_keep: float = 0.5) -> Sample:
    a, b = augment_time_segment(len(sample.blocks), rng, min_keep)
    return Sample(sample.blocks[a:b], sample.params[a:b], sample.speaker, sample.word)


def evaluate(samples: list[Sample], net: RegressorNet, batch_size: int = 50) -> tuple[float, np.ndarray]:
    """Mean and per-parameter concordance over all frames of ``samples``."""
    preds, tgts = [], []
    for k in range(0, len(samples), batch_size):
        part = samples[k : k + batch_size]
        batch = MaskedBatch.from_sequences([s.blocks for s in part], [s.params for s in part], net.n_params)
        out = predict_batch(batch, net)
        preds.append(out[batch.mask])
        tgts.append(batch.targets[batch.mask])
    per = ccc_per_param(np.concatenate(preds), np.concatenate(tgts))
    return float(per.mean()), per


def train(train_set: list[Sample], cfg: TrainConfig, weights, validation: list[Sample] | None = None,
          net: RegressorNet | None = None, progress=None) -> tuple[RegressorNet, TrainHistory]:
    """Adam on the weighted concordance loss; returns the best-on-validation weights."""
    if not train_set:
        raise ContractError("empty training set")
    weights = np.asarray(weights, dtype=np.float64)
    net = net or RegressorNet(seed=cfg.seed, n_params=train_set[0].params.shape[1])
    net.fit_input_stats(s.blocks for s in train_set)
    params = net.frame_parameters() + net.sequence_parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 7])))
    hist = TrainHistory()
    best, best_score = net.state_dict(), -np.inf
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for k in range(0, len(order), cfg.batch_size):
            part = [train_set[i] for i in order[k : k + cfg.batch_size]]
            if cfg.augment:
                part = [crop_sample(s, rng, cfg.min_keep) for s in part]
            batch = MaskedBatch.from_sequences([s.blocks for s in part], [s.params for s in part], net.n_params)
            loss, grads = loss_and_grads(batch, net, weights, cfg.chunk)
            step += 1
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingFailure("non-finite regressor loss", step)
            opt.step(grads)
            losses.append(loss)
        hist.train_loss.append(float(np.mean(losses)))
        if validation:
            score = evaluate(validation, net)[0]
            hist.val_ccc.append(score)
        else:
            score = -hist.train_loss[-1]
        if score > best_score:
            best_score, best, hist.best_epoch = score, net.state_dict(), epoch
        log.info("epoch %d loss %.4f val %.4f", epoch, hist.train_loss[-1], hist.val_ccc[-1] if validation else float("nan"))
        if progress:
            progress(epoch, hist)
    net.load_state_dict(best)
    return net, hist


# ---------------------------------------------------------------- inference


def moving_average(x: np.ndarray, width: int = 3) -> np.ndarray:
    """Centred moving average along time with edge replication."""
    x = np.asarray(x, dtype=np.float64)
    if width <= 1 or len(x) == 0:
        return x.copy()
    half = width // 2
    padded = np.concatenate([np.repeat(x[:1], half, axis=0), x, np.repeat(x[-1:], width - 1 - half, axis=0)])
    c = np.cumsum(np.concatenate([np.zeros((1,) + x.shape[1:]), padded]), axis=0)
    return (c[width:] - c[:-width]) / width


def predict_blocks(blocks: np.ndarray, net: RegressorNet, chunk: int = 15, smooth: int = 3) -> np.ndarray:
    """Run independent ``chunk``-frame windows through the net, concatenate, smooth."""
    n = len(blocks)
    pieces = [blocks[k : k + chunk] for k in range(0, n, chunk)]
    batch = MaskedBatch.from_sequences(pieces, None, net.n_params)
    out = predict_batch(batch, net)
    return moving_average(out[batch.mask], smooth)


def predict_sequence(wave: audiofeat.Waveform, net: RegressorNet, chunk: int = 15, smooth: int = 3) -> np.ndarray:
    if audiofeat.n_video_frames(wave.samples.size, wave.rate) < 1:
        raise TooShortError("audio is shorter than one video frame")
    stack = audiofeat.featurize(wave)
    return predict_blocks(stack.frames, net, chunk, smooth)
