"""Seeded synthetic corpora with known ground truth.

All randomness comes from numpy's PCG64 bit generator (128-bit state) seeded
through ``SeedSequence``; item ``k`` of a corpus draws from the child stream
``SeedSequence([seed, stream, k])`` so items can be generated independently
and in any order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .audiofeat import SAMPLE_RATE, VIDEO_FPS, Waveform

STREAM_WARP = 1
STREAM_MESH = 2
STREAM_AUDIO = 3
MODES_ITEM = 2**32  # child stream of the shared mesh modes, outside the per-item range


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_speakers: int = 10
    n_words: int = 5
    frames: tuple[int, int] = (20, 60)
    latent_dim: int = 3
    obs_dim: int = 5
    warp_knots: int = 3
    noise: float = 0.0
    n_vertices: int = 100
    n_modes: int = 3
    n_params: int = 28
    n_phonemes: int = 6
    speaker_spread: float = 0.07
    audio_noise: float = 0.01
    shared_mixing: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames"] = list(self.frames)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "frames" in d:
            d["frames"] = tuple(d["frames"])
        return cls(**d)


def item_rng(spec: SynthSpec, stream: int, item: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, stream, item])))


# ---------------------------------------------------------------- warp pairs


@dataclass
class WarpPair:
    X1: np.ndarray  # (obs_dim, T1)
    X2: np.ndarray  # (obs_dim, T2)
    path: list[tuple[int, int]]
    warp: np.ndarray  # source position (1-based, fractional) of each target frame
    latent1: np.ndarray = field(repr=False)


def _smooth_latent(rng, dim: int, n_terms: int = 3):
    """A smooth random curve z(s), s in [0, 1]."""
    freqs = rng.uniform(0.5, 2.5, size=(dim, n_terms))
    phases = rng.uniform(0, 2 * np.pi, size=(dim, n_terms))
    amps = rng.uniform(0.5, 1.0, size=(dim, n_terms))

    def z(s):
        s = np.asarray(s, dtype=np.float64)
        return (amps[:, :, None] * np.sin(2 * np.pi * freqs[:, :, None] * s[None, None, :] + phases[:, :, None])).sum(1)

    return z


def random_monotone_warp(rng, t1: int, t2: int, knots: int) -> np.ndarray:
    """Piecewise-linear increasing map from target frames 1..t2 onto [1, t1]."""
    if knots <= 0 or t2 < 2:
        return np.linspace(1.0, t1, t2)
    xs = np.concatenate([[0.0], np.sort(rng.uniform(0.15, 0.85, knots)), [1.0]])
    incr = rng.uniform(0.4, 1.6, size=knots + 1) * np.diff(xs)
    ys = np.concatenate([[0.0], np.cumsum(incr)])
    ys /= ys[-1]
    u = np.linspace(0.0, 1.0, t2)
    return 1.0 + (t1 - 1) * np.interp(u, xs, ys)


def path_from_warp(warp: np.ndarray) -> list[tuple[int, int]]:
    """Monotone unit-step path through the rounded warp, anchored at both corners."""
    idx = np.rint(warp).astype(int)
    idx[0], idx[-1] = 1, int(round(warp[-1]))
    idx = np.maximum.accumulate(idx)
    path = [(1, 1)]
    for j in range(2, len(idx) + 1):
        i_prev = path[-1][0]
        target = idx[j - 1]
        while target - i_prev > 1:
            i_prev += 1
            path.append((i_prev, j - 1))
        path.append((max(target, i_prev), j))
    return path


def gen_warp_pair(spec: SynthSpec, item: int = 0, rng: np.random.Generator | None = None) -> WarpPair:
    rng = rng or item_rng(spec, STREAM_WARP, item)
    lo, hi = spec.frames
    t1 = int(rng.integers(lo, hi + 1))
    t2 = int(rng.integers(lo, hi + 1))
    z = _smooth_latent(rng, spec.latent_dim)
    A1 = rng.normal(size=(spec.obs_dim, spec.latent_dim))
    A2 = rng.normal(size=(spec.obs_dim, spec.latent_dim))
    if spec.shared_mixing:
        A2 = A1
    warp = random_monotone_warp(rng, t1, t2, spec.warp_knots)
    s1 = (np.arange(1, t1 + 1) - 1) / max(t1 - 1, 1)
    s2 = (warp - 1) / max(t1 - 1, 1)
    lat1 = z(s1)
    X1 = A1 @ lat1 + spec.noise * rng.normal(size=(spec.obs_dim, t1))
    X2 = A2 @ z(s2) + spec.noise * rng.normal(size=(spec.obs_dim, t2))
    return WarpPair(X1, X2, path_from_warp(warp), warp, lat1)


# ---------------------------------------------------------------- meshes


@dataclass
class MeshCorpus:
    neutral: np.ndarray  # (3n,)
    meshes: np.ndarray  # (T, 3n)
    modes: np.ndarray  # (3n, k), orthonormal columns
    coeffs: np.ndarray  # (T, k)
    faces: np.ndarray  # (F, 3)


def grid_faces(rows: int, cols: int) -> np.ndarray:
    faces = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            faces += [(a, a + 1, a + cols), (a + 1, a + cols + 1, a + cols)]
    return np.array(faces, dtype=int)


def gen_meshes(spec: SynthSpec, n_frames: int | None = None, item: int = 0,
               rng: np.random.Generator | None = None) -> MeshCorpus:
    """A bumpy grid surface deformed by ``spec.n_modes`` orthonormal modes.

    The modes belong to the corpus (every item shares them); the coefficient tracks are smooth, mutually orthogonal over time and
    have decreasing energy, so the modes are exactly the principal
    directions of the noise-free deformations.
    """
    mode_rng = rng or item_rng(spec, STREAM_MESH, MODES_ITEM)
    rng = rng or item_rng(spec, STREAM_MESH, item)
    cols = int(np.ceil(np.sqrt(spec.n_vertices)))
    rows = int(np.ceil(spec.n_vertices / cols))
    gy, gx = np.divmod(np.arange(spec.n_vertices), cols)
    gx, gy = gx / max(cols - 1, 1), gy / max(rows - 1, 1)
    gz = 0.3 * np.exp(-((gx - 0.5) ** 2 + (gy - 0.5) ** 2) / 0.1)
    neutral = np.stack([gx, gy, gz], axis=1).reshape(-1)
    n3 = neutral.size
    k = spec.n_modes
    t = n_frames if n_frames is not None else int(rng.integers(spec.frames[0], spec.frames[1] + 1))
    if k > 0:
        modes, _ = np.linalg.qr(mode_rng.normal(size=(n3, k)))
        scales = 0.5 ** np.arange(k)
        s = np.linspace(0, 1, t)
        freqs = rng.uniform(0.5, 3.0, size=k)
        phases = rng.uniform(0, 2 * np.pi, size=k)
        waves = np.sin(2 * np.pi * freqs * s[:, None] + phases)
        # orthogonal coefficient tracks make each mode a principal direction on its own
        tracks, _ = np.linalg.qr(waves) if t >= k else (waves, None)
        coeffs = scales * tracks * np.sqrt(t)
    else:
        modes = np.zeros((n3, 0))
        coeffs = np.zeros((t, 0))
    meshes = neutral + coeffs @ modes.T + spec.noise * rng.normal(size=(t, n3))
    faces = grid_faces(rows, cols)
    faces = faces[(faces < spec.n_vertices).all(axis=1)]
    return MeshCorpus(neutral, meshes, modes, coeffs, faces)


# ---------------------------------------------------------------- audio


@dataclass
class AudioSample:
    word: int
    speaker: int
    wave: Waveform
    params: np.ndarray  # (T, n_params)


@dataclass
class AudioCorpus:
    samples: list[AudioSample]
    mixing: np.ndarray  # (n_params, n_phonemes)
    weights: np.ndarray  # variance fraction of each parameter
    formants: np.ndarray  # (n_phonemes, 2) Hz


SILENT_WORD = -1


def _inventory(spec: SynthSpec):
    rng = item_rng(spec, STREAM_AUDIO, 10**6)
    p = spec.n_phonemes
    f1 = np.geomspace(300, 900, p)
    f2 = np.geomspace(1100, 3200, p)[rng.permutation(p)]
    formants = np.stack([f1, f2], axis=1)
    scale = 0.9 ** np.arange(spec.n_params)
    mixing = rng.normal(size=(spec.n_params, p)) * scale[:, None]
    words = []
    for _ in range(spec.n_words):
        n_ph = int(rng.integers(2, 5))
        words.append((rng.choice(p, size=n_ph), rng.uniform(0.6, 1.4, size=n_ph)))
    return formants, mixing, words


def _activations(phones, durations, n_samples: int) -> np.ndarray:
    """Smooth per-phoneme envelopes (P, n_samples) with 40% leading/trailing silence share."""
    bounds = np.concatenate([[0.0], np.cumsum(durations)])
    bounds = 0.15 + 0.7 * bounds / bounds[-1]
    s = (np.arange(n_samples) + 0.5) / n_samples
    env = {}
    for k, ph in enumerate(phones):
        a, b = bounds[k], bounds[k + 1]
        ramp = 0.25 * (b - a)
        up = np.clip((s - a + ramp / 2) / ramp, 0, 1)
        down = np.clip((b + ramp / 2 - s) / ramp, 0, 1)
        shape = np.sin(0.5 * np.pi * np.minimum(up, down)) ** 2
        env[ph] = np.maximum(env.get(ph, 0.0), shape)
    return env


def synth_word(spec: SynthSpec, word: int, speaker: int, formants, mixing, words,
               rng: np.random.Generator, n_frames: int) -> AudioSample:
    n_samples = int(round(n_frames * SAMPLE_RATE / VIDEO_FPS))
    t = np.arange(n_samples) / SAMPLE_RATE
    srng = item_rng(spec, STREAM_AUDIO, 10**6 + 1 + speaker)
    pitch = srng.uniform(1.0 - spec.speaker_spread, 1.0 + spec.speaker_spread)
    tilt = srng.uniform(0.4, 0.8)
    if word == SILENT_WORD:
        env = {}
    else:
        phones, durs = words[word]
        env = _activations(phones, durs * rng.uniform(0.85, 1.15, size=len(durs)), n_samples)
    x = np.zeros(n_samples)
    acts = np.zeros((spec.n_phonemes, n_samples))
    for ph, e in env.items():
        f1, f2 = formants[ph] * pitch
        phase = rng.uniform(0, 2 * np.pi, 2)
        x += e * (np.sin(2 * np.pi * f1 * t + phase[0]) + tilt * np.sin(2 * np.pi * f2 * t + phase[1]))
        acts[ph] = e
    x += spec.audio_noise * rng.normal(size=n_samples) if word != SILENT_WORD else 0.0
    centres = np.clip(np.rint((np.arange(n_frames) + 0.5) / VIDEO_FPS * SAMPLE_RATE).astype(int), 0, n_samples - 1)
    params = acts[:, centres].T @ mixing.T
    return AudioSample(word, speaker, Waveform(0.5 * x, SAMPLE_RATE), params)


def gen_audio_corpus(spec: SynthSpec, include_silence: bool = False) -> AudioCorpus:
    """Every (word, speaker) utterance; shape parameters are a fixed linear map of phoneme envelopes."""
    formants, mixing, words = _inventory(spec)
    samples = []
    for w in range(spec.n_words):
        for s in range(spec.n_speakers):
            rng = item_rng(spec, STREAM_AUDIO, w * spec.n_speakers + s)
            n = int(rng.integers(spec.frames[0], spec.frames[1] + 1))
            samples.append(synth_word(spec, w, s, formants, mixing, words, rng, n))
    if include_silence:
        rng = item_rng(spec, STREAM_AUDIO, 10**7)
        samples.append(synth_word(spec, SILENT_WORD, 0, formants, mixing, words, rng, spec.frames[0]))
    allp = np.concatenate([s.params for s in samples if s.word != SILENT_WORD])
    var = allp.var(axis=0)
    return AudioCorpus(samples, mixing, var / var.sum(), formants)
