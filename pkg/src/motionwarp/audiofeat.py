"""Log-mel front end producing one 41 x 128 x 3 block per 30 FPS video frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TooShortError, UnsupportedRateError

SAMPLE_RATE = 44100
WIN_LENGTH = 882  # 20 ms
HOP_LENGTH = 441  # 10 ms
N_FFT = 4096
N_MELS = 128
CONTEXT = 41  # mel frames per visual frame (400 ms)
VIDEO_FPS = 30.0
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


@dataclass
class MelFrameStack:
    frames: np.ndarray  # (F, 41, 128, 3)
    frame_rate: float = VIDEO_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1:] != (CONTEXT, N_MELS, 3):
            raise ContractError(f"frame stack must be (F, {CONTEXT}, {N_MELS}, 3), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelFilterbank:
    matrix: np.ndarray  # (n_mels, n_fft // 2 + 1)
    edges: np.ndarray = field(repr=False)  # n_mels + 2 edge frequencies in Hz

    @property
    def centers(self) -> np.ndarray:
        return self.edges[1:-1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters with peaks equally spaced on the HTK mel scale."""
    fmax = rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return MelFilterbank(np.maximum(0.0, np.minimum(rising, falling)), edges)


_FILTERBANK: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def preprocess(raw: Waveform) -> Waveform:
    """Remove DC offset and scale the peak to exactly 1; silence stays zero."""
    if raw.rate != SAMPLE_RATE:
        raise UnsupportedRateError(f"expected {SAMPLE_RATE} Hz audio, got {raw.rate} Hz")
    x = raw.samples
    if x.size == 0:
        return Waveform(x.copy(), raw.rate)
    ref = np.max(np.abs(x))
    y = x - x.mean()
    peak = np.max(np.abs(y))
    # residue of a constant after mean removal is rounding noise, not signal
    if peak <= 1e-9 * ref or peak == 0.0:
        return Waveform(np.zeros_like(x), raw.rate)
    return Waveform(y / peak, raw.rate)


def n_mel_frames(n_samples: int) -> int:
    return 0 if n_samples < WIN_LENGTH else 1 + (n_samples - WIN_LENGTH) // HOP_LENGTH


def melspectrogram(w: Waveform, filterbank: MelFilterbank | None = None) -> np.ndarray:
    """(time, 128) log-mel magnitudes with a 20 ms Hann window and 10 ms hop."""
    fb = filterbank or default_filterbank()
    x = w.samples
    n = n_mel_frames(x.size)
    if n == 0:
        raise TooShortError(f"need at least {WIN_LENGTH} samples, got {x.size}")
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n]
    spec = np.abs(np.fft.rfft(frames * np.hanning(WIN_LENGTH + 2)[1:-1], n=N_FFT, axis=1))
    return np.log(spec @ fb.matrix.T + LOG_FLOOR)


def n_video_frames(n_samples: int, rate: int = SAMPLE_RATE) -> int:
    return int(n_samples * VIDEO_FPS // rate)


def _centre_index(visual_frame):
    # mel frame k is centred at (k + 1) * 10 ms; visual frame v at (v + 0.5) / 30 s
    t = (np.asarray(visual_frame, dtype=np.float64) + 0.5) / VIDEO_FPS
    return np.rint(t * SAMPLE_RATE / HOP_LENGTH).astype(np.int64) - 1


def _with_deltas(block: np.ndarray) -> np.ndarray:
    """Stack (..., 41, 128) log-mel windows with first/second central differences."""
    padded = np.concatenate([block[..., :1, :], block, block[..., -1:, :]], axis=-2)
    d1 = (padded[..., 2:, :] - padded[..., :-2, :]) * 0.5
    d2 = padded[..., 2:, :] - 2.0 * block + padded[..., :-2, :]
    return np.stack([block, d1, d2], axis=-1)


def frame_features(mel: np.ndarray, visual_frame_index: int) -> np.ndarray:
    """The 41 x 128 x 3 block for one video frame; out-of-range mel rows replicate the edge."""
    return frame_stack(mel, [visual_frame_index])[0]


def frame_stack(mel: np.ndarray, visual_frames) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] < 1:
        raise ContractError(f"mel matrix must be (time, bins), got {mel.shape}")
    centres = _centre_index(np.asarray(visual_frames))
    offsets = np.arange(CONTEXT) - CONTEXT // 2
    idx = np.clip(centres[:, None] + offsets[None, :], 0, mel.shape[0] - 1)
    return _with_deltas(mel[idx])


def featurize(raw: Waveform, n_frames: int | None = None) -> MelFrameStack:
    """Full front end: preprocess, log-mel, one block per complete video frame."""
    w = preprocess(raw)
    count = n_video_frames(w.samples.size) if n_frames is None else n_frames
    if count < 1:
        raise TooShortError(f"audio of {w.samples.size} samples is shorter than one video frame")
    mel = melspectrogram(w)
    return MelFrameStack(frame_stack(mel, np.arange(count)))
