import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionwarp import audiofeat as af
from motionwarp.errors import TooShortError, UnsupportedRateError

RATE = af.SAMPLE_RATE


def tone(freq, seconds, amp=0.5, rate=RATE):
    t = np.arange(int(seconds * rate)) / rate
    return af.Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def oracle_mel_bin(freq_hz):
    # HTK mel scale written out independently of the module under test
    top = 2595.0 * np.log10(1.0 + (RATE / 2) / 700.0)
    mels = np.linspace(0.0, top, af.N_MELS + 2)
    centres = 700.0 * (10.0 ** (mels[1:-1] / 2595.0) - 1.0)
    return int(np.argmin(np.abs(centres - freq_hz)))


# ------------------------------------------------------------ preprocess


def test_constant_signal_becomes_zero():
    out = af.preprocess(af.Waveform(np.full(1000, 0.3)))
    assert np.all(out.samples == 0.0)


def test_sine_peak_is_exactly_one():
    out = af.preprocess(tone(440, 0.1))
    assert np.max(np.abs(out.samples)) == 1.0
    assert abs(out.samples.mean()) < 1e-6


def test_silence_stays_silent():
    out = af.preprocess(af.Waveform(np.zeros(2000)))
    assert np.all(out.samples == 0.0) and np.all(np.isfinite(out.samples))


def test_wrong_rate_rejected():
    with pytest.raises(UnsupportedRateError):
        af.preprocess(af.Waveform(np.ones(100), 16000))


# ------------------------------------------------------------ melspectrogram


@pytest.mark.parametrize("k", [0, 1, 7, 100])
def test_frame_count_arithmetic(k):
    w = af.Waveform(np.random.default_rng(k).normal(size=441 * k + 882))
    assert af.melspectrogram(af.preprocess(w)).shape == (k + 1, af.N_MELS)


def test_too_short_waveform():
    with pytest.raises(TooShortError):
        af.melspectrogram(af.Waveform(np.ones(881)))


def test_tone_peaks_in_oracle_bin():
    mel = af.melspectrogram(af.preprocess(tone(1000.0, 0.3)))
    assert np.all(mel[2:-2].argmax(axis=1) == oracle_mel_bin(1000.0))


def test_silence_gives_log_floor():
    mel = af.melspectrogram(af.Waveform(np.zeros(5000)))
    assert np.all(mel == np.log(af.LOG_FLOOR))


def test_filterbank_triangles_cover_band():
    fb = af.default_filterbank()
    assert fb.matrix.shape == (af.N_MELS, af.N_FFT // 2 + 1)
    assert np.all(fb.matrix >= 0)
    freqs = np.arange(af.N_FFT // 2 + 1) * RATE / af.N_FFT
    inside = (freqs > fb.edges[0]) & (freqs < fb.edges[-1])
    assert np.all(fb.matrix[:, inside].sum(axis=0) > 0)


def test_tone_energy_stable_across_frames():
    mel = af.melspectrogram(af.preprocess(tone(1500.0, 0.5)))
    energy_db = 10 * np.log10(np.exp(mel[2:-2]).sum(axis=1))
    assert energy_db.max() - energy_db.min() < 3.0


# ------------------------------------------------------------ frame blocks


def test_constant_mel_has_zero_derivatives():
    block = af.frame_features(np.full((50, af.N_MELS), -2.0), 3)
    assert np.all(block[..., 1] == 0.0) and np.all(block[..., 2] == 0.0)


def test_ramp_derivatives():
    mel = np.tile(0.25 * np.arange(200.0)[:, None], (1, af.N_MELS))
    block = af.frame_features(mel, 20)  # window entirely inside the matrix
    np.testing.assert_allclose(block[1:-1, :, 1], 0.25, atol=1e-12)
    np.testing.assert_allclose(block[1:-1, :, 2], 0.0, atol=1e-12)


def test_edge_rows_replicate():
    mel = np.random.default_rng(0).normal(size=(10, af.N_MELS))
    block = af.frame_features(mel, 0)
    centre = af.CONTEXT // 2
    lead = block[:centre, :, 0]
    assert np.all(lead[: centre - 1] == mel[0])


@settings(max_examples=25, deadline=None)
@given(n_mel=st.integers(1, 120), frame=st.integers(0, 60))
def test_block_shape_contract(n_mel, frame):
    mel = np.random.default_rng(n_mel).normal(size=(n_mel, af.N_MELS))
    assert af.frame_features(mel, frame).shape == (41, 128, 3)


def test_featurize_shapes_and_determinism():
    w = tone(700.0, 0.4)
    a, b = af.featurize(w), af.featurize(w)
    assert a.frames.shape == (af.n_video_frames(w.samples.size), 41, 128, 3)
    assert np.array_equal(a.frames, b.frames)


def test_featurize_too_short():
    with pytest.raises(TooShortError):
        af.featurize(af.Waveform(np.ones(1000)))
