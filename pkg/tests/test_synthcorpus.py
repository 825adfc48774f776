import importlib.util
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionwarp import blendshape as B
from motionwarp.audiofeat import SAMPLE_RATE, VIDEO_FPS
from motionwarp import warp as W
from motionwarp.errors import EmptyBasisError
from motionwarp.synthcorpus import (SILENT_WORD, SynthSpec, gen_audio_corpus, gen_meshes, gen_warp_pair,
                                    path_from_warp, random_monotone_warp)

GOLDEN = Path(__file__).parent / "golden"


def load_regen():
    spec = importlib.util.spec_from_file_location("regen_synth", GOLDEN / "regen_synth.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_generators_match_frozen_hashes():
    frozen = json.loads((GOLDEN / "synth.json").read_text())
    regen = load_regen()
    assert {k: v.to_dict() for k, v in regen.CASES.items()} == frozen["specs"]
    assert regen.hashes() == frozen["sha256"]


def test_items_are_independent_of_generation_order():
    spec = SynthSpec(seed=9, frames=(10, 14))
    forward = [gen_warp_pair(spec, k).X2 for k in range(4)]
    backward = [gen_warp_pair(spec, k).X2 for k in reversed(range(4))][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(forward, backward))


def test_spec_dict_round_trip():
    spec = SynthSpec(seed=2, frames=(3, 9), noise=0.2)
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), t1=st.integers(2, 40), t2=st.integers(2, 40), knots=st.integers(0, 4))
def test_ground_truth_paths_are_monotone_and_anchored(seed, t1, t2, knots):
    warp = random_monotone_warp(np.random.default_rng(seed), t1, t2, knots)
    assert np.all(np.diff(warp) >= 0) and warp[0] == 1.0 and warp[-1] == pytest.approx(t1)
    path = path_from_warp(warp)
    assert W.is_monotone_path(path, t1, t2)


@pytest.mark.parametrize("seed", range(10))
def test_noise_free_identity_warp_is_recovered_by_dtw(seed):
    spec = SynthSpec(seed=seed, frames=(15, 15), warp_knots=0, noise=0.0, shared_mixing=True)
    p = gen_warp_pair(spec)
    assert p.path == [(k, k) for k in range(1, 16)]
    path, _ = W.dtw(p.X1, p.X2)
    assert W.alignment_error(path, p.path) == 0.0


def test_mesh_items_share_modes():
    spec = SynthSpec(seed=0, n_vertices=30, frames=(8, 12))
    a, b = gen_meshes(spec, item=0), gen_meshes(spec, item=1)
    assert np.array_equal(a.modes, b.modes) and not np.array_equal(a.coeffs[:3], b.coeffs[:3])


def test_silent_word_has_constant_parameters():
    c = gen_audio_corpus(SynthSpec(seed=0, n_words=1, n_speakers=1, frames=(6, 8)), include_silence=True)
    silent = [s for s in c.samples if s.word == SILENT_WORD][0]
    assert np.all(silent.params == silent.params[0])
    assert np.all(silent.wave.samples == 0.0)


def test_audio_lengths_match_frames():
    c = gen_audio_corpus(SynthSpec(seed=0, n_words=2, n_speakers=2, frames=(6, 9)))
    for s in c.samples:
        assert 6 <= len(s.params) <= 9
        assert s.wave.samples.size == round(len(s.params) * SAMPLE_RATE / VIDEO_FPS)
    assert c.weights.sum() == pytest.approx(1.0)


def test_meshes_span_exactly_the_planted_modes():
    m = gen_meshes(SynthSpec(seed=0, n_vertices=40, frames=(12, 12)))
    model = B.build_model(m.meshes, m.neutral, keep=1.0)
    assert model.basis.shape[1] == 3
    assert B.subspace_angle(model.basis, m.modes) < 1e-6


def test_zero_modes_raise_empty_basis():
    m = gen_meshes(SynthSpec(seed=0, n_modes=0, n_vertices=20, frames=(6, 6)))
    with pytest.raises(EmptyBasisError):
        B.build_model(m.meshes, m.neutral)
