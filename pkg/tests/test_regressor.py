import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionwarp import audiofeat, regressor as R
from motionwarp.errors import ContractError, TooShortError
from motionwarp.gradcore import Tensor, grad
from oracles import ccc_reference, central_diff, rel_err

GOLDEN = Path(__file__).parent / "golden"


def tiny_net(seed=0, n_params=5):
    return R.RegressorNet(seed=seed, n_params=n_params, width=4, hidden=6)


def random_batch(rng, lengths, n_params=5):
    blocks = [rng.normal(size=(t, 41, 128, 3)) for t in lengths]
    targets = [rng.normal(size=(t, n_params)) for t in lengths]
    return R.MaskedBatch.from_sequences(blocks, targets, n_params)


# ------------------------------------------------------------ concordance


def test_ccc_examples():
    x = np.array([1.0, 2.0, 3.0])
    assert R.ccc(x, x) == 1.0
    assert R.ccc(x, x + 1) == pytest.approx(4 / 7, abs=1e-15)
    assert R.ccc(x, -x + 2 * x.mean()) == pytest.approx(-1.0)


def test_ccc_constant_conventions():
    assert R.ccc([2.0, 2.0], [2.0, 2.0]) == 1.0
    assert R.ccc([2.0, 2.0], [3.0, 3.0]) == 0.0
    with pytest.raises(ContractError):
        R.ccc([1.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(0.1, 10.0).filter(lambda c: abs(c - 1) > 1e-3))
def test_ccc_symmetric_and_scale_sensitive(seed, c):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=12), rng.normal(size=12)
    assert R.ccc(x, y) == pytest.approx(R.ccc(y, x), abs=1e-14)
    assert R.ccc(x, y) == pytest.approx(ccc_reference(x, y), abs=1e-12)
    assert R.ccc(x, c * x) < 1.0


def test_ccc_loss_zero_at_target_and_bounded():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(10, 28))
    w = rng.random(28)
    assert R.ccc_loss(y, y, w).item() == pytest.approx(0.0, abs=1e-14)
    for _ in range(20):
        val = R.ccc_loss(rng.normal(size=(10, 28)) * 3, y, w).item()
        assert 0.0 <= val <= 2 * w.sum()


def test_ccc_loss_gradient_20_seeds():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pred, target, w = rng.normal(size=(10, 28)), rng.normal(size=(10, 28)), rng.random(28)
        p = Tensor(pred, requires_grad=True)
        g = grad(R.ccc_loss(p, target, w))[p]
        fd = central_diff(lambda x: R.ccc_loss(x, target, w).item(), pred)
        assert rel_err(g, fd) <= 1e-5


def test_ccc_loss_masked_rows_ignored():
    rng = np.random.default_rng(1)
    pred, target, w = rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), np.ones(3)
    mask = np.array([1, 1, 1, 1, 1, 0, 0, 0], dtype=bool)
    full = R.ccc_loss(pred[:5], target[:5], w).item()
    assert R.ccc_loss(pred, target, w, mask).item() == full
    with pytest.raises(ContractError):
        R.ccc_loss(pred, target, w, np.zeros(8, dtype=bool))


# ------------------------------------------------------------ network


def test_forward_shape():
    rng = np.random.default_rng(2)
    batch = random_batch(rng, [3, 1, 2])
    assert R.forward(batch, tiny_net()).shape == (3, 3, 5)


def test_full_size_topology():
    net = R.RegressorNet(seed=0)
    assert net.trunk.out_shape == (9, 15, 64)
    assert net.dense.w.shape == (9 * 15 * 64, 128) and net.lstm.w.shape == (256, 512)
    assert net.head.w.shape == (128, 28)
    batch = random_batch(np.random.default_rng(0), [2], n_params=28)
    assert R.forward(batch, net).shape == (1, 2, 28)


def test_zero_weight_net_outputs_bias():
    net = tiny_net()
    for p in net.parameters():
        p.data = np.zeros_like(p.data)
    net.head.b.data = np.arange(5.0)
    out = R.forward(random_batch(np.random.default_rng(3), [4, 2]), net).data
    np.testing.assert_array_equal(out[0], np.tile(np.arange(5.0), (4, 1)))


def test_permuting_samples_permutes_outputs():
    rng = np.random.default_rng(4)
    blocks = [rng.normal(size=(t, 41, 128, 3)) for t in (3, 2, 4)]
    net = tiny_net()
    out = R.forward(R.MaskedBatch.from_sequences(blocks, n_params=5), net).data
    perm = [2, 0, 1]
    out_p = R.forward(R.MaskedBatch.from_sequences([blocks[k] for k in perm], n_params=5), net).data
    for a, k in enumerate(perm):
        t = len(blocks[k])
        np.testing.assert_allclose(out_p[a, :t], out[k, :t], rtol=0, atol=1e-12)


def test_bad_batch_shape():
    with pytest.raises(ContractError):
        R.forward(R.MaskedBatch(np.zeros((1, 2, 41, 64, 3)), np.zeros((1, 2, 5)), np.ones((1, 2), bool)), tiny_net())


def test_padded_frames_are_inert_bitwise():
    rng = np.random.default_rng(5)
    batch = random_batch(rng, [4, 2, 3])
    w = rng.random(5)
    loss_a, grads_a = R.loss_and_grads(batch, tiny_net(), w)
    junk = batch.inputs.copy()
    junk[~batch.mask] = rng.normal(size=junk[~batch.mask].shape) * 100
    tgt = batch.targets.copy()
    tgt[~batch.mask] = 7.0
    loss_b, grads_b = R.loss_and_grads(R.MaskedBatch(junk, tgt, batch.mask), tiny_net(), w)
    assert loss_a == loss_b
    assert all(np.array_equal(a, b) for a, b in zip(grads_a, grads_b))


def test_checkpointed_gradients_match_direct():
    rng = np.random.default_rng(6)
    batch = random_batch(rng, [5, 3, 4])
    w = rng.random(5)
    net = tiny_net()
    l1, g1 = R.loss_and_grads(batch, net, w, chunk=1000)
    l2, g2 = R.loss_and_grads(batch, net, w, chunk=4)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_loss_gradient_spot_check():
    rng = np.random.default_rng(7)
    batch = random_batch(rng, [3, 2])
    w = rng.random(5)
    net = tiny_net()
    params = net.frame_parameters() + net.sequence_parameters()
    # zero biases put whole dead regions exactly on the ReLU kink
    for p in params:
        if p.ndim == 1:
            p.data = rng.normal(scale=0.1, size=p.shape)
    _, grads = R.loss_and_grads(batch, net, w)
    for p, g in zip(params, grads):
        k = int(np.argmax(np.abs(g)))
        old = p.data.reshape(-1)[k]
        vals = []
        for eps in (1e-6, -1e-6):
            p.data.reshape(-1)[k] = old + eps
            vals.append(R.loss_and_grads(batch, net, w)[0])
        p.data.reshape(-1)[k] = old
        fd = (vals[0] - vals[1]) / 2e-6
        assert fd == pytest.approx(g.reshape(-1)[k], rel=1e-4, abs=1e-9)


def test_save_load_round_trip(tmp_path):
    net = tiny_net(3)
    net.in_mean = np.array([1.0, 2.0, 3.0])
    net.save(tmp_path / "net")
    back = R.RegressorNet.load(tmp_path / "net.json")
    batch = random_batch(np.random.default_rng(8), [3])
    assert np.array_equal(R.forward(batch, net).data, R.forward(batch, back).data)


# ------------------------------------------------------------ augmentation


def test_full_keep_is_identity():
    rng = np.random.default_rng(0)
    for n in range(2, 30):
        assert R.augment_time_segment(n, rng, min_keep=1.0) == (0, n)


def test_crop_keeps_half_over_1000_draws():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        a, b = R.augment_time_segment(n, rng)
        assert 0 <= a < b <= n and b - a >= np.ceil(0.5 * n)


def test_crop_indices_match_golden():
    golden = json.loads((GOLDEN / "crops.json").read_text())
    rng = np.random.Generator(np.random.PCG64(golden["seed"]))
    got = [list(R.augment_time_segment(n, rng)) for n in golden["lengths"]]
    assert got == golden["crops"]


def test_crop_sample_cuts_targets_identically():
    s = R.Sample(np.arange(10.0)[:, None, None, None] * np.ones((1, 41, 128, 3)), np.arange(10.0)[:, None])
    c = R.crop_sample(s, np.random.default_rng(2))
    np.testing.assert_array_equal(c.blocks[:, 0, 0, 0], c.params[:, 0])


# ------------------------------------------------------------ inference


def test_moving_average_identity_on_constants_and_keeps_length():
    x = np.full((7, 3), 2.5)
    np.testing.assert_array_equal(R.moving_average(x, 3), x)
    y = np.random.default_rng(0).normal(size=(9, 2))
    m = R.moving_average(y, 3)
    assert m.shape == y.shape
    np.testing.assert_allclose(m[4], y[3:6].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(m[0], (2 * y[0] + y[1]) / 3, atol=1e-15)


def reference_predict(wave, net, chunk, width):
    blocks = audiofeat.featurize(wave).frames
    outs = []
    for k in range(0, len(blocks), chunk):
        piece = blocks[k : k + chunk]
        batch = R.MaskedBatch(piece[None], np.zeros((1, len(piece), net.n_params)), np.ones((1, len(piece)), bool))
        outs.append(R.forward(batch, net).data[0])
    raw = np.concatenate(outs)
    smooth = np.empty_like(raw)
    half = width // 2
    for t in range(len(raw)):
        acc = np.zeros(raw.shape[1])
        for s in range(t - half, t - half + width):
            acc += raw[min(max(s, 0), len(raw) - 1)]
        smooth[t] = acc / width
    return smooth


def test_predict_sequence_matches_reference_loop():
    rng = np.random.default_rng(9)
    wave = audiofeat.Waveform(rng.normal(size=int(1.2 * audiofeat.SAMPLE_RATE)) * 0.1)
    net = tiny_net(4)
    out = R.predict_sequence(wave, net)
    ref = reference_predict(wave, net, 15, 3)
    assert out.shape == (36, 5)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_predict_constant_audio_is_near_constant():
    wave = audiofeat.Waveform(np.full(audiofeat.SAMPLE_RATE, 0.2))
    out = R.predict_sequence(wave, tiny_net(5), chunk=60)
    assert np.ptp(out, axis=0).max() < 0.5 * np.abs(out).max() + 1e-12


def test_predict_too_short():
    with pytest.raises(TooShortError):
        R.predict_sequence(audiofeat.Waveform(np.ones(1000)), tiny_net())


# ------------------------------------------------------------ training


def toy_set(rng, n=6):
    return [R.Sample(rng.normal(size=(t, 41, 128, 3)), rng.normal(size=(t, 5)), k % 3, k % 2)
            for k, t in enumerate(rng.integers(3, 6, size=n))]


def test_training_is_deterministic():
    data = toy_set(np.random.default_rng(10))
    cfg = R.TrainConfig(epochs=2, batch_size=3, seed=1)
    _, h1 = R.train(data, cfg, np.ones(5) / 5, net=tiny_net())
    _, h2 = R.train(data, cfg, np.ones(5) / 5, net=tiny_net())
    assert h1.train_loss == h2.train_loss


def test_training_failure_reports_step():
    from motionwarp.errors import TrainingFailure

    data = toy_set(np.random.default_rng(11))
    data[0].blocks[:] = np.nan
    with pytest.raises(TrainingFailure) as err:
        R.train(data, R.TrainConfig(epochs=1, batch_size=len(data)), np.ones(5), net=tiny_net())
    assert err.value.step == 1
