import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionwarp import blendshape as B
from motionwarp.errors import ContractError, EmptyBasisError, RankError
from motionwarp.synthcorpus import SynthSpec, gen_meshes


def template_problem(seed, n=40, q=5, m=12):
    rng = np.random.default_rng(seed)
    x_n = rng.normal(size=3 * n)
    U_s = rng.normal(size=(3 * n, q))
    sel = B.LandmarkSelector(rng.choice(n, size=m, replace=False))
    return rng, x_n, U_s, sel


def normal_equations(M, r):
    return np.linalg.solve(M.T @ M, M.T @ r)


# ------------------------------------------------------------ adaptive template


def test_neutral_landmarks_give_zero_coefficients():
    _, x_n, U_s, sel = template_problem(0)
    c, x = B.adapt_template(x_n, U_s, sel, sel(x_n))
    assert np.allclose(c, 0.0, atol=1e-12) and np.allclose(x, x_n, atol=1e-12)


def test_unit_coefficient_recovered():
    _, x_n, U_s, sel = template_problem(1)
    c, _ = B.adapt_template(x_n, U_s, sel, sel(x_n + U_s[:, 0]))
    np.testing.assert_allclose(c, np.eye(U_s.shape[1])[0], atol=1e-10)


def test_planted_coefficients_match_normal_equations():
    for seed in range(20):
        rng, x_n, U_s, sel = template_problem(seed)
        c_true = rng.normal(size=U_s.shape[1])
        l = sel(x_n + U_s @ c_true)
        c, x = B.adapt_template(x_n, U_s, sel, l)
        A = sel.matrix(x_n.size // 3)
        oracle = normal_equations(A @ U_s, l - A @ x_n)
        assert np.max(np.abs(c - oracle)) < 1e-8
        assert np.max(np.abs(c - c_true)) < 1e-8
        np.testing.assert_allclose(x, x_n + U_s @ c, atol=1e-12)


def test_rank_deficient_basis():
    _, x_n, U_s, sel = template_problem(2)
    U_s[:, 3] = U_s[:, 1] + U_s[:, 2]
    with pytest.raises(RankError) as err:
        B.adapt_template(x_n, U_s, sel, sel(x_n))
    assert err.value.effective_rank == 4


def test_too_few_landmarks():
    _, x_n, U_s, _ = template_problem(3)
    with pytest.raises(RankError):
        B.adapt_template(x_n, U_s, B.LandmarkSelector([0]), np.zeros(3))


def test_residual_non_increasing_for_nested_bases():
    rng, x_n, U_s, sel = template_problem(4, q=6, m=15)
    l = sel(x_n) + rng.normal(size=45)
    res = []
    for q in range(1, 7):
        _, x = B.adapt_template(x_n, U_s[:, :q], sel, l)
        res.append(np.linalg.norm(l - sel(x)))
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))


def test_selector_matrix_matches_indexing():
    sel = B.LandmarkSelector([3, 0])
    x = np.arange(15.0)
    np.testing.assert_array_equal(sel.matrix(5) @ x, sel(x))
    with pytest.raises(ContractError):
        B.LandmarkSelector([1, 1])


# ------------------------------------------------------------ PCA model


def corpus(seed, k=3, t=60, noise=0.0):
    return gen_meshes(SynthSpec(seed=seed, n_modes=k, noise=noise), n_frames=t)


def test_identical_meshes_have_no_basis():
    c = corpus(0)
    with pytest.raises(EmptyBasisError):
        B.build_model(np.tile(c.neutral, (5, 1)), c.neutral)


def test_zero_mode_corpus_has_no_basis():
    c = corpus(0, k=0)
    with pytest.raises(EmptyBasisError):
        B.build_model(c.meshes, c.neutral)


def test_three_modes_recovered():
    c = corpus(1)
    model = B.build_model(c.meshes, c.neutral, keep=0.999)
    assert model.n_components == 3
    assert B.subspace_angle(model.basis, c.modes) < 1e-6
    U, _, _ = np.linalg.svd((c.meshes - c.neutral).T, full_matrices=False)
    assert B.subspace_angle(model.basis, U[:, :3]) < 1e-6


def test_model_invariants():
    c = corpus(2, noise=0.01)
    model = B.build_model(c.meshes, c.neutral, keep=0.9999)
    q = model.n_components
    np.testing.assert_allclose(model.basis.T @ model.basis, np.eye(q), atol=1e-10)
    assert np.all(np.diff(model.weights) <= 0) and model.weights.sum() <= 1 + 1e-12
    assert model.kept_variance == pytest.approx(model.weights.sum())


def test_component_cap():
    c = corpus(3, noise=0.05)
    model = B.build_model(c.meshes, c.neutral, keep=1.0, max_components=28)
    assert model.n_components == 28


def test_full_keep_reconstructs_training_meshes():
    c = corpus(4, noise=0.02, t=20)
    model = B.build_model(c.meshes, c.neutral, keep=1.0)
    recon = B.decode(B.encode(c.meshes, model), model)
    assert max(B.pervertex_error(a, b) for a, b in zip(recon, c.meshes)) <= 1e-8


def test_encode_recovers_generating_coefficients_up_to_sign():
    c = corpus(5)
    model = B.build_model(c.meshes, c.neutral)
    lam = B.encode(c.meshes, model)
    signs = np.sign(np.sum(model.basis * c.modes, axis=0))
    assert np.all(np.abs(np.sum(model.basis * c.modes, axis=0)) > 1 - 1e-10)
    assert np.max(np.abs(lam - c.coeffs * signs)) < 1e-8


def test_learned_basis_beats_random_basis_on_held_out_meshes():
    for seed in range(10):
        c = corpus(seed, noise=0.01, t=80)
        train, held = c.meshes[::2], c.meshes[1::2]
        model = B.build_model(train, c.neutral, keep=0.99)
        rng = np.random.default_rng(seed)
        Q, _ = np.linalg.qr(rng.normal(size=(c.neutral.size, model.n_components)))
        rand = B.SpeechBlendshapeModel(c.neutral, Q, model.weights, model.kept_variance)
        err = lambda m: np.mean([B.pervertex_error(B.decode(B.encode(x, m), m), x) for x in held])
        assert err(model) < err(rand)


# ------------------------------------------------------------ encode / decode


def small_model(seed=6):
    c = corpus(seed, noise=0.01)
    return B.build_model(c.meshes, c.neutral, keep=0.999), c


def test_round_trip_and_neutral():
    model, _ = small_model()
    lam = np.random.default_rng(0).normal(size=model.n_components)
    np.testing.assert_allclose(B.encode(B.decode(lam, model), model), lam, atol=1e-10)
    np.testing.assert_allclose(B.encode(model.neutral, model), 0.0, atol=1e-12)
    e1 = np.eye(model.n_components)[0]
    np.testing.assert_allclose(B.encode(model.neutral + model.basis[:, 0], model), e1, atol=1e-10)
    np.testing.assert_array_equal(B.decode(np.zeros(model.n_components), model), model.neutral)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_projection_residual_orthogonal(seed):
    model, _ = small_model()
    x = model.neutral + np.random.default_rng(seed).normal(size=model.neutral.size)
    resid = x - B.decode(B.encode(x, model), model)
    assert np.max(np.abs(model.basis.T @ resid)) < 1e-10


def test_size_mismatches():
    model, _ = small_model()
    with pytest.raises(ContractError):
        B.encode(np.zeros(9), model)
    with pytest.raises(ContractError):
        B.decode(np.zeros(model.n_components + 1), model)
    with pytest.raises(ContractError):
        B.pervertex_error(np.zeros(6), np.zeros(9))


def test_pervertex_error_examples():
    a = np.random.default_rng(1).normal(size=(10, 3))
    assert B.pervertex_error(a, a) == 0.0
    assert B.pervertex_error(a, a + [1.0, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)


def test_model_file_round_trip(tmp_path):
    model, _ = small_model()
    model.save(tmp_path / "model")
    back = B.SpeechBlendshapeModel.load(tmp_path / "model.json")
    assert np.array_equal(back.basis, model.basis) and np.array_equal(back.neutral, model.neutral)
    assert np.array_equal(back.weights, model.weights) and back.kept_variance == model.kept_variance
