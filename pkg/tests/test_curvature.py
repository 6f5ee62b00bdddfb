import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfade.curvature import (
    CurvatureError,
    CurvatureState,
    EstimatorKind,
    FisherMode,
    KfacLayerState,
    SingularCurvatureError,
    dense_reconstruct,
    fit_curvature,
    fit_eigenvalue_correction,
    fit_factors,
    hvp,
    identity_state,
    ihvp,
    quadratic_form,
)
from kfade.data import Dataset
from kfade.linalg import make_rng, sym_eigen
from kfade.model import Checkpoint, LayerSpec, Network

from _oracles import fd_gauss_newton, rel_fro
from conftest import random_classification, random_net

EXACT = FisherMode("exact_enumeration")


def single_example_problem():
    """One 2-class affine layer with W = 0 evaluated at x = [1]."""
    net = Network((LayerSpec("fc0", 1, 2, "none"),))
    ckpt = Checkpoint({"fc0": np.zeros((2, 2))})
    data = Dataset.classification([[1.0]], [0], 2)
    return net, ckpt, data


def scalar_state(a, s):
    """K-FAC state of a 1 x 1 layer with factors ``A = [a]`` and ``S = [s]``."""
    A, S = np.array([[a]]), np.array([[s]])
    st_ = KfacLayerState(A, S, sym_eigen(A), sym_eigen(S), None, 1, 1)
    return CurvatureState(EstimatorKind.KFAC, ["w"], {"w": (1, 1)}, factors={"w": st_})


def random_grads(state, seed):
    rng = make_rng(seed, 70)
    return {l: rng.normal(size=state.shapes[l]) for l in state.target_layers}


def fitted(kind, seed=0, sizes=(4, 6, 3), n=32, mode=EXACT):
    net, ckpt = random_net(seed, sizes)
    data = random_classification(seed, n, sizes[0], sizes[-1])
    return fit_curvature(net, ckpt, data, kind, make_rng(seed, 3), mode), net, ckpt, data


class TestFitFactors:
    def test_single_example_factors(self):
        net, ckpt, data = single_example_problem()
        state = fit_factors(net, ckpt, data, "kfac", fisher_mode=EXACT)
        f = state.factors["fc0"]
        np.testing.assert_allclose(f.S, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-16)
        np.testing.assert_allclose(f.A, [[1.0, 1.0], [1.0, 1.0]], atol=1e-16)

    def test_single_example_diagonal(self):
        net, ckpt, data = single_example_problem()
        state = fit_factors(net, ckpt, data, "diagonal", fisher_mode=EXACT)
        np.testing.assert_allclose(state.diag["fc0"].ravel(), [0.25] * 4, atol=1e-16)

    def test_monte_carlo_converges_to_enumeration(self):
        net, ckpt = random_net(1, (3, 3))
        data = random_classification(1, 2, 3, 3)
        exact = fit_factors(net, ckpt, data, "kfac", fisher_mode=EXACT)
        mc = fit_factors(
            net, ckpt, data, "kfac", make_rng(1, 3), FisherMode("monte_carlo", 100_000)
        )
        assert rel_fro(mc.factors["fc0"].S, exact.factors["fc0"].S) <= 0.02
        np.testing.assert_allclose(mc.factors["fc0"].A, exact.factors["fc0"].A, rtol=1e-14)

    def test_monte_carlo_needs_rng(self):
        net, ckpt, data = single_example_problem()
        with pytest.raises(CurvatureError):
            fit_factors(net, ckpt, data, "kfac", None, FisherMode("monte_carlo", 2))

    def test_empty_dataset(self):
        net, ckpt, _ = single_example_problem()
        empty = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(CurvatureError):
            fit_factors(net, ckpt, empty, "kfac")

    def test_unknown_layer(self):
        net, ckpt, data = single_example_problem()
        with pytest.raises(ValueError):
            fit_factors(net, ckpt, data, "kfac", target_layers=["nope"])

    def test_dense_size_guard(self):
        net, ckpt = random_net(0, (64, 64, 3))
        data = random_classification(0, 4, 64, 3)
        with pytest.raises(CurvatureError):
            fit_factors(net, ckpt, data, "exact_dense")

    def test_default_fisher_mode(self):
        assert FisherMode.default_for(64).kind == "exact_enumeration"
        assert FisherMode.default_for(65) == FisherMode("monte_carlo", 1)

    def test_target_layers_only(self):
        state, net, _, _ = fitted("kfac", sizes=(4, 5, 6, 3))
        assert set(state.factors) == set(net.names)
        net2, ckpt2 = random_net(0, (4, 5, 6, 3))
        data = random_classification(0, 16, 4, 3)
        part = fit_curvature(net2, ckpt2, data, "kfac", fisher_mode=EXACT, target_layers=["fc2", "fc0"])
        assert part.target_layers == ["fc0", "fc2"]
        assert set(part.factors) == {"fc0", "fc2"}

    def test_stage_timings_recorded(self):
        state, *_ = fitted("ekfac")
        assert set(state.timings) == {"covariance", "eigendecomposition", "correction"}


class TestEigenvalueCorrection:
    def test_single_example_matches_kfac(self):
        net, ckpt, data = single_example_problem()
        kfac = fit_curvature(net, ckpt, data, "kfac", fisher_mode=EXACT)
        ekfac = fit_curvature(net, ckpt, data, "ekfac", fisher_mode=EXACT)
        np.testing.assert_allclose(dense_reconstruct(ekfac), dense_reconstruct(kfac), atol=1e-8)

    def test_zero_pseudo_gradients(self):
        # a single output class makes the model deterministic
        net = Network((LayerSpec("a", 3, 4, "tanh"), LayerSpec("b", 4, 1, "none")))
        ckpt = net.init(0)
        data = Dataset.classification(make_rng(0).normal(size=(8, 3)), np.zeros(8, int), 1)
        state = fit_curvature(net, ckpt, data, "ekfac", fisher_mode=EXACT)
        for f in state.factors.values():
            np.testing.assert_array_equal(f.lambda_corr, 0.0)

    def test_requires_ekfac_state(self):
        state, net, ckpt, data = fitted("kfac")
        with pytest.raises(CurvatureError):
            fit_eigenvalue_correction(net, ckpt, data, state)

    def test_dominance_two_layer(self):
        net, ckpt = random_net(3, (5, 7, 4))
        data = random_classification(3, 128, 5, 4)
        G = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=EXACT).dense
        kfac = fit_curvature(net, ckpt, data, "kfac", fisher_mode=EXACT)
        ekfac = fit_curvature(net, ckpt, data, "ekfac", fisher_mode=EXACT)
        e_k = np.linalg.norm(dense_reconstruct(kfac) - G)
        e_e = np.linalg.norm(dense_reconstruct(ekfac) - G)
        assert e_e <= e_k + 1e-8


class TestIhvp:
    def test_identity_no_damping(self):
        net, _ = random_net(0)
        state = identity_state(net)
        g = random_grads(state, 0)
        r = ihvp(state, g, 0.0)
        for l in g:
            np.testing.assert_array_equal(r[l], g[l])

    def test_scalar_kronecker(self):
        r = ihvp(scalar_state(4.0, 9.0), {"w": np.array([[1.0]])}, 0.0)
        assert r["w"][0, 0] == pytest.approx(1.0 / 36.0, rel=1e-15)

    def test_scalar_kronecker_damped(self):
        r = ihvp(scalar_state(4.0, 9.0), {"w": np.array([[1.0]])}, 4.0)
        assert r["w"][0, 0] == pytest.approx(1.0 / 40.0, rel=1e-15)

    def test_singular_without_damping(self):
        state = scalar_state(0.0, 9.0)
        with pytest.raises(SingularCurvatureError):
            ihvp(state, {"w": np.array([[1.0]])}, 0.0)
        assert np.isfinite(ihvp(state, {"w": np.array([[1.0]])}, 1e-3)["w"]).all()

    def test_negative_damping(self):
        with pytest.raises(CurvatureError):
            ihvp(scalar_state(4.0, 9.0), {"w": np.array([[1.0]])}, -1.0)

    def test_grads_must_cover_targets(self):
        with pytest.raises(CurvatureError):
            ihvp(scalar_state(4.0, 9.0), {"v": np.array([[1.0]])}, 0.0)

    @pytest.mark.parametrize("kind", ["diagonal", "kfac", "ekfac", "exact_dense"])
    def test_solves_damped_dense_system(self, kind):
        state, *_ = fitted(kind, seed=4)
        g = random_grads(state, 4)
        lam = 1e-2
        r = state.flatten(ihvp(state, g, lam))
        G = dense_reconstruct(state)
        residual = (G + lam * np.eye(len(r))) @ r - state.flatten(g)
        assert np.linalg.norm(residual) <= 1e-10 * np.linalg.norm(state.flatten(g))

    @pytest.mark.parametrize("kind", ["identity", "diagonal", "kfac", "ekfac", "exact_dense"])
    def test_hvp_inverts_ihvp(self, kind):
        if kind == "identity":
            net, _ = random_net(0)
            state = identity_state(net)
        else:
            state, *_ = fitted(kind, seed=5)
        g = random_grads(state, 5)
        back = hvp(state, ihvp(state, g, 0.1), 0.1)
        for l in g:
            np.testing.assert_allclose(back[l], g[l], atol=1e-10)


class TestDenseReconstruct:
    def test_identity(self):
        net, _ = random_net(0, (2, 2))
        np.testing.assert_array_equal(dense_reconstruct(identity_state(net)), np.eye(6))

    def test_scalar_kronecker(self):
        np.testing.assert_allclose(dense_reconstruct(scalar_state(4.0, 9.0)), [[36.0]], rtol=1e-15)

    def test_single_example_exact(self):
        net, ckpt, data = single_example_problem()
        kfac = fit_curvature(net, ckpt, data, "kfac", fisher_mode=EXACT)
        dense = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=EXACT)
        assert rel_fro(dense_reconstruct(kfac), dense.dense) <= 1e-10

    def test_kronecker_order(self):
        state, *_ = fitted("kfac", sizes=(3, 2))
        f = state.factors["fc0"]
        np.testing.assert_allclose(dense_reconstruct(state), np.kron(f.S, f.A), atol=1e-14)

    def test_size_guard(self):
        net, _ = random_net(0, (64, 64, 3))
        with pytest.raises(CurvatureError):
            dense_reconstruct(identity_state(net))


class TestQuadraticForm:
    def test_zero_vector(self):
        state, *_ = fitted("kfac")
        v = {l: np.zeros(s) for l, s in state.shapes.items()}
        assert quadratic_form(state, v, 1e-3) == 0.0

    def test_identity_is_squared_norm(self):
        net, _ = random_net(0)
        state = identity_state(net)
        v = random_grads(state, 1)
        assert quadratic_form(state, v, 0.0) == pytest.approx(
            sum(float(np.sum(x * x)) for x in v.values()), rel=1e-14
        )

    @pytest.mark.parametrize("kind", ["diagonal", "kfac", "ekfac", "exact_dense"])
    def test_matches_dense(self, kind):
        state, *_ = fitted(kind, seed=2)
        v = random_grads(state, 2)
        x = state.flatten(v)
        lam = 1e-3
        expected = x @ (dense_reconstruct(state) + lam * np.eye(len(x))) @ x
        assert quadratic_form(state, v, lam) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("kind", ["identity", "diagonal", "kfac", "ekfac", "exact_dense"])
@given(seed=st.integers(0, 2**16))
@settings(max_examples=10)
def test_self_adjoint(kind, seed):
    if kind == "identity":
        net, _ = random_net(seed)
        state = identity_state(net)
    else:
        state, *_ = fitted(kind, seed=seed, n=16)
    g = random_grads(state, seed)
    for lam in (1e-6, 1e-2):
        r = ihvp(state, g, lam)
        lhs = quadratic_form(state, r, lam)
        rhs = float(state.flatten(g) @ state.flatten(r))
        assert lhs == pytest.approx(rhs, rel=1e-8)


@pytest.mark.parametrize("kind", ["diagonal", "kfac", "ekfac", "exact_dense"])
@given(seed=st.integers(0, 2**16))
@settings(max_examples=5)
def test_damping_monotone(kind, seed):
    state, *_ = fitted(kind, seed=seed, n=16)
    for trial in range(10):
        g = random_grads(state, 1000 * seed + trial)
        norms = [np.linalg.norm(state.flatten(ihvp(state, g, lam))) for lam in (1e-4, 1e-2, 1.0)]
        assert norms[0] >= norms[1] >= norms[2]


@given(seed=st.integers(0, 2**16), n=st.integers(1, 24))
@settings(max_examples=15)
def test_factors_psd_and_consistent(seed, n):
    state, *_ = fitted("ekfac", seed=seed, sizes=(3, 5, 4), n=n)
    for f in state.factors.values():
        for M, eig in ((f.A, f.eig_A), (f.S, f.eig_S)):
            np.testing.assert_allclose(M, M.T, atol=1e-10)
            assert eig.eigenvalues.min() >= -1e-10
            assert rel_fro(eig.reconstruct(), M) <= 1e-8 or np.linalg.norm(M) == 0
        assert np.all(f.lambda_corr >= 0)


@given(seed=st.integers(0, 2**16), d_in=st.integers(1, 5), d_out=st.integers(2, 5))
@settings(max_examples=20)
def test_single_example_kfac_exact(seed, d_in, d_out):
    net, ckpt = random_net(seed, (d_in, d_out))
    data = random_classification(seed, 1, d_in, d_out)
    kfac = fit_curvature(net, ckpt, data, "kfac", fisher_mode=EXACT)
    dense = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=EXACT)
    assert rel_fro(dense_reconstruct(kfac), dense.dense) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_ekfac_dominates_kfac(seed):
    net, ckpt = random_net(seed, (4, 6, 5, 3))
    data = random_classification(seed, 64, 4, 3)
    G = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=EXACT).dense
    errs = {}
    for kind in ("kfac", "ekfac"):
        state = fit_curvature(net, ckpt, data, kind, fisher_mode=EXACT)
        errs[kind] = np.linalg.norm(dense_reconstruct(state) - G)
    assert errs["ekfac"] <= errs["kfac"] + 1e-8


def test_exact_dense_matches_finite_difference_jacobian():
    net, ckpt = random_net(6, (3, 4, 3))
    data = random_classification(6, 6, 3, 3)
    dense = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=EXACT).dense
    oracle = fd_gauss_newton(net, ckpt, data.inputs, net.names)
    assert rel_fro(dense, oracle) <= 1e-7


def test_fit_is_deterministic():
    a, *_ = fitted("ekfac", seed=7, mode=FisherMode("monte_carlo", 3))
    b, *_ = fitted("ekfac", seed=7, mode=FisherMode("monte_carlo", 3))
    for l in a.target_layers:
        assert a.factors[l].S.tobytes() == b.factors[l].S.tobytes()
        assert a.factors[l].lambda_corr.tobytes() == b.factors[l].lambda_corr.tobytes()
