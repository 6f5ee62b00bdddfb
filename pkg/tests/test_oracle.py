import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfade.curvature import CurvatureError, FisherMode, fit_curvature
from kfade.data import Dataset
from kfade.linalg import make_rng
from kfade.model import Checkpoint, LayerSpec, Network, TrainConfig, mean_loss, train_sgd
from kfade.oracle import exact_gauss_newton, linear_response_check, newton_minimize, retrain_oracle

from _oracles import fd_gauss_newton, rel_fro
from conftest import random_classification, random_net


def logistic_problem(seed, n=500, d=10, C=3):
    rng = make_rng(seed, 60)
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, C))
    y = np.argmax(x @ w + rng.gumbel(size=(n, C)), axis=1)
    return x, y


class TestExactGaussNewton:
    def test_single_layer_example(self):
        net = Network((LayerSpec("fc0", 1, 2, "none"),))
        G = exact_gauss_newton(net, Checkpoint({"fc0": np.zeros((2, 2))}), Dataset.classification([[1.0]], [0], 2))
        # parameters are stored class-major; reorder to (input, class) coordinates
        perm = [0, 2, 1, 3]
        expected = np.array(
            [[0.25, -0.25, 0.25, -0.25], [-0.25, 0.25, -0.25, 0.25],
             [0.25, -0.25, 0.25, -0.25], [-0.25, 0.25, -0.25, 0.25]]
        )
        np.testing.assert_allclose(G[np.ix_(perm, perm)], expected, atol=1e-16)

    @pytest.mark.parametrize("seed", range(20))
    def test_symmetric_psd(self, seed):
        net, ckpt = random_net(seed, (3, 5, 4))
        G = exact_gauss_newton(net, ckpt, random_classification(seed, 12, 3, 4))
        assert np.array_equal(G, G.T)
        assert np.linalg.eigvalsh(G).min() >= -1e-12 * max(1.0, np.abs(G).max())

    @given(st.integers(0, 2**16), st.sampled_from(["tanh", "relu"]))
    @settings(max_examples=15)
    def test_matches_pseudo_gradient_covariance(self, seed, nonlinearity):
        net, ckpt = random_net(seed, (4, 6, 5, 3), nonlinearity)
        data = random_classification(seed, 24, 4, 3)
        G = exact_gauss_newton(net, ckpt, data)
        dense = fit_curvature(net, ckpt, data, "exact_dense", fisher_mode=FisherMode("exact_enumeration")).dense
        assert rel_fro(dense, G) <= 1e-10

    def test_matches_finite_difference_jacobian(self):
        net, ckpt = random_net(3, (3, 4, 3))
        data = random_classification(3, 5, 3, 3)
        G = exact_gauss_newton(net, ckpt, data)
        assert rel_fro(G, fd_gauss_newton(net, ckpt, data.inputs, net.names)) <= 1e-7

    def test_target_layers(self):
        net, ckpt = random_net(4, (3, 4, 3))
        data = random_classification(4, 8, 3, 3)
        full = exact_gauss_newton(net, ckpt, data)
        last = exact_gauss_newton(net, ckpt, data, ["fc1"])
        k = net.n_params(["fc0"])
        np.testing.assert_allclose(last, full[k:, k:], atol=1e-15)

    def test_size_guard(self):
        net, ckpt = random_net(0, (64, 64, 3))
        with pytest.raises(CurvatureError):
            exact_gauss_newton(net, ckpt, random_classification(0, 2, 64, 3))


class TestLinearResponse:
    def test_empty_forget_set(self):
        x, y = logistic_problem(0, n=100, d=3)
        rep = linear_response_check(x, y, [], 1e-2)
        assert rep.d0 == 0.0 and rep.d1 == 0.0 and rep.ratio == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_ridge_is_exact(self, seed):
        x, y = logistic_problem(seed, n=200, d=5)
        rep = linear_response_check(x, y, range(20), 1e-1, loss="squared")
        assert rep.d0 > 1e-3
        assert rep.d1 <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_logistic_ratio(self, seed):
        x, y = logistic_problem(seed)
        rep = linear_response_check(x, y, range(25), 1e-2, n_classes=3)
        assert rep.ratio <= 0.5
        assert rep.ratio_full_hessian <= 0.5
        assert max(rep.final_grad_norms) <= 1e-10

    def test_requires_regulariser(self):
        x, y = logistic_problem(0, n=50, d=2)
        with pytest.raises(ValueError):
            linear_response_check(x, y, [0], 0.0)

    def test_unknown_loss(self):
        x, y = logistic_problem(0, n=50, d=2)
        with pytest.raises(ValueError):
            linear_response_check(x, y, [0], 1e-2, loss="hinge")

    def test_solver_iteration_cap(self):
        from kfade.model import NumericError
        from kfade.oracle import _LinearObjective

        x, y = logistic_problem(1, n=100, d=4)
        a = np.hstack([x, np.ones((100, 1))])
        with pytest.raises(NumericError):
            newton_minimize(_LinearObjective(a, y, 3, 1e-2, "logistic"), max_iter=1)


class TestRetrainOracle:
    cfg = TrainConfig(epochs=40, lr=0.2, batch=8, seed=3)

    def test_empty_forget_matches_original(self):
        net, _ = random_net(0, (4, 8, 3))
        data = random_classification(0, 40)
        original = train_sgd(net, data, self.cfg)
        assert retrain_oracle(net, 3, data, self.cfg).digest() == original.digest()

    def test_deterministic(self):
        net, _ = random_net(0, (4, 8, 3))
        data = random_classification(1, 40)
        a = retrain_oracle(net, 5, data, self.cfg)
        b = retrain_oracle(net, 5, data, self.cfg)
        assert a.digest() == b.digest()
        assert a.meta["provenance"] == "retrain_oracle"

    def test_forget_loss_rises_without_forget_set(self):
        # random labels can only be fit by memorising them
        net = Network.mlp([4, 32, 3])
        data = random_classification(2, 60)
        cfg = TrainConfig(epochs=300, lr=0.2, batch=8, seed=7)
        forget, retain = data.subset(range(10)), data.subset(range(10, 60))
        original = train_sgd(net, data, cfg)
        retrained = retrain_oracle(net, 7, retain, cfg)
        assert mean_loss(net, retrained, forget) > mean_loss(net, original, forget)
