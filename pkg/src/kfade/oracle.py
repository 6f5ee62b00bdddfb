"""Ground-truth references for checking the unlearning machinery.

``retrain_oracle`` retrains from the same initialisation on the retain set,
``exact_gauss_newton`` assembles the Gauss-Newton matrix from explicit
per-example Jacobians, and ``linear_response_check`` compares a one-shot
Newton-style forget step with the exact retrained optimum of a convex
linear model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from kfade.curvature import MAX_DENSE_PARAMS, CurvatureError
from kfade.data import Dataset
from kfade.model import (
    Checkpoint,
    Network,
    NumericError,
    TrainConfig,
    backward,
    forward,
    softmax,
    train_sgd,
)


def retrain_oracle(
    net: Network, init_seed: int, retain: Dataset, config: TrainConfig
) -> Checkpoint:
    """Train on the retain set alone with the original init and shuffling seed."""
    ckpt = train_sgd(net, retain, dataclasses.replace(config, seed=init_seed))
    return ckpt.replace({}, provenance="retrain_oracle")


def exact_gauss_newton(
    net: Network,
    ckpt: Checkpoint,
    data: Dataset,
    target_layers: Iterable[str] | None = None,
    batch_size: int = 32,
) -> np.ndarray:
    """``mean_x J^T (diag(p) - p p^T) J`` over the targeted parameters.

    ``J`` is the logit Jacobian, built one output unit at a time by
    backpropagating ``e_c``. Parameters are ordered layer by layer
    (network order), each weight matrix flattened row-major.
    """
    layers = net.names if target_layers is None else [
        n for n in net.names if n in set(target_layers)
    ]
    n_params = net.n_params(layers)
    if n_params > MAX_DENSE_PARAMS:
        raise CurvatureError(f"exact Gauss-Newton limited to {MAX_DENSE_PARAMS} parameters")
    n_out = net.n_outputs
    G = np.zeros((n_params, n_params))
    for start in range(0, len(data), batch_size):
        z, cap = forward(net, ckpt, data.inputs[start : start + batch_size])
        b = z.shape[0]
        J = np.empty((b, n_out, n_params))
        for c in range(n_out):
            unit = np.zeros_like(z)
            unit[:, c] = 1.0
            backward(net, ckpt, cap, unit, layers=())
            J[:, c, :] = np.concatenate(
                [
                    (cap.ds[l][:, :, None] * cap.activations[l][:, None, :]).reshape(b, -1)
                    for l in layers
                ],
                axis=1,
            )
        p = softmax(z)
        HJ = p[:, :, None] * J - p[:, :, None] * np.einsum("bc,bcp->bp", p, J)[:, None, :]
        G += np.einsum("bcp,bcq->pq", J, HJ)
    G /= len(data)
    return 0.5 * (G + G.T)


# ---------------------------------------------------------------------------
# convex linear models


@dataclass
class LinearResponseReport:
    d0: float
    d1: float
    ratio: float
    d1_full_hessian: float
    ratio_full_hessian: float
    newton_iterations: tuple[int, int]
    final_grad_norms: tuple[float, float]

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class _LinearObjective:
    """``sum_i loss(W a_i, y_i) + l2/2 ||W||^2`` with ``W`` of shape C x (d+1)."""

    def __init__(self, a: np.ndarray, y: np.ndarray, n_classes: int, l2: float, loss: str):
        self.a, self.y, self.C, self.l2, self.loss = a, y, n_classes, l2, loss
        self.targets = np.eye(n_classes)[y] if len(y) else np.zeros((0, n_classes))

    @property
    def dim(self) -> int:
        return self.C * self.a.shape[1]

    def _unpack(self, theta):
        return theta.reshape(self.C, self.a.shape[1])

    def value(self, theta) -> float:
        z = self.a @ self._unpack(theta).T
        reg = 0.5 * self.l2 * float(theta @ theta)
        if self.loss == "squared":
            return 0.5 * float(np.sum((z - self.targets) ** 2)) + reg
        m = z.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(np.sum(lse - z[np.arange(len(self.y)), self.y])) + reg

    def grad(self, theta) -> np.ndarray:
        z = self.a @ self._unpack(theta).T
        resid = z - self.targets if self.loss == "squared" else softmax(z) - self.targets
        return (resid.T @ self.a).ravel() + self.l2 * theta

    def data_grad(self, theta) -> np.ndarray:
        return self.grad(theta) - self.l2 * theta

    def hessian(self, theta) -> np.ndarray:
        d = self.a.shape[1]
        if self.loss == "squared":
            H = np.kron(np.eye(self.C), self.a.T @ self.a)
        else:
            p = softmax(self.a @ self._unpack(theta).T)
            # sum_i kron(diag(p_i) - p_i p_i^T, a_i a_i^T), row-major vec of W
            H = np.zeros((self.dim, self.dim))
            for c in range(self.C):
                for k in range(self.C):
                    w = p[:, c] * ((c == k) - p[:, k])
                    H[c * d : (c + 1) * d, k * d : (k + 1) * d] = (self.a * w[:, None]).T @ self.a
        return H + self.l2 * np.eye(self.dim)


def newton_minimize(obj: _LinearObjective, tol: float = 1e-10, max_iter: int = 200):
    """Damped Newton with Armijo backtracking until ``||grad|| <= tol``."""
    theta = np.zeros(obj.dim)
    for it in range(max_iter):
        g = obj.grad(theta)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta, it, gnorm
        step = np.linalg.solve(obj.hessian(theta), g)
        f0, t = obj.value(theta), 1.0
        # round-off-sized slack so the test does not reject full steps
        # once the decrease drops below the objective's round-off
        slack = 1e-12 * abs(f0)
        while True:
            cand = theta - t * step
            if obj.value(cand) <= f0 - 1e-4 * t * float(g @ step) + slack:
                break
            t *= 0.5
            if t < 1e-12:
                raise NumericError(f"Newton line search failed at ||grad|| = {gnorm:.3e}")
        theta = cand
    g = obj.grad(theta)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= tol:
        return theta, max_iter, gnorm
    raise NumericError(f"Newton solver stopped at ||grad|| = {gnorm:.3e} > {tol:.1e}")


def linear_response_check(
    features: np.ndarray,
    labels: np.ndarray,
    forget_indices: Iterable[int],
    l2_reg: float,
    loss: str = "logistic",
    n_classes: int | None = None,
    tol: float = 1e-10,
) -> LinearResponseReport:
    """Compare a one-shot forget step with retraining on a convex linear model.

    ``theta_D`` and ``theta_R`` are the exact optima with and without the
    forget rows. The one-shot estimate ascends the summed forget loss from
    ``theta_D``, preconditioned by the Hessian of the retain objective
    (retain loss plus the l2 term) at ``theta_D``::

        theta_hat = theta_D + H_R^{-1} sum_{forget} grad loss(theta_D)

    For squared loss this is exactly ``theta_R``. The report also gives the
    distance obtained with the full-data Hessian instead of ``H_R``.
    """
    if loss not in ("logistic", "squared"):
        raise ValueError(f"unknown loss {loss!r}")
    if not l2_reg > 0:
        raise ValueError("l2_reg must be positive for a strictly convex objective")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    C = int(n_classes if n_classes is not None else y.max() + 1)
    a = np.hstack([x, np.ones((x.shape[0], 1))])
    forget = np.zeros(len(y), dtype=bool)
    forget[np.asarray(list(forget_indices), dtype=np.int64)] = True

    full = _LinearObjective(a, y, C, l2_reg, loss)
    retain = _LinearObjective(a[~forget], y[~forget], C, l2_reg, loss)
    forget_obj = _LinearObjective(a[forget], y[forget], C, 0.0, loss)

    theta_d, it_d, g_d = newton_minimize(full, tol)
    theta_r, it_r, g_r = newton_minimize(retain, tol)
    forget_grad = forget_obj.data_grad(theta_d) if forget.any() else np.zeros(full.dim)
    theta_hat = theta_d + np.linalg.solve(retain.hessian(theta_d), forget_grad)
    theta_full = theta_d + np.linalg.solve(full.hessian(theta_d), forget_grad)

    d0 = float(np.linalg.norm(theta_d - theta_r))
    d1 = float(np.linalg.norm(theta_hat - theta_r))
    d1f = float(np.linalg.norm(theta_full - theta_r))
    return LinearResponseReport(
        d0,
        d1,
        d1 / d0 if d0 > 0 else 0.0,
        d1f,
        d1f / d0 if d0 > 0 else 0.0,
        (it_d, it_r),
        (g_d, g_r),
    )
