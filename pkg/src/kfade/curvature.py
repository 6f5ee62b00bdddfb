"""Gauss-Newton curvature estimators for the affine layers of a network.

Parameters of a layer are vectorised row-major over its ``d_out x (d_in+1)``
weight matrix. With that convention the per-example parameter
pseudo-gradient is ``vec(DW) = kron(ds, a)``, the K-FAC block is
``kron(S, A)`` and every inverse is applied to the gradient *matrix* ``V``
as ``Q_S (...) Q_A^T``.

Supported estimators:

``identity``
    ``G = I``; reduces the ascent step to normalised gradient ascent.
``diagonal``
    mean squared parameter pseudo-gradient.
``kfac``
    ``A = E[a a^T]`` and ``S = E[ds ds^T]`` per layer.
``ekfac``
    K-FAC eigenbases with the diagonal re-fitted in the Kronecker eigenbasis.
``exact_dense``
    the full Gauss-Newton matrix over all targeted layers (tiny nets only).

Pseudo-gradients come either from sampled labels ``y ~ p(.|z)``
(``monte_carlo``) or from enumerating every class weighted by ``p(y|z)``
(``exact_enumeration``), which gives the exact Fisher.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

import numpy as np

from kfade.data import Dataset
from kfade.linalg import SymEigen, kron_quadratic_apply, sym_eigen
from kfade.model import Checkpoint, Network, backward, forward, sample_pseudo_labels, softmax

logger = logging.getLogger(__name__)

MAX_DENSE_PARAMS = 4096
# Denominators below this fraction of the largest one count as zero when
# damping is exactly zero.
SINGULAR_RTOL = 1e-13


class CurvatureError(ValueError):
    pass


class SingularCurvatureError(ArithmeticError):
    """The undamped curvature has a zero eigenvalue, so it cannot be inverted."""


class EstimatorKind(str, Enum):
    IDENTITY = "identity"
    DIAGONAL = "diagonal"
    KFAC = "kfac"
    EKFAC = "ekfac"
    EXACT_DENSE = "exact_dense"


@dataclass(frozen=True)
class FisherMode:
    kind: str = "exact_enumeration"
    n_samples: int = 1

    def __post_init__(self):
        if self.kind not in ("exact_enumeration", "monte_carlo"):
            raise CurvatureError(f"unknown fisher mode {self.kind!r}")
        if self.n_samples < 1:
            raise CurvatureError("n_samples must be positive")

    @classmethod
    def default_for(cls, n_classes: int) -> "FisherMode":
        if n_classes <= 64:
            return cls("exact_enumeration")
        return cls("monte_carlo", 1)


@dataclass
class KfacLayerState:
    A: np.ndarray
    S: np.ndarray
    eig_A: SymEigen
    eig_S: SymEigen
    lambda_corr: np.ndarray | None = None
    n_examples_A: int = 0
    n_examples_S: int = 0

    def kron_eigenvalues(self) -> np.ndarray:
        """``lambda_S[i] * lambda_A[j]`` with round-off negatives clipped to 0."""
        return np.outer(
            np.clip(self.eig_S.eigenvalues, 0.0, None),
            np.clip(self.eig_A.eigenvalues, 0.0, None),
        )

    def eigenvalues(self, kind: EstimatorKind) -> np.ndarray:
        if kind is EstimatorKind.EKFAC:
            if self.lambda_corr is None:
                raise CurvatureError("EK-FAC state has no eigenvalue correction yet")
            return self.lambda_corr
        return self.kron_eigenvalues()


@dataclass
class CurvatureState:
    kind: EstimatorKind
    target_layers: list[str]
    shapes: dict[str, tuple[int, int]]
    factors: dict[str, KfacLayerState] = field(default_factory=dict)
    diag: dict[str, np.ndarray] = field(default_factory=dict)
    dense: np.ndarray | None = None
    dense_eig: SymEigen | None = None
    fisher_mode: FisherMode | None = None
    fingerprint: str = ""
    n_examples: int = 0
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(self.shapes[n])) for n in self.target_layers)

    def check_grads(self, grads: Mapping[str, np.ndarray]) -> None:
        if set(grads) != set(self.target_layers):
            raise CurvatureError(
                f"expected tensors for layers {self.target_layers}, got {sorted(grads)}"
            )
        for name in self.target_layers:
            if np.shape(grads[name]) != self.shapes[name]:
                raise CurvatureError(
                    f"layer {name!r}: shape {np.shape(grads[name])} != {self.shapes[name]}"
                )

    def flatten(self, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
        return flatten(tensors, self.target_layers)

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        return unflatten(vec, self.target_layers, self.shapes)

    # -- persistence: flat name -> tensor mapping for the tensor container

    def to_entries(self) -> tuple[dict[str, np.ndarray], dict]:
        entries: dict[str, np.ndarray] = {}
        for name, st in self.factors.items():
            entries[f"{name}/A"] = st.A
            entries[f"{name}/S"] = st.S
            entries[f"{name}/QA"] = st.eig_A.Q
            entries[f"{name}/QS"] = st.eig_S.Q
            entries[f"{name}/lamA"] = st.eig_A.eigenvalues
            entries[f"{name}/lamS"] = st.eig_S.eigenvalues
            if st.lambda_corr is not None:
                entries[f"{name}/lambda_corr"] = st.lambda_corr
        for name, d in self.diag.items():
            entries[f"{name}/diag"] = d
        if self.dense is not None:
            entries["dense/G"] = self.dense
            entries["dense/Q"] = self.dense_eig.Q
            entries["dense/lam"] = self.dense_eig.eigenvalues
        meta = {
            "kind": self.kind.value,
            "target_layers": list(self.target_layers),
            "shapes": {n: list(s) for n, s in self.shapes.items()},
            "fisher_mode": None
            if self.fisher_mode is None
            else {"kind": self.fisher_mode.kind, "n_samples": self.fisher_mode.n_samples},
            "fingerprint": self.fingerprint,
            "n_examples": self.n_examples,
            "n_examples_per_layer": {
                n: [st.n_examples_A, st.n_examples_S] for n, st in self.factors.items()
            },
        }
        return entries, meta

    @classmethod
    def from_entries(cls, entries: Mapping[str, np.ndarray], meta: Mapping) -> "CurvatureState":
        kind = EstimatorKind(meta["kind"])
        layers = list(meta["target_layers"])
        fm = meta.get("fisher_mode")
        state = cls(
            kind,
            layers,
            {n: tuple(s) for n, s in meta["shapes"].items()},
            fisher_mode=None if fm is None else FisherMode(fm["kind"], fm["n_samples"]),
            fingerprint=meta.get("fingerprint", ""),
            n_examples=int(meta.get("n_examples", 0)),
        )
        counts = meta.get("n_examples_per_layer", {})
        for name in layers:
            if f"{name}/A" in entries:
                state.factors[name] = KfacLayerState(
                    entries[f"{name}/A"],
                    entries[f"{name}/S"],
                    SymEigen(entries[f"{name}/QA"], entries[f"{name}/lamA"]),
                    SymEigen(entries[f"{name}/QS"], entries[f"{name}/lamS"]),
                    entries.get(f"{name}/lambda_corr"),
                    *counts.get(name, [0, 0]),
                )
            if f"{name}/diag" in entries:
                state.diag[name] = entries[f"{name}/diag"]
        if "dense/G" in entries:
            state.dense = entries["dense/G"]
            state.dense_eig = SymEigen(entries["dense/Q"], entries["dense/lam"])
        return state


def flatten(tensors: Mapping[str, np.ndarray], layers: Iterable[str]) -> np.ndarray:
    return np.concatenate([np.asarray(tensors[n], dtype=np.float64).ravel() for n in layers])


def unflatten(vec: np.ndarray, layers: Iterable[str], shapes: Mapping) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name in layers:
        size = int(np.prod(shapes[name]))
        out[name] = vec[offset : offset + size].reshape(shapes[name])
        offset += size
    if offset != vec.size:
        raise CurvatureError(f"vector of length {vec.size} does not match {offset} parameters")
    return out


# ---------------------------------------------------------------------------
# fitting


def _resolve_layers(net: Network, target_layers: Iterable[str] | None) -> list[str]:
    if target_layers is None:
        return net.names
    layers = list(target_layers)
    for name in layers:
        net.layer(name)  # raises for unknown names
    # keep network order so flattening is canonical
    return [n for n in net.names if n in layers]


def pseudo_gradient_batches(
    net: Network,
    ckpt: Checkpoint,
    data: Dataset,
    mode: FisherMode,
    rng: np.random.Generator | None,
    batch_size: int = 256,
) -> Iterator[tuple[dict[str, np.ndarray], np.ndarray, dict[str, np.ndarray]]]:
    """Yield ``(activations, row_weights, ds)`` for every pseudo-label draw.

    For each example the row weights sum to one across the yielded draws:
    ``p(c | z)`` per enumerated class ``c``, or ``1 / n_samples`` per
    Monte Carlo sample. Averaging ``weight * row`` outer products over
    examples therefore gives the Fisher expectation.
    """
    if mode.kind == "monte_carlo" and rng is None:
        raise CurvatureError("monte_carlo fisher mode needs an rng")
    for start in range(0, len(data), batch_size):
        z, cap = forward(net, ckpt, data.inputs[start : start + batch_size])
        acts = cap.activations
        if mode.kind == "exact_enumeration":
            p = softmax(z)
            for c in range(z.shape[1]):
                dz = -p
                dz[:, c] += 1.0
                backward(net, ckpt, cap, dz, layers=())
                yield acts, p[:, c].copy(), dict(cap.ds)
        else:
            w = np.full(z.shape[0], 1.0 / mode.n_samples)
            for _ in range(mode.n_samples):
                _, dz = sample_pseudo_labels(z, rng)
                backward(net, ckpt, cap, dz, layers=())
                yield acts, w, dict(cap.ds)


def identity_state(net: Network, target_layers: Iterable[str] | None = None) -> CurvatureState:
    layers = _resolve_layers(net, target_layers)
    return CurvatureState(
        EstimatorKind.IDENTITY, layers, {n: net.layer(n).weight_shape for n in layers}
    )


def fit_factors(
    net: Network,
    ckpt: Checkpoint,
    data: Dataset,
    kind: EstimatorKind | str,
    rng: np.random.Generator | None = None,
    fisher_mode: FisherMode | None = None,
    target_layers: Iterable[str] | None = None,
    batch_size: int = 256,
) -> CurvatureState:
    """Fit a curvature estimate on ``data`` (normally the retain set).

    For ``kfac``/``ekfac`` this accumulates ``A`` and ``S`` and
    eigendecomposes them; the EK-FAC eigenvalue correction is a separate
    pass (:func:`fit_eigenvalue_correction`).
    """
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.IDENTITY:
        raise CurvatureError("identity needs no fitting; use identity_state()")
    if len(data) == 0:
        raise CurvatureError("cannot fit curvature on an empty dataset")
    ckpt.check_against(net)
    layers = _resolve_layers(net, target_layers)
    shapes = {n: net.layer(n).weight_shape for n in layers}
    n_params = sum(int(np.prod(s)) for s in shapes.values())
    if kind is EstimatorKind.EXACT_DENSE and n_params > MAX_DENSE_PARAMS:
        raise CurvatureError(
            f"exact_dense needs <= {MAX_DENSE_PARAMS} targeted parameters, got {n_params}"
        )
    mode = fisher_mode or FisherMode.default_for(net.n_outputs)
    n = len(data)

    t0 = time.perf_counter()
    A = {l: np.zeros((shapes[l][1],) * 2) for l in layers}
    S = {l: np.zeros((shapes[l][0],) * 2) for l in layers}
    diag = {l: np.zeros(shapes[l]) for l in layers}
    dense = np.zeros((n_params, n_params)) if kind is EstimatorKind.EXACT_DENSE else None
    seen_acts = None
    for acts, w, ds in pseudo_gradient_batches(net, ckpt, data, mode, rng, batch_size):
        if kind in (EstimatorKind.KFAC, EstimatorKind.EKFAC):
            if acts is not seen_acts:  # once per batch, not per draw
                for l in layers:
                    A[l] += acts[l].T @ acts[l]
                seen_acts = acts
            for l in layers:
                S[l] += (w[:, None] * ds[l]).T @ ds[l]
        elif kind is EstimatorKind.DIAGONAL:
            for l in layers:
                diag[l] += (w[:, None] * ds[l] ** 2).T @ (acts[l] ** 2)
        else:
            rows = np.concatenate(
                [(ds[l][:, :, None] * acts[l][:, None, :]).reshape(len(w), -1) for l in layers],
                axis=1,
            )
            dense += (w[:, None] * rows).T @ rows
    state = CurvatureState(
        kind, layers, shapes, fisher_mode=mode, n_examples=n,
        fingerprint=f"{ckpt.digest()}:{data.fingerprint()}",
    )
    state.timings["covariance"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if kind in (EstimatorKind.KFAC, EstimatorKind.EKFAC):
        for l in layers:
            a_cov = _symmetrize(A[l] / n)
            s_cov = _symmetrize(S[l] / n)
            state.factors[l] = KfacLayerState(
                a_cov, s_cov, sym_eigen(a_cov), sym_eigen(s_cov), None, n, n
            )
    elif kind is EstimatorKind.DIAGONAL:
        state.diag = {l: diag[l] / n for l in layers}
    else:
        state.dense = _symmetrize(dense / n)
        state.dense_eig = sym_eigen(state.dense)
    state.timings["eigendecomposition"] = time.perf_counter() - t0
    logger.debug("fitted %s on %d examples: %s", kind.value, n, state.timings)
    return state


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def fit_eigenvalue_correction(
    net: Network,
    ckpt: Checkpoint,
    data: Dataset,
    state: CurvatureState,
    rng: np.random.Generator | None = None,
    batch_size: int = 256,
) -> CurvatureState:
    """Second pass: mean squared pseudo-gradients in the Kronecker eigenbasis.

    Each draw contributes the rank-one rotated gradient
    ``R = (Q_S^T ds)(Q_A^T a)^T``; the corrected eigenvalues are the
    weighted mean of ``R * R``.
    """
    if state.kind is not EstimatorKind.EKFAC:
        raise CurvatureError(f"eigenvalue correction applies to ekfac, not {state.kind.value}")
    missing = [l for l in state.target_layers if l not in state.factors]
    if missing:
        raise CurvatureError(f"missing eigendecompositions for layers {missing}")
    t0 = time.perf_counter()
    lam = {l: np.zeros(state.shapes[l]) for l in state.target_layers}
    qa = {l: state.factors[l].eig_A.Q for l in state.target_layers}
    qs = {l: state.factors[l].eig_S.Q for l in state.target_layers}
    rotated_a, seen_acts = {}, None
    for acts, w, ds in pseudo_gradient_batches(
        net, ckpt, data, state.fisher_mode, rng, batch_size
    ):
        if acts is not seen_acts:
            rotated_a = {l: (acts[l] @ qa[l]) ** 2 for l in state.target_layers}
            seen_acts = acts
        for l in state.target_layers:
            lam[l] += (w[:, None] * (ds[l] @ qs[l]) ** 2).T @ rotated_a[l]
    for l in state.target_layers:
        state.factors[l].lambda_corr = lam[l] / len(data)
    state.timings["correction"] = time.perf_counter() - t0
    return state


def fit_curvature(
    net: Network,
    ckpt: Checkpoint,
    data: Dataset,
    kind: EstimatorKind | str,
    rng: np.random.Generator | None = None,
    fisher_mode: FisherMode | None = None,
    target_layers: Iterable[str] | None = None,
    batch_size: int = 256,
) -> CurvatureState:
    """Fit any estimator end to end (including the EK-FAC correction pass)."""
    kind = EstimatorKind(kind)
    if kind is EstimatorKind.IDENTITY:
        return identity_state(net, target_layers)
    state = fit_factors(net, ckpt, data, kind, rng, fisher_mode, target_layers, batch_size)
    if kind is EstimatorKind.EKFAC:
        fit_eigenvalue_correction(net, ckpt, data, state, rng, batch_size)
    return state


# ---------------------------------------------------------------------------
# applying the estimate


def _damped(denominators: np.ndarray, damping: float, what: str) -> np.ndarray:
    den = denominators + damping
    if damping == 0.0:
        top = float(np.max(den)) if den.size else 0.0
        if den.size and (top <= 0.0 or float(np.min(den)) <= SINGULAR_RTOL * top):
            raise SingularCurvatureError(
                f"{what}: curvature has a zero eigenvalue; use damping > 0"
            )
    return den


def ihvp(
    state: CurvatureState, grads: Mapping[str, np.ndarray], damping: float
) -> dict[str, np.ndarray]:
    """Solve ``(G + damping * I) r = g`` layer by layer."""
    if not damping >= 0.0 or not np.isfinite(damping):
        raise CurvatureError(f"damping must be finite and >= 0, got {damping}")
    state.check_grads(grads)
    kind = state.kind
    if kind is EstimatorKind.IDENTITY:
        return {l: np.asarray(grads[l]) / (1.0 + damping) for l in state.target_layers}
    if kind is EstimatorKind.DIAGONAL:
        return {
            l: np.asarray(grads[l]) / _damped(state.diag[l], damping, l)
            for l in state.target_layers
        }
    if kind is EstimatorKind.EXACT_DENSE:
        eig = state.dense_eig
        den = _damped(np.clip(eig.eigenvalues, 0.0, None), damping, "dense")
        g = state.flatten(grads)
        return state.unflatten(eig.Q @ ((eig.Q.T @ g) / den))
    out = {}
    for l in state.target_layers:
        st = state.factors[l]
        scale = 1.0 / _damped(st.eigenvalues(kind), damping, l)
        out[l] = kron_quadratic_apply(st.eig_A.Q, st.eig_S.Q, scale, grads[l])
    return out


def hvp(
    state: CurvatureState, vecs: Mapping[str, np.ndarray], damping: float = 0.0
) -> dict[str, np.ndarray]:
    """Multiply by ``G + damping * I`` using the factored structure."""
    state.check_grads(vecs)
    kind = state.kind
    if kind is EstimatorKind.IDENTITY:
        return {l: (1.0 + damping) * np.asarray(vecs[l]) for l in state.target_layers}
    if kind is EstimatorKind.DIAGONAL:
        return {l: (state.diag[l] + damping) * vecs[l] for l in state.target_layers}
    if kind is EstimatorKind.EXACT_DENSE:
        v = state.flatten(vecs)
        return state.unflatten(state.dense @ v + damping * v)
    out = {}
    for l in state.target_layers:
        st = state.factors[l]
        out[l] = kron_quadratic_apply(
            st.eig_A.Q, st.eig_S.Q, st.eigenvalues(kind) + damping, vecs[l]
        )
    return out


def quadratic_form(
    state: CurvatureState, v: Mapping[str, np.ndarray], damping: float = 0.0
) -> float:
    """``v^T (G + damping * I) v`` without materialising ``G``."""
    state.check_grads(v)
    kind = state.kind
    total = 0.0
    if kind is EstimatorKind.EXACT_DENSE:
        # in the eigenbasis used by ihvp, so the two stay consistent even
        # when v is dominated by near-null directions of G
        eig = state.dense_eig
        y = eig.Q.T @ state.flatten(v)
        return float(np.sum((np.clip(eig.eigenvalues, 0.0, None) + damping) * y * y))
    for l in state.target_layers:
        x = np.asarray(v[l], dtype=np.float64)
        if kind is EstimatorKind.IDENTITY:
            total += (1.0 + damping) * float(np.sum(x * x))
        elif kind is EstimatorKind.DIAGONAL:
            total += float(np.sum((state.diag[l] + damping) * x * x))
        else:
            st = state.factors[l]
            rot = st.eig_S.Q.T @ x @ st.eig_A.Q
            total += float(np.sum((st.eigenvalues(kind) + damping) * rot * rot))
    return total


def dense_reconstruct(state: CurvatureState) -> np.ndarray:
    """The estimate as an explicit matrix over all targeted parameters.

    Layers are concatenated in ``target_layers`` order, each vectorised
    row-major; factored estimators give a block-diagonal matrix.
    """
    if state.n_params > MAX_DENSE_PARAMS:
        raise CurvatureError(
            f"dense reconstruction limited to {MAX_DENSE_PARAMS} parameters, "
            f"got {state.n_params}"
        )
    kind = state.kind
    if kind is EstimatorKind.EXACT_DENSE:
        return state.dense.copy()
    blocks = []
    for l in state.target_layers:
        size = int(np.prod(state.shapes[l]))
        if kind is EstimatorKind.IDENTITY:
            blocks.append(np.eye(size))
        elif kind is EstimatorKind.DIAGONAL:
            blocks.append(np.diag(state.diag[l].ravel()))
        else:
            st = state.factors[l]
            q = np.kron(st.eig_S.Q, st.eig_A.Q)
            blocks.append((q * st.eigenvalues(kind).ravel()) @ q.T)
    out = np.zeros((state.n_params, state.n_params))
    offset = 0
    for b in blocks:
        k = b.shape[0]
        out[offset : offset + k, offset : offset + k] = b
        offset += k
    return out
