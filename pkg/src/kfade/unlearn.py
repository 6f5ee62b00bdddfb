"""Normalised Gauss-Newton ascent on a forget objective, plus baselines.

Each step fits the curvature on the retain set, preconditions the mean
forget-loss gradient with ``(G + damping I)^{-1}`` and rescales the result
so that the step has length ``alpha`` in the damped curvature metric::

    r     = (G + damping I)^{-1} g
    theta = theta + alpha / sqrt(<g, r>) * r

so that ``delta^T (G + damping I) delta = alpha**2`` on every step.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from kfade.curvature import (
    CurvatureState,
    EstimatorKind,
    FisherMode,
    fit_curvature,
    quadratic_form,
    ihvp,
)
from kfade.data import Dataset
from kfade.linalg import make_rng
from kfade.model import (
    Checkpoint,
    ModelError,
    Network,
    NumericError,
    loss_and_grads,
    mean_loss,
)

logger = logging.getLogger(__name__)


class UnlearnError(NumericError):
    """The ascent step is undefined (zero gradient or a non-positive norm)."""


@dataclass(frozen=True)
class UnlearnPlan:
    steps: int = 1
    step_size: float = 1e-2
    damping: float = 1e-8
    forget_loss: str = "cross_entropy"
    estimator: str = "kfac"
    target_layers: tuple[str, ...] | None = None
    refit_every_step: bool = True
    seed: int = 0
    fisher_mode: FisherMode | None = None

    def validate(self, n_forget: int | None = None, n_classes: int | None = None) -> None:
        if self.steps < 1:
            raise ValueError("steps must be a positive count")
        if not (np.isfinite(self.step_size) and self.step_size >= 0):
            raise ValueError("step_size must be finite and non-negative")
        if not (np.isfinite(self.damping) and self.damping >= 0):
            raise ValueError("damping must be finite and non-negative")
        if self.forget_loss not in ("cross_entropy", "margin"):
            raise ValueError(f"unknown forget loss {self.forget_loss!r}")
        EstimatorKind(self.estimator)
        if n_forget is not None and self.steps > n_forget:
            raise ValueError(f"cannot split {n_forget} forget examples into {self.steps} parts")
        if n_classes is not None and n_classes < 2:
            raise ValueError("unlearning needs at least two classes")


@dataclass
class StepRecord:
    step: int
    n_examples: int
    forget_loss_before: float
    forget_loss_after: float
    grad_norm: float
    g_dot_r: float
    quadratic_form: float
    checkpoint: str


@dataclass
class UnlearnTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"steps": [asdict(s) for s in self.steps]}


def split_forget(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then a contiguous k-way split (remainder to the first parts)."""
    order = make_rng(seed, 2).permutation(n)
    return np.array_split(order, k)


def _targets(net: Network, target_layers) -> list[str]:
    if target_layers is None:
        return net.names
    wanted = set(target_layers)
    unknown = wanted - set(net.names)
    if unknown:
        raise ModelError(f"unknown target layers {sorted(unknown)}")
    return [n for n in net.names if n in wanted]


def kfade(
    net: Network,
    ckpt: Checkpoint,
    forget: Dataset,
    retain: Dataset,
    plan: UnlearnPlan,
    state: CurvatureState | None = None,
) -> tuple[Checkpoint, UnlearnTrace]:
    """Run ``plan.steps`` normalised Gauss-Newton ascent steps.

    ``state`` may hold a curvature estimate fitted beforehand; it is only
    used when ``plan.refit_every_step`` is false (and is fitted on the
    first step otherwise).
    """
    plan.validate(len(forget), forget.n_classes)
    layers = _targets(net, plan.target_layers)
    parts = split_forget(len(forget), plan.steps, plan.seed)
    fit_rng = make_rng(plan.seed, 3)
    trace = UnlearnTrace()
    theta = ckpt
    if plan.refit_every_step:
        state = None
    for k, idx in enumerate(parts):
        if state is None or plan.refit_every_step:
            state = fit_curvature(
                net, theta, retain, plan.estimator, fit_rng, plan.fisher_mode, layers
            )
        before, g = loss_and_grads(
            net, theta, forget.inputs[idx], forget.labels[idx], plan.forget_loss, layers
        )
        g_flat = state.flatten(g)
        grad_norm = float(np.linalg.norm(g_flat))
        if grad_norm == 0.0:
            raise UnlearnError(f"step {k}: forget gradient is zero, nothing to unlearn")
        r = ihvp(state, g, plan.damping)
        g_dot_r = float(g_flat @ state.flatten(r))
        if not g_dot_r > 0.0:
            raise UnlearnError(
                f"step {k}: <g, r> = {g_dot_r:.3e} is not positive "
                f"(|g| = {grad_norm:.3e}, estimator={plan.estimator}, damping={plan.damping})"
            )
        coef = plan.step_size / np.sqrt(g_dot_r)
        delta = {l: coef * r[l] for l in layers}
        theta = theta.replace(
            {l: theta[l] + delta[l] for l in layers},
            steps=int(theta.meta.get("steps", 0)) + 1,
            provenance=f"kfade({plan.estimator}, alpha={plan.step_size}, lambda={plan.damping})",
        )
        after = float(
            mean_loss(net, theta, forget.subset(idx), plan.forget_loss)
        )
        if not np.isfinite(after):
            raise UnlearnError(f"step {k}: forget loss became non-finite")
        rec = StepRecord(
            k, len(idx), before, after, grad_norm, g_dot_r,
            quadratic_form(state, delta, plan.damping), theta.digest(),
        )
        logger.info(
            "step %d: forget loss %.4f -> %.4f, <g,r>=%.3e", k, before, after, g_dot_r
        )
        trace.steps.append(rec)
    return theta, trace


def _ascent(net, ckpt, forget, steps, lr, loss, layers, retain=None, retain_weight=0.0):
    theta = ckpt
    for step in range(steps):
        grads = {l: np.zeros(net.layer(l).weight_shape) for l in layers}
        if len(forget):
            f_loss, grads = loss_and_grads(net, theta, forget.inputs, forget.labels, loss, layers)
            if not np.isfinite(f_loss):
                raise NumericError(f"forget loss diverged at step {step}")
        if retain is not None and retain_weight:
            r_loss, r_grads = loss_and_grads(net, theta, retain.inputs, retain.labels, layers=layers)
            if not np.isfinite(r_loss):
                raise NumericError(f"retain loss diverged at step {step}")
            grads = {l: grads[l] - retain_weight * r_grads[l] for l in layers}
        updated = {l: theta[l] + lr * grads[l] for l in layers}
        if not all(np.all(np.isfinite(u)) for u in updated.values()):
            raise NumericError(f"parameters diverged at step {step}")
        theta = theta.replace(updated, steps=int(theta.meta.get("steps", 0)) + 1)
    return theta


def grad_ascent_baseline(
    net: Network,
    ckpt: Checkpoint,
    forget: Dataset,
    steps: int,
    lr: float,
    loss: str = "cross_entropy",
    target_layers=None,
) -> Checkpoint:
    """Full-batch gradient ascent on the mean forget loss."""
    out = _ascent(net, ckpt, forget, steps, lr, loss, _targets(net, target_layers))
    return out.replace({}, provenance=f"grad_ascent(steps={steps}, lr={lr})")


def grad_diff_baseline(
    net: Network,
    ckpt: Checkpoint,
    forget: Dataset,
    retain: Dataset,
    steps: int,
    lr: float,
    retain_weight: float,
    loss: str = "cross_entropy",
    target_layers=None,
) -> Checkpoint:
    """Ascend the forget loss while descending ``retain_weight`` x retain cross entropy."""
    out = _ascent(
        net, ckpt, forget, steps, lr, loss, _targets(net, target_layers), retain, retain_weight
    )
    return out.replace(
        {}, provenance=f"grad_diff(steps={steps}, lr={lr}, gamma={retain_weight})"
    )


def transfer_update(
    finetuned: Checkpoint, unlearned: Checkpoint, base: Checkpoint
) -> Checkpoint:
    """Task-arithmetic transfer: ``finetuned + (unlearned - base)`` per layer."""
    names = finetuned.names
    if unlearned.names != names or base.names != names:
        raise ModelError("checkpoints have different layer sets")
    out = {}
    for n in names:
        if not (finetuned[n].shape == unlearned[n].shape == base[n].shape):
            raise ModelError(f"layer {n!r}: shapes differ across checkpoints")
        delta = unlearned[n] - base[n]
        # Exact in both degenerate cases; x + (y - x) == y does not hold in floats.
        merged = np.where(finetuned[n] == base[n], unlearned[n], finetuned[n] + delta)
        out[n] = np.where(delta == 0.0, finetuned[n], merged)
    return Checkpoint(out, {**finetuned.meta, "provenance": "transfer_update"})
