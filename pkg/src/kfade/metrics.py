"""Specificity and forget-quality metrics.

* per-example KL divergence from a base model to a test model,
* truth ratios (length-normalised probability of wrong answers relative
  to the right one),
* the two-sample Kolmogorov-Smirnov test with asymptotic p-values,
* Pareto frontiers over (forget metric, specificity metric) pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kfade.data import Dataset, one_hot_windows, window_before
from kfade.linalg import make_rng
from kfade.model import Checkpoint, Network, log_softmax, logits

LOG_PROB_FLOOR = -50.0
KS_SERIES_TOL = 1e-12


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# KL specificity


@dataclass
class KlReport:
    values: np.ndarray
    mean: float
    p50: float
    p90: float
    p99: float
    ci_low: float
    ci_high: float

    def to_json(self) -> dict:
        return {
            "kl_mean": self.mean,
            "kl_ci_low": self.ci_low,
            "kl_ci_high": self.ci_high,
            "kl_p50": self.p50,
            "kl_p90": self.p90,
            "kl_p99": self.p99,
        }


def categorical_kl(base_logits, test_logits) -> np.ndarray:
    """Row-wise ``KL(softmax(base) || softmax(test))`` in nats, clamped at 0."""
    lp = log_softmax(base_logits)
    lq = log_softmax(test_logits)
    kl = np.sum(np.exp(lp) * (lp - lq), axis=-1)
    return np.maximum(kl, 0.0)


def bootstrap_ci(values: np.ndarray, n_resamples: int = 1000, seed: int = 0, level: float = 0.95):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricError("bootstrap of an empty sample")
    rng = make_rng(seed, 4)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    return float(np.quantile(means, tail)), float(np.quantile(means, 1.0 - tail))


def kl_specificity(
    net: Network,
    base: Checkpoint,
    test: Checkpoint,
    data: Dataset,
    bootstrap_n: int = 1000,
    seed: int = 0,
) -> KlReport:
    """KL from the base model's predictive distribution to the test model's.

    KL is evaluated at every example (prediction position) and averaged
    within each record, so token sequences contribute one value each.
    """
    if len(data) == 0:
        raise MetricError("evaluation set is empty")
    base.check_against(net)
    test.check_against(net)
    per_position = categorical_kl(logits(net, base, data.inputs), logits(net, test, data.inputs))
    groups, inverse = np.unique(data.groups, return_inverse=True)
    values = np.bincount(inverse, weights=per_position) / np.bincount(inverse)
    low, high = bootstrap_ci(values, bootstrap_n, seed)
    return KlReport(
        values,
        float(values.mean()),
        float(np.quantile(values, 0.5)),
        float(np.quantile(values, 0.9)),
        float(np.quantile(values, 0.99)),
        low,
        high,
    )


def mean_kl(net: Network, base: Checkpoint, test: Checkpoint, data: Dataset) -> float:
    """Mean per-position KL (no bootstrap), for sweeps and tests."""
    return float(categorical_kl(logits(net, base, data.inputs), logits(net, test, data.inputs)).mean())


# ---------------------------------------------------------------------------
# truth ratio


@dataclass
class TruthRatioSet:
    question_ids: list[str]
    ratios: np.ndarray
    n_perturbed: list[int]

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if np.any(self.ratios <= 0):
            raise MetricError("truth ratios must be positive")


def normalized_log_prob(token_log_probs: Sequence[float]) -> float:
    """Mean per-token log probability, i.e. the log of the geometric mean."""
    lp = np.maximum(np.asarray(token_log_probs, dtype=np.float64), LOG_PROB_FLOOR)
    if lp.size == 0:
        raise MetricError("answer must contain at least one token")
    return float(lp.mean())


def truth_ratio_from_log_probs(
    correct: Sequence[float], perturbed: Sequence[Sequence[float]]
) -> float:
    """``mean_j P(u'_j)^(1/|u'_j|) / P(u)^(1/|u|)`` from per-token log probabilities."""
    if not perturbed:
        raise MetricError("truth ratio needs at least one perturbed answer")
    pert = np.array([normalized_log_prob(p) for p in perturbed])
    top = pert.max()
    log_num = top + math.log(np.mean(np.exp(pert - top)))
    return float(math.exp(log_num - normalized_log_prob(correct)))


def answer_log_probs(
    net: Network,
    ckpt: Checkpoint,
    prompt: Sequence[int],
    answer: Sequence[int],
    window: int,
    vocab: int,
) -> np.ndarray:
    """Per-token ``log P(answer_t | preceding window)`` under a token model."""
    seq = list(prompt) + list(answer)
    start = len(prompt)
    if not answer:
        raise MetricError("answer must contain at least one token")
    ctx = np.array([window_before(seq, pos, window) for pos in range(start, len(seq))])
    lp = log_softmax(logits(net, ckpt, one_hot_windows(ctx, vocab)))
    return lp[np.arange(len(answer)), np.asarray(answer)]


def truth_ratio(
    net: Network,
    ckpt: Checkpoint,
    prompt: Sequence[int],
    correct: Sequence[int],
    perturbed: Sequence[Sequence[int]],
    window: int,
    vocab: int,
) -> float:
    return truth_ratio_from_log_probs(
        answer_log_probs(net, ckpt, prompt, correct, window, vocab),
        [answer_log_probs(net, ckpt, prompt, p, window, vocab) for p in perturbed],
    )


def truth_ratios(net: Network, ckpt: Checkpoint, data: Dataset) -> TruthRatioSet:
    """Truth ratio for every question in ``data``.

    Token datasets use records carrying ``prompt_len`` and ``perturbed``
    answers. For classification data each example is a question whose
    perturbed answers are all the other classes.
    """
    if data.kind == "lm":
        ids, ratios, counts = [], [], []
        for i, rec in enumerate(data.records or []):
            if rec.prompt_len is None or not rec.perturbed:
                continue
            prompt, answer = rec.tokens[: rec.prompt_len], rec.tokens[rec.prompt_len :]
            ratios.append(
                truth_ratio(net, ckpt, prompt, answer, rec.perturbed, data.window, data.vocab)
            )
            ids.append(rec.qid if rec.qid is not None else str(i))
            counts.append(len(rec.perturbed))
        if not ids:
            raise MetricError("no record defines a truth-ratio question")
        return TruthRatioSet(ids, np.array(ratios), counts)
    lp = log_softmax(logits(net, ckpt, data.inputs))
    ratios = []
    for row, y in zip(lp, data.labels):
        others = [[row[c]] for c in range(data.n_classes) if c != y]
        ratios.append(truth_ratio_from_log_probs([row[y]], others))
    return TruthRatioSet(
        [str(i) for i in range(len(data))], np.array(ratios), [data.n_classes - 1] * len(data)
    )


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov


def kolmogorov_sf(t: float) -> float:
    """``Q(t) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 t^2)``, clamped to [0, 1].

    The alternating series converges slowly for small ``t``; there the
    equivalent theta-function form
    ``1 - sqrt(2 pi)/t * sum_{j>=1} exp(-(2j-1)^2 pi^2 / (8 t^2))`` is used.
    Both are truncated once terms fall below 1e-12.
    """
    if t <= 0.0:
        return 1.0
    if t < 1.0:
        total, j = 0.0, 1
        while True:
            term = math.exp(-((2 * j - 1) ** 2) * math.pi**2 / (8.0 * t * t))
            total += term
            if term < KS_SERIES_TOL:
                break
            j += 1
        q = 1.0 - math.sqrt(2.0 * math.pi) / t * total
    else:
        q, j = 0.0, 1
        while True:
            term = math.exp(-2.0 * j * j * t * t)
            q += 2.0 * (-1) ** (j - 1) * term
            if term < KS_SERIES_TOL:
                break
            j += 1
    return min(1.0, max(0.0, q))


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided two-sample KS statistic and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise MetricError("KS test needs two non-empty samples")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / n
    cdf_b = np.searchsorted(b, pooled, side="right") / m
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    p = kolmogorov_sf(d * math.sqrt(n * m / (n + m)))
    return d, p


def forget_quality(unlearned: TruthRatioSet, retrained: TruthRatioSet) -> tuple[float, float]:
    """KS ``(p-value, D)`` between truth-ratio distributions on the same questions."""
    if sorted(unlearned.question_ids) != sorted(retrained.question_ids):
        raise MetricError("truth-ratio sets cover different questions")
    d, p = ks_two_sample(unlearned.ratios, retrained.ratios)
    return p, d


# ---------------------------------------------------------------------------
# Pareto


def pareto_report(runs: Sequence[tuple[float, float, str]]) -> dict:
    """Non-dominated subset of ``(forget, specificity, label)``; both axes maximised.

    Points sharing coordinates are collapsed to the one with the smallest
    label. Points are listed by decreasing forget metric.
    """
    ordered = sorted(
        ((float(f), float(s), str(label)) for f, s, label in runs),
        key=lambda r: (-r[0], -r[1], r[2]),
    )
    unique, seen = [], set()
    for f, s, label in ordered:
        if (f, s) in seen:
            continue
        seen.add((f, s))
        unique.append((f, s, label))
    frontier = []
    best_s = -math.inf
    # sorted by forget desc (then spec desc): a point is on the frontier iff
    # its specificity beats every point with a larger-or-equal forget value
    for f, s, label in unique:
        if s > best_s:
            frontier.append((f, s, label))
            best_s = s
    as_dict = lambda r: {"forget": r[0], "specificity": r[1], "label": r[2]}  # noqa: E731
    return {
        "points": [as_dict(r) for r in unique],
        "pareto_frontier": [as_dict(r) for r in frontier],
    }
