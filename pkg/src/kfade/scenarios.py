"""Seeded synthetic scenarios.

``facts``
    A fictitious-facts language task. Every entity is named by a pair of
    tokens (first name, last name) drawn from shared pools, so forget and
    retain entities overlap in their inputs. Each entity has one multi-token
    attribute answer per relation; a record is
    ``[first, last, relation, answer...]`` and the answer tokens are the
    supervised positions. A subset of entities
    forms the forget set. Each record also carries perturbed answers (other
    attribute sequences) so truth ratios can be computed.
``two_domain``
    A Gaussian-blob classifier with two domains of classes; one domain is the
    forget set, the other the retain set.
``lifecycle``
    The facts task plus a fine-tuning set of unseen facts about further
    entities, for checking that an unlearning delta can be re-applied after
    fine-tuning.
``blobs``
    Overlapping Gaussian classes with a random in-distribution forget
    subset; a smooth, well-conditioned classifier for local (Taylor) checks.

Token ids: 0 is padding, then first-name, last-name, relation and attribute
tokens in that order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from kfade.data import Dataset, TokenRecord
from kfade.linalg import make_rng
from kfade.model import LayerSpec, Network


@dataclass(frozen=True)
class FactsConfig:
    n_entities: int = 40
    n_first: int = 10
    n_last: int = 10
    n_relations: int = 3
    n_attributes: int = 12
    answer_len: int = 2
    n_forget: int = 8
    n_perturbed: int = 4
    hidden: int = 32


@dataclass
class FactsScenario:
    config: FactsConfig
    vocab: int
    window: int
    retain_records: list[TokenRecord]
    forget_records: list[TokenRecord]
    finetune_records: list[TokenRecord] = field(default_factory=list)

    def dataset(self, records) -> Dataset:
        return Dataset.from_token_records(records, self.window, self.vocab)

    @property
    def retain(self) -> Dataset:
        return self.dataset(self.retain_records)

    @property
    def forget(self) -> Dataset:
        return self.dataset(self.forget_records)

    @property
    def full(self) -> Dataset:
        return self.dataset(self.retain_records + self.forget_records)

    def network(self) -> Network:
        return Network(
            (
                LayerSpec("up", self.window * self.vocab, self.config.hidden, "tanh"),
                LayerSpec("down", self.config.hidden, self.vocab, "none"),
            )
        )


def facts(seed: int, config: FactsConfig = FactsConfig()) -> FactsScenario:
    rng = make_rng(seed, 10)
    c = config
    if c.n_entities > c.n_first * c.n_last:
        raise ValueError("not enough distinct names for the requested entities")
    first0, last0 = 1, 1 + c.n_first
    rel0 = last0 + c.n_last
    attr0 = rel0 + c.n_relations
    vocab = attr0 + c.n_attributes
    window = 3 + c.answer_len - 1
    pairs = rng.choice(c.n_first * c.n_last, c.n_entities, replace=False)
    names = [(int(first0 + p // c.n_last), int(last0 + p % c.n_last)) for p in pairs]

    def random_answer():
        return [int(attr0 + t) for t in rng.integers(0, c.n_attributes, c.answer_len)]

    records = []
    for e in range(c.n_entities):
        for r in range(c.n_relations):
            answer = random_answer()
            perturbed = []
            while len(perturbed) < c.n_perturbed:
                cand = random_answer()
                if cand != answer and cand not in perturbed:
                    perturbed.append(cand)
            records.append(
                TokenRecord([*names[e], rel0 + r] + answer, 3, perturbed, f"e{e}r{r}")
            )
    forget_entities = set(rng.choice(c.n_entities, c.n_forget, replace=False).tolist())
    is_forget = [i // c.n_relations in forget_entities for i in range(len(records))]
    forget = [rec for rec, f in zip(records, is_forget) if f]
    retain = [rec for rec, f in zip(records, is_forget) if not f]
    return FactsScenario(config, vocab, window, retain, forget)


def lifecycle(seed: int, config: FactsConfig = FactsConfig(), n_finetune_entities: int = 10):
    """Facts scenario plus a fine-tuning set of facts the base model never saw.

    The fine-tuning records describe ``n_finetune_entities`` extra retained
    entities, drawn exactly like the others (shared name pools and
    relations), and are held out of the retain set.
    """
    c = dataclasses.replace(config, n_entities=config.n_entities + n_finetune_entities)
    sc = facts(seed, c)
    rng = make_rng(seed, 11)
    entities = sorted({_entity(r) for r in sc.retain_records})
    held = set(rng.choice(entities, n_finetune_entities, replace=False).tolist())
    sc.finetune_records = [r for r in sc.retain_records if _entity(r) in held]
    sc.retain_records = [r for r in sc.retain_records if _entity(r) not in held]
    return sc


def _entity(rec: TokenRecord) -> str:
    # question ids are "e<entity>r<relation>"
    return rec.qid.split("r")[0]


@dataclass
class TwoDomainScenario:
    retain: Dataset
    forget: Dataset
    eval: Dataset
    n_features: int
    n_classes: int

    def network(self, hidden: int = 16) -> Network:
        return Network.mlp([self.n_features, hidden, self.n_classes])


def two_domain(
    seed: int,
    n_features: int = 6,
    classes_per_domain: int = 3,
    n_per_class: int = 40,
    spread: float = 0.6,
) -> TwoDomainScenario:
    """Domain A classes ``0..k-1`` are retained, domain B classes ``k..2k-1`` forgotten."""
    rng = make_rng(seed, 12)
    n_classes = 2 * classes_per_domain
    centers = rng.normal(0.0, 2.0, size=(n_classes, n_features))

    def sample(classes, n):
        xs, ys = [], []
        for c in classes:
            xs.append(centers[c] + spread * rng.normal(size=(n, n_features)))
            ys.append(np.full(n, c))
        return Dataset.classification(np.vstack(xs), np.concatenate(ys), n_classes)

    dom_a = range(classes_per_domain)
    dom_b = range(classes_per_domain, n_classes)
    return TwoDomainScenario(
        sample(dom_a, n_per_class),
        sample(dom_b, n_per_class),
        sample(dom_a, n_per_class // 2),
        n_features,
        n_classes,
    )


@dataclass
class BlobsScenario:
    retain: Dataset
    forget: Dataset
    full: Dataset

    def network(self, hidden: int = 8) -> Network:
        return Network.mlp([self.full.n_features, hidden, self.full.n_classes])


def blobs(
    seed: int, n_classes: int = 3, n_features: int = 4, n: int = 300, n_forget: int = 30
) -> BlobsScenario:
    """Unit-variance classes around standard-normal centres, so classes overlap."""
    rng = make_rng(seed, 20)
    centers = rng.normal(0.0, 1.0, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, n)
    x = centers[y] + rng.normal(size=(n, n_features))
    full = Dataset.classification(x, y, n_classes)
    order = rng.permutation(n)
    return BlobsScenario(full.subset(order[n_forget:]), full.subset(order[:n_forget]), full)
