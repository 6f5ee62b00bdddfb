import numpy as np
import pytest

from kfade import scenarios
from kfade.scenarios import FactsConfig


class TestFacts:
    def test_shapes(self):
        sc = scenarios.facts(0)
        c = sc.config
        assert sc.vocab == 1 + c.n_first + c.n_last + c.n_relations + c.n_attributes
        assert len(sc.forget_records) == c.n_forget * c.n_relations
        assert len(sc.retain_records) + len(sc.forget_records) == c.n_entities * c.n_relations
        assert sc.network().n_params() == 5828

    def test_answers_are_supervised(self):
        sc = scenarios.facts(1)
        assert len(sc.forget) == len(sc.forget_records) * sc.config.answer_len
        assert sc.full.n_features == sc.window * sc.vocab

    def test_perturbed_answers_differ(self):
        for rec in scenarios.facts(2).retain_records:
            answer = rec.tokens[rec.prompt_len :]
            assert len(rec.perturbed) == 4
            assert answer not in rec.perturbed
            assert len({tuple(p) for p in rec.perturbed}) == 4

    def test_forget_names_share_tokens_with_retain(self):
        sc = scenarios.facts(3)
        forget_firsts = {r.tokens[0] for r in sc.forget_records}
        retain_firsts = {r.tokens[0] for r in sc.retain_records}
        assert forget_firsts & retain_firsts

    def test_seeded(self):
        a, b = scenarios.facts(4), scenarios.facts(4)
        assert a.full.fingerprint() == b.full.fingerprint()
        assert scenarios.facts(5).full.fingerprint() != a.full.fingerprint()

    def test_too_many_entities(self):
        with pytest.raises(ValueError):
            scenarios.facts(0, FactsConfig(n_entities=200))


def test_lifecycle_finetune_entities_held_out():
    sc = scenarios.lifecycle(0)
    c = sc.config
    assert c.n_entities == 50
    assert len(sc.finetune_records) == 10 * c.n_relations
    assert len(sc.retain_records) == (50 - 10 - c.n_forget) * c.n_relations
    held = {r.qid for r in sc.finetune_records}
    assert not held & {r.qid for r in sc.retain_records + sc.forget_records}
    # same token pools as the training facts
    seen = {t for r in sc.retain_records for t in r.tokens}
    assert {r.tokens[0] for r in sc.finetune_records} <= seen | {r.tokens[0] for r in sc.forget_records}


def test_two_domain_split():
    sc = scenarios.two_domain(0)
    assert set(np.unique(sc.retain.labels)) == {0, 1, 2}
    assert set(np.unique(sc.forget.labels)) == {3, 4, 5}
    assert set(np.unique(sc.eval.labels)) <= {0, 1, 2}
    assert sc.network().n_params() == 7 * 16 + 17 * 6


def test_blobs_partition():
    sc = scenarios.blobs(0)
    assert len(sc.forget) == 30 and len(sc.retain) == 270
    both = np.vstack([sc.retain.inputs, sc.forget.inputs])
    assert sorted(map(tuple, both)) == sorted(map(tuple, sc.full.inputs))
