import itertools

import numpy as np
import pytest

from longattn.errors import ConfigError, StateError
from longattn.kvcache import (EvictionPolicy, KVCache, cache_stats, decode_sequence,
                              decode_step, evict, select_keep)
from longattn.model import AttnMode, ModelConfig, forward, init_model

from conftest import randomize


def single_head_cache(model, positions, scores):
    cache = KVCache(model)
    hc = cache.heads[0][0]
    n = len(positions)
    hc.keys = np.zeros((n, model.config.head_dim))
    hc.values = np.zeros((n, model.config.head_dim))
    hc.positions = np.array(positions)
    hc.scores = np.array(scores, dtype=float)
    return cache


class TestPolicy:
    @pytest.mark.parametrize("kw", [dict(kind="h2o", budget=3, recent=3), dict(kind="h2o", budget=3, recent=0),
                                    dict(kind="sink", budget=4, num_sink=4), dict(kind="local", budget=0),
                                    dict(kind="lru", budget=3)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EvictionPolicy(**kw)


class TestEvict:
    def test_under_budget_evicts_nothing(self, tiny_model):
        cache = single_head_cache(tiny_model, [0, 1], [1.0, 1.0])
        assert evict(cache, EvictionPolicy.h2o(3, 1))[0][0] == []

    def test_h2o_trace(self, tiny_model):
        cache = single_head_cache(tiny_model, [0, 1, 2, 3], [5.0, 0.1, 2.0, 0.7])
        gone = evict(cache, EvictionPolicy.h2o(budget=3, recent=1))
        assert gone[0][0] == [1]
        assert cache.heads[0][0].positions.tolist() == [0, 2, 3]
        stats = cache_stats(cache)
        assert stats.size == 3
        assert stats.retained_score_mass == pytest.approx(7.7)
        assert stats.evicted_count == 1

    def test_tie_keeps_earlier(self):
        keep = select_keep(np.array([0, 1, 2]), np.array([1.0, 1.0, 0.3]), EvictionPolicy.h2o(2, 1))
        assert keep.tolist() == [0, 2]

    def test_local(self):
        keep = select_keep(np.arange(6), np.arange(6.0)[::-1], EvictionPolicy.local(2))
        assert keep.tolist() == [4, 5]

    def test_sink(self):
        keep = select_keep(np.arange(10), np.zeros(10), EvictionPolicy.sink(2, 5))
        assert keep.tolist() == [0, 1, 7, 8, 9]

    def test_full(self):
        assert select_keep(np.arange(50), np.zeros(50), EvictionPolicy.full()).size == 50

    def test_empty_stats(self, tiny_model):
        s = cache_stats(KVCache(tiny_model))
        assert (s.size, s.retained_score_mass, s.evicted_count) == (0, 0.0, 0)


def exhaustive_heavy_set(scores, recent, budget):
    n = len(scores)
    older = range(n - recent)
    best = max(itertools.combinations(older, budget - recent),
               key=lambda c: sum(scores[i] for i in c))
    return sorted(best) + list(range(n - recent, n))


class TestH2OOptimality:
    def test_matches_exhaustive_top_k(self):
        r = np.random.default_rng(0)
        for n in range(2, 13):
            for budget in range(2, n):
                for recent in range(1, budget):
                    scores = r.exponential(size=n)
                    keep = select_keep(np.arange(n), scores, EvictionPolicy.h2o(budget, recent))
                    assert keep.tolist() == exhaustive_heavy_set(scores, recent, budget)


class TestDecode:
    def test_full_matches_batch_forward(self, tiny_model):
        randomize(tiny_model, std=0.2)
        tokens = np.random.default_rng(0).integers(32, size=40)
        batch = forward(tiny_model, tokens, AttnMode.full(4)).data
        inc = decode_sequence(tiny_model, KVCache(tiny_model), tokens)
        assert np.abs(inc - batch).max() < 1e-10

    def test_first_token_self_attention(self, tiny_model):
        cache = KVCache(tiny_model)
        decode_step(tiny_model, cache, 3)
        for layer in cache.last_probs:
            for p in layer:
                assert p.tolist() == [1.0]

    def test_h2o_large_budget_equals_full(self, tiny_model):
        randomize(tiny_model)
        tokens = np.random.default_rng(1).integers(32, size=30)
        full, h2o = KVCache(tiny_model), KVCache(tiny_model, EvictionPolicy.h2o(30, 4))
        for t in tokens:
            a = decode_step(tiny_model, full, int(t))
            b = decode_step(tiny_model, h2o, int(t))
            assert np.array_equal(a, b)
        for la, lb in zip(full.heads, h2o.heads):
            for ha, hb in zip(la, lb):
                assert np.array_equal(ha.keys, hb.keys) and np.array_equal(ha.scores, hb.scores)

    def test_mismatched_model(self, tiny_model, tiny_config):
        other = init_model(ModelConfig(**{**tiny_config.to_dict(), "seed": 99, "d_ff": 8}))
        with pytest.raises(StateError):
            decode_step(other, KVCache(tiny_model), 0)

    @pytest.mark.parametrize("policy", [EvictionPolicy.local(7), EvictionPolicy.h2o(9, 3),
                                        EvictionPolicy.sink(2, 6)], ids=lambda p: p.kind)
    def test_budget_and_invariants_over_long_trace(self, tiny_model, policy):
        randomize(tiny_model, std=0.2)
        cache = KVCache(tiny_model, policy)
        prev_scores = {}
        tokens = np.random.default_rng(2).integers(32, size=1000)
        for step, t in enumerate(tokens):
            decode_step(tiny_model, cache, int(t))
            assert cache.sizes().max() <= policy.budget
            for li, lh in enumerate(cache.heads):
                for hi, hc in enumerate(lh):
                    assert (np.diff(hc.positions) > 0).all()
                    assert (hc.scores >= 0).all()
                    assert hc.positions[-1] == step
                    if policy.kind == "sink" and step >= 1:
                        assert hc.positions[:2].tolist() == [0, 1]
                    for pos, sc in zip(hc.positions.tolist(), hc.scores.tolist()):
                        key = (li, hi, pos)
                        assert sc >= prev_scores.get(key, 0.0)
                        prev_scores[key] = sc

    def test_deterministic_evictions(self, tiny_model):
        randomize(tiny_model)
        tokens = np.random.default_rng(3).integers(32, size=60)

        def run():
            cache = KVCache(tiny_model, EvictionPolicy.h2o(10, 3))
            decode_sequence(tiny_model, cache, tokens)
            return [hc.positions.tolist() for lh in cache.heads for hc in lh]

        assert run() == run()

    def test_heads_evict_independently(self, tiny_model):
        randomize(tiny_model, std=0.5)
        cache = KVCache(tiny_model, EvictionPolicy.h2o(6, 2))
        decode_sequence(tiny_model, cache, np.random.default_rng(4).integers(32, size=40))
        kept = {tuple(hc.positions.tolist()) for lh in cache.heads for hc in lh}
        assert len(kept) > 1
