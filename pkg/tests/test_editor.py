import inspect
import math
from collections import Counter

import numpy as np
import pytest

from memrank import editor
from memrank.editor import (
    EditorConfig,
    EditorTrainConfig,
    editor_features,
    editor_forward,
    editor_train,
    forward_raw,
    gate_value,
    init_params,
)
from memrank.embeddings import CandidatePool, make_cache
from memrank.errors import InvariantError
from memrank.lexical import build_lex_cache, tokenize
from memrank.mixer import ScoredPool

from conftest import build_store

ECFG = EditorConfig(d_model=16, n_heads=4, ff_dim=24)


def make_setup(n=20, seed=0, equal_base=False, dim=12):
    rng = np.random.Generator(np.random.PCG64(seed))
    event_times = rng.integers(1_700_000_000, 1_700_000_000 + 400 * 86400, size=n)
    store = build_store(
        [f"tok{i % 5} word{i % 7} alpha" for i in range(n)], event_times=event_times
    )
    vecs = rng.standard_normal((n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    cache = make_cache([r.id for r in store.records], vecs)
    idf, lex_stats = build_lex_cache(store)
    base_scores = np.full(n, 0.5) if equal_base else np.sort(rng.uniform(-1, 1, n))[::-1]
    order = list(range(n))
    base_pool = ScoredPool(
        query_id="q0",
        entries=[(f"m{i}", float(base_scores[j])) for j, i in enumerate(order)],
        provenance="mixer",
    )
    dense_scores = rng.uniform(-1, 1, n)
    dense_order = np.argsort(-dense_scores)
    dense_pool = CandidatePool(
        query_id="q0",
        entries=[(f"m{i}", float(dense_scores[i])) for i in dense_order],
        pool_cap=n,
    )
    return store, cache, idf, lex_stats, base_pool, dense_pool


def test_uniform_base_scores_analytics():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=20, equal_base=True)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, tokenize("tok1 alpha"), ECFG
    )
    np.testing.assert_array_equal(feats[:, 0], np.zeros(20))  # base_score_z
    np.testing.assert_array_equal(feats[:, 13], np.zeros(20))  # base_margin_1_2
    assert feats[0, 14] == pytest.approx(math.log(16.0), abs=1e-9)  # entropy of uniform top16


def test_small_pool_entropy_uses_pool_size():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=5, equal_base=True)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), ECFG
    )
    assert feats[0, 14] == pytest.approx(math.log(5.0), abs=1e-9)


def test_base_top_candidate_features():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=15, seed=3)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), ECFG
    )
    assert feats[0, 6] == pytest.approx(1.0, abs=1e-3)  # sim_to_base_top vs itself
    assert feats[0, 10] == 0.0 and feats[0, 11] == 0.0  # neither newer nor older
    assert feats[0, 4] == 0.0  # base_rank_norm of the top


def test_newer_older_mutually_exclusive():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=30, seed=4)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), ECFG
    )
    assert np.all((feats[:, 10] == 0) | (feats[:, 11] == 0))
    assert set(np.unique(feats[:, 10])) <= {0.0, 1.0}
    assert set(np.unique(feats[:, 11])) <= {0.0, 1.0}


def test_pool_constant_features_identical_across_candidates():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=25, seed=5)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), ECFG
    )
    for col in (13, 14, 15, 16, 17):
        assert np.all(feats[:, col] == feats[0, col])


def test_conflict_density_matches_pair_oracle():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=24, seed=6)
    cfg = EditorConfig(d_model=16, n_heads=4, ff_dim=24, conflict_cos_threshold=0.1,
                       conflict_time_gap_days=30.0)
    feats = editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), cfg
    )
    ids = base_pool.ids()[:16]
    emb = np.stack([cache.vector_for(r) for r in ids]).astype(np.float64)
    times = [store.get(r).event_time for r in ids]
    hits, total = 0, 0
    for i in range(16):
        for j in range(i + 1, 16):
            total += 1
            cos = float(emb[i] @ emb[j])
            gap = abs(times[i] - times[j])
            if cos > 0.1 and gap > 30.0 * 86400:
                hits += 1
    assert feats[0, 15] == pytest.approx(hits / total, abs=1e-12)


def test_id_set_mismatch_rejected():
    store, cache, idf, lex_stats, base_pool, dense_pool = make_setup(n=10)
    dense_pool.entries = dense_pool.entries[:-1]
    with pytest.raises(InvariantError, match="same candidate ids"):
        editor_features(
            base_pool, dense_pool, cache, idf, lex_stats, store, Counter({"alpha": 1}), ECFG
        )


def test_feature_extractor_cannot_see_gold():
    params = inspect.signature(editor_features).parameters
    assert "query_tokens" in params
    for forbidden in ("query", "gold", "gold_ids", "stale", "stale_ids", "labels"):
        assert forbidden not in params


def test_editor_train_has_no_teacher_slot():
    params = inspect.signature(editor_train).parameters
    assert "teacher" not in params and "teacher_scores" not in params


def test_no_op_at_init_preserves_confident_top1():
    rng = np.random.Generator(np.random.PCG64(7))
    cfg = ECFG
    for trial in range(50):
        params = init_params(cfg, seed=trial)
        n = int(rng.integers(3, 30))
        scores = np.sort(rng.uniform(-1, 1, n))[::-1]
        scores[0] = scores[1] + 0.045  # margin just above 2*sigmoid(-4)
        feats = rng.standard_normal((n, editor.FEATURE_DIM))
        pool = ScoredPool(
            query_id="q", entries=[(f"m{i}", float(s)) for i, s in enumerate(scores)],
            provenance="mixer",
        )
        out = editor_forward(feats, params, pool, cfg)
        assert out.entries[0][0] == pool.entries[0][0]
        assert out.gate_applied == pytest.approx(1.0 / (1.0 + math.exp(4.0)))


def test_gate_asymptote():
    rng = np.random.Generator(np.random.PCG64(8))
    params = init_params(ECFG, seed=1)
    params["gate_b"] = np.array([-40.0])
    feats = rng.standard_normal((12, editor.FEATURE_DIM))
    base = rng.standard_normal(12)
    edited = editor.edited_scores(feats, params, ECFG, base)
    assert np.max(np.abs(edited - base)) < 1e-15


def test_gate_linearity():
    rng = np.random.Generator(np.random.PCG64(9))
    params = init_params(ECFG, seed=2)
    feats = rng.standard_normal((10, editor.FEATURE_DIM))
    base = rng.standard_normal(10)
    deltas = {}
    for bias in (-2.0, -1.0):
        params["gate_b"] = np.array([bias])
        deltas[bias] = editor.edited_scores(feats, params, ECFG, base) - base
    sig = lambda x: 1.0 / (1.0 + math.exp(-x))
    np.testing.assert_allclose(
        deltas[-1.0], deltas[-2.0] * (sig(-1.0) / sig(-2.0)), rtol=1e-12
    )


def test_permutation_equivariance():
    rng = np.random.Generator(np.random.PCG64(10))
    params = init_params(ECFG, seed=3)
    feats = rng.standard_normal((14, editor.FEATURE_DIM))
    rho, _ = forward_raw(feats, params, ECFG)
    perm = rng.permutation(14)
    rho_p, _ = forward_raw(feats[perm], params, ECFG)
    np.testing.assert_allclose(rho_p, rho[perm], atol=1e-12)


def test_editor_gradients_match_finite_differences():
    from memrank.distill import first_rank_loss

    rng = np.random.Generator(np.random.PCG64(11))
    cfg = EditorConfig(d_model=8, n_heads=2, ff_dim=10)
    params = init_params(cfg, seed=4)
    params["gate_b"] = np.array([-1.5])
    x = rng.standard_normal((7, editor.FEATURE_DIM))
    base = rng.standard_normal(7)
    gold = np.array([2])

    def loss(p):
        rho, _ = forward_raw(x, p, cfg)
        l, _ = first_rank_loss(base + gate_value(p) * rho, gold)
        return l

    rho, cache = forward_raw(x, params, cfg, want_cache=True)
    gate = gate_value(params)
    _, dedited = first_rank_loss(base + gate * rho, gold)
    grads, _ = editor.backward_raw(cache, gate * dedited, params)
    grads["gate_b"] = np.array([float(dedited @ rho) * gate * (1 - gate)])
    h = 1e-4
    for name in params:
        flat = params[name].ravel()
        g = grads[name].ravel()
        idxs = range(flat.size) if flat.size <= 16 else rng.choice(flat.size, 16, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            lp = loss(params)
            flat[i] = old - h
            lm = loss(params)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6) < 1e-4, name


def test_editor_train_deterministic_and_learns():
    rng = np.random.Generator(np.random.PCG64(12))
    cfg = EditorConfig(d_model=8, n_heads=2, ff_dim=10)
    feats, bases, golds = [], [], []
    for qi in range(12):
        n = 8
        x = rng.standard_normal((n, editor.FEATURE_DIM))
        gold = qi % n
        x[gold, 10] = 3.0  # plant a recoverable signal in one feature column
        base = np.zeros(n)
        base[(gold + 1) % n] = 0.05
        feats.append(x)
        bases.append(base)
        golds.append(np.array([gold]))
    tcfg = EditorTrainConfig(learning_rate=0.05, epochs=40, seed=23, batch_size=4)
    p1, losses1 = editor_train(feats, bases, golds, cfg, tcfg)
    p2, losses2 = editor_train(feats, bases, golds, cfg, tcfg)
    for name in p1:
        np.testing.assert_array_equal(p1[name], p2[name])
    assert losses1 == losses2
    assert losses1[-1] < losses1[0]


def test_editor_train_skips_goldless_queries():
    rng = np.random.Generator(np.random.PCG64(13))
    cfg = EditorConfig(d_model=8, n_heads=2, ff_dim=10)
    feats = [rng.standard_normal((5, editor.FEATURE_DIM)) for _ in range(3)]
    bases = [np.zeros(5) for _ in range(3)]
    golds = [np.array([1]), np.array([], dtype=np.int64), np.array([0])]
    params, _ = editor_train(feats, bases, golds, cfg, EditorTrainConfig(epochs=2))
    assert params is not None
    with pytest.raises(InvariantError, match="no training query"):
        editor_train(feats[:1], bases[:1], [np.array([], dtype=np.int64)], cfg,
                     EditorTrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    params = init_params(ECFG, seed=5)
    p1, p2 = tmp_path / "a.cmed", tmp_path / "b.cmed"
    editor.save_checkpoint(params, ECFG, p1)
    loaded, cfg = editor.load_checkpoint(p1)
    assert cfg == ECFG
    editor.save_checkpoint(loaded, cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_heads_must_divide_width():
    with pytest.raises(InvariantError, match="divide"):
        EditorConfig(d_model=10, n_heads=4).validate()
