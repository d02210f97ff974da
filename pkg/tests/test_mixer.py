import numpy as np
import pytest

from memrank import mixer
from memrank.errors import InvariantError
from memrank.lexical import LexFeatureVector
from memrank.mixer import AblationFlags, MixerConfig

from conftest import pool_from_scores

SMALL = MixerConfig(
    window_size=5, kernel_size=3, hidden_dim=6, token_mlp_dim=3, channel_mlp_dim=8,
    n_blocks=2, pool_cap=16, embed_dim=8,
)


def lex_vectors(rng, n):
    vals = rng.uniform(0.0, 1.0, size=(n, 6))
    return [LexFeatureVector(*row) for row in vals]


def test_config_validation():
    with pytest.raises(InvariantError, match="hidden_dim"):
        MixerConfig(hidden_dim=0).validate()
    with pytest.raises(InvariantError, match="odd"):
        MixerConfig(window_size=4).validate()
    with pytest.raises(InvariantError, match="kernel_size"):
        MixerConfig(kernel_size=7, window_size=5).validate()
    with pytest.raises(InvariantError, match="stride"):
        MixerConfig(stride=2).validate()


def test_param_count_default_near_reported_scale():
    count = mixer.param_count(MixerConfig())
    assert 2_700_000 <= count <= 4_600_000


def test_param_count_matches_allocated_tensors():
    for cfg in (MixerConfig(), SMALL):
        params = mixer.init_params(cfg, seed=0)
        assert mixer.param_count(cfg) == sum(p.size for p in params.values())


def test_channel_mlp_halving_delta():
    # single block: removing the upper half of the channel MLP drops exactly
    # 2 * hidden * (c/2) + c/2 parameters
    base = MixerConfig(n_blocks=1)
    halved = MixerConfig(n_blocks=1, channel_mlp_dim=256)
    assert mixer.param_count(base) - mixer.param_count(halved) == 2 * 256 * 256 + 256
    # and the delta scales with depth
    base14, halved14 = MixerConfig(), MixerConfig(channel_mlp_dim=256)
    assert mixer.param_count(base14) - mixer.param_count(halved14) == 14 * (2 * 256 * 256 + 256)


def test_init_deterministic():
    a = mixer.init_params(SMALL, seed=9)
    b = mixer.init_params(SMALL, seed=9)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    c = mixer.init_params(SMALL, seed=10)
    assert any(not np.array_equal(a[n], c[n]) for n in a)


def test_assemble_identical_dense_scores_zero_zscore():
    pool = pool_from_scores([0.3, 0.3, 0.3, 0.3])
    rng = np.random.Generator(np.random.PCG64(0))
    feats = mixer.assemble_features(pool, lex_vectors(rng, 4), SMALL)
    np.testing.assert_array_equal(feats[:, 1], np.zeros(4))


def test_assemble_ablation_zeroes_lexical_columns():
    pool = pool_from_scores([0.9, 0.5, 0.1])
    rng = np.random.Generator(np.random.PCG64(0))
    lex = lex_vectors(rng, 3)
    feats = mixer.assemble_features(pool, lex, SMALL.with_ablation(use_lexical=False))
    np.testing.assert_array_equal(feats[:, 3:15], np.zeros((3, 12)))
    feats_on = mixer.assemble_features(pool, lex, SMALL)
    assert np.any(feats_on[:, 3:15] != 0)


def test_assemble_zscore_moments():
    rng = np.random.Generator(np.random.PCG64(4))
    pool = pool_from_scores(rng.uniform(-1, 1, size=50))
    feats = mixer.assemble_features(pool, lex_vectors(rng, 50), SMALL)
    for col in (1, *range(9, 15)):
        column = feats[:, col]
        # independent moment recomputation
        mean = sum(column) / len(column)
        var = sum((x - mean) ** 2 for x in column) / len(column)
        assert abs(mean) < 1e-6
        assert abs(var - 1.0) < 1e-4


def test_assemble_length_mismatch():
    pool = pool_from_scores([0.5, 0.4])
    rng = np.random.Generator(np.random.PCG64(0))
    with pytest.raises(InvariantError, match="lexical vectors"):
        mixer.assemble_features(pool, lex_vectors(rng, 3), SMALL)


def test_zero_head_reduces_to_fusion_only():
    rng = np.random.Generator(np.random.PCG64(2))
    pool = pool_from_scores(rng.uniform(-1, 1, size=12))
    params = mixer.init_params(SMALL, seed=0)
    params["head_w"][:] = 0.0
    params["head_b"][:] = 0.0
    feats = mixer.assemble_features(pool, lex_vectors(rng, 12), SMALL)
    scored = mixer.mixer_forward(feats, params, pool, SMALL)
    assert scored.ids() == pool.ids()
    for (rid, s), (_, dense) in zip(scored.entries, pool.entries):
        assert s == pytest.approx(SMALL.fusion_weight * dense, abs=1e-12)


def test_single_candidate_pool():
    pool = pool_from_scores([0.7])
    rng = np.random.Generator(np.random.PCG64(1))
    params = mixer.init_params(SMALL, seed=3)
    feats = mixer.assemble_features(pool, lex_vectors(rng, 1), SMALL)
    scored = mixer.mixer_forward(feats, params, pool, SMALL)
    assert len(scored.entries) == 1
    assert np.isfinite(scored.entries[0][1])


def test_receptive_field_is_exactly_the_window():
    rng = np.random.Generator(np.random.PCG64(7))
    params = mixer.init_params(SMALL, seed=5)
    x = rng.standard_normal((60, mixer.FEATURE_DIM))
    base, _ = mixer.forward_scores(x, params, SMALL)
    i = 30
    for offset, expect_change in [(-3, False), (3, False), (-2, True), (2, True), (0, True)]:
        x2 = x.copy()
        x2[i + offset] += 1.0
        s2, _ = mixer.forward_scores(x2, params, SMALL)
        if expect_change:
            assert s2[i] != base[i]
        else:
            assert s2[i] == base[i]  # bit-identical: outside the receptive field


def test_window_is_positional_shuffle_probe():
    rng = np.random.Generator(np.random.PCG64(8))
    params = mixer.init_params(SMALL, seed=6)
    x = rng.standard_normal((20, mixer.FEATURE_DIM))
    base, _ = mixer.forward_scores(x, params, SMALL)
    perm = rng.permutation(20)
    shuffled, _ = mixer.forward_scores(x[perm], params, SMALL)
    unshuffled = np.empty_like(shuffled)
    unshuffled[perm] = shuffled
    assert not np.allclose(unshuffled, base)


def test_fusion_linearity():
    rng = np.random.Generator(np.random.PCG64(9))
    pool = pool_from_scores(rng.uniform(-1, 1, size=10))
    params = mixer.init_params(SMALL, seed=7)
    feats = mixer.assemble_features(pool, lex_vectors(rng, 10), SMALL)
    # lexical columns frozen, z-columns not recomputed: same features, dense
    # score in the pool shifted by delta for one candidate
    from memrank.embeddings import CandidatePool

    delta = 0.125
    target = pool.entries[4][0]
    shifted = CandidatePool(
        query_id=pool.query_id,
        entries=[(r, s + (delta if r == target else 0.0)) for r, s in pool.entries],
        pool_cap=pool.pool_cap,
    )
    s1 = {r: s for r, s in mixer.mixer_forward(feats, params, pool, SMALL).entries}
    s2 = {r: s for r, s in mixer.mixer_forward(feats, params, shifted, SMALL).entries}
    for rid in s1:
        expected = SMALL.fusion_weight * delta if rid == target else 0.0
        assert s2[rid] - s1[rid] == pytest.approx(expected, abs=1e-12)


def test_ablation_flags_commute():
    rng = np.random.Generator(np.random.PCG64(10))
    pool = pool_from_scores(rng.uniform(-1, 1, size=9))
    lex = lex_vectors(rng, 9)
    params = mixer.init_params(SMALL, seed=8)
    orders = [
        SMALL.with_ablation(use_lexical=False).with_ablation(use_router=False),
        SMALL.with_ablation(use_router=False).with_ablation(use_lexical=False),
    ]
    outs = []
    for cfg in orders:
        feats = mixer.assemble_features(pool, lex, cfg)
        outs.append(mixer.mixer_forward(feats, params, pool, cfg).entries)
    assert outs[0] == outs[1]


def test_disabled_stages_have_zero_gradients():
    rng = np.random.Generator(np.random.PCG64(11))
    x = rng.standard_normal((8, mixer.FEATURE_DIM))
    up = rng.standard_normal(8)

    cfg = SMALL.with_ablation(use_router=False)
    params = mixer.init_params(cfg, seed=2)
    _, cache = mixer.forward_scores(x, params, cfg, want_cache=True)
    grads, _ = mixer.backward(cache, up, params)
    np.testing.assert_array_equal(grads["router_gate"], np.zeros(1))
    np.testing.assert_array_equal(grads["router_pass"], np.zeros(cfg.hidden_dim))

    cfg = SMALL.with_ablation(use_window=False)
    _, cache = mixer.forward_scores(x, params, cfg, want_cache=True)
    grads, _ = mixer.backward(cache, up, params)
    for i in range(cfg.n_blocks):
        for name in (f"blk{i}_conv_k", f"blk{i}_tok_w1", f"blk{i}_tok_w2"):
            np.testing.assert_array_equal(grads[name], np.zeros_like(grads[name]))


def test_zero_upstream_gradient_gives_zero_grads():
    rng = np.random.Generator(np.random.PCG64(12))
    x = rng.standard_normal((8, mixer.FEATURE_DIM))
    params = mixer.init_params(SMALL, seed=2)
    _, cache = mixer.forward_scores(x, params, SMALL, want_cache=True)
    grads, dx = mixer.backward(cache, np.zeros(8), params)
    for name in grads:
        np.testing.assert_array_equal(grads[name], np.zeros_like(grads[name]))
    np.testing.assert_array_equal(dx, np.zeros_like(x))


def test_gradient_matches_finite_differences():
    rng = np.random.Generator(np.random.PCG64(13))
    params = mixer.init_params(SMALL, seed=14)
    x = rng.standard_normal((2, 7, mixer.FEATURE_DIM))
    up = rng.standard_normal((2, 7))

    def loss(p):
        s, _ = mixer.forward_scores(x, p, SMALL)
        return float((up * s).sum())

    _, cache = mixer.forward_scores(x, params, SMALL, want_cache=True)
    grads, _ = mixer.backward(cache, up, params)
    h = 1e-4
    for name in params:
        flat = params[name].ravel()
        g = grads[name].ravel()
        idxs = range(flat.size) if flat.size <= 20 else rng.choice(flat.size, 20, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            lp = loss(params)
            flat[i] = old - h
            lm = loss(params)
            flat[i] = old
            num = (lp - lm) / (2 * h)
            assert abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6) < 1e-4, name


def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = mixer.init_params(SMALL, seed=21)
    p1, p2 = tmp_path / "a.cmmx", tmp_path / "b.cmmx"
    mixer.save_checkpoint(params, SMALL, p1)
    loaded, cfg = mixer.load_checkpoint(p1)
    assert cfg == SMALL
    mixer.save_checkpoint(loaded, cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name in params:
        np.testing.assert_array_equal(
            loaded[name], params[name].astype(np.float32).astype(np.float64)
        )


def test_rank_order_tiebreak():
    scores = np.array([0.5, 0.9, 0.5, 0.9])
    write_idx = np.array([7, 9, 3, 2])
    order = mixer.rank_order(scores, write_idx)
    assert list(order) == [3, 1, 2, 0]


def test_ablation_flags_dataclass_defaults():
    flags = AblationFlags()
    assert flags.use_lexical and flags.use_window and flags.use_router
