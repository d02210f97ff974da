import math
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from memrank import lexical
from memrank.errors import InvariantError
from memrank.lexical import (
    IdfTable,
    build_lex_cache,
    load_lex_cache,
    query_lex_features,
    save_lex_cache,
    tokenize,
)
from memrank.store import MemoryStore

from conftest import build_store


def test_tokenize_basic():
    assert tokenize("Red apple!") == Counter({"red": 1, "apple": 1})
    assert tokenize("") == Counter()
    assert tokenize("É café café") == Counter({"é": 1, "café": 2})
    assert tokenize("under_score 42x") == Counter({"under": 1, "score": 1, "42x": 1})


def test_single_record_stats():
    store = build_store(["red apple"])
    idf, stats = build_lex_cache(store)
    st0 = stats["m0"]
    assert st0.token_counts == {"red": 1, "apple": 1}
    assert st0.token_total == 2
    assert st0.distinct_count == 2


def test_token_in_all_docs_has_idf_one():
    store = build_store(["apple one", "apple two", "apple three"])
    idf, _ = build_lex_cache(store)
    assert idf.idf("apple") == pytest.approx(1.0, abs=1e-12)
    # unseen token: df = 0
    assert idf.idf("zzz") == pytest.approx(math.log(4.0 / 1.0) + 1.0)


def test_df_matches_brute_force_recount():
    rng_words = [f"w{i % 17}" for i in range(60)]
    texts = [" ".join(rng_words[i : i + 5]) + f" extra{i % 7}" for i in range(100)]
    store = build_store(texts)
    idf, _ = build_lex_cache(store)
    # oracle: naive per-document membership scan
    for token in idf.df:
        expected = sum(1 for t in texts if token in tokenize(t))
        assert idf.df[token] == expected


def test_identical_sets_features():
    store = build_store(["alpha beta gamma", "other words here"])
    idf, stats = build_lex_cache(store)
    feats = query_lex_features(tokenize("alpha beta gamma"), stats["m0"], idf)
    assert feats.jaccard == pytest.approx(1.0)
    assert feats.query_coverage == pytest.approx(1.0)
    assert feats.candidate_coverage == pytest.approx(1.0)
    assert feats.idf_cosine == pytest.approx(1.0, abs=1e-12)


def test_disjoint_sets_all_zero():
    store = build_store(["alpha beta", "gamma delta"])
    idf, stats = build_lex_cache(store)
    feats = query_lex_features(tokenize("epsilon zeta"), stats["m0"], idf)
    assert feats.as_tuple() == (0.0,) * 6


def test_partial_overlap_analytic():
    store = build_store(["b c", "unrelated text"])
    idf, stats = build_lex_cache(store)
    feats = query_lex_features(tokenize("a b"), stats["m0"], idf)
    assert feats.overlap_count == 1.0
    assert feats.jaccard == pytest.approx(1.0 / 3.0)
    assert feats.query_coverage == pytest.approx(0.5)
    assert feats.candidate_coverage == pytest.approx(0.5)
    assert feats.idf_overlap == pytest.approx(idf.idf("b"))


token_sets = st.lists(
    st.sampled_from(["a", "b", "c", "d", "e", "f"]), min_size=0, max_size=8
)


@given(qs=token_sets, cs=token_sets)
def test_swap_symmetry(qs, cs):
    idf = IdfTable(df={t: 2 for t in "abcdef"}, doc_count=10)
    q, c = Counter(qs), Counter(cs)
    f1 = query_lex_features(q, lexical._stats_from_counts(c, idf), idf)
    f2 = query_lex_features(c, lexical._stats_from_counts(q, idf), idf)
    assert f1.overlap_count == f2.overlap_count
    assert f1.idf_overlap == pytest.approx(f2.idf_overlap)
    assert f1.jaccard == pytest.approx(f2.jaccard)
    assert f1.idf_cosine == pytest.approx(f2.idf_cosine, abs=1e-12)
    assert f1.query_coverage == pytest.approx(f2.candidate_coverage)
    assert f1.candidate_coverage == pytest.approx(f2.query_coverage)
    for value in (f1.jaccard, f1.query_coverage, f1.candidate_coverage, f1.idf_cosine):
        assert 0.0 <= value <= 1.0


def test_tokenize_called_once_per_record(monkeypatch):
    store = build_store(["one two", "three four", "five six"])
    calls = []
    real = lexical.tokenize

    def counting(text):
        calls.append(text)
        return real(text)

    monkeypatch.setattr(lexical, "tokenize", counting)
    idf, stats = build_lex_cache(store)
    assert len(calls) == 3
    # querying many times never re-tokenizes candidate text
    calls.clear()
    q = real("one three five")
    for rid in ("m0", "m1", "m2"):
        for _ in range(5):
            query_lex_features(q, stats[rid], idf)
    assert calls == []


def test_query_features_do_not_touch_record_text():
    import inspect

    params = inspect.signature(query_lex_features).parameters
    assert "record" not in params and "store" not in params and "text" not in params


def test_cache_round_trip(tmp_path):
    store = build_store(["red apple pie", "apple tart", "blue sky", "café ☂ день"])
    idf, stats = build_lex_cache(store)
    p1, p2 = tmp_path / "a.cmlx", tmp_path / "b.cmlx"
    save_lex_cache(idf, stats, p1)
    idf2, stats2 = load_lex_cache(p1)
    assert idf2.df == idf.df and idf2.doc_count == idf.doc_count
    assert set(stats2) == set(stats)
    for rid in stats:
        assert stats2[rid].token_counts == stats[rid].token_counts
        assert stats2[rid].token_total == stats[rid].token_total
        assert stats2[rid].idf_weighted_terms == pytest.approx(stats[rid].idf_weighted_terms)
    save_lex_cache(idf2, stats2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_store_rejected():
    with pytest.raises(InvariantError, match="empty store"):
        build_lex_cache(MemoryStore())
