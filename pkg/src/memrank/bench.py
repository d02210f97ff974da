"""Reranking-only wall-clock latency protocol.

The timed region covers one scoring call per query and nothing else:
pools, caches, and parameters must be prepared before measurement, and at
least one warm-up pass over the queries runs first. Embedding computation,
dense retrieval, candidate-side precomputation, model loading, and the
warm-up itself are excluded by construction. Means are reported (no
variance bars by default); --repeats surfaces min/median/max.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvariantError

EXCLUDED_STAGES = (
    "embedding computation",
    "dense retrieval",
    "candidate-side feature precomputation",
    "model loading",
    "warm-up",
)


@dataclass
class LatencyReport:
    arm: str
    ms_per_query: float
    n_queries: int
    warmup_passes: int
    included_stages: list[str] = field(default_factory=lambda: ["per-query scoring call"])
    excluded_stages: list[str] = field(default_factory=lambda: list(EXCLUDED_STAGES))
    per_query_ms: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "arm": self.arm,
                "ms_per_query": self.ms_per_query,
                "n_queries": self.n_queries,
                "warmup_passes": self.warmup_passes,
                "included_stages": self.included_stages,
                "excluded_stages": self.excluded_stages,
            },
            indent=2,
        )


@dataclass
class CostRatio:
    arm: str
    t_large_ms: float
    t_small_ms: float
    ratio: float
    n_large: int
    n_small: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "arm": self.arm,
                "t_large_ms": self.t_large_ms,
                "t_small_ms": self.t_small_ms,
                "ratio": self.ratio,
                "n_large": self.n_large,
                "n_small": self.n_small,
            },
            indent=2,
        )


def measure_rerank_latency(
    arm: Callable[[str], object],
    query_ids: list[str],
    warmup: int = 3,
    arm_name: str = "arm",
) -> LatencyReport:
    """Mean per-query wall time of arm(query_id) over all queries.

    The arm must close over fully prepared inputs; warmup >= 1 is enforced so
    no cold-start work can leak into the timed region. If the first measured
    query still runs more than 5x the median, a warning is logged (soft
    check, not a failure).
    """
    if not query_ids:
        raise InvariantError("cannot measure latency over zero queries")
    if warmup < 1:
        raise InvariantError(
            "warmup must be >= 1: the protocol rejects cold runs; prepare caches "
            "before timing"
        )
    for _ in range(warmup):
        for qid in query_ids:
            arm(qid)
    times_ms: list[float] = []
    for qid in query_ids:
        t0 = time.perf_counter_ns()
        arm(qid)
        t1 = time.perf_counter_ns()
        times_ms.append((t1 - t0) / 1e6)
    median = float(np.median(times_ms))
    if median > 0 and times_ms[0] > 5.0 * median:
        warnings.warn(
            f"{arm_name}: first measured query took {times_ms[0]:.3f} ms vs median "
            f"{median:.3f} ms (>5x); warm-up may be insufficient",
            stacklevel=2,
        )
    return LatencyReport(
        arm=arm_name,
        ms_per_query=float(np.mean(times_ms)),
        n_queries=len(query_ids),
        warmup_passes=warmup,
        per_query_ms=times_ms,
    )


def summarize_repeats(reports: list[LatencyReport]) -> dict[str, float]:
    means = [r.ms_per_query for r in reports]
    return {
        "min_ms": float(np.min(means)),
        "median_ms": float(np.median(means)),
        "max_ms": float(np.max(means)),
    }


def cost_ratio_from(
    arm_name: str,
    report_large: LatencyReport,
    report_small: LatencyReport,
    n_large: int,
    n_small: int,
) -> CostRatio:
    if report_small.ms_per_query <= 0.0:
        raise InvariantError("small-store time must be positive to form a ratio")
    return CostRatio(
        arm=arm_name,
        t_large_ms=report_large.ms_per_query,
        t_small_ms=report_small.ms_per_query,
        ratio=report_large.ms_per_query / report_small.ms_per_query,
        n_large=n_large,
        n_small=n_small,
    )


def measure_cost_ratio(
    arm_small: Callable[[str], object],
    arm_large: Callable[[str], object],
    query_ids: list[str],
    n_small: int,
    n_large: int,
    warmup: int = 3,
    arm_name: str = "arm",
) -> CostRatio:
    """Same-protocol latency on a small and a large store; ratio = large/small.

    Both arms must answer the same queries and be prepared outside the timed
    region; each gets its own warm-up.
    """
    report_small = measure_rerank_latency(arm_small, query_ids, warmup, f"{arm_name}@N={n_small}")
    report_large = measure_rerank_latency(arm_large, query_ids, warmup, f"{arm_name}@N={n_large}")
    return cost_ratio_from(arm_name, report_large, report_small, n_large, n_small)


# ---------------------------------------------------------------------------
# Arm builders. Each returns a closure over fully prepared inputs, so the
# timed region contains only per-query scoring work.


def make_dense_sort_arm(pools: list) -> Callable[[str], np.ndarray]:
    """Lower bound: sort the pool's precomputed dense scores."""
    prepared = {p.query_id: np.array([s for _, s in p.entries]) for p in pools}

    def arm(query_id: str) -> np.ndarray:
        return np.argsort(-prepared[query_id], kind="stable")

    return arm


def make_mixer_arm(pools, queries, idf, lex_stats, params, cfg) -> Callable[[str], np.ndarray]:
    """Pool-local scorer: query-time lexical interaction features over the
    cached candidate stats, feature assembly, and the mixer forward pass.
    Cost depends on the pool, not the store size."""
    from .distill import assemble_pool_features  # local import keeps module deps one-way
    from .lexical import query_lex_features, tokenize
    from .mixer import assemble_features, forward_scores

    query_by_id = {q.id: q for q in queries}
    prepared = {}
    for pool in pools:
        q = query_by_id[pool.query_id]
        prepared[pool.query_id] = (
            pool,
            tokenize(q.text),
            np.array([s for _, s in pool.entries]),
            [lex_stats[rid] for rid, _ in pool.entries],
        )

    def arm(query_id: str) -> np.ndarray:
        pool, q_tokens, dense, stats = prepared[query_id]
        lex = [query_lex_features(q_tokens, st, idf) for st in stats]
        feats = assemble_features(pool, lex, cfg)
        head, _ = forward_scores(feats, params, cfg)
        final = head + cfg.fusion_weight * dense
        return np.argsort(-final, kind="stable")

    return arm


def make_full_store_arm(store, cache, queries, query_vectors, idf, lex_stats) -> Callable[[str], np.ndarray]:
    """Scorer that touches every record in the store per query: dense dot plus
    per-record lexical overlap, then a full sort. Cost is linear in N."""
    from .lexical import tokenize

    token_sets = [frozenset(lex_stats[rid].token_counts) for rid in cache.ids]
    vectors = cache.vectors.astype(np.float64)
    prepared = {}
    for q in queries:
        q_tokens = tokenize(q.text)
        weights = [(t, idf.idf(t)) for t in sorted(q_tokens)]
        prepared[q.id] = (np.asarray(query_vectors[q.id], dtype=np.float64), weights)

    def arm(query_id: str) -> np.ndarray:
        qv, weights = prepared[query_id]
        dense = vectors @ qv
        combined = np.empty_like(dense)
        for i, toks in enumerate(token_sets):
            s = dense[i]
            for t, w in weights:
                if t in toks:
                    s += w
            combined[i] = s
        return np.argsort(-combined, kind="stable")

    return arm
