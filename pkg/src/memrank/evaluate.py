"""Metrics, slices, multi-seed aggregation, paired bootstrap, degeneracy audit.

Recall@k is fraction-of-golds; Hit@k is its indicator; reciprocal rank is
1/rank of the first gold, 0 when no gold appears in the ranking at all.
Slice labels are treated as opaque tags: ALL is the union, and potentially
overlapping labels are reported as such, never resolved.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, InvariantError
from .lexical import IdfTable, LexStats, tokenize
from .store import MemoryStore, Query

DEFAULT_K = 10


@dataclass
class QueryMetrics:
    query_id: str
    recall_at_10: float
    hit_at_10: int
    reciprocal_rank: float
    stale_at_1: int | None = None
    slice_label: str | None = None


@dataclass
class SeedAggregate:
    seeds: list[int]
    metrics: dict[str, tuple[float, float]]  # name -> (mean, sample std)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seeds": self.seeds,
                "metrics": {
                    name: {"mean": mean, "std": std} for name, (mean, std) in self.metrics.items()
                },
            },
            indent=2,
        )


@dataclass
class BootstrapDelta:
    slice_label: str
    delta_mean: float
    ci_low: float
    ci_high: float
    n_resamples: int
    n_queries: int
    significant: bool

    def to_json(self) -> str:
        return json.dumps(
            {
                "slice": self.slice_label,
                "delta_mean": self.delta_mean,
                "ci_low": self.ci_low,
                "ci_high": self.ci_high,
                "n_resamples": self.n_resamples,
                "n_queries": self.n_queries,
                "significant": self.significant,
            },
            indent=2,
        )


def score_query(
    ranking: list[str],
    query: Query,
    k: int = DEFAULT_K,
    stale_ids: frozenset[str] | None = None,
) -> QueryMetrics:
    """Metrics for one ranking; stale@1 only when a stale annotation is given."""
    gold = query.gold_ids
    top_k = ranking[:k]
    found = sum(1 for rid in top_k if rid in gold)
    recall = found / len(gold)
    rr = 0.0
    for pos, rid in enumerate(ranking, start=1):
        if rid in gold:
            rr = 1.0 / pos
            break
    stale_1: int | None = None
    if stale_ids is not None:
        stale_1 = int(bool(ranking) and ranking[0] in stale_ids)
    return QueryMetrics(
        query_id=query.id,
        recall_at_10=recall,
        hit_at_10=int(recall > 0.0),
        reciprocal_rank=rr,
        stale_at_1=stale_1,
        slice_label=query.slice_label,
    )


def mean_metric(metrics: list[QueryMetrics], name: str) -> float:
    if not metrics:
        raise InvariantError("cannot average an empty metric list")
    vals = [getattr(m, name) for m in metrics]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise InvariantError(f"metric {name!r} absent from every query")
    return float(sum(vals) / len(vals))


_METRIC_FIELDS = ("recall_at_10", "hit_at_10", "reciprocal_rank")


def aggregate_seeds(per_seed: dict[int, list[QueryMetrics]]) -> SeedAggregate:
    """Per-metric mean and n-1 std of per-seed means."""
    if len(per_seed) < 2:
        raise InvariantError(f"need at least 2 seeds to aggregate, got {len(per_seed)}")
    seeds = sorted(per_seed)
    id_sets = {seed: {m.query_id for m in per_seed[seed]} for seed in seeds}
    reference = id_sets[seeds[0]]
    for seed in seeds[1:]:
        if id_sets[seed] != reference:
            diff = sorted(id_sets[seed] ^ reference)
            raise InvariantError(
                f"query sets differ across seeds (symmetric difference: {diff[:10]})"
            )
    metrics: dict[str, tuple[float, float]] = {}
    for name in _METRIC_FIELDS:
        per_seed_means = np.array([mean_metric(per_seed[s], name) for s in seeds])
        metrics[name] = (float(per_seed_means.mean()), float(per_seed_means.std(ddof=1)))
    return SeedAggregate(seeds=seeds, metrics=metrics)


def paired_bootstrap(
    metrics_a: list[QueryMetrics],
    metrics_b: list[QueryMetrics],
    slice_label: str = "ALL",
    metric: str = "recall_at_10",
    n_resamples: int = 10_000,
    seed: int = 0,
) -> BootstrapDelta:
    """Percentile-CI paired bootstrap of the mean per-query delta (a - b).

    Queries are resampled with replacement; each query keeps its paired
    values. 95% CI by the 2.5/97.5 percentiles; significant means the CI
    strictly excludes 0.
    """
    by_id_a = {m.query_id: m for m in metrics_a}
    by_id_b = {m.query_id: m for m in metrics_b}
    if set(by_id_a) != set(by_id_b):
        diff = sorted(set(by_id_a) ^ set(by_id_b))
        raise InvariantError(f"paired bootstrap needs identical query sets; difference: {diff[:10]}")
    ids = sorted(by_id_a)
    if slice_label != "ALL":
        ids = [qid for qid in ids if by_id_a[qid].slice_label == slice_label]
    if not ids:
        raise InvariantError(f"slice {slice_label!r} matched no queries")
    deltas = np.array(
        [getattr(by_id_a[qid], metric) - getattr(by_id_b[qid], metric) for qid in ids],
        dtype=np.float64,
    )
    n = deltas.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, n, size=(n_resamples, n))
    resampled = deltas[idx].mean(axis=1)
    ci_low, ci_high = np.percentile(resampled, [2.5, 97.5])
    return BootstrapDelta(
        slice_label=slice_label,
        delta_mean=float(deltas.mean()),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        n_resamples=n_resamples,
        n_queries=n,
        significant=bool(ci_low > 0.0 or ci_high < 0.0),
    )


@dataclass
class AuditReport:
    learned_recall: dict[str, float]
    baseline_recall: dict[str, float]
    k: int
    degenerate: bool
    exceedances: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "learned_recall": self.learned_recall,
                "baseline_recall": self.baseline_recall,
                "degenerate": self.degenerate,
                "exceedances": self.exceedances,
            },
            indent=2,
        )


def baseline_rankings(
    store: MemoryStore,
    queries: list[Query],
    idf: IdfTable | None = None,
    lex_stats: dict[str, LexStats] | None = None,
) -> dict[str, dict[str, list[str]]]:
    """The three trivial baselines: recency, position, lexical-only.

    Lexical-only ranks by idf_overlap (sum of idf over shared distinct
    tokens), computed through an inverted index; ties fall back to
    write_index ascending, matching query_lex_features exactly.
    """
    recency = [r.id for r in sorted(store.records, key=lambda r: (-r.event_time, -r.write_index))]
    position = [r.id for r in sorted(store.records, key=lambda r: -r.write_index)]
    rankings: dict[str, dict[str, list[str]]] = {
        "recency": {q.id: recency for q in queries},
        "position": {q.id: position for q in queries},
    }
    if idf is None or lex_stats is None:
        from .lexical import build_lex_cache

        idf, lex_stats = build_lex_cache(store)
    postings: dict[str, list[int]] = {}
    for pos, rec in enumerate(store.records):
        for token in lex_stats[rec.id].token_counts:
            postings.setdefault(token, []).append(pos)
    write_idx = np.array([r.write_index for r in store.records])
    lexical: dict[str, list[str]] = {}
    for q in queries:
        overlaps = np.zeros(len(store.records))
        for token in set(tokenize(q.text)):
            hits = postings.get(token)
            if hits:
                overlaps[hits] += idf.idf(token)
        order = np.lexsort((write_idx, -overlaps))
        lexical[q.id] = [store.records[i].id for i in order]
    rankings["lexical_only"] = lexical
    return rankings


def audit_degeneracy(
    store: MemoryStore,
    queries: list[Query],
    learned_rankings: dict[str, dict[str, list[str]]],
    k: int = DEFAULT_K,
    idf: IdfTable | None = None,
    lex_stats: dict[str, LexStats] | None = None,
) -> AuditReport:
    """Flag DEGENERATE when any trivial baseline matches or beats a learned arm.

    learned_rankings: arm name -> (query_id -> ranked record ids).
    """
    by_id = {q.id: q for q in queries}
    baselines = baseline_rankings(store, queries, idf, lex_stats)
    baseline_recall = {
        name: float(
            np.mean([score_query(ranking[qid], by_id[qid], k).recall_at_10 for qid in ranking])
        )
        for name, ranking in baselines.items()
    }
    learned_recall = {}
    exceedances = []
    for arm, ranking in learned_rankings.items():
        recall = float(
            np.mean([score_query(ranking[qid], by_id[qid], k).recall_at_10 for qid in ranking])
        )
        learned_recall[arm] = recall
        for name, base_recall in baseline_recall.items():
            if base_recall >= recall:
                exceedances.append(
                    f"baseline {name} Recall@{k} {base_recall:.4f} >= arm {arm} {recall:.4f}"
                )
    return AuditReport(
        learned_recall=learned_recall,
        baseline_recall=baseline_recall,
        k=k,
        degenerate=bool(exceedances),
        exceedances=exceedances,
    )


def write_metrics_csv(metrics: list[QueryMetrics], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "slice", "r10", "hit10", "rr", "stale1"])
        for m in metrics:
            writer.writerow(
                [
                    m.query_id,
                    m.slice_label or "",
                    repr(m.recall_at_10),
                    m.hit_at_10,
                    repr(m.reciprocal_rank),
                    "" if m.stale_at_1 is None else m.stale_at_1,
                ]
            )


def read_metrics_csv(path: str | Path) -> list[QueryMetrics]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"metrics CSV not found: {path}")
    out: list[QueryMetrics] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"query_id", "slice", "r10", "hit10", "rr", "stale1"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise InputError(f"{path}: unexpected metrics CSV header {reader.fieldnames}")
        for row in reader:
            out.append(
                QueryMetrics(
                    query_id=row["query_id"],
                    recall_at_10=float(row["r10"]),
                    hit_at_10=int(row["hit10"]),
                    reciprocal_rank=float(row["rr"]),
                    stale_at_1=int(row["stale1"]) if row["stale1"] != "" else None,
                    slice_label=row["slice"] or None,
                )
            )
    return out


def slice_counts(queries: list[Query]) -> dict[str, int]:
    """Per-label counts plus ALL; overlapping or missing labels are just reported."""
    counts: dict[str, int] = {"ALL": len(queries)}
    for q in queries:
        if q.slice_label is not None:
            counts[q.slice_label] = counts.get(q.slice_label, 0) + 1
    return counts


def evaluate_rankings(
    rankings: dict[str, list[str]],
    queries: list[Query],
    k: int = DEFAULT_K,
    stale_by_query: dict[str, frozenset[str]] | None = None,
) -> list[QueryMetrics]:
    """Score every query that has a ranking, in query order."""
    out = []
    for q in queries:
        if q.id not in rankings:
            raise InvariantError(f"no ranking for query {q.id!r}")
        stale = None if stale_by_query is None else stale_by_query.get(q.id)
        out.append(score_query(rankings[q.id], q, k, stale_ids=stale))
    return out


def load_stale_sidecar(path: str | Path) -> dict[str, frozenset[str]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"stale sidecar not found: {path}")
    out: dict[str, frozenset[str]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["query_id"])] = frozenset(str(s) for s in obj["stale_ids"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise InputError(f"{path}:{lineno}: bad stale row: {exc}") from exc
    return out


def save_stale_sidecar(stale: dict[str, frozenset[str]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for qid in sorted(stale):
            _ = fh.write(
                json.dumps({"query_id": qid, "stale_ids": sorted(stale[qid])}) + "\n"
            )


def save_rankings(pools: list, path: str | Path) -> None:
    """Persist scored/edited pools as ranking JSONL rows."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for pool in pools:
            row = {
                "query_id": pool.query_id,
                "entries": [[rid, score] for rid, score in pool.entries],
                "provenance": getattr(pool, "provenance", "editor"),
            }
            gate = getattr(pool, "gate_applied", None)
            if gate is not None:
                row["gate_applied"] = gate
            _ = fh.write(json.dumps(row) + "\n")


def load_rankings(path: str | Path) -> list:
    """Read ranking JSONL rows back as ScoredPool objects (provenance preserved)."""
    from .mixer import ScoredPool

    path = Path(path)
    if not path.exists():
        raise InputError(f"ranking file not found: {path}")
    pools = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pools.append(
                    ScoredPool(
                        query_id=str(obj["query_id"]),
                        entries=[(str(rid), float(s)) for rid, s in obj["entries"]],
                        provenance=str(obj.get("provenance", "dense")),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad ranking row: {exc}") from exc
    return pools
