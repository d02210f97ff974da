"""Synthetic conversational-memory corpora with anti-shortcut guarantees.

Construction: each query owns a topic cluster. The gold record shares the
query's topic tokens plus a rare entity token; same-topic distractors sit
near the same embedding centroid but lack the entity token; lexical decoy
records elsewhere in the store carry the entity token plus the query's
decoy-filler tokens, outscoring the gold on raw token overlap. The result
is that dense-only ranking confuses the cluster, global lexical-only
ranking drowns the gold below the decoys, and only the fused signal inside
the dense pool identifies it. Write order and event times are shuffled so
recency and position carry nothing.

Every generated corpus must pass the degeneracy audit (recency, position,
lexical-only each below 0.6 of oracle Recall@10); generation retries with
a perturbed seed and fails loudly rather than emit a degenerate corpus.

Supersession pairs give a fraction of queries a stale twin: near-identical
text and embedding, strictly older event time. Twin annotations live in a
separate sidecar that the editor's feature extractor never receives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill, embeddings, evaluate, lexical, store as store_mod
from .distill import TeacherScores, make_gold_indicator_teacher
from .embeddings import CandidatePool, EmbeddingCache, dense_top_n, make_cache
from .errors import DegeneracyError, InvariantError
from .store import MemoryRecord, MemoryStore, Query

_EPOCH_BASE = 1_700_000_000
_DAY = 86400

AUDIT_FACTOR = 0.6
MAX_ATTEMPTS = 20


@dataclass(frozen=True)
class SynthConfig:
    n_sessions: int = 30
    turns_per_session: int = 10
    vocab_size: int = 400
    embed_dim: int = 768
    supersession_rate: float = 0.3
    distractor_count: int = 24
    teacher_noise_sigma: float = 0.0
    n_queries: int = 120
    pool_cap: int = 50
    seed: int = 0
    topic_tokens: int = 6
    topic_noise: float = 0.55
    time_span_days: int = 180

    def validate(self) -> None:
        if not 0.0 <= self.supersession_rate <= 1.0:
            raise InvariantError("supersession_rate must be in [0, 1]")
        if self.teacher_noise_sigma < 0:
            raise InvariantError("teacher_noise_sigma must be >= 0")
        for name in (
            "n_sessions", "turns_per_session", "vocab_size", "embed_dim",
            "distractor_count", "n_queries", "pool_cap",
        ):
            if getattr(self, name) <= 0:
                raise InvariantError(f"{name} must be positive")
        if self.distractor_count < 16:
            raise InvariantError(
                "distractor_count must be >= 16 so the lexical decoys can bury the "
                "gold below rank 10 in the lexical-only baseline"
            )


@dataclass
class SupersessionPair:
    stale_id: str
    current_id: str
    topic: int


@dataclass
class SynthCorpus:
    config: SynthConfig
    store: MemoryStore
    queries: list[Query]
    record_cache: EmbeddingCache
    query_cache: EmbeddingCache
    pools: list[CandidatePool]
    teacher: TeacherScores
    stale_by_query: dict[str, frozenset[str]]
    supersession_pairs: list[SupersessionPair] = field(default_factory=list)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _noise(rng: np.random.Generator, dim: int, scale: float) -> np.ndarray:
    # Normalized so the expected perturbation norm is `scale` regardless of dim.
    return scale * rng.standard_normal(dim) / np.sqrt(dim)


def generate(cfg: SynthConfig) -> SynthCorpus:
    """Deterministic corpus per seed; retries placement until the audit passes."""
    cfg.validate()
    last_failure = ""
    for attempt in range(MAX_ATTEMPTS):
        corpus = _generate_once(cfg, np.random.SeedSequence([cfg.seed, attempt]))
        idf, lex_stats = lexical.build_lex_cache(corpus.store)
        failures = _audit_failures(corpus, idf, lex_stats)
        if not failures:
            return corpus
        last_failure = "; ".join(failures)
    raise DegeneracyError(
        f"generation stayed degenerate after {MAX_ATTEMPTS} attempts: {last_failure}"
    )


def _audit_failures(
    corpus: SynthCorpus, idf: lexical.IdfTable, lex_stats: dict[str, lexical.LexStats]
) -> list[str]:
    """Trivial-baseline Recall@10 must stay below AUDIT_FACTOR x oracle (= 1.0)."""
    by_id = {q.id: q for q in corpus.queries}
    baselines = evaluate.baseline_rankings(corpus.store, corpus.queries, idf, lex_stats)
    failures = []
    for name, rankings in baselines.items():
        recall = float(
            np.mean(
                [
                    evaluate.score_query(rankings[qid], by_id[qid]).recall_at_10
                    for qid in rankings
                ]
            )
        )
        if recall >= AUDIT_FACTOR:
            failures.append(f"baseline {name} Recall@10 {recall:.3f} >= {AUDIT_FACTOR}")
    return failures


def _generate_once(cfg: SynthConfig, seedseq: np.random.SeedSequence) -> SynthCorpus:
    rng = np.random.Generator(np.random.PCG64(seedseq))
    dim = cfg.embed_dim
    n_decoys = max(11, cfg.distractor_count // 2)
    n_topic_distractors = cfg.distractor_count - n_decoys
    common_vocab = [f"c{i}" for i in range(cfg.vocab_size)]

    # One payload per record: (text, embedding, event_time_slot).
    texts: list[str] = []
    embs: list[np.ndarray] = []
    # Roles keep positions of structured records so queries can point at them.
    gold_pos: list[int] = []
    stale_pos: list[int | None] = []
    query_texts: list[str] = []
    query_embs: list[np.ndarray] = []

    def add_record(tokens: list[str], emb: np.ndarray) -> int:
        texts.append(" ".join(tokens))
        embs.append(emb)
        return len(texts) - 1

    def common(n: int) -> list[str]:
        return [common_vocab[i] for i in rng.integers(0, cfg.vocab_size, size=n)]

    for _ in range(cfg.n_sessions * cfg.turns_per_session):
        add_record(common(6), _unit(rng.standard_normal(dim)))

    supersede = rng.random(cfg.n_queries) < cfg.supersession_rate
    for qi in range(cfg.n_queries):
        # Token names must survive tokenize() whole, so no separators.
        topic_toks = [f"t{qi}x{j}" for j in range(cfg.topic_tokens)]
        entity = f"e{qi}"
        decoy_fillers = [f"f{qi}x{j}" for j in range(4)]
        centroid = _unit(rng.standard_normal(dim))

        def near_centroid() -> np.ndarray:
            return _unit(centroid + _noise(rng, dim, cfg.topic_noise))

        g = add_record(topic_toks[:4] + [entity] + common(2), near_centroid())
        gold_pos.append(g)
        query_texts.append(" ".join(topic_toks[:3] + [entity] + decoy_fillers))
        query_embs.append(near_centroid())
        if supersede[qi]:
            stale_emb = _unit(embs[g] + _noise(rng, dim, 0.12))
            s = add_record(topic_toks[:4] + [entity] + common(2), stale_emb)
            stale_pos.append(s)
        else:
            stale_pos.append(None)
        for _ in range(n_topic_distractors):
            picks = rng.choice(cfg.topic_tokens, size=4, replace=False)
            add_record([topic_toks[p] for p in picks] + common(2), near_centroid())
        for _ in range(n_decoys):
            add_record([entity] + decoy_fillers + common(3), _unit(rng.standard_normal(dim)))

    total = len(texts)
    order = rng.permutation(total)  # order[w] = payload index written at position w

    event_times = _EPOCH_BASE + rng.integers(0, cfg.time_span_days * _DAY, size=total)
    for qi in range(cfg.n_queries):
        sp = stale_pos[qi]
        if sp is not None:
            gap = int(rng.integers(2 * _DAY, 30 * _DAY))
            event_times[sp] = event_times[gold_pos[qi]] - gap

    records: list[MemoryRecord] = []
    ids_by_payload: dict[int, str] = {}
    for widx in range(total):
        payload = int(order[widx])
        rid = f"m{widx:05d}"
        ids_by_payload[payload] = rid
        records.append(
            MemoryRecord(
                id=rid,
                text=texts[payload],
                event_time=int(event_times[payload]),
                write_index=widx,
                session_id=f"s{widx // cfg.turns_per_session}",
            )
        )
    store = MemoryStore(records=records, id_index={r.id: i for i, r in enumerate(records)})

    t_end = _EPOCH_BASE + cfg.time_span_days * _DAY
    queries: list[Query] = []
    stale_by_query: dict[str, frozenset[str]] = {}
    pairs: list[SupersessionPair] = []
    for qi in range(cfg.n_queries):
        qid = f"q{qi:04d}"
        gold_id = ids_by_payload[gold_pos[qi]]
        if stale_pos[qi] is not None:
            label = "T_SUP_auto"
            stale_id = ids_by_payload[stale_pos[qi]]
            stale_by_query[qid] = frozenset({stale_id})
            pairs.append(SupersessionPair(stale_id=stale_id, current_id=gold_id, topic=qi))
        else:
            label = "OTHER" if qi % 2 == 0 else "HARD_NON_TEMPORAL_auto"
        queries.append(
            Query(
                id=qid,
                text=query_texts[qi],
                gold_ids=frozenset({gold_id}),
                slice_label=label,
                query_time=t_end,
            )
        )

    record_cache = make_cache(
        [r.id for r in records], np.stack([embs[int(order[w])] for w in range(total)])
    )
    query_cache = make_cache([q.id for q in queries], np.stack(query_embs))
    pools = [
        dense_top_n(record_cache, query_cache.vector_for(q.id), cfg.pool_cap, store, q.id)
        for q in queries
    ]
    teacher = make_gold_indicator_teacher(
        queries,
        pools,
        cfg.teacher_noise_sigma,
        seed=int(np.random.SeedSequence([cfg.seed, 7_777]).generate_state(1)[0]),
    )
    return SynthCorpus(
        config=cfg,
        store=store,
        queries=queries,
        record_cache=record_cache,
        query_cache=query_cache,
        pools=pools,
        teacher=teacher,
        stale_by_query=stale_by_query,
        supersession_pairs=pairs,
    )


def make_teacher(
    queries: list[Query], pools: list[CandidatePool], noise_sigma: float, seed: int
) -> TeacherScores:
    """Gold-indicator teacher with optional Gaussian noise (stand-in for an external scorer)."""
    return make_gold_indicator_teacher(queries, pools, noise_sigma, seed)


def emit(corpus: SynthCorpus, outdir: str | Path) -> dict[str, Path]:
    """Write the corpus in the same formats the rest of the pipeline consumes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "store": outdir / "store.jsonl",
        "queries": outdir / "queries.jsonl",
        "record_cache": outdir / "records.cmec",
        "query_cache": outdir / "queries.cmec",
        "pools": outdir / "pools.jsonl",
        "teacher": outdir / "teacher.jsonl",
        "stale": outdir / "stale.jsonl",
    }
    store_mod.save_jsonl(corpus.store, paths["store"])
    store_mod.save_queries(corpus.queries, paths["queries"])
    embeddings.save_cache(corpus.record_cache, paths["record_cache"])
    embeddings.save_cache(corpus.query_cache, paths["query_cache"])
    embeddings.save_pools(corpus.pools, paths["pools"])
    distill.save_teacher_scores(corpus.teacher, paths["teacher"])
    evaluate.save_stale_sidecar(corpus.stale_by_query, paths["stale"])
    return paths
