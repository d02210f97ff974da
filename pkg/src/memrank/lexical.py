"""Write-time lexical statistics and query-time interaction features.

Candidate-side tokenization and IDF-weighted term sets are computed once
at ingestion and cached; query time only does sparse set operations over
those caches, never re-tokenizes candidate text.
"""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from . import _binio as b
from .errors import InputError, InvariantError
from .store import MemoryStore

MAGIC = b"CMLX"
VERSION = 1

# Lowercased Unicode-alphanumeric word tokens, no stemming, no stopword list.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

FEATURE_NAMES = (
    "overlap_count",
    "idf_overlap",
    "jaccard",
    "query_coverage",
    "candidate_coverage",
    "idf_cosine",
)


def tokenize(text: str) -> Counter:
    """Token multiset of lowercased Unicode word tokens."""
    return Counter(_TOKEN_RE.findall(text.lower()))


@dataclass
class IdfTable:
    """Smoothed IDF over a store: idf(t) = ln((doc_count+1)/(df(t)+1)) + 1."""

    df: dict[str, int]
    doc_count: int

    def idf(self, token: str) -> float:
        return math.log((self.doc_count + 1) / (self.df.get(token, 0) + 1)) + 1.0


@dataclass
class LexStats:
    """Per-candidate write-time statistics; query time never re-derives these."""

    token_counts: dict[str, int]
    idf_weighted_terms: dict[str, float]  # token -> count * idf(token)
    token_total: int
    distinct_count: int


@dataclass(frozen=True)
class LexFeatureVector:
    overlap_count: float
    idf_overlap: float
    jaccard: float
    query_coverage: float
    candidate_coverage: float
    idf_cosine: float

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (
            self.overlap_count,
            self.idf_overlap,
            self.jaccard,
            self.query_coverage,
            self.candidate_coverage,
            self.idf_cosine,
        )


def _stats_from_counts(counts: Counter, idf: IdfTable) -> LexStats:
    weighted = {t: c * idf.idf(t) for t, c in counts.items()}
    return LexStats(
        token_counts=dict(counts),
        idf_weighted_terms=weighted,
        token_total=sum(counts.values()),
        distinct_count=len(counts),
    )


def build_lex_cache(store: MemoryStore) -> tuple[IdfTable, dict[str, LexStats]]:
    """Tokenize every record once and build the store-wide IDF table."""
    if len(store) == 0:
        raise InvariantError("cannot build a lexical cache over an empty store")
    per_record: dict[str, Counter] = {}
    df: Counter = Counter()
    for rec in store.records:
        counts = tokenize(rec.text)
        per_record[rec.id] = counts
        df.update(counts.keys())
    idf = IdfTable(df=dict(df), doc_count=len(store))
    stats = {rid: _stats_from_counts(counts, idf) for rid, counts in per_record.items()}
    return idf, stats


def query_lex_features(query_tokens: Counter, stats: LexStats, idf: IdfTable) -> LexFeatureVector:
    """The 6 query-candidate interaction features.

    Cost is proportional to the smaller distinct-token set; the candidate
    side is read exclusively from its cached LexStats.
    """
    q_distinct = len(query_tokens)
    c_distinct = stats.distinct_count
    if q_distinct == 0 or c_distinct == 0:
        return LexFeatureVector(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    c_counts = stats.token_counts
    if q_distinct <= c_distinct:
        shared = [t for t in query_tokens if t in c_counts]
    else:
        shared = [t for t in c_counts if t in query_tokens]
    if not shared:
        return LexFeatureVector(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    overlap = len(shared)
    idf_overlap = sum(idf.idf(t) for t in shared)
    union = q_distinct + c_distinct - overlap
    jaccard = overlap / union
    query_coverage = overlap / q_distinct
    candidate_coverage = overlap / c_distinct

    c_weighted = stats.idf_weighted_terms
    q_weighted = {t: c * idf.idf(t) for t, c in query_tokens.items()}
    dot = sum(q_weighted[t] * c_weighted[t] for t in shared)
    q_norm = math.sqrt(sum(w * w for w in q_weighted.values()))
    c_norm = math.sqrt(sum(w * w for w in c_weighted.values()))
    idf_cosine = dot / (q_norm * c_norm) if q_norm > 0.0 and c_norm > 0.0 else 0.0

    return LexFeatureVector(
        overlap_count=float(overlap),
        idf_overlap=idf_overlap,
        jaccard=jaccard,
        query_coverage=query_coverage,
        candidate_coverage=candidate_coverage,
        idf_cosine=min(idf_cosine, 1.0),
    )


def save_lex_cache(idf: IdfTable, stats: dict[str, LexStats], path: str | Path) -> None:
    """Persist the lexical sidecar; integers only, so round-trips are exact."""
    vocab = sorted(idf.df)
    vocab_index = {t: i for i, t in enumerate(vocab)}
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        b.write_u32(fh, VERSION)
        b.write_u64(fh, idf.doc_count)
        b.write_u64(fh, len(vocab))
        for t in vocab:
            b.write_str(fh, t)
            b.write_u64(fh, idf.df[t])
        b.write_u64(fh, len(stats))
        for rid in stats:
            st = stats[rid]
            b.write_str(fh, rid)
            b.write_u32(fh, len(st.token_counts))
            for t in sorted(st.token_counts):
                b.write_u64(fh, vocab_index[t])
                b.write_u32(fh, st.token_counts[t])


def load_lex_cache(path: str | Path) -> tuple[IdfTable, dict[str, LexStats]]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"lexical cache not found: {path}")
    with path.open("rb") as fh:
        b.check_magic(fh, MAGIC, path)
        b.check_version(fh, VERSION, path)
        doc_count = b.read_u64(fh, "doc_count")
        vocab_count = b.read_u64(fh, "vocab count")
        vocab: list[str] = []
        df: dict[str, int] = {}
        for i in range(vocab_count):
            t = b.read_str(fh, f"vocab entry {i}")
            vocab.append(t)
            df[t] = b.read_u64(fh, "df")
        idf = IdfTable(df=df, doc_count=doc_count)
        record_count = b.read_u64(fh, "record count")
        stats: dict[str, LexStats] = {}
        for _ in range(record_count):
            rid = b.read_str(fh, "record id")
            n_terms = b.read_u32(fh, "term count")
            counts: Counter = Counter()
            for _ in range(n_terms):
                tok_idx = b.read_u64(fh, "token index")
                if tok_idx >= len(vocab):
                    raise InputError(f"{path}: token index {tok_idx} out of range")
                counts[vocab[tok_idx]] = b.read_u32(fh, "token count")
            stats[rid] = _stats_from_counts(counts, idf)
    return idf, stats


def check_store_coverage(
    stats: dict[str, LexStats], store: MemoryStore, context: str = "lexical cache"
) -> None:
    missing = [rec.id for rec in store.records if rec.id not in stats]
    if missing:
        warnings.warn(
            f"{context}: {len(missing)} store record(s) missing from cache, e.g. {missing[0]!r}",
            stacklevel=2,
        )
