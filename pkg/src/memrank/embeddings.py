"""Embedding cache and exact dense top-N candidate pooling.

Vectors are stored as L2-normalized float32 rows; dense scores are dot
products accumulated in float64. Selection is exact (no ANN index): a
partial selection refined at the score boundary so ties break by
write_index ascending, which makes pools deterministic and makes a
smaller pool_cap always a prefix of a larger one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio as b
from .errors import InputError, InvariantError
from .store import MemoryStore

MAGIC = b"CMEC"
VERSION = 1

NORM_TOL = 1e-4  # rows further from unit norm than this get renormalized
NORM_WARN = 1e-3  # ... and warn when the deviation exceeds this


@dataclass
class EmbeddingCache:
    dim: int
    ids: list[str]
    vectors: np.ndarray  # (len(ids), dim) float32, rows L2-normalized
    id_index: dict[str, int]

    def __len__(self) -> int:
        return len(self.ids)

    def vector_for(self, record_id: str) -> np.ndarray:
        try:
            return self.vectors[self.id_index[record_id]]
        except KeyError:
            raise KeyError(f"no embedding cached for id {record_id!r}") from None


@dataclass
class CandidatePool:
    query_id: str
    entries: list[tuple[str, float]]  # (record_id, dense_score), sorted
    pool_cap: int

    def ids(self) -> list[str]:
        return [rid for rid, _ in self.entries]

    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries], dtype=np.float64)


def make_cache(ids: list[str], vectors: np.ndarray) -> EmbeddingCache:
    """Build a cache from raw vectors, normalizing rows that are off unit norm."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise InvariantError(
            f"vector matrix shape {vectors.shape} does not match {len(ids)} ids"
        )
    if len(set(ids)) != len(ids):
        raise InvariantError("embedding cache ids must be unique")
    _normalize_rows(vectors, warn_context="make_cache")
    return EmbeddingCache(
        dim=vectors.shape[1],
        ids=list(ids),
        vectors=vectors,
        id_index={rid: i for i, rid in enumerate(ids)},
    )


def _normalize_rows(vectors: np.ndarray, warn_context: str) -> None:
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        bad = int(np.argmax(norms == 0.0))
        raise InvariantError(f"{warn_context}: row {bad} has zero norm, cannot normalize")
    dev = np.abs(norms - 1.0)
    off = dev > NORM_TOL
    if np.any(dev > NORM_WARN):
        warnings.warn(
            f"{warn_context}: {int(np.sum(dev > NORM_WARN))} row(s) deviate from unit norm "
            f"by more than {NORM_WARN:g}; renormalizing",
            stacklevel=3,
        )
    if np.any(off):
        vectors[off] = (vectors[off].astype(np.float64) / norms[off, None]).astype(np.float32)


def save_cache(cache: EmbeddingCache, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        b.write_u32(fh, VERSION)
        b.write_u32(fh, cache.dim)
        b.write_u64(fh, len(cache.ids))
        for rid in cache.ids:
            b.write_str(fh, rid)
        fh.write(np.ascontiguousarray(cache.vectors, dtype="<f4").tobytes())


def load_cache(path: str | Path) -> EmbeddingCache:
    path = Path(path)
    if not path.exists():
        raise InputError(f"embedding cache not found: {path}")
    with path.open("rb") as fh:
        b.check_magic(fh, MAGIC, path)
        b.check_version(fh, VERSION, path)
        dim = b.read_u32(fh, "dim")
        if dim == 0:
            raise InputError(f"{path}: header dim is 0")
        count = b.read_u64(fh, "count")
        ids = [b.read_str(fh, f"id entry {i}") for i in range(count)]
        if len(set(ids)) != len(ids):
            raise InvariantError(f"{path}: duplicate ids in cache")
        payload = b.read_exact(fh, count * dim * 4, "vector payload")
        extra = fh.read(1)
        if extra:
            raise InputError(f"{path}: trailing bytes after vector payload")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()
    _normalize_rows(vectors, warn_context=str(path))
    return EmbeddingCache(
        dim=dim, ids=ids, vectors=vectors, id_index={rid: i for i, rid in enumerate(ids)}
    )


def _dense_scores(cache: EmbeddingCache, query_vec: np.ndarray) -> np.ndarray:
    q = np.asarray(query_vec, dtype=np.float64).ravel()
    if q.shape[0] != cache.dim:
        raise InvariantError(
            f"query vector dim {q.shape[0]} does not match cache dim {cache.dim}"
        )
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise InvariantError("query vector has zero norm")
    q = q / norm
    return cache.vectors.astype(np.float64) @ q


def dense_top_n(
    cache: EmbeddingCache,
    query_vec: np.ndarray,
    pool_cap: int,
    store: MemoryStore,
    query_id: str = "",
) -> CandidatePool:
    """Exact cosine top-N over the cache; ties break by write_index ascending."""
    if pool_cap <= 0:
        raise InvariantError(f"pool_cap must be positive, got {pool_cap}")
    scores = _dense_scores(cache, query_vec)
    write_idx = np.array([store.write_index_of(rid) for rid in cache.ids], dtype=np.int64)
    order = _select_top(scores, write_idx, min(pool_cap, len(cache.ids)))
    entries = [(cache.ids[i], float(scores[i])) for i in order]
    return CandidatePool(query_id=query_id, entries=entries, pool_cap=pool_cap)


def _select_top(scores: np.ndarray, write_idx: np.ndarray, k: int) -> np.ndarray:
    """Indices of the top-k by (score desc, write_index asc), exactly.

    Partial selection: argpartition finds the score boundary, then every
    index strictly above the boundary is kept and boundary ties are filled
    in write_index order, so the result matches a full stable sort.
    """
    n = scores.shape[0]
    if k >= n:
        return np.lexsort((write_idx, -scores))
    part = np.argpartition(-scores, k - 1)[:k]
    boundary = scores[part].min()
    strict = np.nonzero(scores > boundary)[0]
    need = k - strict.shape[0]
    tied = np.nonzero(scores == boundary)[0]
    tied = tied[np.argsort(write_idx[tied], kind="stable")][:need]
    chosen = np.concatenate([strict, tied])
    return chosen[np.lexsort((write_idx[chosen], -scores[chosen]))]


def brute_force_top_n(
    cache: EmbeddingCache,
    query_vec: np.ndarray,
    pool_cap: int,
    store: MemoryStore,
    query_id: str = "",
) -> CandidatePool:
    """Full-sort oracle for dense_top_n: score all N, stable sort, truncate."""
    scores = _dense_scores(cache, query_vec)
    write_idx = np.array([store.write_index_of(rid) for rid in cache.ids], dtype=np.int64)
    order = np.lexsort((write_idx, -scores))[: min(pool_cap, len(cache.ids))]
    entries = [(cache.ids[i], float(scores[i])) for i in order]
    return CandidatePool(query_id=query_id, entries=entries, pool_cap=pool_cap)


def save_pools(pools: list[CandidatePool], path: str | Path) -> None:
    import json

    with Path(path).open("w", encoding="utf-8") as fh:
        for pool in pools:
            _ = fh.write(
                json.dumps(
                    {
                        "query_id": pool.query_id,
                        "pool_cap": pool.pool_cap,
                        "entries": [[rid, score] for rid, score in pool.entries],
                    }
                )
                + "\n"
            )


def load_pools(path: str | Path) -> list[CandidatePool]:
    import json

    path = Path(path)
    if not path.exists():
        raise InputError(f"pool file not found: {path}")
    pools: list[CandidatePool] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pools.append(
                    CandidatePool(
                        query_id=str(obj["query_id"]),
                        entries=[(str(rid), float(s)) for rid, s in obj["entries"]],
                        pool_cap=int(obj["pool_cap"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad pool row: {exc}") from exc
    return pools
