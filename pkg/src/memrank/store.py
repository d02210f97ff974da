"""Memory records, queries, gold labels, and slice metadata.

The store is the corpus every other stage reads: ingestion assigns a
monotone write order, queries carry gold ids and optional slice labels.
A constructed store is immutable and safe to share across threads.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputError, InvariantError

# Slice labels are input metadata; ALL is the implicit union and never stored.
SLICE_LABELS = frozenset(
    {"T_SUP_auto", "T_REQUIRED_auto", "T_HOP_auto", "OTHER", "HARD_NON_TEMPORAL_auto"}
)


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    text: str
    event_time: int  # seconds since epoch
    write_index: int  # ingestion order, monotone per store
    session_id: str


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    gold_ids: frozenset[str]
    slice_label: str | None = None
    query_time: int | None = None


@dataclass
class MemoryStore:
    records: list[MemoryRecord] = field(default_factory=list)
    id_index: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.id_index

    def get(self, record_id: str) -> MemoryRecord:
        try:
            return self.records[self.id_index[record_id]]
        except KeyError:
            raise KeyError(f"unknown record id {record_id!r}") from None

    def write_index_of(self, record_id: str) -> int:
        return self.get(record_id).write_index


def _parse_line(path: Path, lineno: int, line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{lineno}: malformed JSON line: {exc}") from exc
    if not isinstance(obj, dict):
        raise InputError(f"{path}:{lineno}: expected a JSON object, got {type(obj).__name__}")
    return obj


def ingest_jsonl(path: str | Path) -> MemoryStore:
    """Load a record JSONL file into a MemoryStore, in file order.

    write_index is assigned 0..N-1 when absent; when present it must be
    strictly increasing. Missing event_time defaults to the write index
    (position-as-time) with a warning, since that degenerate coupling must
    stay visible downstream.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"record file not found: {path}")
    records: list[MemoryRecord] = []
    id_index: dict[str, int] = {}
    defaulted_time = 0
    last_write_index = -1
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line)
            try:
                rid = str(obj["id"])
                text = str(obj["text"])
            except KeyError as exc:
                raise InputError(f"{path}:{lineno}: record missing field {exc}") from None
            if not text:
                raise InvariantError(f"{path}:{lineno}: record {rid!r} has empty text")
            if rid in id_index:
                raise InvariantError(
                    f"{path}:{lineno}: duplicate record id {rid!r} "
                    f"(first seen on line {id_index[rid] + 1})"
                )
            write_index = obj.get("write_index")
            if write_index is None:
                write_index = len(records)
            else:
                write_index = int(write_index)
                if write_index <= last_write_index:
                    raise InvariantError(
                        f"{path}:{lineno}: write_index {write_index} not strictly increasing"
                    )
            last_write_index = write_index
            event_time = obj.get("event_time")
            if event_time is None:
                event_time = write_index
                defaulted_time += 1
            rec = MemoryRecord(
                id=rid,
                text=text,
                event_time=int(event_time),
                write_index=write_index,
                session_id=str(obj.get("session_id", "")),
            )
            id_index[rid] = len(records)
            records.append(rec)
    if defaulted_time:
        warnings.warn(
            f"{path}: {defaulted_time} record(s) had no event_time; defaulted to write_index "
            "(position-as-time is a known degeneracy risk)",
            stacklevel=2,
        )
    return MemoryStore(records=records, id_index=id_index)


def save_jsonl(store: MemoryStore, path: str | Path) -> None:
    """Serialize a store back to record JSONL; round-trips field-by-field."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in store.records:
            _ = fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "text": rec.text,
                        "event_time": rec.event_time,
                        "write_index": rec.write_index,
                        "session_id": rec.session_id,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_queries(path: str | Path, store: MemoryStore) -> list[Query]:
    """Load query JSONL, validating gold ids against the store and slice labels."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"query file not found: {path}")
    queries: list[Query] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = _parse_line(path, lineno, line)
            try:
                qid = str(obj["id"])
                text = str(obj["text"])
                gold_raw = obj["gold_ids"]
            except KeyError as exc:
                raise InputError(f"{path}:{lineno}: query missing field {exc}") from None
            if qid in seen:
                raise InvariantError(f"{path}:{lineno}: duplicate query id {qid!r}")
            seen.add(qid)
            gold_ids = frozenset(str(g) for g in gold_raw)
            if not gold_ids:
                raise InvariantError(f"{path}:{lineno}: query {qid!r} has empty gold_ids")
            for gid in sorted(gold_ids):
                if gid not in store:
                    raise InvariantError(
                        f"{path}:{lineno}: query {qid!r} references missing gold id {gid!r}"
                    )
            slice_label = obj.get("slice_label")
            if slice_label is not None and slice_label not in SLICE_LABELS:
                allowed = ", ".join(sorted(SLICE_LABELS))
                raise InvariantError(
                    f"{path}:{lineno}: query {qid!r} has unknown slice label {slice_label!r}; "
                    f"allowed: {allowed}"
                )
            query_time = obj.get("query_time")
            queries.append(
                Query(
                    id=qid,
                    text=text,
                    gold_ids=gold_ids,
                    slice_label=slice_label,
                    query_time=None if query_time is None else int(query_time),
                )
            )
    return queries


def save_queries(queries: list[Query], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for q in queries:
            obj: dict = {"id": q.id, "text": q.text, "gold_ids": sorted(q.gold_ids)}
            if q.slice_label is not None:
                obj["slice_label"] = q.slice_label
            if q.query_time is not None:
                obj["query_time"] = q.query_time
            _ = fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
