import json

import pytest

from memrank.errors import InputError, InvariantError
from memrank.store import (
    SLICE_LABELS,
    ingest_jsonl,
    load_queries,
    save_jsonl,
    save_queries,
)


def write_jsonl(path, rows):
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def record(i, **overrides):
    row = {
        "id": f"m{i}",
        "text": f"memory text {i}",
        "event_time": 1_700_000_000 + i,
        "write_index": i,
        "session_id": "s0",
    }
    row.update(overrides)
    return row


def test_ingest_assigns_write_index_in_file_order(tmp_path):
    path = tmp_path / "r.jsonl"
    rows = [{"id": c, "text": f"note {c}"} for c in "abc"]
    write_jsonl(path, rows)
    with pytest.warns(UserWarning, match="event_time"):
        store = ingest_jsonl(path)
    assert len(store) == 3
    assert [r.id for r in store.records] == ["a", "b", "c"]
    assert [r.write_index for r in store.records] == [0, 1, 2]


def test_ingest_empty_file(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text("")
    assert len(ingest_jsonl(path)) == 0


def test_duplicate_id_names_id_and_line(tmp_path):
    path = tmp_path / "r.jsonl"
    rows = [record(0), record(1, id="m1"), record(2), record(3), record(4, id="m1")]
    write_jsonl(path, rows)
    with pytest.raises(InvariantError, match=r"m1") as exc:
        ingest_jsonl(path)
    assert ":5:" in str(exc.value)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text(json.dumps(record(0)) + "\n{not json\n")
    with pytest.raises(InputError, match=r":2:"):
        ingest_jsonl(path)


def test_empty_text_rejected(tmp_path):
    path = tmp_path / "r.jsonl"
    write_jsonl(path, [record(0, text="")])
    with pytest.raises(InvariantError, match="empty text"):
        ingest_jsonl(path)


def test_non_monotone_write_index_rejected(tmp_path):
    path = tmp_path / "r.jsonl"
    write_jsonl(path, [record(0, write_index=5), record(1, write_index=5)])
    with pytest.raises(InvariantError, match="strictly increasing"):
        ingest_jsonl(path)


def test_missing_file(tmp_path):
    with pytest.raises(InputError, match="not found"):
        ingest_jsonl(tmp_path / "nope.jsonl")


def test_round_trip_identical(tmp_path):
    path = tmp_path / "r.jsonl"
    rows = [record(i, text=f"tëxt {i} with unicode ☂") for i in range(7)]
    write_jsonl(path, rows)
    store = ingest_jsonl(path)
    out = tmp_path / "out.jsonl"
    save_jsonl(store, out)
    store2 = ingest_jsonl(out)
    assert store.records == store2.records
    # store size is exactly the line count
    assert len(store) == len(out.read_text().splitlines()) == 7


def test_load_queries_validates_gold(tmp_path):
    rpath, qpath = tmp_path / "r.jsonl", tmp_path / "q.jsonl"
    write_jsonl(rpath, [record(i) for i in range(3)])
    store = ingest_jsonl(rpath)

    write_jsonl(qpath, [{"id": "q1", "text": "find it", "gold_ids": ["m1"]}])
    queries = load_queries(qpath, store)
    assert queries[0].gold_ids == frozenset({"m1"})
    assert queries[0].slice_label is None

    write_jsonl(qpath, [{"id": "q1", "text": "x", "gold_ids": []}])
    with pytest.raises(InvariantError, match="empty gold_ids"):
        load_queries(qpath, store)

    write_jsonl(qpath, [{"id": "q1", "text": "x", "gold_ids": ["zz"]}])
    with pytest.raises(InvariantError, match=r"q1.*zz"):
        load_queries(qpath, store)


def test_slice_labels(tmp_path):
    rpath, qpath = tmp_path / "r.jsonl", tmp_path / "q.jsonl"
    write_jsonl(rpath, [record(0)])
    store = ingest_jsonl(rpath)

    write_jsonl(
        qpath, [{"id": "q1", "text": "x", "gold_ids": ["m0"], "slice_label": "T_SUP_auto"}]
    )
    assert load_queries(qpath, store)[0].slice_label == "T_SUP_auto"

    write_jsonl(qpath, [{"id": "q1", "text": "x", "gold_ids": ["m0"], "slice_label": "bogus"}])
    with pytest.raises(InvariantError) as exc:
        load_queries(qpath, store)
    for label in SLICE_LABELS:
        assert label in str(exc.value)


def test_query_round_trip(tmp_path):
    rpath, qpath = tmp_path / "r.jsonl", tmp_path / "q.jsonl"
    write_jsonl(rpath, [record(i) for i in range(4)])
    store = ingest_jsonl(rpath)
    write_jsonl(
        qpath,
        [
            {"id": "q1", "text": "x", "gold_ids": ["m1", "m3"], "slice_label": "OTHER",
             "query_time": 123},
            {"id": "q2", "text": "y", "gold_ids": ["m0"]},
        ],
    )
    queries = load_queries(qpath, store)
    out = tmp_path / "q2.jsonl"
    save_queries(queries, out)
    assert load_queries(out, store) == queries
