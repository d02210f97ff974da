import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memrank.embeddings import CandidatePool, make_cache
from memrank.store import MemoryRecord, MemoryStore

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


def build_store(texts, event_times=None, session="s0"):
    records = []
    for i, text in enumerate(texts):
        et = event_times[i] if event_times is not None else 1_700_000_000 + i * 3600
        records.append(
            MemoryRecord(
                id=f"m{i}", text=text, event_time=int(et), write_index=i, session_id=session
            )
        )
    return MemoryStore(records=records, id_index={r.id: i for i, r in enumerate(records)})


def random_cache(store, dim, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    vecs = rng.standard_normal((len(store), dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return make_cache([r.id for r in store.records], vecs)


def pool_from_scores(scores, query_id="q0", pool_cap=None):
    entries = [(f"m{i}", float(s)) for i, s in enumerate(scores)]
    entries.sort(key=lambda e: (-e[1], int(e[0][1:])))
    return CandidatePool(query_id=query_id, entries=entries, pool_cap=pool_cap or len(entries))


@pytest.fixture
def tiny_store():
    return build_store(["red apple pie", "green pear tart", "blue sky walk", "apple cart ride"])
