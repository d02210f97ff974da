"""Teacher distillation for the mixer scorer.

The teacher is a pluggable score file (query_id, record_id, score), not an
in-process model. Training combines a sampled pairwise ranking loss over
teacher-ordered candidate pairs with a first-rank softmax objective that
pushes gold pool entries to rank 1, optimized with plain momentum.

Given the same data, config, and seed, training is bit-reproducible: the
shuffle and pair-sampling streams are derived from the seed, and all math
is deterministic float64.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mixer
from .embeddings import CandidatePool
from .errors import InputError, InvariantError
from .lexical import IdfTable, LexStats, query_lex_features, tokenize
from .mixer import MixerConfig, MixerParams
from .store import MemoryStore, Query

TeacherScores = dict[str, dict[str, float]]


@dataclass(frozen=True)
class TrainConfig:
    pair_loss_weight: float = 1.0
    first_rank_weight: float = 1.0
    pairs_per_query: int = 64
    margin_threshold: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 20
    seed: int = 7
    momentum: float = 0.9
    batch_size: int = 8
    # Inverse temperature on the first-rank softmax during training. Values > 1
    # reach the same softmax sharpness at proportionally smaller score scale,
    # which keeps trained margins inside the editor's bounded correction range.
    first_rank_sharpness: float = 4.0

    def validate(self) -> None:
        if self.pair_loss_weight < 0 or self.first_rank_weight < 0:
            raise InvariantError("loss weights must be non-negative")
        if self.pairs_per_query < 1:
            raise InvariantError("pairs_per_query must be >= 1")
        if self.first_rank_sharpness <= 0:
            raise InvariantError("first_rank_sharpness must be positive")


@dataclass
class EpochStats:
    epoch: int
    pair_loss: float
    first_rank_loss: float

    @property
    def total(self) -> float:
        return self.pair_loss + self.first_rank_loss


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    queries_without_gold_in_pool: int = 0
    wall_seconds: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "queries_without_gold_in_pool": self.queries_without_gold_in_pool,
                "wall_seconds": self.wall_seconds,
                "epochs": [
                    {
                        "epoch": e.epoch,
                        "pair_loss": e.pair_loss,
                        "first_rank_loss": e.first_rank_loss,
                        "total": e.total,
                    }
                    for e in self.epochs
                ],
            },
            indent=2,
        )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def valid_pairs(teacher: np.ndarray, margin_threshold: float) -> np.ndarray:
    """All index pairs (i, j) with teacher[i] - teacher[j] > margin, in lexicographic order."""
    t = np.asarray(teacher, dtype=np.float64)
    n = t.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    keep = (t[:, None] - t[None, :]) > margin_threshold
    return np.stack([ii[keep], jj[keep]], axis=1)


def sample_pairs(
    teacher: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> np.ndarray:
    """Sample up to pairs_per_query valid pairs, uniformly without replacement.

    Depends on the teacher only through the valid-pair set, so any strictly
    increasing transform of the teacher scores leaves the sample unchanged
    (at margin_threshold 0).
    """
    pairs = valid_pairs(teacher, cfg.margin_threshold)
    if pairs.shape[0] <= cfg.pairs_per_query:
        return pairs
    pick = rng.choice(pairs.shape[0], size=cfg.pairs_per_query, replace=False)
    return pairs[np.sort(pick)]


def pairwise_loss(
    scores: np.ndarray, pairs: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean softplus(-(score_i - score_j)) over the given pairs, with gradient."""
    s = np.asarray(scores, dtype=np.float64)
    grad = np.zeros_like(s)
    if pairs.shape[0] == 0:
        return 0.0, grad
    diff = s[pairs[:, 0]] - s[pairs[:, 1]]
    losses = _softplus(-diff)
    # d softplus(-d) / dd = -sigmoid(-d)
    dd = -_sigmoid(-diff) / pairs.shape[0]
    np.add.at(grad, pairs[:, 0], dd)
    np.add.at(grad, pairs[:, 1], -dd)
    return float(losses.mean()), grad


def pairwise_loss_sampled(
    scores: np.ndarray, teacher: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
) -> tuple[float, np.ndarray]:
    if len(scores) != len(teacher):
        raise InvariantError("scores and teacher scores must have equal length")
    if len(scores) < 2:
        return 0.0, np.zeros_like(np.asarray(scores, dtype=np.float64))
    return pairwise_loss(scores, sample_pairs(np.asarray(teacher), cfg, rng))


def first_rank_loss(
    scores: np.ndarray, gold_positions: np.ndarray
) -> tuple[float, np.ndarray]:
    """-ln(sum of gold softmax mass) over the pool, with gradient."""
    s = np.asarray(scores, dtype=np.float64)
    gold = np.asarray(gold_positions, dtype=np.int64)
    if gold.size == 0:
        raise InvariantError("first_rank_loss requires at least one gold position")
    shifted = s - s.max()
    expo = np.exp(shifted)
    p = expo / expo.sum()
    mass = float(p[gold].sum())
    loss = -np.log(mass)
    grad = p.copy()
    grad[gold] -= p[gold] / mass
    return float(loss), grad


def load_teacher_scores(path: str | Path) -> TeacherScores:
    path = Path(path)
    if not path.exists():
        raise InputError(f"teacher score file not found: {path}")
    scores: TeacherScores = {}
    dupes = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                qid, rid, score = str(obj["query_id"]), str(obj["record_id"]), float(obj["score"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: bad teacher row: {exc}") from exc
            per_query = scores.setdefault(qid, {})
            if rid in per_query:
                dupes += 1
            per_query[rid] = score
    if dupes:
        warnings.warn(f"{path}: {dupes} duplicate teacher row(s); last value kept", stacklevel=2)
    return scores


def save_teacher_scores(scores: TeacherScores, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for qid in scores:
            for rid, s in scores[qid].items():
                _ = fh.write(
                    json.dumps({"query_id": qid, "record_id": rid, "score": s}) + "\n"
                )


def check_teacher_coverage(teacher: TeacherScores, pools: list[CandidatePool]) -> None:
    for pool in pools:
        per_query = teacher.get(pool.query_id)
        if per_query is None:
            raise InvariantError(f"teacher has no scores for query {pool.query_id!r}")
        for rid, _ in pool.entries:
            if rid not in per_query:
                raise InvariantError(
                    f"teacher missing score for (query {pool.query_id!r}, record {rid!r})"
                )


def assemble_pool_features(
    pool: CandidatePool,
    query: Query,
    idf: IdfTable,
    lex_stats: dict[str, LexStats],
    cfg: MixerConfig,
) -> np.ndarray:
    q_tokens = tokenize(query.text)
    lex = [query_lex_features(q_tokens, lex_stats[rid], idf) for rid, _ in pool.entries]
    return mixer.assemble_features(pool, lex, cfg)


def train(
    store: MemoryStore,
    idf: IdfTable,
    lex_stats: dict[str, LexStats],
    pools: list[CandidatePool],
    queries: list[Query],
    teacher: TeacherScores,
    mixer_cfg: MixerConfig,
    train_cfg: TrainConfig,
) -> tuple[MixerParams, TrainReport]:
    """Distill the teacher into mixer params; deterministic per seed."""
    train_cfg.validate()
    mixer_cfg.validate()
    check_teacher_coverage(teacher, pools)
    query_by_id = {q.id: q for q in queries}
    for pool in pools:
        if pool.query_id not in query_by_id:
            raise InvariantError(f"no query object for pool {pool.query_id!r}")

    t0 = time.perf_counter()
    seedseq = np.random.SeedSequence(train_cfg.seed)
    init_seed, shuffle_seed, pair_seed = seedseq.spawn(3)
    params = mixer.init_params(mixer_cfg, seed=init_seed.generate_state(1)[0])
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    pair_rng = np.random.Generator(np.random.PCG64(pair_seed))

    # Per-query tensors, computed once: features, teacher vector, gold positions.
    feats: list[np.ndarray] = []
    teach: list[np.ndarray] = []
    golds: list[np.ndarray] = []
    denses: list[np.ndarray] = []
    skipped_gold = 0
    for pool in pools:
        q = query_by_id[pool.query_id]
        feats.append(assemble_pool_features(pool, q, idf, lex_stats, mixer_cfg))
        teach.append(
            np.array([teacher[pool.query_id][rid] for rid, _ in pool.entries], dtype=np.float64)
        )
        gold = np.array(
            [i for i, (rid, _) in enumerate(pool.entries) if rid in q.gold_ids], dtype=np.int64
        )
        if gold.size == 0:
            skipped_gold += 1
        golds.append(gold)
        denses.append(pool.scores())

    velocity = mixer.zero_grads(mixer_cfg)
    report = TrainReport(seed=train_cfg.seed, queries_without_gold_in_pool=skipped_gold)
    n = len(pools)
    uniform_len = len({f.shape[0] for f in feats}) == 1

    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        pair_sum = 0.0
        first_sum = 0.0
        first_count = 0
        for start in range(0, n, train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            if uniform_len and len(batch) > 1:
                x = np.stack([feats[i] for i in batch])
                scores, cache = mixer.forward_scores(x, params, mixer_cfg, want_cache=True)
                final = scores + mixer_cfg.fusion_weight * np.stack([denses[i] for i in batch])
                dfinal = np.zeros_like(final)
                for row, i in enumerate(batch):
                    p_l, p_g = _query_losses(
                        final[row], teach[i], golds[i], train_cfg, pair_rng, dfinal[row]
                    )
                    pair_sum += p_l
                    if p_g is not None:
                        first_sum += p_g
                        first_count += 1
                dfinal /= len(batch)
                grads, _ = mixer.backward(cache, dfinal, params)
            else:
                grads = mixer.zero_grads(mixer_cfg)
                for i in batch:
                    scores, cache = mixer.forward_scores(
                        feats[i], params, mixer_cfg, want_cache=True
                    )
                    final = scores + mixer_cfg.fusion_weight * denses[i]
                    dfinal = np.zeros_like(final)
                    p_l, p_g = _query_losses(
                        final, teach[i], golds[i], train_cfg, pair_rng, dfinal
                    )
                    pair_sum += p_l
                    if p_g is not None:
                        first_sum += p_g
                        first_count += 1
                    g_i, _ = mixer.backward(cache, dfinal / len(batch), params)
                    for name in grads:
                        grads[name] += g_i[name]
            for name in params:
                velocity[name] = train_cfg.momentum * velocity[name] + grads[name]
                params[name] = params[name] - train_cfg.learning_rate * velocity[name]
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                pair_loss=pair_sum / n,
                first_rank_loss=first_sum / max(first_count, 1),
            )
        )
    if train_cfg.epochs >= 2 and report.epochs[-1].total >= report.epochs[0].total:
        warnings.warn(
            f"training did not reduce mean total loss "
            f"({report.epochs[0].total:.4f} -> {report.epochs[-1].total:.4f})",
            stacklevel=2,
        )
    report.wall_seconds = time.perf_counter() - t0
    return params, report


def _query_losses(
    final: np.ndarray,
    teacher_vec: np.ndarray,
    gold: np.ndarray,
    cfg: TrainConfig,
    pair_rng: np.random.Generator,
    dfinal_out: np.ndarray,
) -> tuple[float, float | None]:
    """Accumulate weighted loss gradients into dfinal_out; return (pair, first) losses."""
    pair_l, pair_g = pairwise_loss_sampled(final, teacher_vec, cfg, pair_rng)
    dfinal_out += cfg.pair_loss_weight * pair_g
    first_l: float | None = None
    if gold.size > 0 and cfg.first_rank_weight > 0:
        tau = cfg.first_rank_sharpness
        first_l, first_g = first_rank_loss(tau * final, gold)
        dfinal_out += cfg.first_rank_weight * tau * first_g
    return cfg.pair_loss_weight * pair_l, (
        None if first_l is None else cfg.first_rank_weight * first_l
    )


def make_gold_indicator_teacher(
    queries: list[Query], pools: list[CandidatePool], noise_sigma: float, seed: int
) -> TeacherScores:
    """Oracle teacher: 1 on gold, 0 elsewhere, plus Gaussian noise."""
    if noise_sigma < 0:
        raise InvariantError("noise_sigma must be >= 0")
    gold_by_query = {q.id: q.gold_ids for q in queries}
    rng = np.random.Generator(np.random.PCG64(seed))
    teacher: TeacherScores = {}
    for pool in pools:
        gold = gold_by_query.get(pool.query_id, frozenset())
        base = np.array([1.0 if rid in gold else 0.0 for rid, _ in pool.entries])
        if noise_sigma > 0:
            base = base + noise_sigma * rng.standard_normal(base.shape[0])
        teacher[pool.query_id] = {
            rid: float(base[i]) for i, (rid, _) in enumerate(pool.entries)
        }
    return teacher
