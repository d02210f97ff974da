"""Gated conflict-aware candidate-set editor.

Reads a reranked pool, computes 18 candidate-set features per candidate,
mixes them with one self-attention block, and applies a low-amplitude
residual correction: edited = base + sigmoid(gate_bias) * tanh(head(...)).
The gate bias starts at -4, so an untrained editor is close to a no-op
and provably cannot flip a top-1 whose margin exceeds 2 * sigmoid(-4).

The feature extractor sees pool scores, dense scores, embeddings, cached
lexical stats, timestamps, and query tokens - never gold ids and never
any stale/current annotation. Training is retrieval cross-entropy only;
there is no teacher input anywhere in this path.
"""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _binio as b
from .distill import first_rank_loss
from .embeddings import CandidatePool, EmbeddingCache
from .errors import InputError, InvariantError
from .lexical import IdfTable, LexStats, query_lex_features, tokenize
from .mixer import ScoredPool, _gelu, _zscore, rank_order
from .store import MemoryStore

MAGIC = b"CMED"
VERSION = 1

FEATURE_NAMES = (
    "base_score_z",
    "dense_score_z",
    "position_z",
    "query_overlap_z",
    "base_rank_norm",
    "dense_rank_norm",
    "sim_to_base_top",
    "sim_to_dense_top",
    "semantic_density_top16",
    "token_overlap_to_top",
    "newer_than_base_top",
    "older_than_base_top",
    "abs_pos_gap_top_z",
    "base_margin_1_2",
    "base_entropy_top16",
    "conflict_density_top16",
    "time_span_top16",
    "top_overlap",
)
FEATURE_DIM = len(FEATURE_NAMES)  # 18

POOL_CONSTANT = frozenset(
    {"base_margin_1_2", "base_entropy_top16", "conflict_density_top16", "time_span_top16", "top_overlap"}
)

_DAY_SECONDS = 86400.0


@dataclass(frozen=True)
class EditorConfig:
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    gate_bias_init: float = -4.0
    conflict_cos_threshold: float = 0.85
    conflict_time_gap_days: float = 1.0
    top_m: int = 16

    def validate(self) -> None:
        if self.d_model <= 0 or self.ff_dim <= 0 or self.top_m <= 0:
            raise InvariantError("editor dims must be positive")
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise InvariantError(
                f"n_heads ({self.n_heads}) must divide d_model ({self.d_model})"
            )


EditorParams = dict[str, np.ndarray]


@dataclass
class EditedPool:
    query_id: str
    entries: list[tuple[str, float]]  # (record_id, edited_score), sorted descending
    gate_applied: float

    def ids(self) -> list[str]:
        return [rid for rid, _ in self.entries]


def _tensor_spec(cfg: EditorConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ff_dim
    return [
        ("proj_w", (FEATURE_DIM, d)),
        ("proj_b", (d,)),
        ("ln1_g", (d,)),
        ("ln1_b", (d,)),
        ("attn_wq", (d, d)),
        ("attn_bq", (d,)),
        ("attn_wk", (d, d)),
        ("attn_bk", (d,)),
        ("attn_wv", (d, d)),
        ("attn_bv", (d,)),
        ("attn_wo", (d, d)),
        ("attn_bo", (d,)),
        ("ln2_g", (d,)),
        ("ln2_b", (d,)),
        ("ff_w1", (d, f)),
        ("ff_b1", (f,)),
        ("ff_w2", (f, d)),
        ("ff_b2", (d,)),
        ("ln3_g", (d,)),
        ("ln3_b", (d,)),
        ("head_w", (d,)),
        ("head_b", (1,)),
        ("gate_b", (1,)),
    ]


_LN_EPS = 1e-5


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv)


def _layer_norm_backward(dy: np.ndarray, gamma: np.ndarray, ln_cache):
    xhat, inv = ln_cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def param_count(cfg: EditorConfig) -> int:
    cfg.validate()
    return sum(int(np.prod(shape)) for _, shape in _tensor_spec(cfg))


def init_params(cfg: EditorConfig, seed: int) -> EditorParams:
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: EditorParams = {}
    for name, shape in _tensor_spec(cfg):
        if name == "gate_b":
            params[name] = np.array([cfg.gate_bias_init], dtype=np.float64)
        elif name.endswith("_g"):  # layer-norm gains
            params[name] = np.ones(shape, dtype=np.float64)
        elif name.startswith(("proj_b", "attn_b", "ff_b", "head_b")) or name.startswith("ln"):
            params[name] = np.zeros(shape, dtype=np.float64)
        elif name == "head_w":
            bound = 1.0 / np.sqrt(cfg.d_model)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def gate_value(params: EditorParams) -> float:
    return float(1.0 / (1.0 + np.exp(-params["gate_b"][0])))


def editor_features(
    base_pool: ScoredPool,
    dense_pool: CandidatePool,
    cache: EmbeddingCache,
    idf: IdfTable,
    lex_stats: dict[str, LexStats],
    store: MemoryStore,
    query_tokens: Counter,
    cfg: EditorConfig = EditorConfig(),
) -> np.ndarray:
    """The 18 candidate-set features, rows in base-pool order.

    Inputs are exactly pool scores, dense scores, embeddings, lexical stats,
    timestamps, and query tokens; gold ids are not reachable from here.
    """
    cfg.validate()
    ids = base_pool.ids()
    dense_map = {rid: s for rid, s in dense_pool.entries}
    if set(ids) != set(dense_map):
        raise InvariantError("base pool and dense pool must hold the same candidate ids")
    length = len(ids)
    base = base_pool.scores()
    dense = np.array([dense_map[rid] for rid in ids], dtype=np.float64)
    dense_rank_of = {rid: i for i, (rid, _) in enumerate(dense_pool.entries)}
    write_idx = np.array([store.write_index_of(rid) for rid in ids], dtype=np.float64)
    event = np.array([store.get(rid).event_time for rid in ids], dtype=np.float64)
    emb = np.stack([cache.vector_for(rid) for rid in ids]).astype(np.float64)

    overlap = np.array(
        [
            query_lex_features(query_tokens, lex_stats[rid], idf).idf_overlap
            for rid in ids
        ],
        dtype=np.float64,
    )

    m = min(cfg.top_m, length)
    top_emb = emb[:m]  # base order means rows 0..m-1 are the base top-m
    sims_top = emb @ top_emb.T  # (L, m)
    base_top_tokens = set(lex_stats[ids[0]].token_counts)

    feats = np.zeros((length, FEATURE_DIM), dtype=np.float64)
    feats[:, 0] = _zscore(base)
    feats[:, 1] = _zscore(dense)
    feats[:, 2] = _zscore(write_idx)
    feats[:, 3] = _zscore(overlap)
    feats[:, 4] = np.arange(length, dtype=np.float64) / length
    feats[:, 5] = np.array([dense_rank_of[rid] for rid in ids], dtype=np.float64) / length
    feats[:, 6] = emb @ emb[0]
    feats[:, 7] = emb @ cache.vector_for(dense_pool.entries[0][0]).astype(np.float64)
    if m > 1:
        density = (sims_top.sum(axis=1)) / m
        in_top = np.arange(length) < m
        density[in_top] = (sims_top[in_top].sum(axis=1) - np.einsum("id,id->i", emb[:m], emb[:m])) / (m - 1)
        feats[:, 8] = density
    for i, rid in enumerate(ids):
        cand_tokens = set(lex_stats[rid].token_counts)
        union = len(cand_tokens | base_top_tokens)
        feats[i, 9] = len(cand_tokens & base_top_tokens) / union if union else 0.0
    feats[:, 10] = (event > event[0]).astype(np.float64)
    feats[:, 11] = (event < event[0]).astype(np.float64)
    feats[:, 12] = _zscore(np.abs(write_idx - write_idx[0]))
    feats[:, 13] = base[0] - base[1] if length >= 2 else 0.0
    top_scores = base[:m] - base[:m].max()
    p = np.exp(top_scores)
    p /= p.sum()
    feats[:, 14] = float(-(p * np.log(np.maximum(p, 1e-300))).sum())
    if m >= 2:
        pair_sims = top_emb @ top_emb.T
        gaps = np.abs(event[:m, None] - event[None, :m])
        iu = np.triu_indices(m, k=1)
        conflict = (pair_sims[iu] > cfg.conflict_cos_threshold) & (
            gaps[iu] > cfg.conflict_time_gap_days * _DAY_SECONDS
        )
        feats[:, 15] = conflict.mean()
    feats[:, 16] = np.log1p((event[:m].max() - event[:m].min()) / _DAY_SECONDS)
    dense_top_ids = {rid for rid, _ in dense_pool.entries[:m]}
    feats[:, 17] = len(set(ids[:m]) & dense_top_ids) / cfg.top_m
    return feats


def forward_raw(
    features: np.ndarray, params: EditorParams, cfg: EditorConfig, want_cache: bool = False
) -> tuple[np.ndarray, dict | None]:
    """tanh-bounded residual per candidate, before gating: (L, 18) -> (L,)."""
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise InvariantError(f"editor features must be (L, {FEATURE_DIM}), got {x.shape}")
    d, h = cfg.d_model, cfg.n_heads
    hd = d // h
    scale = 1.0 / np.sqrt(hd)
    length = x.shape[0]

    p = x @ params["proj_w"] + params["proj_b"]
    h1, ln1 = _layer_norm(p, params["ln1_g"], params["ln1_b"])
    q = (h1 @ params["attn_wq"] + params["attn_bq"]).reshape(length, h, hd)
    k = (h1 @ params["attn_wk"] + params["attn_bk"]).reshape(length, h, hd)
    v = (h1 @ params["attn_wv"] + params["attn_bv"]).reshape(length, h, hd)
    logits = np.einsum("ihd,jhd->hij", q, k) * scale
    logits -= logits.max(axis=2, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    mixed = np.einsum("hij,jhd->ihd", attn, v).reshape(length, d)
    attn_out = mixed @ params["attn_wo"] + params["attn_bo"]
    y1 = p + attn_out
    h2, ln2 = _layer_norm(y1, params["ln2_g"], params["ln2_b"])
    f1 = h2 @ params["ff_w1"] + params["ff_b1"]
    g1, dg1 = _gelu(f1)
    f2 = g1 @ params["ff_w2"] + params["ff_b2"]
    y2 = y1 + f2
    h3, ln3 = _layer_norm(y2, params["ln3_g"], params["ln3_b"])
    raw = h3 @ params["head_w"] + params["head_b"][0]
    rho = np.tanh(raw)
    cache = None
    if want_cache:
        cache = {
            "x": x, "p": p, "h1": h1, "ln1": ln1, "q": q, "k": k, "v": v,
            "attn": attn, "mixed": mixed, "y1": y1, "h2": h2, "ln2": ln2,
            "g1": g1, "dg1": dg1, "y2": y2, "h3": h3, "ln3": ln3,
            "rho": rho, "cfg": cfg,
        }
    return rho, cache


def backward_raw(
    cache: dict, drho: np.ndarray, params: EditorParams
) -> tuple[EditorParams, np.ndarray]:
    """Gradients of sum(drho * rho) wrt editor params and input features."""
    cfg: EditorConfig = cache["cfg"]
    d, h = cfg.d_model, cfg.n_heads
    hd = d // h
    scale = 1.0 / np.sqrt(hd)
    x, p, rho = cache["x"], cache["p"], cache["rho"]
    length = x.shape[0]
    grads: EditorParams = {name: np.zeros(shape) for name, shape in _tensor_spec(cfg)}

    draw = np.asarray(drho, dtype=np.float64) * (1.0 - rho**2)
    grads["head_w"] = cache["h3"].T @ draw
    grads["head_b"] = np.array([draw.sum()])
    dh3 = np.outer(draw, params["head_w"])
    dy2, grads["ln3_g"], grads["ln3_b"] = _layer_norm_backward(
        dh3, params["ln3_g"], cache["ln3"]
    )

    df2 = dy2
    grads["ff_w2"] = cache["g1"].T @ df2
    grads["ff_b2"] = df2.sum(axis=0)
    df1 = (df2 @ params["ff_w2"].T) * cache["dg1"]
    grads["ff_w1"] = cache["h2"].T @ df1
    grads["ff_b1"] = df1.sum(axis=0)
    dh2 = df1 @ params["ff_w1"].T
    dy1_ff, grads["ln2_g"], grads["ln2_b"] = _layer_norm_backward(
        dh2, params["ln2_g"], cache["ln2"]
    )
    dy1 = dy2 + dy1_ff

    dattn_out = dy1
    grads["attn_wo"] = cache["mixed"].T @ dattn_out
    grads["attn_bo"] = dattn_out.sum(axis=0)
    dmixed = (dattn_out @ params["attn_wo"].T).reshape(length, h, hd)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    dattn = np.einsum("ihd,jhd->hij", dmixed, v)
    dv = np.einsum("hij,ihd->jhd", attn, dmixed)
    dlogits = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
    dq = np.einsum("hij,jhd->ihd", dlogits, k) * scale
    dk = np.einsum("hij,ihd->jhd", dlogits, q) * scale

    dq = dq.reshape(length, d)
    dk = dk.reshape(length, d)
    dv = dv.reshape(length, d)
    h1 = cache["h1"]
    grads["attn_wq"] = h1.T @ dq
    grads["attn_bq"] = dq.sum(axis=0)
    grads["attn_wk"] = h1.T @ dk
    grads["attn_bk"] = dk.sum(axis=0)
    grads["attn_wv"] = h1.T @ dv
    grads["attn_bv"] = dv.sum(axis=0)
    dh1 = dq @ params["attn_wq"].T + dk @ params["attn_wk"].T + dv @ params["attn_wv"].T
    dp_ln, grads["ln1_g"], grads["ln1_b"] = _layer_norm_backward(
        dh1, params["ln1_g"], cache["ln1"]
    )
    dp = dy1 + dp_ln

    grads["proj_w"] = x.T @ dp
    grads["proj_b"] = dp.sum(axis=0)
    dx = dp @ params["proj_w"].T
    return grads, dx


def edited_scores(
    features: np.ndarray, params: EditorParams, cfg: EditorConfig, base_scores: np.ndarray
) -> np.ndarray:
    rho, _ = forward_raw(features, params, cfg)
    return np.asarray(base_scores, dtype=np.float64) + gate_value(params) * rho


def editor_forward(
    features: np.ndarray,
    params: EditorParams,
    base_pool: ScoredPool,
    cfg: EditorConfig = EditorConfig(),
    write_idx: np.ndarray | None = None,
) -> EditedPool:
    base = base_pool.scores()
    if features.shape[0] != base.shape[0]:
        raise InvariantError(
            f"feature rows {features.shape[0]} do not match pool length {base.shape[0]}"
        )
    edited = edited_scores(features, params, cfg, base)
    if write_idx is None:
        write_idx = np.arange(len(edited), dtype=np.int64)
    order = rank_order(edited, np.asarray(write_idx))
    entries = [(base_pool.entries[i][0], float(edited[i])) for i in order]
    return EditedPool(query_id=base_pool.query_id, entries=entries, gate_applied=gate_value(params))


@dataclass(frozen=True)
class EditorTrainConfig:
    learning_rate: float = 0.05
    epochs: int = 60
    momentum: float = 0.9
    seed: int = 23
    batch_size: int = 8
    clip_norm: float = 5.0  # global gradient-norm clip; keeps the tanh head out of saturation


def editor_train(
    feature_mats: list[np.ndarray],
    base_score_vecs: list[np.ndarray],
    gold_position_sets: list[np.ndarray],
    cfg: EditorConfig,
    train_cfg: EditorTrainConfig,
) -> tuple[EditorParams, list[float]]:
    """Train on retrieval cross-entropy over edited scores; deterministic per seed.

    Queries whose gold is absent from the pool are skipped. The interface
    takes features, base scores, and gold positions only - there is no slot
    for teacher scores.
    """
    cfg.validate()
    if not (len(feature_mats) == len(base_score_vecs) == len(gold_position_sets)):
        raise InvariantError("feature/base/gold lists must be parallel")
    usable = [i for i, g in enumerate(gold_position_sets) if np.asarray(g).size > 0]
    if not usable:
        raise InvariantError("no training query has gold inside its pool")
    seedseq = np.random.SeedSequence(train_cfg.seed)
    init_seed, shuffle_seed = seedseq.spawn(2)
    params = init_params(cfg, seed=init_seed.generate_state(1)[0])
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seed))
    velocity: EditorParams = {name: np.zeros(shape) for name, shape in _tensor_spec(cfg)}
    epoch_losses: list[float] = []

    for _epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(usable))
        total = 0.0
        for start in range(0, len(usable), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            acc = {name: np.zeros(shape) for name, shape in _tensor_spec(cfg)}
            for pos in batch:
                i = usable[pos]
                base = np.asarray(base_score_vecs[i], dtype=np.float64)
                rho, cache = forward_raw(feature_mats[i], params, cfg, want_cache=True)
                gate = gate_value(params)
                loss, dedited = first_rank_loss(base + gate * rho, gold_position_sets[i])
                total += loss
                grads, _ = backward_raw(cache, gate * dedited, params)
                grads["gate_b"] = np.array(
                    [float(np.dot(dedited, rho)) * gate * (1.0 - gate)]
                )
                for name in acc:
                    acc[name] += grads[name] / len(batch)
            if train_cfg.clip_norm > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in acc.values()))
                if norm > train_cfg.clip_norm:
                    scale_down = train_cfg.clip_norm / norm
                    for name in acc:
                        acc[name] *= scale_down
            for name in params:
                velocity[name] = train_cfg.momentum * velocity[name] + acc[name]
                params[name] = params[name] - train_cfg.learning_rate * velocity[name]
        epoch_losses.append(total / len(usable))
    if train_cfg.epochs >= 2 and epoch_losses[-1] >= epoch_losses[0]:
        warnings.warn(
            f"editor training did not reduce loss ({epoch_losses[0]:.4f} -> {epoch_losses[-1]:.4f})",
            stacklevel=2,
        )
    return params, epoch_losses


def save_checkpoint(params: EditorParams, cfg: EditorConfig, path: str | Path) -> None:
    cfg_json = json.dumps(asdict(cfg), sort_keys=True)
    tensors = []
    for name, shape in _tensor_spec(cfg):
        arr = params[name]
        if arr.shape != shape:
            raise InvariantError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        tensors.append((name, arr))
    b.write_tensor_file(Path(path), MAGIC, VERSION, cfg_json, tensors)


def load_checkpoint(path: str | Path) -> tuple[EditorParams, EditorConfig]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"editor checkpoint not found: {path}")
    cfg_json, params = b.read_tensor_file(path, MAGIC, VERSION)
    cfg = EditorConfig(**json.loads(cfg_json))
    expected = {name for name, _ in _tensor_spec(cfg)}
    if set(params) != expected:
        raise InputError(f"{path}: editor checkpoint tensors do not match config")
    return params, cfg


def features_for_query(
    base_pool: ScoredPool,
    dense_pool: CandidatePool,
    cache: EmbeddingCache,
    idf: IdfTable,
    lex_stats: dict[str, LexStats],
    store: MemoryStore,
    query_text: str,
    cfg: EditorConfig = EditorConfig(),
) -> np.ndarray:
    """Convenience wrapper: tokenizes the query text, then extracts features.

    Takes the text, not the query object, so gold ids stay out of reach of
    the feature path.
    """
    return editor_features(
        base_pool, dense_pool, cache, idf, lex_stats, store, tokenize(query_text), cfg
    )
