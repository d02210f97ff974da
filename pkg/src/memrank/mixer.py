"""Windowed mixer scorer over a rank-ordered candidate pool.

Per query, the pool's 15 assembled features are projected to a hidden
width, a sliding window (stride 1, replication padding at the pool edges)
is extracted around every candidate, a stack of blocks mixes within the
window (depthwise conv over window positions, a per-channel position MLP,
a channel MLP), the window center feeds a scalar scoring head, and the
raw dense score is fused back in additively.

Everything for candidate i reads only ranks i-R..i+R (R = window//2):
the window is cut once and all blocks operate inside it, so the receptive
field is exactly the window regardless of depth.

Parameters live in float64 in memory; checkpoints store float32 payloads.
Forward/backward are pure numpy with exact analytic gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _binio as b
from .embeddings import CandidatePool
from .errors import InputError, InvariantError
from .lexical import LexFeatureVector

MAGIC = b"CMMX"
VERSION = 1

FEATURE_DIM = 15  # dense, dense_z, rank_norm, 6 lexical, 6 lexical_z

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


@dataclass(frozen=True)
class AblationFlags:
    use_lexical: bool = True
    use_window: bool = True
    use_router: bool = True


@dataclass(frozen=True)
class MixerConfig:
    window_size: int = 5
    stride: int = 1
    kernel_size: int = 3
    hidden_dim: int = 256
    token_mlp_dim: int = 32
    channel_mlp_dim: int = 512
    n_blocks: int = 14
    pool_cap: int = 500
    fusion_weight: float = 0.025
    embed_dim: int = 768
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvariantError(f"window_size must be odd and >= 1, got {self.window_size}")
        if self.stride != 1:
            raise InvariantError(f"only stride 1 is supported, got {self.stride}")
        if not (1 <= self.kernel_size <= self.window_size):
            raise InvariantError(
                f"kernel_size must be in [1, window_size], got {self.kernel_size}"
            )
        for name in ("hidden_dim", "token_mlp_dim", "channel_mlp_dim", "n_blocks", "pool_cap", "embed_dim"):
            v = getattr(self, name)
            if v <= 0:
                raise InvariantError(f"{name} must be positive, got {v}")

    def with_ablation(self, **flags: bool) -> "MixerConfig":
        return replace(self, ablation=replace(self.ablation, **flags))


@dataclass
class ScoredPool:
    query_id: str
    entries: list[tuple[str, float]]  # (record_id, final_score), sorted descending
    provenance: str  # dense | mixer | editor

    def ids(self) -> list[str]:
        return [rid for rid, _ in self.entries]

    def scores(self) -> np.ndarray:
        return np.array([s for _, s in self.entries], dtype=np.float64)


MixerParams = dict[str, np.ndarray]


def _tensor_spec(cfg: MixerConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m, c = cfg.hidden_dim, cfg.token_mlp_dim, cfg.channel_mlp_dim
    w, k = cfg.window_size, cfg.kernel_size
    spec: list[tuple[str, tuple[int, ...]]] = [
        ("proj_w", (FEATURE_DIM, d)),
        ("proj_b", (d,)),
    ]
    for i in range(cfg.n_blocks):
        spec += [
            (f"blk{i}_conv_k", (k, d)),
            (f"blk{i}_conv_b", (d,)),
            (f"blk{i}_tok_w1", (w, m)),
            (f"blk{i}_tok_b1", (m,)),
            (f"blk{i}_tok_w2", (m, w)),
            (f"blk{i}_tok_b2", (w,)),
            (f"blk{i}_chan_w1", (d, c)),
            (f"blk{i}_chan_b1", (c,)),
            (f"blk{i}_chan_w2", (c, d)),
            (f"blk{i}_chan_b2", (d,)),
        ]
    spec += [
        ("router_gate", (1,)),
        ("router_pass", (d,)),
        ("head_w", (d,)),
        ("head_b", (1,)),
    ]
    return spec


def param_count(cfg: MixerConfig) -> int:
    """Deterministic parameter count.

    Per tensor: projection F*d + d; per block a depthwise conv (k*d + d),
    a position MLP (w*m + m + m*w + w) and a channel MLP (d*c + c + c*d + d);
    plus the router (1 + d) and the head (d + 1). See README for the
    hand-audited expansion at the default configuration.
    """
    cfg.validate()
    return sum(int(np.prod(shape)) for _, shape in _tensor_spec(cfg))


def init_params(cfg: MixerConfig, seed: int) -> MixerParams:
    """Uniform fan-in init for weights, zero biases, router gate bias 0.

    Deterministic per seed: tensors are drawn in the fixed _tensor_spec order
    from a single PCG64 stream.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    params: MixerParams = {}
    for name, shape in _tensor_spec(cfg):
        if name.endswith("_b") or name == "router_gate":
            params[name] = np.zeros(shape, dtype=np.float64)
        elif name == "router_pass":
            params[name] = np.ones(shape, dtype=np.float64)
        elif name == "head_w":
            bound = 1.0 / np.sqrt(cfg.hidden_dim)
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zero_grads(cfg: MixerConfig) -> MixerParams:
    return {name: np.zeros(shape, dtype=np.float64) for name, shape in _tensor_spec(cfg)}


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-form GELU and its exact derivative."""
    u = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x**2)
    return y, dy


def _window_index(length: int, window: int) -> np.ndarray:
    half = window // 2
    base = np.arange(length)[:, None] + np.arange(-half, half + 1)[None, :]
    return np.clip(base, 0, length - 1)


def _conv_index(window: int, kernel: int) -> np.ndarray:
    half = kernel // 2
    base = np.arange(window)[:, None] + np.arange(kernel)[None, :] - half
    return np.clip(base, 0, window - 1)


def forward_scores(
    features: np.ndarray, params: MixerParams, cfg: MixerConfig, want_cache: bool = False
) -> tuple[np.ndarray, dict | None]:
    """Head scores for a batch of pools: (B, L, F) -> (B, L).

    With want_cache the intermediates needed by backward() are retained.
    """
    cfg.validate()
    x = np.asarray(features, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[2] != FEATURE_DIM:
        raise InvariantError(f"feature matrix must be (B, L, {FEATURE_DIM}), got {x.shape}")
    _batch, length, _ = x.shape
    w = cfg.window_size
    center = w // 2

    h = x @ params["proj_w"] + params["proj_b"]

    cache: dict | None = (
        {"x": x, "h": h, "cfg": cfg, "squeeze": squeeze, "blocks": []} if want_cache else None
    )

    if cfg.ablation.use_window:
        widx = _window_index(length, w)
        cidx = _conv_index(w, cfg.kernel_size)
        z = h[:, widx, :]  # (B, L, W, D)
        if cache is not None:
            cache["widx"], cache["cidx"] = widx, cidx
        for i in range(cfg.n_blocks):
            kw = params[f"blk{i}_conv_k"]
            gathered = z[:, :, cidx, :]  # (B, L, W, K, D)
            conv = np.einsum("blwkd,kd->blwd", gathered, kw) + params[f"blk{i}_conv_b"]
            z1 = z + conv
            t1 = np.einsum("blwd,wm->blmd", z1, params[f"blk{i}_tok_w1"])
            t1 += params[f"blk{i}_tok_b1"][None, None, :, None]
            a1, da1 = _gelu(t1)
            t2 = np.einsum("blmd,mw->blwd", a1, params[f"blk{i}_tok_w2"])
            t2 += params[f"blk{i}_tok_b2"][None, None, :, None]
            z2 = z1 + t2
            u1 = z2 @ params[f"blk{i}_chan_w1"] + params[f"blk{i}_chan_b1"]
            a2, da2 = _gelu(u1)
            u2 = a2 @ params[f"blk{i}_chan_w2"] + params[f"blk{i}_chan_b2"]
            z3 = z2 + u2
            if cache is not None:
                cache["blocks"].append(
                    {"z_in": z, "z1": z1, "da1": da1, "a1": a1, "z2": z2, "da2": da2, "a2": a2}
                )
            z = z3
        rep = z[:, :, center, :]
    else:
        z = h
        for i in range(cfg.n_blocks):
            u1 = z @ params[f"blk{i}_chan_w1"] + params[f"blk{i}_chan_b1"]
            a2, da2 = _gelu(u1)
            u2 = a2 @ params[f"blk{i}_chan_w2"] + params[f"blk{i}_chan_b2"]
            if cache is not None:
                cache["blocks"].append({"z2": z, "da2": da2, "a2": a2})
            z = z + u2
        rep = z

    if cfg.ablation.use_router:
        gate = 1.0 / (1.0 + np.exp(-params["router_gate"][0]))
        passthrough = params["router_pass"][None, None, :] * h
        out = gate * rep + (1.0 - gate) * passthrough
        if cache is not None:
            cache["gate"], cache["rep"], cache["passthrough"] = gate, rep, passthrough
    else:
        out = rep
        if cache is not None:
            cache["rep"] = rep

    scores = out @ params["head_w"] + params["head_b"][0]
    if cache is not None:
        cache["out"] = out
    return (scores[0] if squeeze else scores), cache


def backward(
    cache: dict, dscores: np.ndarray, params: MixerParams
) -> tuple[MixerParams, np.ndarray]:
    """Exact gradients of sum(dscores * scores) wrt params and input features."""
    cfg: MixerConfig = cache["cfg"]
    ds = np.asarray(dscores, dtype=np.float64)
    if cache["squeeze"]:
        ds = ds[None, :]
    x, h, out = cache["x"], cache["h"], cache["out"]
    grads = zero_grads(cfg)

    grads["head_w"] = np.einsum("bld,bl->d", out, ds)
    grads["head_b"] = np.array([ds.sum()])
    dout = ds[:, :, None] * params["head_w"][None, None, :]

    dh = np.zeros_like(h)
    if cfg.ablation.use_router:
        gate, rep, passthrough = cache["gate"], cache["rep"], cache["passthrough"]
        drep = gate * dout
        dh += (1.0 - gate) * params["router_pass"][None, None, :] * dout
        grads["router_pass"] = np.einsum("bld,bld->d", (1.0 - gate) * dout, h)
        dgate = float(np.sum(dout * (rep - passthrough)))
        grads["router_gate"] = np.array([dgate * gate * (1.0 - gate)])
    else:
        drep = dout

    if cfg.ablation.use_window:
        w = cfg.window_size
        center = w // 2
        widx, cidx = cache["widx"], cache["cidx"]
        dz = np.zeros(h.shape[:2] + (w, h.shape[2]), dtype=np.float64)
        dz[:, :, center, :] = drep
        for i in reversed(range(cfg.n_blocks)):
            blk = cache["blocks"][i]
            # channel MLP
            du2 = dz
            grads[f"blk{i}_chan_w2"] = np.einsum("blwc,blwd->cd", blk["a2"], du2)
            grads[f"blk{i}_chan_b2"] = du2.sum(axis=(0, 1, 2))
            du1 = (du2 @ params[f"blk{i}_chan_w2"].T) * blk["da2"]
            grads[f"blk{i}_chan_w1"] = np.einsum("blwd,blwc->dc", blk["z2"], du1)
            grads[f"blk{i}_chan_b1"] = du1.sum(axis=(0, 1, 2))
            dz2 = dz + du1 @ params[f"blk{i}_chan_w1"].T
            # position MLP
            dt2 = dz2
            grads[f"blk{i}_tok_w2"] = np.einsum("blmd,blwd->mw", blk["a1"], dt2)
            grads[f"blk{i}_tok_b2"] = dt2.sum(axis=(0, 1, 3))
            dt1 = np.einsum("blwd,mw->blmd", dt2, params[f"blk{i}_tok_w2"]) * blk["da1"]
            grads[f"blk{i}_tok_w1"] = np.einsum("blwd,blmd->wm", blk["z1"], dt1)
            grads[f"blk{i}_tok_b1"] = dt1.sum(axis=(0, 1, 3))
            dz1 = dz2 + np.einsum("blmd,wm->blwd", dt1, params[f"blk{i}_tok_w1"])
            # depthwise conv
            dconv = dz1
            gathered = blk["z_in"][:, :, cidx, :]
            grads[f"blk{i}_conv_k"] = np.einsum("blwkd,blwd->kd", gathered, dconv)
            grads[f"blk{i}_conv_b"] = dconv.sum(axis=(0, 1, 2))
            dz0 = dz1.copy()
            kw = params[f"blk{i}_conv_k"]
            for p in range(w):
                for j in range(cfg.kernel_size):
                    dz0[:, :, cidx[p, j], :] += dconv[:, :, p, :] * kw[j][None, None, :]
            dz = dz0
        # un-window: scatter-add back to per-candidate hidden rows
        for p in range(w):
            np.add.at(dh, (slice(None), widx[:, p]), dz[:, :, p, :])
    else:
        dzf = drep
        for i in reversed(range(cfg.n_blocks)):
            blk = cache["blocks"][i]
            du2 = dzf
            grads[f"blk{i}_chan_w2"] = np.einsum("blc,bld->cd", blk["a2"], du2)
            grads[f"blk{i}_chan_b2"] = du2.sum(axis=(0, 1))
            du1 = (du2 @ params[f"blk{i}_chan_w2"].T) * blk["da2"]
            grads[f"blk{i}_chan_w1"] = np.einsum("bld,blc->dc", blk["z2"], du1)
            grads[f"blk{i}_chan_b1"] = du1.sum(axis=(0, 1))
            dzf = dzf + du1 @ params[f"blk{i}_chan_w1"].T
        dh += dzf

    grads["proj_w"] = np.einsum("blf,bld->fd", x, dh)
    grads["proj_b"] = dh.sum(axis=(0, 1))
    dx = dh @ params["proj_w"].T
    return grads, (dx[0] if cache["squeeze"] else dx)


def _zscore(col: np.ndarray) -> np.ndarray:
    mean = col.mean()
    std = col.std()
    if std <= 1e-9 * (1.0 + abs(mean)):
        return np.zeros_like(col)
    return (col - mean) / std


def assemble_features(
    pool: CandidatePool, lex: list[LexFeatureVector], cfg: MixerConfig
) -> np.ndarray:
    """Per-candidate rows: [dense, dense_z, rank_norm, lex x6, lex_z x6]."""
    if len(pool.entries) == 0:
        raise InvariantError("cannot assemble features for an empty pool")
    if len(lex) != len(pool.entries):
        raise InvariantError(
            f"pool has {len(pool.entries)} entries but {len(lex)} lexical vectors"
        )
    length = len(pool.entries)
    feats = np.zeros((length, FEATURE_DIM), dtype=np.float64)
    dense = pool.scores()
    feats[:, 0] = dense
    feats[:, 1] = _zscore(dense)
    feats[:, 2] = np.arange(length, dtype=np.float64) / length
    if cfg.ablation.use_lexical:
        lex_mat = np.array([v.as_tuple() for v in lex], dtype=np.float64)
        feats[:, 3:9] = lex_mat
        for j in range(6):
            feats[:, 9 + j] = _zscore(lex_mat[:, j])
    return feats


def rank_order(scores: np.ndarray, write_idx: np.ndarray) -> np.ndarray:
    """Order by score descending, write_index ascending on ties."""
    return np.lexsort((write_idx, -scores))


def mixer_forward(
    features: np.ndarray,
    params: MixerParams,
    pool: CandidatePool,
    cfg: MixerConfig,
    write_idx: np.ndarray | None = None,
) -> ScoredPool:
    """Score a rank-ordered pool and return it re-sorted by fused score.

    final_score(c) = head(c) + fusion_weight * dense_score(c). Ties break by
    write_index when provided, otherwise by the incoming pool order (which
    already encodes the write tiebreak).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(pool.entries):
        raise InvariantError(
            f"feature rows {feats.shape} do not match pool length {len(pool.entries)}"
        )
    head, _ = forward_scores(feats, params, cfg, want_cache=False)
    final = head + cfg.fusion_weight * pool.scores()
    if write_idx is None:
        write_idx = np.arange(len(pool.entries), dtype=np.int64)
    order = rank_order(final, np.asarray(write_idx))
    entries = [(pool.entries[i][0], float(final[i])) for i in order]
    return ScoredPool(query_id=pool.query_id, entries=entries, provenance="mixer")


def save_checkpoint(params: MixerParams, cfg: MixerConfig, path: str | Path) -> None:
    """CMMX checkpoint: config JSON + named float32 tensors; save/load is bit-exact."""
    cfg_json = json.dumps(asdict(cfg), sort_keys=True)
    tensors = []
    for name, shape in _tensor_spec(cfg):
        arr = params[name]
        if arr.shape != shape:
            raise InvariantError(f"tensor {name} has shape {arr.shape}, expected {shape}")
        tensors.append((name, arr))
    b.write_tensor_file(Path(path), MAGIC, VERSION, cfg_json, tensors)


def _config_from_dict(obj: dict) -> MixerConfig:
    ablation = AblationFlags(**obj.pop("ablation"))
    return MixerConfig(ablation=ablation, **obj)


def load_checkpoint(path: str | Path) -> tuple[MixerParams, MixerConfig]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    cfg_json, params = b.read_tensor_file(path, MAGIC, VERSION)
    cfg = _config_from_dict(json.loads(cfg_json))
    expected = {name for name, _ in _tensor_spec(cfg)}
    if set(params) != expected:
        missing = expected - set(params)
        raise InputError(
            f"{path}: checkpoint tensors do not match config (missing {sorted(missing)[:3]}...)"
        )
    return params, cfg
