"""Command-line entry point for the full pipeline.

Subcommands: ingest, embed-import, lex-build, pool, train, rerank,
edit-train, edit, eval, bench, audit, synth. Every stage reads and writes
persisted artifacts, so any stage can be restarted from files. Exit codes:
0 success, 2 input error, 3 invariant violation, 4 degeneracy-audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import distill, editor, embeddings, evaluate, lexical, mixer, synth
from . import store as store_mod
from .errors import DegeneracyError, InputError, InvariantError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
EXIT_DEGENERACY = 4


def _load_manifest(args: argparse.Namespace) -> None:
    """Fill unset path-valued args from a manifest JSON; flags win."""
    manifest_path = getattr(args, "manifest", None)
    if not manifest_path:
        return
    path = Path(manifest_path)
    if not path.exists():
        raise InputError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    for key, value in manifest.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) is None:
            setattr(args, attr, value)
    for key, value in manifest.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and getattr(args, attr) == value and isinstance(value, str):
            if key.endswith(("records", "queries", "cache", "pools", "teacher", "checkpoint")):
                if not Path(value).exists():
                    raise InputError(f"manifest path for {key} does not exist: {value}")


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise InputError(f"--{name.replace('_', '-')} is required")


def _mixer_config_from_args(args: argparse.Namespace, pool_cap: int) -> mixer.MixerConfig:
    ablate = set((args.ablate or "").split(",")) - {""}
    unknown = ablate - {"no_lexical", "no_window", "no_router"}
    if unknown:
        raise InputError(f"unknown ablation flag(s): {sorted(unknown)}")
    flags = mixer.AblationFlags(
        use_lexical="no_lexical" not in ablate,
        use_window="no_window" not in ablate,
        use_router="no_router" not in ablate,
    )
    return mixer.MixerConfig(
        window_size=args.window_size,
        kernel_size=args.kernel_size,
        hidden_dim=args.hidden_dim,
        token_mlp_dim=args.token_mlp_dim,
        channel_mlp_dim=args.channel_mlp_dim,
        n_blocks=args.n_blocks,
        pool_cap=pool_cap,
        fusion_weight=args.fusion_weight,
        embed_dim=args.embed_dim,
        ablation=flags,
    )


def _add_mixer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window-size", type=int, default=5)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--token-mlp-dim", type=int, default=32)
    p.add_argument("--channel-mlp-dim", type=int, default=512)
    p.add_argument("--n-blocks", type=int, default=14)
    p.add_argument("--fusion-weight", type=float, default=0.025)
    p.add_argument("--embed-dim", type=int, default=768)
    p.add_argument("--ablate", type=str, default="", help="comma list: no_lexical,no_window,no_router")


def _write_index_array(pool, store) -> np.ndarray:
    return np.array([store.write_index_of(rid) for rid, _ in pool.entries], dtype=np.int64)


def cmd_ingest(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    if args.out:
        store_mod.save_jsonl(store, args.out)
    if args.queries:
        queries = store_mod.load_queries(args.queries, store)
        print(f"validated {len(queries)} queries")
    print(f"ingested {len(store)} records from {args.records}")
    return EXIT_OK


def cmd_embed_import(args: argparse.Namespace) -> int:
    cache = embeddings.load_cache(args.cache)
    embeddings.save_cache(cache, args.out)
    print(f"imported cache: {len(cache)} vectors, dim {cache.dim} -> {args.out}")
    return EXIT_OK


def cmd_lex_build(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    idf, stats = lexical.build_lex_cache(store)
    lexical.save_lex_cache(idf, stats, args.out)
    print(f"lexical cache over {idf.doc_count} docs, {len(idf.df)} tokens -> {args.out}")
    return EXIT_OK


def cmd_pool(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    record_cache = embeddings.load_cache(args.record_cache)
    query_cache = embeddings.load_cache(args.query_cache)
    pools = [
        embeddings.dense_top_n(
            record_cache, query_cache.vector_for(q.id), args.pool_cap, store, q.id
        )
        for q in queries
    ]
    embeddings.save_pools(pools, args.out)
    print(f"built {len(pools)} pools (cap {args.pool_cap}) -> {args.out}")
    return EXIT_OK


def _load_lex(args: argparse.Namespace, store) -> tuple:
    if getattr(args, "lex", None):
        return lexical.load_lex_cache(args.lex)
    return lexical.build_lex_cache(store)


def cmd_train(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    pools = embeddings.load_pools(args.pools)
    teacher = distill.load_teacher_scores(args.teacher)
    idf, lex_stats = _load_lex(args, store)
    pool_cap = pools[0].pool_cap if pools else 500
    mixer_cfg = _mixer_config_from_args(args, pool_cap)
    train_cfg = distill.TrainConfig(
        pairs_per_query=args.pairs_per_query,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    params, report = distill.train(
        store, idf, lex_stats, pools, queries, teacher, mixer_cfg, train_cfg
    )
    mixer.save_checkpoint(params, mixer_cfg, args.out)
    if args.report:
        Path(args.report).write_text(report.to_json())
    first = report.epochs[0].total if report.epochs else float("nan")
    last = report.epochs[-1].total if report.epochs else float("nan")
    print(
        f"trained {mixer.param_count(mixer_cfg)} params, seed {args.seed}: "
        f"loss {first:.4f} -> {last:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_rerank(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    pools = embeddings.load_pools(args.pools)
    params, cfg = mixer.load_checkpoint(args.checkpoint)
    if args.ablate:
        ablate = set(args.ablate.split(",")) - {""}
        cfg = cfg.with_ablation(
            use_lexical="no_lexical" not in ablate,
            use_window="no_window" not in ablate,
            use_router="no_router" not in ablate,
        )
    idf, lex_stats = _load_lex(args, store)
    query_by_id = {q.id: q for q in queries}
    scored = []
    for pool in pools:
        feats = distill.assemble_pool_features(
            pool, query_by_id[pool.query_id], idf, lex_stats, cfg
        )
        scored.append(
            mixer.mixer_forward(feats, params, pool, cfg, _write_index_array(pool, store))
        )
    evaluate.save_rankings(scored, args.out)
    print(f"reranked {len(scored)} pools -> {args.out}")
    return EXIT_OK


def _editor_inputs(args: argparse.Namespace):
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    dense_pools = embeddings.load_pools(args.pools)
    base_pools = evaluate.load_rankings(args.scored)
    record_cache = embeddings.load_cache(args.record_cache)
    idf, lex_stats = _load_lex(args, store)
    return store, queries, dense_pools, base_pools, record_cache, idf, lex_stats


def cmd_edit_train(args: argparse.Namespace) -> int:
    store, queries, dense_pools, base_pools, record_cache, idf, lex_stats = _editor_inputs(args)
    cfg = editor.EditorConfig(d_model=args.d_model, n_heads=args.n_heads, ff_dim=args.ff_dim)
    query_by_id = {q.id: q for q in queries}
    dense_by_id = {p.query_id: p for p in dense_pools}
    feats, bases, golds = [], [], []
    for base_pool in base_pools:
        q = query_by_id[base_pool.query_id]
        feats.append(
            editor.features_for_query(
                base_pool, dense_by_id[base_pool.query_id], record_cache, idf, lex_stats,
                store, q.text, cfg,
            )
        )
        bases.append(base_pool.scores())
        golds.append(
            np.array(
                [i for i, (rid, _) in enumerate(base_pool.entries) if rid in q.gold_ids],
                dtype=np.int64,
            )
        )
    train_cfg = editor.EditorTrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs, seed=args.seed
    )
    params, losses = editor.editor_train(feats, bases, golds, cfg, train_cfg)
    editor.save_checkpoint(params, cfg, args.out)
    print(
        f"trained editor (gate {editor.gate_value(params):.4f}), "
        f"loss {losses[0]:.4f} -> {losses[-1]:.4f} -> {args.out}"
    )
    return EXIT_OK


def cmd_edit(args: argparse.Namespace) -> int:
    store, queries, dense_pools, base_pools, record_cache, idf, lex_stats = _editor_inputs(args)
    params, cfg = editor.load_checkpoint(args.checkpoint)
    query_by_id = {q.id: q for q in queries}
    dense_by_id = {p.query_id: p for p in dense_pools}
    edited = []
    for base_pool in base_pools:
        q = query_by_id[base_pool.query_id]
        feats = editor.features_for_query(
            base_pool, dense_by_id[base_pool.query_id], record_cache, idf, lex_stats,
            store, q.text, cfg,
        )
        write_idx = np.array(
            [store.write_index_of(rid) for rid, _ in base_pool.entries], dtype=np.int64
        )
        edited.append(editor.editor_forward(feats, params, base_pool, cfg, write_idx))
    evaluate.save_rankings(edited, args.out)
    print(f"edited {len(edited)} pools (gate {edited[0].gate_applied:.4f}) -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if args.bootstrap:
        a = evaluate.read_metrics_csv(args.bootstrap[0])
        b = evaluate.read_metrics_csv(args.bootstrap[1])
        delta = evaluate.paired_bootstrap(
            a, b, slice_label=args.slice, metric=args.metric,
            n_resamples=args.n_resamples, seed=args.seed,
        )
        out = delta.to_json()
    elif args.aggregate:
        per_seed = {}
        for spec in args.aggregate:
            if "=" in spec:
                seed_str, path = spec.split("=", 1)
                seed = int(seed_str)
            else:
                seed, path = len(per_seed), spec
            per_seed[seed] = evaluate.read_metrics_csv(path)
        out = evaluate.aggregate_seeds(per_seed).to_json()
    else:
        _require(args, "rankings", "records", "queries")
        store = store_mod.ingest_jsonl(args.records)
        queries = store_mod.load_queries(args.queries, store)
        pools = evaluate.load_rankings(args.rankings)
        rankings = {p.query_id: p.ids() for p in pools}
        stale = evaluate.load_stale_sidecar(args.stale) if args.stale else None
        metrics = evaluate.evaluate_rankings(rankings, queries, args.k, stale)
        if args.out:
            evaluate.write_metrics_csv(metrics, args.out)
        summary = {
            "recall_at_10": evaluate.mean_metric(metrics, "recall_at_10"),
            "hit_at_10": evaluate.mean_metric(metrics, "hit_at_10"),
            "mrr": evaluate.mean_metric(metrics, "reciprocal_rank"),
            "n_queries": len(metrics),
        }
        out = json.dumps(summary, indent=2)
    if args.out and (args.bootstrap or args.aggregate):
        Path(args.out).write_text(out + "\n")
    print(out)
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    pools = evaluate.load_rankings(args.rankings)
    arm_name = args.arm_name or "learned"
    report = evaluate.audit_degeneracy(
        store, queries, {arm_name: {p.query_id: p.ids() for p in pools}}, args.k
    )
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_json())
    if report.degenerate:
        raise DegeneracyError("; ".join(report.exceedances))
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    store = store_mod.ingest_jsonl(args.records)
    queries = store_mod.load_queries(args.queries, store)
    record_cache = embeddings.load_cache(args.record_cache)
    query_cache = embeddings.load_cache(args.query_cache)
    idf, lex_stats = _load_lex(args, store)
    pools = (
        embeddings.load_pools(args.pools)
        if args.pools
        else [
            embeddings.dense_top_n(
                record_cache, query_cache.vector_for(q.id), args.pool_cap, store, q.id
            )
            for q in queries
        ]
    )
    qids = [q.id for q in queries]

    def build_arm(store_, cache_, pools_):
        if args.arm == "dense_sort":
            return bench_mod.make_dense_sort_arm(pools_)
        if args.arm == "mixer":
            _require(args, "checkpoint")
            params, cfg = mixer.load_checkpoint(args.checkpoint)
            return bench_mod.make_mixer_arm(pools_, queries, idf, lex_stats, params, cfg)
        if args.arm == "full_pairwise":
            qvecs = {q.id: query_cache.vector_for(q.id) for q in queries}
            return bench_mod.make_full_store_arm(store_, cache_, queries, qvecs, idf, lex_stats)
        raise InputError(f"unknown arm {args.arm!r}")

    if args.large_records:
        large_store = store_mod.ingest_jsonl(args.large_records)
        large_cache = embeddings.load_cache(args.large_record_cache)
        large_idf, large_stats = lexical.build_lex_cache(large_store)
        large_pools = [
            embeddings.dense_top_n(
                large_cache, query_cache.vector_for(q.id), args.pool_cap, large_store, q.id
            )
            for q in queries
        ]
        idf_small, stats_small = idf, lex_stats
        idf, lex_stats = large_idf, large_stats
        arm_large = build_arm(large_store, large_cache, large_pools)
        idf, lex_stats = idf_small, stats_small
        arm_small = build_arm(store, record_cache, pools)
        ratio = bench_mod.measure_cost_ratio(
            arm_small, arm_large, qids, len(store), len(large_store), args.warmup, args.arm
        )
        out = ratio.to_json()
    elif args.repeats > 1:
        reports = [
            bench_mod.measure_rerank_latency(
                build_arm(store, record_cache, pools), qids, args.warmup, args.arm
            )
            for _ in range(args.repeats)
        ]
        summary = bench_mod.summarize_repeats(reports)
        payload = json.loads(reports[0].to_json())
        payload.update(summary)
        out = json.dumps(payload, indent=2)
    else:
        report = bench_mod.measure_rerank_latency(
            build_arm(store, record_cache, pools), qids, args.warmup, args.arm
        )
        out = report.to_json()
    if args.out:
        Path(args.out).write_text(out + "\n")
    print(out)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = synth.SynthConfig(
        n_sessions=args.sessions,
        turns_per_session=args.turns,
        vocab_size=args.vocab_size,
        embed_dim=args.embed_dim,
        supersession_rate=args.supersession_rate,
        distractor_count=args.distractors,
        teacher_noise_sigma=args.teacher_noise,
        n_queries=args.n_queries,
        pool_cap=args.pool_cap,
        seed=args.seed,
    )
    corpus = synth.generate(cfg)
    paths = synth.emit(corpus, args.out)
    print(
        f"generated {len(corpus.store)} records, {len(corpus.queries)} queries, "
        f"{len(corpus.supersession_pairs)} supersession pairs -> {args.out}"
    )
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and canonicalize record/query JSONL")
    p.add_argument("--records", required=True)
    p.add_argument("--queries")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("embed-import", help="validate + renormalize a CMEC cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_import)

    p = sub.add_parser("lex-build", help="build the lexical sidecar cache")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lex_build)

    p = sub.add_parser("pool", help="dense top-N pools per query")
    p.add_argument("--records", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--record-cache", required=True)
    p.add_argument("--query-cache", required=True)
    p.add_argument("--pool-cap", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="distill the teacher into mixer params")
    for flag in ("--records", "--queries", "--pools", "--teacher", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--lex")
    p.add_argument("--report")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--pairs-per-query", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=8)
    _add_mixer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", help="score pools with a trained checkpoint")
    for flag in ("--records", "--queries", "--pools", "--checkpoint", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--lex")
    p.add_argument("--ablate", type=str, default="")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("edit-train", help="train the candidate-set editor")
    for flag in ("--records", "--queries", "--pools", "--scored", "--record-cache", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--lex")
    p.add_argument("--seed", type=int, default=23)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--ff-dim", type=int, default=128)
    p.set_defaults(func=cmd_edit_train)

    p = sub.add_parser("edit", help="apply a trained editor to scored pools")
    for flag in ("--records", "--queries", "--pools", "--scored", "--record-cache", "--checkpoint", "--out"):
        p.add_argument(flag, required=True)
    p.add_argument("--lex")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="score rankings / aggregate seeds / bootstrap deltas")
    p.add_argument("--rankings")
    p.add_argument("--records")
    p.add_argument("--queries")
    p.add_argument("--stale")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")
    p.add_argument("--bootstrap", nargs=2, metavar=("A_CSV", "B_CSV"))
    p.add_argument("--aggregate", nargs="+", metavar="SEED=CSV")
    p.add_argument("--slice", default="ALL")
    p.add_argument("--metric", default="recall_at_10")
    p.add_argument("--n-resamples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="degeneracy audit against trivial baselines")
    p.add_argument("--records", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--rankings", required=True)
    p.add_argument("--arm-name")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bench", help="reranking-only latency / cost ratio")
    p.add_argument("--arm", required=True, choices=["dense_sort", "mixer", "full_pairwise"])
    p.add_argument("--records", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--record-cache", required=True)
    p.add_argument("--query-cache", required=True)
    p.add_argument("--pools")
    p.add_argument("--checkpoint")
    p.add_argument("--lex")
    p.add_argument("--pool-cap", type=int, default=500)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--large-records", help="second store for the cost ratio")
    p.add_argument("--large-record-cache")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="generate an audited synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sessions", type=int, default=30)
    p.add_argument("--turns", type=int, default=10)
    p.add_argument("--vocab-size", type=int, default=400)
    p.add_argument("--embed-dim", type=int, default=768)
    p.add_argument("--supersession-rate", type=float, default=0.3)
    p.add_argument("--distractors", type=int, default=24)
    p.add_argument("--teacher-noise", type=float, default=0.0)
    p.add_argument("--n-queries", type=int, default=120)
    p.add_argument("--pool-cap", type=int, default=50)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_synth)

    for sp in sub.choices.values():
        if not any(a.dest == "manifest" for a in sp._actions):
            sp.add_argument("--manifest", help="JSON file providing default paths")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _load_manifest(args)
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegeneracyError as exc:
        print(f"degeneracy audit failed: {exc}", file=sys.stderr)
        return EXIT_DEGENERACY
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
