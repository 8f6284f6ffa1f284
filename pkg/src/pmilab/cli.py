"""Command-line surface for the full pipeline.

Subcommands: synth (generate a synthetic dataset), embed (corpus -> embedded
pairs), train, eval, score, compare, serve. Every run directory receives a
snapshot of the effective merged configuration, and artifacts carry no
timestamps, so reruns with identical flags are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, synthetic, trainer
from .core import (
    DataError,
    DivergenceError,
    EmbeddedPair,
    GENERATOR_NAME,
    POSITIVE,
    TrainConfig,
    child_rng,
)
from .ingest import (
    ENV_ENDPOINT,
    ENV_MODEL,
    EmbeddingClient,
    ProviderConfig,
    build_pairs,
    load_annotated_pairs,
    load_corpus,
    render_prompt,
    split_dataset,
)
from .metrics import format_table
from .sampling import NegativePolicy
from .scorer import (
    ADAM_DEFAULTS,
    learning_rate,
    load_checkpoint,
    pmis_score_batch,
    save_checkpoint,
)
from .synthetic import SyntheticEmbedConfig
from .trainer import evaluate, load_bundle, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fractions(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return parts[0], parts[1], parts[2]


def _add_provider_flags(p: argparse.ArgumentParser):
    p.add_argument(
        "--endpoint",
        default=os.environ.get(ENV_ENDPOINT, "stub"),
        help="embedding endpoint URL, or 'stub'/'stub:<dim>' for the offline embedder",
    )
    p.add_argument(
        "--model",
        default=os.environ.get(ENV_MODEL, "stub-gaussian-64"),
        help="embedding model name (part of the cache key)",
    )
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--cache-dir", default=None)


def _provider_config(args, stub_dim: int | None = None) -> ProviderConfig:
    return ProviderConfig(
        endpoint=args.endpoint,
        model_name=args.model,
        batch_size=args.batch_size,
        timeout=args.timeout,
        max_retries=args.max_retries,
        cache_dir=args.cache_dir,
        stub_dim=stub_dim or 64,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="pmilab", description=__doc__)
    parser.add_argument("--config", default=None, help="JSON config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic embedded dataset")
    p.add_argument("--family", choices=synthetic.FAMILIES, default="diagonal")
    p.add_argument("--K", type=int, default=20)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--n-blocks", type=int, default=4)
    p.add_argument("--dirichlet-alpha", type=float, default=None,
                   help="independent family: draw marginals from Dirichlet(alpha)")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--embed-mode", choices=synthetic.EMBED_MODES, default="onehot_concat")
    p.add_argument("--proto-dim", type=int, default=64)
    p.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="embed a dialogue corpus into pair vectors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=("jsonl", "csv"), default=None)
    p.add_argument("--fractions", type=_fractions, default=(0.6, 0.2, 0.2))
    p.add_argument("--max-chars", type=int, default=None,
                   help="truncate contexts (tail kept) and responses (head kept)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a scorer on an embedded dataset")
    p.add_argument("--data", required=True, help="dataset directory from synth/embed")
    p.add_argument("--objective", default="pmiscore")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--neg-per-pos", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--per-round", type=int, default=None)
    p.add_argument("--in-dialogue-prob", type=float, default=None)
    p.add_argument("--in-dialogue-count", type=int, default=None)
    p.add_argument(
        "--negatives",
        choices=("flat", "pooled", "dialogue-fixed", "dialogue-mixed"),
        default=None,
        help="negative-sampling preset; individual flags override its fields",
    )
    p.add_argument("--lr-numerator", type=float, default=1e-3 * 1024)
    p.add_argument("--softcap", type=float, default=20.0)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="dataset dir or embedded jsonl file")
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--pairs", default=None,
                   help="text pairs file (context/response[/annot_relevant_mean])")
    p.add_argument("--metrics", default=None,
                   help="comma list: mse,pearson,spearman,roc_auc,spearman_human,mean_abs_score")
    p.add_argument("--scatter", default=None, help="write 'target<TAB>score' rows here")
    p.add_argument("--out", default=None, help="write the report JSON here")
    _add_provider_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="print one PMI score per (context, response) line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", default="-",
                   help="JSONL with context/response fields, or TSV; '-' for stdin")
    _add_provider_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compare", help="sweep objectives x seeds over datasets")
    p.add_argument("--data", action="append", required=True)
    p.add_argument("--objectives", default="pmiscore,mine,infonce,kde")
    p.add_argument("--seeds", default="42")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--neg-per-pos", type=int, default=4)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--pool-size", type=int, default=0)
    p.add_argument("--per-round", type=int, default=0)
    p.add_argument("--lr-numerator", type=float, default=1e-3 * 1024)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("serve", help="run the HTTP scoring/embedding service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--model", default="stub-gaussian-64")
    p.set_defaults(func=cmd_serve)

    return parser


def _snapshot(args, extra: dict | None = None) -> dict:
    skip = {"func", "command", "config"}
    snap = {k: v for k, v in vars(args).items() if k not in skip}
    for key, val in list(snap.items()):
        if isinstance(val, tuple):
            snap[key] = list(val)
    if extra:
        snap.update(extra)
    return snap


def cmd_synth(args) -> int:
    if args.family == "diagonal":
        spec = synthetic.make_diagonal(args.K, args.eps)
    elif args.family == "block":
        spec = synthetic.make_block(args.K, args.n_blocks, args.eps)
    else:
        rng = child_rng(args.seed, "marginals") if args.dirichlet_alpha else None
        spec = synthetic.make_independent(args.K, args.dirichlet_alpha, rng)
    embed_cfg = SyntheticEmbedConfig(
        noise_sigma=args.noise_sigma,
        mode=args.embed_mode,
        proto_dim=args.proto_dim,
        seed=args.seed,
    )
    pairs = synthetic.sample_pairs(spec, args.n, child_rng(args.seed, "sample"))
    embedded = synthetic.embed_dataset(spec, pairs, embed_cfg, child_rng(args.seed, "embed"))
    train_p, val_p, test_p = split_dataset(embedded, args.fractions, args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mi = synthetic.mutual_information(spec)
    meta = {
        "kind": "synthetic",
        "family": args.family,
        "K": args.K,
        "eps": args.eps,
        "n_blocks": args.n_blocks if args.family == "block" else None,
        "dirichlet_alpha": args.dirichlet_alpha,
        "n": args.n,
        "fractions": list(args.fractions),
        "seed": args.seed,
        "embed": embed_cfg.to_dict(),
        "mi": mi,
        "generator": GENERATOR_NAME,
    }
    dataio.write_json(out / "meta.json", meta)
    for name, part in (("train", train_p), ("val", val_p), ("test", test_p)):
        dataio.write_embedded(out / f"{name}.jsonl", part)
    print(
        f"family={args.family} K={args.K} MI={mi:.6f} nats | "
        f"splits {len(train_p)}/{len(val_p)}/{len(test_p)} -> {out}"
    )
    return EXIT_OK


def _truncate(text: str, max_chars: int | None, keep: str) -> str:
    if max_chars is None or len(text) <= max_chars:
        return text
    return text[-max_chars:] if keep == "tail" else text[:max_chars]


def cmd_embed(args) -> int:
    dialogues = load_corpus(args.corpus, args.format)
    positives = []
    for dialogue in dialogues:
        positives.extend(build_pairs(dialogue))
    if not positives:
        raise DataError("corpus produced no (context, response) pairs")
    train_p, val_p, test_p = split_dataset(
        positives, args.fractions, args.seed, group_of=lambda p: p.dialogue_id
    )

    client = EmbeddingClient(_provider_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pair_rows = []
    dim = None
    for split_name, part in (("train", train_p), ("val", val_p), ("test", test_p)):
        prompts = [
            render_prompt(
                _truncate(p.context, args.max_chars, "tail"),
                _truncate(p.response, args.max_chars, "head"),
            )
            for p in part
        ]
        vectors = client.embed(prompts) if prompts else np.zeros((0, 0))
        embedded = [
            EmbeddedPair(vector=vec, label=POSITIVE, group_id=p.dialogue_id)
            for vec, p in zip(vectors, part)
        ]
        if embedded:
            dim = embedded[0].dim
        dataio.write_embedded(out / f"{split_name}.jsonl", embedded)
        for p in part:
            pair_rows.append(
                {
                    "context": p.context,
                    "response": p.response,
                    "dialogue_id": p.dialogue_id,
                    "split": split_name,
                }
            )
    dataio.write_jsonl(out / "pairs.jsonl", pair_rows)
    dataio.write_jsonl(
        out / "dialogues.jsonl", [{"id": d.id, "turns": d.turns} for d in dialogues]
    )
    meta = {
        "kind": "corpus",
        "corpus": str(args.corpus),
        "model": args.model,
        "endpoint_kind": "stub" if client.cfg.is_stub else "remote",
        "dim": dim,
        "max_chars": args.max_chars,
        "fractions": list(args.fractions),
        "seed": args.seed,
        "counts": {
            "dialogues": len(dialogues),
            "train": len(train_p),
            "val": len(val_p),
            "test": len(test_p),
        },
        "generator": GENERATOR_NAME,
    }
    dataio.write_json(out / "meta.json", meta)
    print(
        f"embedded {len(positives)} pairs from {len(dialogues)} dialogues "
        f"(dim={dim}, provider requests={client.provider_requests}) -> {out}"
    )
    return EXIT_OK


_POLICY_PRESETS = {
    "flat": NegativePolicy.flat,
    "pooled": NegativePolicy.pooled,
    "dialogue-fixed": NegativePolicy.dialogue_fixed,
    "dialogue-mixed": NegativePolicy.dialogue_mixed,
}


def _build_policy(args, corpus_mode: bool) -> NegativePolicy:
    if args.negatives is not None:
        base = _POLICY_PRESETS[args.negatives]().to_dict()
    elif corpus_mode:
        base = NegativePolicy.dialogue_fixed().to_dict()
    else:
        base = NegativePolicy.flat().to_dict()
    overrides = {
        "per_pos": args.neg_per_pos,
        "rounds": args.rounds,
        "pool_size": args.pool_size,
        "per_round": args.per_round,
        "in_dialogue_prob": args.in_dialogue_prob,
        "in_dialogue_count": args.in_dialogue_count,
    }
    for key, val in overrides.items():
        if val is not None:
            base[key] = val
    return NegativePolicy.from_dict(base)


def cmd_train(args) -> int:
    bundle = load_bundle(args.data)
    corpus_mode = bundle.meta.get("kind") == "corpus"
    policy = _build_policy(args, corpus_mode)
    config = TrainConfig(
        objective=args.objective,
        epochs=args.epochs,
        batch_positives=args.batch,
        neg_per_pos=policy.negatives_per_round,
        rounds=policy.rounds,
        base_lr_numerator=args.lr_numerator,
        seed=args.seed,
        softcap=args.softcap,
        patience=args.patience,
    )

    client = None
    val_set = list(bundle.val)
    if corpus_mode:
        stub_dim = bundle.meta.get("dim")
        client = EmbeddingClient(_provider_config(args, stub_dim=stub_dim))
        val_set = val_set + bundle.corpus_val_negatives(policy, args.seed, client)
    source = bundle.make_source(policy, args.seed, client=client)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = bundle.train[0].dim
    snapshot = _snapshot(
        args,
        {
            "train_config": config.to_dict(),
            "policy": policy.to_dict(),
            "effective_lr": learning_rate(d, config.base_lr_numerator),
            "dataset_meta": bundle.meta,
        },
    )
    dataio.write_json(out / "config.json", snapshot)

    checkpoint_meta = {
        "objective": config.objective,
        "seed": config.seed,
        "generator": GENERATOR_NAME,
        "optimizer": dict(ADAM_DEFAULTS),
        "lr": learning_rate(d, config.base_lr_numerator),
        "embed": {
            "kind": bundle.meta.get("kind"),
            "model": bundle.meta.get("model"),
            "dim": d,
        },
    }

    try:
        state = train(bundle.train, val_set, config, source)
    except DivergenceError as exc:
        if exc.state is not None:
            meta = dict(checkpoint_meta)
            meta.update({"diverged": True, "best_epoch": exc.state.best_epoch})
            save_checkpoint(out / "checkpoint.json", exc.state.best_params, meta)
            dataio.write_jsonl(out / "history.jsonl", exc.state.history)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED

    checkpoint_meta.update(
        {
            "best_epoch": state.best_epoch,
            "best_val_metric": state.best_val_metric,
            "val_metric_name": state.metric_name,
        }
    )
    save_checkpoint(out / "checkpoint.json", state.best_params, checkpoint_meta)
    dataio.write_jsonl(out / "history.jsonl", state.history)
    report = {
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_metric": state.best_val_metric,
        "val_metric_name": state.metric_name,
        "n_train": len(bundle.train),
        "n_val": len(val_set),
        "d": d,
        "objective": config.objective,
        "seed": config.seed,
    }
    dataio.write_json(out / "report.json", report)
    print(
        f"trained {config.objective} on {len(bundle.train)} positives "
        f"({state.epoch} epochs): best {state.metric_name}="
        f"{state.best_val_metric:.6f} @ epoch {state.best_epoch} -> {out}"
    )
    return EXIT_OK


def _auto_metrics(eval_set) -> tuple[str, ...]:
    metrics: list[str] = []
    if any(p.target_pmi is not None for p in eval_set):
        metrics += ["mse", "pearson", "spearman"]
    labels = {p.label for p in eval_set}
    if len(labels) == 2:
        metrics.append("roc_auc")
    return tuple(metrics) or ("mean_abs_score",)


def cmd_eval(args) -> int:
    params, _meta = load_checkpoint(args.checkpoint)
    annotations = None
    if args.pairs is not None:
        pairs = load_annotated_pairs(args.pairs)
        client = EmbeddingClient(_provider_config(args, stub_dim=params.d))
        prompts = [render_prompt(p.context, p.response) for p, _ in pairs]
        X = client.embed(prompts)
        if X.shape[1] != params.d:
            raise DataError(
                f"embedding dim {X.shape[1]} does not match checkpoint dim {params.d}"
            )
        eval_set = [
            EmbeddedPair(vector=vec, label=p.label, group_id=p.dialogue_id)
            for vec, (p, _) in zip(X, pairs)
        ]
        annots = [a for _, a in pairs]
        if all(a is not None for a in annots):
            annotations = np.array(annots, dtype=np.float64)
    elif args.data is not None:
        data_path = Path(args.data)
        if data_path.is_dir():
            eval_set = dataio.read_split(data_path, args.split)
        else:
            eval_set = dataio.read_embedded(data_path)
    else:
        raise DataError("eval needs --data or --pairs")

    if eval_set and eval_set[0].dim != params.d:
        raise DataError(
            f"data dim {eval_set[0].dim} does not match checkpoint dim {params.d}"
        )
    if args.metrics:
        requested = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    else:
        requested = _auto_metrics(eval_set)
        if annotations is not None:
            requested = requested + ("spearman_human",)
    report = evaluate(params, eval_set, requested, annotations=annotations)
    doc = report.to_dict()
    print(format_table([doc]))
    if args.out:
        dataio.write_json(args.out, doc)
    if args.scatter:
        from .core import stack_vectors

        scores = pmis_score_batch(params, stack_vectors(eval_set))
        lines = [
            f"{p.target_pmi}\t{s}"
            for p, s in zip(eval_set, scores)
            if p.target_pmi is not None
        ]
        Path(args.scatter).write_text("\n".join(lines) + ("\n" if lines else ""))
    return EXIT_OK


def _read_score_input(path: str) -> list[tuple[str, str]]:
    if path == "-":
        lines = sys.stdin.read().splitlines()
    else:
        source = Path(path)
        if not source.exists():
            raise DataError(f"input file not found: {source}")
        lines = source.read_text(encoding="utf-8").splitlines()
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.lstrip().startswith("{"):
            row = json.loads(line)
            context, response = row.get("context"), row.get("response")
        elif "\t" in line:
            context, _, response = line.partition("\t")
        else:
            raise DataError(f"line {lineno}: expected JSON or 'context<TAB>response'")
        if not context or not response:
            raise DataError(f"line {lineno}: missing context or response")
        pairs.append((context, response))
    if not pairs:
        raise DataError("no input pairs to score")
    return pairs


def cmd_score(args) -> int:
    params, _meta = load_checkpoint(args.checkpoint)
    pairs = _read_score_input(args.input)
    client = EmbeddingClient(_provider_config(args, stub_dim=params.d))
    prompts = [render_prompt(c, r) for c, r in pairs]
    X = client.embed(prompts)
    if X.shape[1] != params.d:
        raise DataError(
            f"embedding dim {X.shape[1]} does not match checkpoint dim {params.d}"
        )
    for score in pmis_score_batch(params, X):
        print(f"{score:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    objectives = [o.strip() for o in args.objectives.split(",") if o.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    base = TrainConfig(
        epochs=args.epochs,
        batch_positives=args.batch,
        neg_per_pos=args.neg_per_pos,
        rounds=args.rounds,
        base_lr_numerator=args.lr_numerator,
    )
    if args.pool_size:
        policy = NegativePolicy(
            per_pos=args.per_round or args.neg_per_pos,
            pool_size=args.pool_size,
            rounds=args.rounds,
            per_round=args.per_round,
        )
    else:
        policy = NegativePolicy.flat(per_pos=args.neg_per_pos, rounds=args.rounds)
    results = trainer.compare(args.data, objectives, seeds, base, policy)
    rows = trainer.comparison_rows(results)
    print(format_table(rows))
    if args.out:
        dataio.write_json(args.out, results)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(
        embed_dim=args.dim,
        embed_model=args.model,
        checkpoint_path=args.checkpoint,
    )
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()

    # --config merges below explicit flags: load it, install as defaults.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        try:
            file_cfg = dataio.read_json(cfg_path)
        except DataError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        flat = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        parser.set_defaults(**flat)
        for action in parser._subparsers._group_actions:  # noqa: SLF001
            for sub in action.choices.values():
                known = {a.dest for a in sub._actions}  # noqa: SLF001
                sub.set_defaults(**{k: v for k, v in flat.items() if k in known})

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
