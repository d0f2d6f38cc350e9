"""Command-line entry point: ``mcmdpo <command> [options]``.

Every command takes ``--config`` (a JSON object of TrainConfig keys) and
flags that override it. Failures exit nonzero with one JSON diagnostic line
on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .clients import HttpLlmClient
from .io_utils import atomic_write_text
from .losses import TERMS
from .metrics import preference_accuracy
from .model import ModelParams
from .pipeline import (
    FilterRules,
    Manifest,
    build_preference_manifest,
    clean_posts,
    ingest,
    preference_record,
    read_manifest,
    write_manifest,
    write_posts,
)
from .rejection import STRATEGY_NAMES, facet_rngs, make_rejected_image, pick_context_index
from .synth import PROMPT, corrupt_alt_text, gen_dataset, write_dataset_file
from .text import Vocab, tokenize
from .training import (
    RunReport,
    Stopwatch,
    TrainConfig,
    TrainingError,
    embedding_rows,
    embeddings_csv,
    evaluate,
    generate_texts,
    items_from_manifest,
    pca_2d,
    restrategize,
    samples_from_posts,
    sft_examples,
    train_pref,
    train_sft,
)

log = logging.getLogger("mcmdpo")

SWEEP_KINDS = ("gamma", "noise_T", "strategy", "ablation")


class CliError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------


def load_config(args, stage: str) -> TrainConfig:
    data: dict = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise CliError("config file must hold a JSON object")
    data["stage"] = stage
    cfg = TrainConfig.from_dict(data)
    overrides = {
        "method": getattr(args, "method", None),
        "paradigm": getattr(args, "paradigm", None),
        "lr": getattr(args, "lr", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": getattr(args, "seed", None),
        "optimizer": getattr(args, "optimizer", None),
        "gamma": getattr(args, "gamma", None),
        "beta": getattr(args, "beta", None),
        "ablation": getattr(args, "ablation", None),
        "train_path": getattr(args, "train", None),
        "pref_path": getattr(args, "pref", None),
        "test_path": getattr(args, "test", None),
        "test_pref_path": getattr(args, "test_pref", None),
        "init_checkpoint": getattr(args, "init_checkpoint", None),
        "out_dir": getattr(args, "out_dir", None),
    }
    return cfg.with_overrides(**overrides)


def require(value, what: str):
    if value is None:
        raise CliError(f"{what} is required (flag or config key)")
    return value


def read_samples(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset {path} does not exist")
    return samples_from_posts(ingest(path).posts, base=path.parent)


def load_checkpoint(path) -> tuple[ModelParams, Vocab, str]:
    params = checkpoint.load(path)
    meta = checkpoint.read_meta(path)
    if "vocab" not in meta:
        raise CliError(f"checkpoint {path} carries no vocabulary")
    return params, Vocab(list(meta["vocab"])), meta.get("prompt", PROMPT)


def out_dir(cfg: TrainConfig) -> Path:
    d = Path(require(cfg.out_dir, "--out-dir"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_items(path, vocab: Vocab):
    return items_from_manifest(read_manifest(path).items, vocab)


# -- commands --------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    out = Path(args.out_dir)
    data = gen_dataset(args.seed, args.n_train, args.n_pref, args.n_test)
    for split in ("train", "pref", "test"):
        write_dataset_file(out / f"{split}.jsonl", getattr(data, split))
    atomic_write_text(out / "vocab.json", json.dumps(data.vocab.tokens) + "\n")
    strategy = TrainConfig(strategy=args.strategy, noise_T=args.noise_T).reject_strategy()
    splits = {"train": len(data.train), "pref": len(data.pref), "test": len(data.test)}
    for split, seed in (("pref", args.seed), ("test", args.seed + 1000)):
        samples = getattr(data, split)
        records = []
        for i, s in enumerate(samples):
            resp_rng, ctx_rng, img_rng = facet_rngs(seed, i)
            bad = corrupt_alt_text(s, resp_rng)
            j = pick_context_index([t.context for t in samples], i, ctx_rng, require_different=True)
            m_l = make_rejected_image(s.image, strategy, img_rng, pool=[t.image for t in samples], index=i)
            records.append(preference_record(s.id, PROMPT, s.image, m_l, s.context, samples[j].context, samples[j].id,
                                             s.alt_text, bad, strategy, "synthetic_world", "unverified"))
        write_manifest(out / f"{split}_manifest.jsonl", Manifest(records, splits, seed))
    log.info("wrote synthetic world (seed %d) to %s", args.seed, out)
    return 0


def cmd_build_data(args) -> int:
    out = Path(args.out_dir)
    src = Path(args.input)
    posts = ingest(src).posts
    grammar = HttpLlmClient() if args.grammar == "http" else None
    judge = HttpLlmClient() if args.judge == "http" else None
    rejecter = HttpLlmClient() if args.reject_client == "http" else None
    rules = FilterRules(min_alt_words=args.min_words)
    cleaned = clean_posts(posts, rules, args.dedup_threshold, grammar=grammar)
    write_posts(out / "clean.jsonl", cleaned.posts)
    atomic_write_text(out / "dropped.json", json.dumps(cleaned.dropped, indent=1, sort_keys=True) + "\n")
    strategy = TrainConfig(strategy=args.strategy, noise_T=args.noise_T).reject_strategy()
    manifest = build_preference_manifest(cleaned.posts, strategy, args.seed, judge=judge, reject_client=rejecter,
                                         base=src.parent)
    write_manifest(out / "pref_manifest.jsonl", manifest)
    log.info("kept %d of %d posts; %d preference items", len(cleaned.posts), len(posts), len(manifest.items))
    return 0


def cmd_sft(args) -> int:
    cfg = load_config(args, "sft")
    samples = read_samples(require(cfg.train_path, "--train"))
    if args.vocab:
        vocab = Vocab(json.loads(Path(args.vocab).read_text(encoding="utf-8")))
    else:
        words = {t for s in samples for t in tokenize(s.context) + tokenize(s.alt_text)} | set(tokenize(PROMPT))
        vocab = Vocab.build(words, size=cfg.model_config().vocab_size)
    if len(vocab) != cfg.model_config().vocab_size:
        raise CliError(f"vocabulary has {len(vocab)} tokens, model expects {cfg.model_config().vocab_size}")
    examples = sft_examples(samples, vocab, PROMPT)
    with Stopwatch() as sw:
        params = ModelParams.init(cfg.model_config())
        if cfg.init_checkpoint:
            params, _, _ = load_checkpoint(cfg.init_checkpoint)
        trained, epochs = train_sft(params, examples, cfg)
    d = out_dir(cfg)
    checkpoint.save(trained, d / "sft.ckpt.json", {"vocab": vocab.tokens, "prompt": PROMPT, "stage": "sft"})
    RunReport("sft", cfg.to_dict(), epochs, wall_time_s=sw.elapsed).write(d / "sft_report.json")
    return 0


def cmd_pref(args) -> int:
    cfg = load_config(args, "pref")
    sft, vocab, prompt = load_checkpoint(require(cfg.init_checkpoint, "--init-checkpoint"))
    items = load_items(require(cfg.pref_path, "--pref"), vocab)
    test_items = load_items(cfg.test_pref_path, vocab) if cfg.test_pref_path else None
    with Stopwatch() as sw:
        before = preference_accuracy(sft, test_items) if test_items else None
        res = train_pref(sft, items, cfg)
        after = preference_accuracy(res.params, test_items) if test_items else None
    d = out_dir(cfg)
    name = cfg.method
    checkpoint.save(res.params, d / f"{name}.ckpt.json", {"vocab": vocab.tokens, "prompt": prompt, "stage": "pref"})
    RunReport("pref", cfg.to_dict(), res.epochs, res.initial_loss, None, before, after,
              sw.elapsed).write(d / f"{name}_report.json")
    return 0


def cmd_eval(args) -> int:
    params, vocab, prompt = load_checkpoint(args.checkpoint)
    samples = read_samples(args.test)
    items = load_items(args.test_pref, vocab) if args.test_pref else None
    report = evaluate(params, samples, vocab, prompt, items, args.max_len)
    out = Path(args.out)
    report.write(out, out.with_suffix(".csv"))
    print(report.to_json())
    return 0


def _sweep_value(kind: str, raw: str):
    if kind == "gamma":
        v = float(raw)
        if v < 0:
            raise CliError(f"gamma grid value {raw!r} must be >= 0")
        return v
    if kind == "noise_T":
        v = int(raw)
        if not 0 <= v <= 1000:
            raise CliError(f"noise_T grid value {raw!r} outside [0, 1000]")
        return v
    if kind == "strategy":
        if raw.lower() not in STRATEGY_NAMES:
            raise CliError(f"unknown strategy {raw!r}")
        return raw.lower()
    from .losses import parse_ablation

    parse_ablation(raw)
    return raw


def cmd_sweep(args) -> int:
    cfg = load_config(args, "pref")
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    if not grid:
        raise CliError("sweep grid is empty")
    values = [_sweep_value(args.kind, g) for g in grid]
    sft, vocab, _ = load_checkpoint(require(cfg.init_checkpoint, "--init-checkpoint"))
    base_items = load_items(require(cfg.pref_path, "--pref"), vocab)
    test_items = load_items(cfg.test_pref_path, vocab) if cfg.test_pref_path else None
    rows = []
    for value in values:
        run_cfg, items = cfg, base_items
        if args.kind == "gamma":
            run_cfg = replace(cfg, gamma=value)
        elif args.kind == "ablation":
            run_cfg = replace(cfg, ablation=value)
        else:
            run_cfg = replace(cfg, noise_T=value) if args.kind == "noise_T" else replace(cfg, strategy=value)
            items = restrategize(base_items, cfg.seed, run_cfg.reject_strategy())
        res = train_pref(sft, items, run_cfg)
        last = res.epochs[-1]
        row = {args.kind: value, "loss": last.loss}
        row.update({t: last.terms.get(t, 0.0) for t in TERMS})
        row["pref_acc"] = preference_accuracy(res.params, test_items) if test_items else ""
        rows.append(row)
        log.info("sweep %s=%s: loss %.6f", args.kind, value, last.loss)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    atomic_write_text(args.out, buf.getvalue())
    return 0


def cmd_export_embeddings(args) -> int:
    params, vocab, prompt = load_checkpoint(args.checkpoint)
    samples = read_samples(args.samples)
    if len(samples) < 3:
        raise CliError("export-embeddings needs at least 3 samples")
    generated = generate_texts(params, samples, vocab, prompt, args.max_len)
    keys, vecs = embedding_rows(params, samples, generated, vocab, prompt)
    proj, _, warnings = pca_2d(vecs)
    for w in warnings:
        log.warning(w)
    atomic_write_text(args.out, embeddings_csv(keys, proj))
    return 0


# -- parser ----------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of TrainConfig keys")
    p.add_argument("--paradigm", choices=("P1", "P2", "P3", "P4"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--init-checkpoint")
    p.add_argument("--out-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcmdpo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write the synthetic shape-grid world")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-pref", type=int, default=128)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--strategy", default="diffusion", choices=sorted(STRATEGY_NAMES))
    p.add_argument("--noise-T", type=int, default=700)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-data", help="clean raw posts and build a preference manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-words", type=int, default=5)
    p.add_argument("--dedup-threshold", type=float, default=0.95)
    p.add_argument("--strategy", default="diffusion", choices=sorted(STRATEGY_NAMES))
    p.add_argument("--noise-T", type=int, default=700)
    p.add_argument("--grammar", choices=("none", "http"), default="none")
    p.add_argument("--judge", choices=("none", "http"), default="none")
    p.add_argument("--reject-client", choices=("none", "http"), default="none")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("sft", help="stage 1: supervised fine-tuning")
    _train_flags(p)
    p.add_argument("--train", help="dataset file (one JSON record per line)")
    p.add_argument("--vocab", help="JSON list of tokens; built from the training set when omitted")
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("pref", help="stage 2: DPO or MCM-DPO from an SFT checkpoint")
    _train_flags(p)
    p.add_argument("--method", choices=("dpo", "mcm_dpo"))
    p.add_argument("--pref", help="preference manifest")
    p.add_argument("--test-pref", help="held-out preference manifest for accuracy")
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ablation", help="e.g. -Multi, -Single+Pair")
    p.set_defaults(func=cmd_pref)

    p = sub.add_parser("eval", help="generate and score a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--test-pref")
    p.add_argument("--out", required=True, help="report JSON path; a CSV is written alongside")
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one preference run per grid value")
    _train_flags(p)
    p.add_argument("--kind", required=True, choices=SWEEP_KINDS)
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--method", choices=("dpo", "mcm_dpo"))
    p.add_argument("--pref")
    p.add_argument("--test-pref")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-embeddings", help="2-D PCA of final hidden states")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, TrainingError, ValueError, OSError, KeyError) as exc:
        diag = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(diag, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
