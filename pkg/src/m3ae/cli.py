"""Command-line entry points: ``m3ae <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config, require
from .corpus import ANSWERS, QUESTIONS, gen_corpus
from .data import read_manifest
from .errors import CheckpointIntegrityError, ConfigError
from .evaluation import (
    itm_score_matrix,
    finetune_itm,
    retrieval_rows,
    write_metrics_csv,
    write_score_matrix,
)
from .experiments import ablation, downstream_accuracy, layer_sweep, load_images, qa_set, workspace
from .gradcheck import grad_check
from .harness import load_checkpoint, prepare_text, train
from .model import M3AE
from .transformer import ModelConfig

TASKS = ("classify", "retrieve-zs", "retrieve-ft")
SPLITS = ("train", "eval")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(args, run: RunConfig | None, default: str) -> Path:
    out = Path(args.out) if args.out else (run.out if run is not None and run.out else Path(default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("missing required option --config")
    run = load_run_config(args.config)
    if args.seed is not None:
        run = replace(run, train=replace(run.train, seed=args.seed))
    return run


def _write_resolved(run: RunConfig, path: Path) -> None:
    path.write_text("\n".join(run.to_lines()) + "\n")


# -- commands ----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    side, patch = args.image_side, args.patch
    if args.config:
        run = load_run_config(args.config)
        side, patch = side or run.model.image_side, patch or run.model.patch
    side, patch = side or 16, patch or 4
    out = Path(args.out or "corpus")
    gen_corpus(args.n, args.seed if args.seed is not None else 0, side, out, patch=patch,
               unique=args.unique, noise=args.noise)
    print(out / "manifest.tsv")
    return 0


def cmd_pretrain(args) -> int:
    run = _load(args)
    require(run, "corpus")
    if args.steps is not None:
        run = replace(run, train=replace(run.train, total_steps=args.steps))
    out = _out_dir(args, run, "run")
    ws = workspace(run)
    model = M3AE(ws.model_cfg, seed=run.train.seed)
    reports = train(model, ws.dataset, run.train, log_path=out / "metrics.csv",
                    checkpoint_path=out / "model.ckpt", vocab=ws.vocab)
    _write_resolved(run, out / "config.resolved.txt")
    print(f"steps={len(reports)} initial_total={reports[0].total:.6f} final_total={reports[-1].total:.6f}")
    return 0


def _retrieval_pool(manifest: Path, size: int) -> list[int]:
    """First ``size`` records with distinct captions (the diagonal must be the only match)."""
    seen, keep = set(), []
    for i, (_, cap) in enumerate(read_manifest(manifest)):
        if cap not in seen:
            seen.add(cap)
            keep.append(i)
        if len(keep) == size:
            return keep
    raise ConfigError(f"{manifest} has only {len(keep)} distinct captions; pool_size={size}")


def cmd_eval(args) -> int:
    run = _load(args)
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = ckpt.model, ckpt.vocab
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; cannot tokenize evaluation text")
    if len(vocab) != model.config.vocab_size:
        raise ConfigError(f"checkpoint vocabulary ({len(vocab)}) does not match its model ({model.config.vocab_size})")
    manifest = require(run, "corpus" if args.split == "train" else "eval_corpus")
    seed = run.train.seed
    out = _out_dir(args, run, "eval")
    model.eval()
    if args.task == "classify":
        missing = {w for q in QUESTIONS.values() for w in q.split()} | {w for a in ANSWERS for w in a.split()}
        missing -= set(vocab.tokens)
        if missing:
            raise ConfigError(f"checkpoint vocabulary lacks task words {sorted(missing)[:5]}")
        train_set = qa_set(require(run, "corpus"), vocab, model.config)
        eval_set = train_set if args.split == "train" else qa_set(manifest, vocab, model.config)
        tr, ev = downstream_accuracy(model, train_set, eval_set, run, seed)
        rows = [("classify", args.split, "accuracy", ev, seed)]
    else:
        pool = _retrieval_pool(manifest, args.pool_size or run.pool_size)
        for k in args.ks:
            if not 1 <= k <= len(pool):
                raise ValueError(f"K={k} outside [1, {len(pool)}]")
        records = read_manifest(manifest)
        images = load_images(manifest, model.config)[pool]
        ids = np.stack([prepare_text(records[i][1], vocab, model.config) for i in pool])
        if len({len(r) for r in ids}) != 1:
            raise ConfigError("retrieval pool captions must share one length")
        head = None
        if args.task == "retrieve-ft":
            head = finetune_itm(model, images, ids, epochs=run.finetune_steps, lr=run.finetune_lr, seed=seed)
        sm = itm_score_matrix(model, images, ids, head)
        sm.image_ids = sm.text_ids = list(pool)
        rows = retrieval_rows(sm, args.task, args.split, seed, ks=args.ks)
        if args.scores:
            write_score_matrix(out / f"scores_{args.task}_{args.split}.csv", sm)
    path = out / f"eval_{args.task}_{args.split}.csv"
    write_metrics_csv(path, rows)
    print(path)
    return 0


def cmd_layer_sweep(args) -> int:
    run = _load(args)
    require(run, "corpus")
    ks = args.ks if args.ks is not None else run.sweep_layers
    out = _out_dir(args, run, "layer_sweep")
    report = layer_sweep(run, ks, seed=run.train.seed)
    for p in report.write(out):
        print(p)
    return 0


def cmd_ablation(args) -> int:
    run = _load(args)
    require(run, "corpus")
    out = _out_dir(args, run, "ablation")
    report = ablation(run, seed=run.train.seed)
    for p in report.write(out):
        print(p)
    return 0


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = grad_check(ModelConfig.tiny(), seed=seed)
    tol = {"float32": 1e-3, "float64": 1e-5}
    ok = True
    lines = []
    for name, r in results.items():
        passed = r.passed(tol[name])
        ok &= passed
        lines.append([name, f"{r.max_rel_error:.3e}", tol[name], r.worst, r.probes, "pass" if passed else "FAIL"])
        print(f"{name}: max_rel_error={r.max_rel_error:.3e} (tol {tol[name]:g}) worst={r.worst} {'pass' if passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "grad_check.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dtype", "max_rel_error", "tolerance", "worst", "probes", "result"])
            w.writerows(lines)
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="m3ae", description="Masked multi-modal pre-training at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="render a synthetic image-caption corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--image-side", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--unique", action="store_true", help="no repeated scenes (n <= 48)")
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train and write checkpoint + metrics")
    p.add_argument("--steps", type=int, help="overrides total_steps")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a downstream task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--split", choices=SPLITS, default="eval")
    p.add_argument("--ks", type=_ints, default=(1, 5, 10))
    p.add_argument("--pool-size", type=int)
    p.add_argument("--scores", action="store_true", help="also write the full score matrix")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("layer-sweep", parents=[common], help="pre-train per MIM layer index k")
    p.add_argument("--ks", type=_ints)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("ablation", parents=[common], help="MIM x MLM grid with ITM on")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the full loss")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointIntegrityError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
