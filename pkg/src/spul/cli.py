"""``spul`` command line: data generation, partitioning, training, unlearning, evaluation, sweeps."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigKeyError, RunConfig, parse_assignments
from .pipeline import MissingInput


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [section] key = value settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any setting, e.g. --set unlearn.beta=0.1 (repeatable)")
    p.add_argument("--out", dest="out_dir", help="output directory (default: runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spul", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic train/test corpus as JSONL")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--task", choices=["sentiment", "mcqa"])

    p = sub.add_parser("partition", help="split the corpus into forget and retain sets")
    _common(p)
    p.add_argument("--protocol", choices=["entities", "clusters"])
    p.add_argument("--lexicon", help="comma-separated entity names (entities protocol)")
    p.add_argument("--k", type=int, help="number of clusters (clusters protocol)")
    p.add_argument("--n-chosen", type=int, help="clusters to forget (clusters protocol)")

    p = sub.add_parser("train-base", help="train the base model on the full training set")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("unlearn", help="train a forgetting prompt against the frozen base model")
    _common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--p", type=int, help="prompt length")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tau", type=float, help="fraction of the forget-train set to use")
    p.add_argument("--tag", default="spul", help="subdirectory under unlearn/")

    p = sub.add_parser("baseline", help="fine-tuning baseline with a learning-rate search")
    _common(p)
    p.add_argument("--method", choices=["ga", "rl", "ga-kl", "ga-gd"])
    p.add_argument("--lr-grid", help="comma-separated learning rates")

    p = sub.add_parser("eval", help="score a model, optionally with a prompt, on the four subsets")
    _common(p)
    p.add_argument("--model", help="model checkpoint (default: <out>/base.ckpt)")
    p.add_argument("--prompt", help="prompt checkpoint; omit to evaluate the model alone")
    p.add_argument("--split", help="split manifest (default: <out>/split.json)")
    p.add_argument("--report", help="where to write the metrics JSON")
    p.add_argument("--embeddings", help="also export answer-position embeddings to this CSV")

    p = sub.add_parser("sweep", help="run unlearning over a parameter grid")
    _common(p)
    p.add_argument("--grid", nargs="+", required=True, metavar="NAME=VALUES",
                   help="e.g. alpha=0.1,0.5,1.0 beta=0,0.1,0.5,1.0 | p=10..50 | tau=0.25,0.5,1.0")
    p.add_argument("--name", default="sweep", help="CSV file name under sweep/")
    return parser


_FLAG_KEYS = {
    "n_train": "data.n_train", "n_test": "data.n_test", "task": "data.task",
    "protocol": "split.protocol", "lexicon": "split.lexicon", "k": "split.k", "n_chosen": "split.n_chosen",
    "tau": "split.tau", "alpha": "unlearn.alpha", "beta": "unlearn.beta", "p": "unlearn.p",
    "method": "baseline.method", "lr_grid": "baseline.lr_grid",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < --set < dedicated flags."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.update(parse_assignments(args.set))
    flags = {"seed": args.seed, "out_dir": args.out_dir}
    for attr, key in _FLAG_KEYS.items():
        if hasattr(args, attr):
            flags[key] = getattr(args, attr)
    section = {"train-base": "base", "unlearn": "unlearn"}.get(args.command)
    if section:
        flags[f"{section}.lr"] = args.lr
        flags[f"{section}.epochs"] = args.epochs
    cfg.update(flags)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return _dispatch(args, cfg)
    except MissingInput as exc:
        parser.exit(2, f"spul {args.command}: error: {exc}\n")
    except (ConfigKeyError, ValueError) as exc:
        parser.exit(2, f"spul {args.command}: error: {exc}\n")
    return 0


def _dispatch(args, cfg: RunConfig) -> int:
    cmd = args.command
    if cmd == "gen-data":
        train, test = pipeline.gen_data(cfg)
        print(f"wrote {train} and {test} (config {cfg.digest()[:12]})")
    elif cmd == "partition":
        path = pipeline.partition(cfg)
        split = pipeline.load_split(cfg, path, apply_tau=False)
        sizes = ", ".join(f"{k}={len(v)}" for k, v in split.subsets().items())
        print(f"wrote {path}: {sizes}")
    elif cmd == "train-base":
        path = pipeline.train_base_stage(cfg)
        print(f"wrote {path}")
    elif cmd == "unlearn":
        res = pipeline.unlearn_stage(cfg, tag=args.tag)
        print(res.report.table())
        print(f"wrote {res.directory}")
    elif cmd == "baseline":
        best, cells, out = pipeline.baseline_stage(cfg)
        for c in cells:
            print(f"lr={c.lr:g}: retain {c.report.acc('train_retain'):.2f} forget {c.report.acc('train_forget'):.2f}")
        print(best.report.table())
        print(f"best lr {best.lr:g}; wrote {out}")
    elif cmd == "eval":
        report = pipeline.eval_stage(cfg, args.model, args.prompt, args.split, args.report, args.embeddings)
        print(report.table())
    elif cmd == "sweep":
        grid = pipeline.parse_grid(args.grid)
        path, failed = pipeline.sweep(cfg, grid, name=args.name)
        print(path.read_text(encoding="utf-8"), end="")
        if failed:
            print(f"{failed} cell(s) failed", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
