"""File-based pipeline stages shared by the command line and the demo scripts.

Layout under ``out_dir``::

    data/train.jsonl, data/test.jsonl, data/meta.json
    split.json                       forget/retain membership
    base.ckpt                        base model
    unlearn/<tag>/prompt.ckpt        prompt bank + metrics.json, efficiency.json, log.json
    baseline/<method>/model.ckpt     fine-tuned copy + metrics.json, grid.csv
    sweep/<name>.csv                 one row per sweep cell

Every JSON artifact carries the run's config digest and seed.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .baselines import BaselineConfig, save_baseline, search_lr
from .config import RunConfig, parse_floats
from .data import (
    UnlearnSplit,
    kmeans_cosine,
    load_jsonl,
    load_manifest,
    make_corpus,
    partition_by_clusters,
    partition_by_entities,
    save_jsonl,
    save_manifest,
    subsample_forget,
)
from .evaluation import (
    efficiency_report,
    evaluate_matrix,
    export_embeddings,
    mean_pooled_embeddings,
)
from .lm import ModelConfig, TinyLM, train_base
from .prompt_unlearn import (
    PromptBank,
    UnlearnConfig,
    UnlearnDiverged,
    count_trainable,
    unlearn_train,
)
from .seeding import substream

logger = logging.getLogger(__name__)


class MissingInput(FileNotFoundError):
    """A stage needs an artifact that an earlier stage has not produced."""

    def __init__(self, path, hint: str):
        super().__init__(f"missing {path}; {hint}")
        self.path = path
        self.hint = hint


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _stamp(cfg: RunConfig) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed}


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInput(path, hint)
    return path


# --------------------------------------------------------------------------
# data and splits
# --------------------------------------------------------------------------
def gen_data(cfg: RunConfig) -> tuple[Path, Path]:
    d = cfg.section("data")
    train, test = make_corpus(d["n_train"], d["n_test"], seed=cfg.seed, n_entities=d["n_entities"],
                              balance=d["balance"], entity_rate=d["entity_rate"], task=d["task"],
                              stance_rate=d["stance_rate"])
    root = cfg.out_dir / "data"
    save_jsonl(train, root / "train.jsonl")
    save_jsonl(test, root / "test.jsonl")
    _write_json(root / "meta.json", {**_stamp(cfg), "data": d, "n_train": len(train), "n_test": len(test)})
    return root / "train.jsonl", root / "test.jsonl"


def load_data(cfg: RunConfig):
    root = cfg.out_dir / "data"
    hint = "run `spul gen-data` first (or place train.jsonl/test.jsonl there)"
    train = load_jsonl(_require(root / "train.jsonl", hint))
    test = load_jsonl(_require(root / "test.jsonl", hint))
    return train, test


def partition(cfg: RunConfig, model: TinyLM | None = None) -> Path:
    """Write ``split.json``. The cluster protocol embeds examples with the base model."""
    train, test = load_data(cfg)
    s = cfg.section("split")
    if s["protocol"] == "entities":
        lexicon = [w for w in s["lexicon"].split(",") if w.strip()]
        split = partition_by_entities(train, test, lexicon)
    elif s["protocol"] == "clusters":
        model = model or load_base(cfg)
        tr_emb = mean_pooled_embeddings(model, train)
        te_emb = mean_pooled_embeddings(model, test)
        clusters = kmeans_cosine(tr_emb, s["k"], seed=cfg.seed)
        n_chosen = min(s["n_chosen"], clusters.k)
        chosen = sorted(substream(cfg.seed, "split").choice(clusters.k, size=n_chosen, replace=False).tolist())
        split = partition_by_clusters(train, test, clusters, chosen, tr_emb, te_emb)
    else:
        raise ValueError(f"unknown split protocol {s['protocol']!r}; use entities or clusters")
    path = cfg.out_dir / "split.json"
    save_manifest(split, path, "data/train.jsonl", "data/test.jsonl", _stamp(cfg))
    return path


def load_split(cfg: RunConfig, path=None, apply_tau: bool = True) -> UnlearnSplit:
    path = Path(path) if path else cfg.out_dir / "split.json"
    manifest = load_manifest(_require(path, "run `spul partition` first"))
    base = path.parent
    train = load_jsonl(_require(base / manifest["train_path"], "run `spul gen-data` first"))
    test = load_jsonl(_require(base / manifest["test_path"], "run `spul gen-data` first"))
    split = UnlearnSplit.from_manifest(manifest, train, test)
    tau = cfg["split.tau"]
    if apply_tau and tau < 1.0:
        split = subsample_forget(split, tau, seed=cfg.seed)
    return split


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------
def model_config(cfg: RunConfig) -> ModelConfig:
    m = cfg.section("model")
    return ModelConfig(d=m["d"], n_layers=m["n_layers"], n_heads=m["n_heads"], context=m["context"],
                       positional=m["positional"])


def train_base_stage(cfg: RunConfig) -> Path:
    train, _ = load_data(cfg)
    b = cfg.section("base")
    model, log = train_base(train, config=model_config(cfg), epochs=b["epochs"], lr=b["lr"], seed=cfg.seed,
                            batch_size=b["batch_size"], prefix_rate=b["prefix_rate"], lm_weight=b["lm_weight"])
    path = cfg.out_dir / "base.ckpt"
    model.freeze().save(path, {**_stamp(cfg), "method": "base", "epoch_loss": log.epoch_loss})
    return path


def load_base(cfg: RunConfig, path=None) -> TinyLM:
    path = Path(path) if path else cfg.out_dir / "base.ckpt"
    return TinyLM.load(_require(path, "run `spul train-base` first")).freeze()


def unlearn_config(cfg: RunConfig) -> UnlearnConfig:
    u = cfg.section("unlearn")
    return UnlearnConfig(alpha=u["alpha"], beta=u["beta"], p=u["p"], lr=u["lr"], epochs=u["epochs"],
                         batch_size=u["batch_size"], seed=cfg.seed, init=u["init"],
                         optimizer=u["optimizer"], momentum=u["momentum"])


# --------------------------------------------------------------------------
# unlearning, baselines, evaluation
# --------------------------------------------------------------------------
@dataclass
class UnlearnResult:
    bank: PromptBank
    report: object
    directory: Path


def unlearn_stage(cfg: RunConfig, tag: str = "spul", model: TinyLM | None = None,
                  split: UnlearnSplit | None = None) -> UnlearnResult:
    model = model or load_base(cfg)
    split = split or load_split(cfg)
    ucfg = unlearn_config(cfg)
    out = cfg.out_dir / "unlearn" / tag
    fp_before = model.fingerprint()
    try:
        bank, log = unlearn_train(model, split, ucfg, checkpoint_path=out / "prompt.ckpt")
    except UnlearnDiverged as exc:
        _write_json(out / "log.json", {**_stamp(cfg), "aborted": str(exc), **exc.log.to_dict()})
        raise
    if model.fingerprint() != fp_before:
        raise RuntimeError("frozen model parameters changed during unlearning")
    meta = {**_stamp(cfg), "method": "spul", "alpha": ucfg.alpha, "beta": ucfg.beta, "p": ucfg.p,
            "lr": ucfg.lr, "epochs": ucfg.epochs, "tau": cfg["split.tau"]}
    bank.save(out / "prompt.ckpt", _stamp(cfg))
    report = evaluate_matrix(model, split, bank.tensor(), meta=meta, trainable_params=count_trainable(bank))
    report.save(out / "metrics.json")
    _write_json(out / "efficiency.json", {**_stamp(cfg), **efficiency_report(
        count_trainable(bank), model.n_params(), log.epoch_seconds)})
    _write_json(out / "log.json", {**_stamp(cfg), **log.to_dict()})
    return UnlearnResult(bank, report, out)


def baseline_stage(cfg: RunConfig, method: str | None = None, model: TinyLM | None = None,
                   split: UnlearnSplit | None = None):
    model = model or load_base(cfg)
    split = split or load_split(cfg)
    b = cfg.section("baseline")
    bcfg = BaselineConfig(method or b["method"], epochs=b["epochs"], seed=cfg.seed,
                          batch_size=b["batch_size"], retain_weight=b["retain_weight"])
    best, cells = search_lr(model, split, bcfg, parse_floats(b["lr_grid"]))
    out = cfg.out_dir / "baseline" / bcfg.method
    save_baseline(best.model, out / "model.ckpt", BaselineConfig(**{**bcfg.to_dict(), "lr": best.lr}), _stamp(cfg))
    best.report.meta.update(_stamp(cfg))
    best.report.save(out / "metrics.json")
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "lr", "steps", *_metric_columns(), "config_digest"])
        for c in cells:
            w.writerow([bcfg.method, repr(c.lr), len(c.log.steps), *_metric_values(c.report), cfg.digest()])
    _write_json(out / "efficiency.json", {**_stamp(cfg), **efficiency_report(
        best.model.n_params(), best.model.n_params(), best.log.epoch_seconds)})
    return best, cells, out


def eval_stage(cfg: RunConfig, model_path=None, prompt_path=None, split_path=None, out_path=None,
               embeddings_path=None):
    model = load_base(cfg, model_path)
    split = load_split(cfg, split_path)
    bank = PromptBank.load(_require(Path(prompt_path), "check the --prompt path")) if prompt_path else None
    prompt = bank.tensor() if bank else None
    meta = {**_stamp(cfg), "method": "spul" if bank else "model", "model": str(model_path or "base.ckpt")}
    report = evaluate_matrix(model, split, prompt, meta=meta,
                             trainable_params=count_trainable(bank) if bank else 0)
    report.save(out_path or cfg.out_dir / "eval" / "metrics.json")
    if embeddings_path:
        export_embeddings(model, {"forget": split.train_forget, "retain": split.train_retain},
                          embeddings_path, prompt)
    return report


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------
GRID_KEYS = {
    "alpha": "unlearn.alpha",
    "beta": "unlearn.beta",
    "p": "unlearn.p",
    "lr": "unlearn.lr",
    "epochs": "unlearn.epochs",
    "tau": "split.tau",
    "seed": "seed",
}


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    """``["alpha=0.1,0.5", "p=10..50"]`` -> ordered value lists.

    ``a..b`` is an inclusive integer range with step 10; ``a..b:s`` sets the step.
    """
    grid: dict[str, list] = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"grid entries look like name=v1,v2 or name=a..b, got {item!r}")
        name, spec = (x.strip() for x in item.split("=", 1))
        if name not in GRID_KEYS:
            raise ValueError(f"cannot sweep {name!r}; choose from {sorted(GRID_KEYS)}")
        if ".." in spec:
            rng, _, step = spec.partition(":")
            lo, hi = (int(x) for x in rng.split(".."))
            values = list(range(lo, hi + 1, int(step) if step else 10))
        else:
            values = [x.strip() for x in spec.split(",") if x.strip()]
        if not values:
            raise ValueError(f"empty grid for {name!r}")
        grid[name] = values
    return grid


def _metric_columns() -> list[str]:
    return [f"{s}_{m}" for s in ("train_retain", "train_forget", "test_retain", "test_forget") for m in ("acc", "f1")]


def _metric_values(report) -> list[str]:
    return [f"{report.splits[s][m]:.4f}" for s in ("train_retain", "train_forget", "test_retain", "test_forget")
            for m in ("acc", "f1")]


def sweep(cfg: RunConfig, grid: dict[str, list], name: str = "sweep") -> tuple[Path, int]:
    """Run SPUL for every grid cell; returns the CSV path and the number of failed cells."""
    model = load_base(cfg)
    full = load_split(cfg, apply_tau=False)
    names = list(grid)
    path = cfg.out_dir / "sweep" / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    failed = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "status", *_metric_columns(), "config_digest"])
        for values in itertools.product(*(grid[n] for n in names)):
            cell = RunConfig(cfg.values).update({GRID_KEYS[n]: v for n, v in zip(names, values)})
            tag = "_".join(f"{n}{v}" for n, v in zip(names, values))
            split = full
            if cell["split.tau"] < 1.0:
                split = subsample_forget(full, cell["split.tau"], seed=cell.seed)
            try:
                res = unlearn_stage(cell, tag=f"{name}/{tag}", model=model, split=split)
                w.writerow([*values, "ok", *_metric_values(res.report), cell.digest()])
            except (UnlearnDiverged, ValueError) as exc:
                logger.error("cell %s failed: %s", tag, exc)
                failed += 1
                w.writerow([*values, f"failed: {exc}", *([""] * 8), cell.digest()])
            fh.flush()
    return path, failed
