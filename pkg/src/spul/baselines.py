"""Fine-tuning baselines that update every model weight.

* ``ga``: gradient ascent on the forget set.
* ``rl``: descent toward fixed random generic labels on the forget set.
* ``ga-kl``: ascent on forget plus KL(current || original) on retain.
* ``ga-gd``: ascent on forget plus ordinary descent on retain.

Each run trains a deep copy; the model passed in is never modified.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import MetricsReport, evaluate_matrix
from .lm import TinyLM
from .optim import Adam
from .prompt_unlearn import BatchCycle, GenericAssignment, assign_generic, reference_logits
from .seeding import substream

logger = logging.getLogger(__name__)

METHODS = ("ga", "rl", "ga-kl", "ga-gd")
DEFAULT_LR_GRID = (1e-4, 3e-4, 1e-3)


@dataclass
class BaselineConfig:
    method: str = "ga"
    lr: float = 1e-4
    epochs: int = 1
    seed: int = 0
    batch_size: int = 32
    retain_weight: float = 1.0

    def __post_init__(self):
        self.method = self.method.lower().replace("+", "-").replace("_", "-")
        if self.method not in METHODS:
            raise ValueError(f"unknown baseline method {self.method!r}; choose from {METHODS}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BaselineLog:
    steps: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stopped_early: bool = False


def _ascent(model: TinyLM, enc, idx) -> Tensor:
    """Negative mean cross-entropy on the true labels."""
    return ad.scale(ad.cross_entropy(model.label_logits([enc.ids[i] for i in idx]), enc.targets[idx]), -1.0)


def _train(model: TinyLM, forget, retain, config: BaselineConfig,
           assignment: GenericAssignment | None = None) -> tuple[TinyLM, BaselineLog]:
    """Shared loop: one forget batch and (if used) one retain batch per step."""
    work = model.copy(frozen=False)
    method = config.method
    uses_retain = method in ("ga-kl", "ga-gd") and len(retain) > 0
    fenc, renc = work.encode(forget), work.encode(retain)
    if method == "rl":
        if assignment is None:
            assignment = assign_generic(forget, work.vocab.generic_labels, config.seed)
        ftargets = assignment.targets(forget, work.vocab)
    reference = None
    if method == "ga-kl" and uses_retain:
        reference = np.concatenate([reference_logits(model, renc.subset(np.arange(s, min(s + 256, len(renc)))))
                                    for s in range(0, len(renc), 256)])
    params = list(work.params)
    opt = Adam(params, lr=config.lr)
    rng = substream(config.seed, "batching")
    log = BaselineLog()
    # with no forget examples the retain set drives the epoch
    lead_n = len(forget) if len(forget) else len(renc)
    retain_cycle = BatchCycle(len(renc), config.batch_size, rng)
    last_good = [p.data.copy() for p in params]

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(lead_n)
        for s in range(0, lead_n, config.batch_size):
            idx = order[s:s + config.batch_size]
            terms = {"forget": 0.0, "retain": 0.0}
            total = None
            if len(forget):
                if method == "rl":
                    lf = ad.cross_entropy(work.label_logits([fenc.ids[i] for i in idx]), ftargets[idx])
                else:
                    lf = _ascent(work, fenc, idx)
                terms["forget"] = lf.item()
                total = lf
            if uses_retain:
                ri = idx if not len(forget) else retain_cycle.next()
                logits = work.label_logits([renc.ids[i] for i in ri])
                if method == "ga-kl":
                    lr_t = ad.kl_divergence(logits, reference[ri])
                else:
                    lr_t = ad.cross_entropy(logits, renc.targets[ri])
                terms["retain"] = lr_t.item()
                weighted = ad.scale(lr_t, config.retain_weight)
                total = weighted if total is None else total + weighted
            if total is None:
                break
            terms["total"] = total.item()
            if not all(math.isfinite(v) for v in terms.values()):
                for p, keep in zip(params, last_good):
                    p.data[...] = keep
                log.stopped_early = True
                warnings.warn(f"{method}: non-finite loss after {len(log.steps)} steps, stopping early",
                              RuntimeWarning, stacklevel=3)
                break
            last_good = [p.data.copy() for p in params]
            opt.zero_grad()
            total.backward()
            opt.step()
            log.steps.append({"epoch": epoch, "step": len(log.steps), **terms})
        log.epoch_seconds.append(time.perf_counter() - t0)
        if log.stopped_early:
            break
    work.freeze()
    logger.info("%s: %d steps at lr %g", method, len(log.steps), config.lr)
    return work, log


def run_ga(model: TinyLM, forget, config: BaselineConfig | None = None) -> tuple[TinyLM, BaselineLog]:
    """Gradient ascent on the forget set."""
    config = config or BaselineConfig("ga")
    return _train(model, list(forget), [], BaselineConfig(**{**config.to_dict(), "method": "ga"}))


def run_rl(model: TinyLM, forget, config: BaselineConfig | None = None,
           assignment: GenericAssignment | None = None) -> tuple[TinyLM, BaselineLog]:
    """Fine-tune the forget set toward its generic labels."""
    config = config or BaselineConfig("rl")
    return _train(model, list(forget), [], BaselineConfig(**{**config.to_dict(), "method": "rl"}), assignment)


def run_ga_kl(model: TinyLM, split, config: BaselineConfig | None = None) -> tuple[TinyLM, BaselineLog]:
    """Ascent on forget, KL to the original model on retain."""
    config = config or BaselineConfig("ga-kl")
    return _train(model, list(split.train_forget), list(split.train_retain),
                  BaselineConfig(**{**config.to_dict(), "method": "ga-kl"}))


def run_ga_gd(model: TinyLM, split, config: BaselineConfig | None = None) -> tuple[TinyLM, BaselineLog]:
    """Ascent on forget, descent on retain."""
    config = config or BaselineConfig("ga-gd")
    return _train(model, list(split.train_forget), list(split.train_retain),
                  BaselineConfig(**{**config.to_dict(), "method": "ga-gd"}))


def run_baseline(model: TinyLM, split, config: BaselineConfig,
                 assignment: GenericAssignment | None = None) -> tuple[TinyLM, BaselineLog]:
    if config.method == "ga":
        return run_ga(model, split.train_forget, config)
    if config.method == "rl":
        return run_rl(model, split.train_forget, config, assignment)
    if config.method == "ga-kl":
        return run_ga_kl(model, split, config)
    return run_ga_gd(model, split, config)


@dataclass
class GridCell:
    lr: float
    model: TinyLM
    log: BaselineLog
    report: MetricsReport

    @property
    def gap(self) -> float:
        return self.report.acc("train_retain") - self.report.acc("train_forget")


def search_lr(model: TinyLM, split, config: BaselineConfig,
              grid: Sequence[float] = DEFAULT_LR_GRID) -> tuple[GridCell, list[GridCell]]:
    """Run ``config`` at every learning rate of ``grid`` and pick the best cell.

    Best means the widest retain-minus-forget train accuracy gap; ties go
    to the lower forget accuracy, then to the smaller learning rate.
    """
    cells = []
    for lr in grid:
        cfg = BaselineConfig(**{**config.to_dict(), "lr": float(lr)})
        trained, log = run_baseline(model, split, cfg)
        report = evaluate_matrix(trained, split, meta={"method": cfg.method, "lr": cfg.lr, "seed": cfg.seed},
                                 trainable_params=trained.n_params())
        cells.append(GridCell(cfg.lr, trained, log, report))
    best = min(cells, key=lambda c: (-c.gap, c.report.acc("train_forget"), c.lr))
    return best, cells


def save_baseline(model: TinyLM, path, config: BaselineConfig, meta: dict | None = None) -> str:
    """Model checkpoint tagged with the method that produced it."""
    return model.save(path, {"method": config.method, "baseline": config.to_dict(), **(meta or {})})
