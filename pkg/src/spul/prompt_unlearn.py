"""Soft-prompt unlearning: a trainable prompt bank in front of a frozen model.

Only the prompt rows receive gradients. The objective mixes three terms,
all evaluated at the answer position:

* forget: cross-entropy toward a generic label assigned to every forget example,
* retain: cross-entropy toward the true label of retain examples,
* kl: divergence of the prompted retain distribution from the unprompted one.

``total = forget + alpha * retain + beta * kl``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .lm import Encoded, TinyLM
from .optim import make_optimizer
from .seeding import substream

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class AssignmentError(ValueError):
    """A forget example lacks a generic target, or its target is not generic."""


class UnlearnDiverged(RuntimeError):
    """Raised on a non-finite loss; ``bank`` holds the last finite prompt."""

    def __init__(self, message: str, bank: "PromptBank", log: "UnlearnLog"):
        super().__init__(message)
        self.bank = bank
        self.log = log


@dataclass
class UnlearnConfig:
    alpha: float = 1.0
    beta: float = 0.5
    p: int = 30
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    init: str = "vocab"
    optimizer: str = "adam"
    momentum: float = 0.0
    assignment: str = "uniform"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.p < 0:
            raise ConfigError("p must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.init not in ("vocab", "gaussian"):
            raise ConfigError(f"unknown prompt init {self.init!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.assignment != "uniform":
            raise ConfigError(f"unknown generic-label assignment policy {self.assignment!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# prompt bank
# --------------------------------------------------------------------------
@dataclass
class PromptBank:
    phi: Tensor
    init: str = "vocab"
    seed: int = 0
    config_digest: str = ""

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def tensor(self) -> Tensor | None:
        """The prompt as a model input, or None for an empty bank."""
        return self.phi if self.p else None

    def count(self) -> int:
        return int(self.phi.data.size)

    def copy(self) -> "PromptBank":
        return PromptBank(Tensor(self.phi.data.copy(), requires_grad=self.phi.requires_grad),
                          self.init, self.seed, self.config_digest)

    def save(self, path, meta: dict | None = None) -> str:
        header = {"p": self.p, "d": self.d, "seed": self.seed, "init": self.init,
                  "config_digest": self.config_digest, **(meta or {})}
        return write_checkpoint(path, "prompt", header, {"phi": self.phi.data})

    @classmethod
    def load(cls, path) -> "PromptBank":
        header, arrays = read_checkpoint(path, kind="prompt")
        meta = header["meta"]
        phi = arrays["phi"].reshape(meta["p"], meta["d"])
        return cls(Tensor(phi, requires_grad=True), meta.get("init", "vocab"),
                   meta["seed"], meta["config_digest"])


def init_prompt(model: TinyLM, config: UnlearnConfig) -> PromptBank:
    """Fresh prompt bank: copies of random vocabulary embeddings, or N(0, 0.02) noise."""
    p, d = config.p, model.config.d
    # <bos>, at least one word and <ans> must still fit
    if p > model.config.context - 3:
        raise ConfigError(f"p={p} leaves no room for input in a context of {model.config.context}")
    rng = substream(config.seed, "init")
    if config.init == "vocab":
        rows = rng.integers(len(model.vocab), size=p)
        phi = model.params["tok_emb"].data[rows].copy()
    else:
        phi = rng.normal(0.0, 0.02, size=(p, d))
    return PromptBank(Tensor(phi.reshape(p, d), requires_grad=True, name="phi"),
                      config.init, config.seed, config.digest())


def prepend(bank: PromptBank, x: Tensor, context: int | None = None) -> Tensor:
    """Rows ``[phi; x]`` along the sequence axis."""
    n = x.shape[-2]
    if context is not None and bank.p + n > context:
        raise ConfigError(f"prompt of {bank.p} plus input of {n} exceeds context {context}")
    if bank.p == 0:
        return x
    if x.ndim == 2:
        return ad.concat_rows([bank.phi, x])
    phi = ad.add(Tensor(np.zeros(x.shape[:-2] + bank.phi.shape)), bank.phi)
    return ad.concat_rows([phi, x])


def count_trainable(bank: PromptBank) -> int:
    return bank.p * bank.d


# --------------------------------------------------------------------------
# generic labels
# --------------------------------------------------------------------------
@dataclass
class GenericAssignment:
    """Fixed generic target for each forget example, keyed by example id."""

    labels: dict[str, str]

    def __len__(self) -> int:
        return len(self.labels)

    def targets(self, examples, vocab) -> np.ndarray:
        """Label-set positions of the assigned targets; validates every entry."""
        generic = set(vocab.generic_labels)
        out = np.empty(len(examples), dtype=np.int64)
        for i, ex in enumerate(examples):
            try:
                label = self.labels[ex.id]
            except KeyError:
                raise AssignmentError(f"forget example {ex.id} has no generic label") from None
            if label not in generic:
                raise AssignmentError(f"example {ex.id}: {label!r} is not a generic label")
            out[i] = vocab.label_position(label)
        return out


def assign_generic(examples, generic_labels: Sequence[str], seed: int = 0) -> GenericAssignment:
    """Draw one generic label per example, uniformly, under ``seed``."""
    if not generic_labels:
        raise AssignmentError("the generic label set is empty")
    rng = substream(seed, "assignment")
    picks = rng.integers(len(generic_labels), size=len(examples))
    return GenericAssignment({ex.id: generic_labels[k] for ex, k in zip(examples, picks)})


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------
def _encode(model: TinyLM, batch) -> Encoded:
    return batch if isinstance(batch, Encoded) else model.encode(batch)


def _logits(model: TinyLM, bank: PromptBank | None, enc: Encoded) -> Tensor:
    return model.label_logits(enc.ids, None if bank is None else bank.tensor())


def forget_loss(model: TinyLM, bank: PromptBank | None, batch, assignment: GenericAssignment) -> Tensor:
    """Mean cross-entropy of the prompted model toward each example's generic label."""
    targets = assignment.targets(batch, model.vocab)
    return ad.cross_entropy(_logits(model, bank, _encode(model, batch)), targets)


def retain_loss(model: TinyLM, bank: PromptBank | None, batch) -> Tensor:
    """Mean cross-entropy of the prompted model toward the true labels."""
    enc = _encode(model, batch)
    return ad.cross_entropy(_logits(model, bank, enc), enc.targets)


def reference_logits(model: TinyLM, batch) -> np.ndarray:
    """Unprompted label logits, computed without a tape.

    Kept as raw logits so that KL against an identical prompted pass is
    exactly zero rather than off by rounding.
    """
    with ad.no_grad():
        return _logits(model, None, _encode(model, batch)).data


def kl_loss(model: TinyLM, bank: PromptBank | None, batch, reference: np.ndarray | None = None) -> Tensor:
    """Mean KL(prompted || unprompted) over the batch; the reference side is constant."""
    enc = _encode(model, batch)
    if reference is None:
        reference = reference_logits(model, enc)
    return ad.kl_divergence(_logits(model, bank, enc), reference)


@dataclass
class LossTerms:
    total: Tensor
    forget: float
    retain: float
    kl: float

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "forget": self.forget, "retain": self.retain, "kl": self.kl}


def total_loss(model: TinyLM, bank: PromptBank | None, forget_batch, retain_batch,
               assignment: GenericAssignment, alpha: float, beta: float,
               reference: np.ndarray | None = None) -> LossTerms:
    """``forget + alpha * retain + beta * kl`` plus the individual terms.

    The retain pass is shared by the retain and KL terms and skipped when
    both weights are zero.
    """
    lf = forget_loss(model, bank, forget_batch, assignment)
    total = lf
    lr_val = lk_val = 0.0
    if (alpha or beta) and len(retain_batch):
        enc = _encode(model, retain_batch)
        logits = _logits(model, bank, enc)
        lr_t = ad.cross_entropy(logits, enc.targets)
        if reference is None:
            reference = reference_logits(model, enc)
        lk_t = ad.kl_divergence(logits, reference)
        lr_val, lk_val = lr_t.item(), lk_t.item()
        if alpha:
            total = total + ad.scale(lr_t, alpha)
        if beta:
            total = total + ad.scale(lk_t, beta)
    return LossTerms(total, lf.item(), lr_val, lk_val)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------
@dataclass
class UnlearnLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def to_dict(self, timing: bool = False) -> dict:
        d = {"steps": self.steps, "epochs": self.epochs}
        if timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d


class BatchCycle:
    """Endless reshuffled mini-batches over ``n`` items."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        out = []
        while len(out) < min(self.size, self.n):
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            take = min(self.size - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + take])
            self.pos += take
        return np.array(out, dtype=np.int64)


def unlearn_train(model: TinyLM, split, config: UnlearnConfig,
                  assignment: GenericAssignment | None = None,
                  bank: PromptBank | None = None,
                  checkpoint_path=None) -> tuple[PromptBank, UnlearnLog]:
    """Optimise a prompt bank against the frozen ``model``.

    One epoch is a pass over the forget-train set in shuffled batches; each
    forget batch is paired with the next batch of a reshuffling cycle over
    the retain-train set. Every step is logged with its loss terms.

    On a non-finite loss the prompt is rolled back to its last finite value,
    written to ``checkpoint_path`` if one is given, and UnlearnDiverged is
    raised.
    """
    if not model.frozen:
        raise RuntimeError("unlearn_train needs a frozen model; call model.freeze() first")
    forget, retain = list(split.train_forget), list(split.train_retain)
    if not forget:
        raise ValueError("the forget-train set is empty")
    if assignment is None:
        assignment = assign_generic(forget, model.vocab.generic_labels, config.seed)
    bank = bank or init_prompt(model, config)
    if bank.p != config.p or bank.d != model.config.d:
        raise ConfigError(f"prompt bank is {bank.p}x{bank.d}, config asks for {config.p}x{model.config.d}")
    log = UnlearnLog()
    if bank.p == 0:
        logger.info("empty prompt bank, nothing to train")
        return bank, log

    fenc, renc = model.encode(forget), model.encode(retain)
    ftargets = assignment.targets(forget, model.vocab)
    need_retain = bool(config.alpha or config.beta) and len(retain) > 0
    reference = None
    if need_retain and config.beta:
        reference = np.concatenate([reference_logits(model, renc.subset(np.arange(s, min(s + 256, len(renc)))))
                                    for s in range(0, len(renc), 256)])
    phi = bank.phi
    phi.requires_grad = True
    opt = make_optimizer(config.optimizer, [phi], lr=config.lr, momentum=config.momentum)
    rng = substream(config.seed, "batching")
    retain_cycle = BatchCycle(len(retain), config.batch_size, rng)
    last_good = phi.data.copy()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(forget))
        sums = {"total": 0.0, "forget": 0.0, "retain": 0.0, "kl": 0.0}
        n_steps = 0
        for s in range(0, len(order), config.batch_size):
            fi = order[s:s + config.batch_size]
            lf = ad.cross_entropy(model.label_logits([fenc.ids[i] for i in fi], phi), ftargets[fi])
            total, terms = lf, {"forget": lf.item(), "retain": 0.0, "kl": 0.0}
            if need_retain:
                ri = retain_cycle.next()
                logits = model.label_logits([renc.ids[i] for i in ri], phi)
                lr_t = ad.cross_entropy(logits, renc.targets[ri])
                terms["retain"] = lr_t.item()
                if config.alpha:
                    total = total + ad.scale(lr_t, config.alpha)
                if config.beta:
                    lk_t = ad.kl_divergence(logits, reference[ri])
                    terms["kl"] = lk_t.item()
                    total = total + ad.scale(lk_t, config.beta)
            terms["total"] = total.item()
            if not all(math.isfinite(v) for v in terms.values()):
                phi.data[...] = last_good
                phi.grad = None
                if checkpoint_path is not None:
                    bank.save(checkpoint_path, {"aborted_at_step": len(log.steps)})
                raise UnlearnDiverged(f"non-finite loss at epoch {epoch}, step {len(log.steps)}", bank, log)
            last_good = phi.data.copy()
            opt.zero_grad()
            total.backward()
            opt.step()
            log.steps.append({"epoch": epoch, "step": len(log.steps), **terms})
            for k in sums:
                sums[k] += terms[k]
            n_steps += 1
        log.epochs.append({"epoch": epoch, **{k: v / n_steps for k, v in sums.items()}})
        log.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("unlearn epoch %d total %.4f forget %.4f retain %.4f kl %.4f", epoch,
                    *(log.epochs[-1][k] for k in ("total", "forget", "retain", "kl")))
    if not np.all(np.isfinite(phi.data)):
        phi.data[...] = last_good
        raise UnlearnDiverged("prompt became non-finite after the last step", bank, log)
    phi.grad = None
    return bank, log
