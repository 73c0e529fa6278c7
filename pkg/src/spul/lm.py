"""A miniature decoder-only transformer used as the base model.

Classification is framed as next-token prediction: an example is encoded as
``<bos> w_1 ... w_n <ans>`` and the model is trained so that the distribution
at the ``<ans>`` position puts its mass on a reserved label token. All
classification heads are restricted to the label tokens (task labels followed
by the generic labels).

Positional embeddings are added inside :meth:`TinyLM.forward_embeddings`, so
anything prepended to the token embeddings shifts content positions.
"""
from __future__ import annotations

import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import fingerprint_arrays, read_checkpoint, write_checkpoint
from .optim import Adam
from .seeding import substream

logger = logging.getLogger(__name__)

PAD, BOS, UNK, ANS = "<pad>", "<bos>", "<unk>", "<ans>"
SPECIALS = (PAD, BOS, UNK, ANS)
DEFAULT_GENERIC_LABELS = ("neutral", "unknown", "none")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


class SequenceTooLong(ValueError):
    pass


def split_words(text: str) -> list[str]:
    """Lower-cased word/punctuation segmentation."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(split_words(text))


def label_token(label: str) -> str:
    return f"<{label}>"


class Vocabulary:
    """Bijective token <-> id map with reserved special and label tokens."""

    def __init__(self, tokens: Sequence[str], task_labels: Sequence[str],
                 generic_labels: Sequence[str] = DEFAULT_GENERIC_LABELS):
        overlap = set(task_labels) & set(generic_labels)
        if overlap:
            raise ValueError(f"generic labels overlap task labels: {sorted(overlap)}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.task_labels = list(task_labels)
        self.generic_labels = list(generic_labels)
        for tok in (*SPECIALS, *map(label_token, self.all_labels)):
            if tok not in self.index:
                raise ValueError(f"vocabulary lacks reserved token {tok}")
        # label-set position -> vocabulary id
        self.label_ids = np.array([self.index[label_token(l)] for l in self.all_labels], dtype=np.int64)
        self._label_pos = {l: i for i, l in enumerate(self.all_labels)}

    @classmethod
    def build(cls, texts: Iterable[str], task_labels: Sequence[str],
              generic_labels: Sequence[str] = DEFAULT_GENERIC_LABELS,
              max_size: int = 2048) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for w in split_words(text):
                counts[w] = counts.get(w, 0) + 1
        reserved = list(SPECIALS) + [label_token(l) for l in (*task_labels, *generic_labels)]
        words = sorted((w for w in counts if w not in reserved), key=lambda w: (-counts[w], w))
        words = words[: max(0, max_size - len(reserved))]
        return cls(reserved + sorted(words), task_labels, generic_labels)

    @property
    def all_labels(self) -> list[str]:
        return self.task_labels + self.generic_labels

    @property
    def n_task(self) -> int:
        return len(self.task_labels)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def label_position(self, label: str) -> int:
        """Index of ``label`` inside the restricted label distribution."""
        try:
            return self._label_pos[label]
        except KeyError:
            raise KeyError(f"unknown label {label!r}") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in split_words(text)]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def encode(self, text: str) -> list[int]:
        """Model input for one example: ``<bos> words <ans>``."""
        return [self.index[BOS], *self.tokenize(text), self.index[ANS]]

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "task_labels": self.task_labels,
                "generic_labels": self.generic_labels}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["task_labels"], d["generic_labels"])


@dataclass
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context: int = 128
    vocab_size: int = 0
    mlp_ratio: int = 4
    positional: str = "rope"

    def __post_init__(self):
        if min(self.d, self.n_layers, self.n_heads, self.context) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.positional not in ("rope", "learned"):
            raise ValueError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rope" and (self.d // self.n_heads) % 2:
            raise ValueError("rotary positions need an even head dimension")


class ModelParams:
    """Named parameter tensors plus a freeze flag."""

    def __init__(self, tensors: dict[str, Tensor], frozen: bool = False):
        self.tensors = tensors
        self.frozen = False
        if frozen:
            self.freeze()
        else:
            self.unfreeze()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def freeze(self) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = True
        self.frozen = False
        return self

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.arrays())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self, frozen: bool | None = None) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(), name=k) for k, t in self.tensors.items()}
        return ModelParams(tensors, frozen=self.frozen if frozen is None else frozen)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = substream(seed, "model")
    d, V, h = cfg.d, cfg.vocab_size, cfg.d * cfg.mlp_ratio
    std = 0.02
    proj_std = std / math.sqrt(2 * cfg.n_layers)

    def normal(*shape, s=std):
        return rng.normal(0.0, s, size=shape)

    arrays = {"tok_emb": normal(V, d)}
    if cfg.positional == "learned":
        arrays["pos_emb"] = normal(cfg.context, d)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        arrays.update({
            p + "ln1.w": np.ones(d), p + "ln1.b": np.zeros(d),
            p + "attn.wq": normal(d, d), p + "attn.wk": normal(d, d), p + "attn.wv": normal(d, d),
            p + "attn.bq": np.zeros(d), p + "attn.bk": np.zeros(d), p + "attn.bv": np.zeros(d),
            p + "attn.wo": normal(d, d, s=proj_std), p + "attn.bo": np.zeros(d),
            p + "ln2.w": np.ones(d), p + "ln2.b": np.zeros(d),
            p + "mlp.w1": normal(d, h), p + "mlp.b1": np.zeros(h),
            p + "mlp.w2": normal(h, d, s=proj_std), p + "mlp.b2": np.zeros(d),
        })
    arrays.update({"lnf.w": np.ones(d), "lnf.b": np.zeros(d),
                   "head.w": normal(V, d), "head.b": np.zeros(V)})
    return ModelParams({k: Tensor(v, name=k) for k, v in arrays.items()})


@dataclass
class Encoded:
    """Token id sequences plus label-set targets for a list of examples."""

    ids: list[np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Encoded":
        idx = np.asarray(idx, dtype=np.int64)
        return Encoded([self.ids[i] for i in idx], self.targets[idx])


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class TinyLM:
    """Pre-LayerNorm causal transformer over a word-level vocabulary."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: ModelParams | None = None,
                 seed: int = 0):
        if config.vocab_size == 0:
            config = ModelConfig(**{**asdict(config), "vocab_size": len(vocab)})
        if config.vocab_size != len(vocab):
            raise ValueError("config.vocab_size does not match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params = params if params is not None else init_params(config, seed)
        self._masks: dict[int, np.ndarray] = {}
        self._rope: dict[int, tuple[Tensor, Tensor, Tensor]] = {}

    # ---------------------------------------------------------------- helpers
    @property
    def frozen(self) -> bool:
        return self.params.frozen

    def freeze(self) -> "TinyLM":
        self.params.freeze()
        return self

    def copy(self, frozen: bool | None = None) -> "TinyLM":
        return TinyLM(self.config, self.vocab, self.params.copy(frozen=frozen))

    def fingerprint(self) -> str:
        return self.params.fingerprint()

    def n_params(self) -> int:
        return self.params.count()

    def encode(self, examples) -> Encoded:
        ids = [np.array(self.vocab.encode(ex.text), dtype=np.int64) for ex in examples]
        targets = np.array([self.vocab.label_position(ex.label) for ex in examples], dtype=np.int64)
        return Encoded(ids, targets)

    def _causal_mask(self, m: int) -> np.ndarray:
        if m not in self._masks:
            self._masks[m] = np.triu(np.ones((m, m), dtype=bool), k=1)
        return self._masks[m]

    def _rotary(self, m: int):
        if m not in self._rope:
            dh = self.config.d // self.config.n_heads
            half = dh // 2
            freqs = 10000.0 ** (-np.arange(half) / half)
            ang = np.arange(m)[:, None] * freqs[None, :]
            cos = np.concatenate([np.cos(ang)] * 2, axis=1)
            sin = np.concatenate([np.sin(ang)] * 2, axis=1)
            # x @ rot == concat(-x[half:], x[:half])
            rot = np.zeros((dh, dh))
            rot[half:, :half] = -np.eye(half)
            rot[:half, half:] = np.eye(half)
            self._rope[m] = (Tensor(cos), Tensor(sin), Tensor(rot))
        return self._rope[m]

    def _apply_rotary(self, x: Tensor, start: int, n: int) -> Tensor:
        """Rotate (..., n, dh) queries/keys as if they sat at positions start..start+n-1."""
        cos, sin, rot = self._rotary(start + n)
        if start:
            cos, sin = Tensor(cos.data[start:]), Tensor(sin.data[start:])
        return x * cos + (x @ rot) * sin

    # ---------------------------------------------------------------- forward
    def embed(self, tokens) -> Tensor:
        """Token embeddings (n, d) or (B, n, d); positions are added later."""
        return ad.embedding_lookup(self.params["tok_emb"], tokens)

    def _qkv(self, x: Tensor, pre: str, start: int):
        P = self.params.tensors
        b, m, d = x.shape
        H = self.config.n_heads
        a = ad.layer_norm(x, P[pre + "ln1.w"], P[pre + "ln1.b"])
        out = [(a @ P[pre + "attn.w" + c] + P[pre + "attn.b" + c]).reshape(b, m, H, d // H).transpose(0, 2, 1, 3)
               for c in "qkv"]
        if self.config.positional == "rope":
            out[0], out[1] = self._apply_rotary(out[0], start, m), self._apply_rotary(out[1], start, m)
        return out

    def _mix(self, x: Tensor, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray, pre: str) -> Tensor:
        """Masked attention followed by the residual MLP."""
        P = self.params.tensors
        b, m, d = x.shape
        scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(d // self.config.n_heads))
        att = ad.softmax(ad.masked_fill(scores, mask, -np.inf), axis=-1) @ v
        att = att.transpose(0, 2, 1, 3).reshape(b, m, d)
        x = x + (att @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
        a = ad.layer_norm(x, P[pre + "ln2.w"], P[pre + "ln2.b"])
        hdn = ad.gelu(a @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"])
        return x + (hdn @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"])

    def _block(self, x: Tensor, i: int, prefix: Tensor | None = None):
        """One decoder layer over content ``x`` (B, n, d).

        ``prefix`` (1, p, d) holds rows that precede every sequence of the
        batch. Under causal attention they never see the content, so they are
        computed once and their keys/values are shared by all rows.
        """
        pre = f"h{i}."
        B, n, _ = x.shape
        p = 0 if prefix is None else prefix.shape[1]
        q, k, v = self._qkv(x, pre, p)
        if p:
            qp, kp, vp = self._qkv(prefix, pre, 0)
            new_prefix = self._mix(prefix, qp, kp, vp, self._causal_mask(p), pre)
            pad = Tensor(np.zeros((B,) + kp.shape[1:]))
            k = ad.concat_rows([kp + pad, k], axis=-2)
            v = ad.concat_rows([vp + pad, v], axis=-2)
        else:
            new_prefix = None
        return self._mix(x, q, k, v, self._causal_mask(p + n)[p:], pre), new_prefix

    def hidden_states(self, embs: Tensor, prefix: Tensor | None = None) -> Tensor:
        """Final-layer (post LayerNorm) states (B, m, d) for embeddings of shape (B, m, d).

        With ``prefix`` (p, d) the result covers only the ``embs`` rows, which
        sit at positions p..p+m-1 behind the prefix.
        """
        p = 0 if prefix is None else prefix.shape[0]
        m = embs.shape[-2]
        if p + m > self.config.context:
            raise SequenceTooLong(f"sequence of length {p + m} exceeds context {self.config.context}")
        x = embs
        if p:
            prefix = prefix.reshape(1, p, self.config.d)
        if self.config.positional == "learned":
            pos = self.params["pos_emb"]
            x = x + ad.select(pos, np.arange(p, p + m), axis=0)
            if p:
                prefix = prefix + ad.select(pos, np.arange(p), axis=0)
        for i in range(self.config.n_layers):
            x, prefix = self._block(x, i, prefix if p else None)
        return ad.layer_norm(x, self.params["lnf.w"], self.params["lnf.b"])

    def forward_embeddings(self, embs: Tensor) -> Tensor:
        """Full-vocabulary logits (m, V) for an (m, d) input, or (B, m, V) for batched input."""
        single = embs.ndim == 2
        if single:
            embs = embs.reshape(1, *embs.shape)
        h = self.hidden_states(embs)
        logits = h @ self.params["head.w"].transpose(1, 0) + self.params["head.b"]
        return logits.reshape(logits.shape[1:]) if single else logits

    def batch_inputs(self, seqs: Sequence[np.ndarray], prompt: Tensor | None = None):
        """Embedding tensor (B, p + m, d) and the answer position of every row.

        Rows are right-padded; with causal attention the padding never
        influences the answer position.
        """
        ids, lengths = pad_batch(seqs, self.vocab.index[PAD])
        embs = self.embed(ids)
        p = 0 if prompt is None else prompt.shape[0]
        if p:
            B = ids.shape[0]
            phi = ad.add(Tensor(np.zeros((B, p, self.config.d))), prompt)
            embs = ad.concat_rows([phi, embs], axis=1)
        return embs, p + lengths - 1

    def answer_states(self, seqs: Sequence[np.ndarray], prompt: Tensor | None = None,
                      shared_prefix: bool = True) -> Tensor:
        """Final-layer state (B, d) at each example's answer position.

        ``shared_prefix=False`` runs the prompt through the batch row by row
        instead of once; both give the same numbers.
        """
        if prompt is None or prompt.shape[0] == 0 or not shared_prefix:
            embs, last = self.batch_inputs(seqs, prompt)
            return ad.take_rows(self.hidden_states(embs), last)
        ids, lengths = pad_batch(seqs, self.vocab.index[PAD])
        return ad.take_rows(self.hidden_states(self.embed(ids), prompt), lengths - 1)

    def label_logits(self, seqs: Sequence[np.ndarray], prompt: Tensor | None = None) -> Tensor:
        """Logits (B, L) over the label tokens at the answer position."""
        return self.label_head(self.answer_states(seqs, prompt))

    def label_head(self, h: Tensor, hold_generic: bool = False) -> Tensor:
        """Project answer-position states (B, d) onto the label tokens (task labels first).

        ``hold_generic`` treats the generic-label rows of the output head as
        constants, so training through this head never moves them.
        """
        W, bias = self.params["head.w"], self.params["head.b"]
        ids = self.vocab.label_ids
        w, b = ad.select(W, ids, axis=0), ad.select(bias, ids, axis=0)
        if hold_generic:
            k, gen = self.vocab.n_task, ids[self.vocab.n_task:]
            w = ad.concat_rows([ad.select(W, ids[:k], axis=0), Tensor(W.data[gen])], axis=0)
            b = ad.concat_rows([ad.select(bias, ids[:k], axis=0), Tensor(bias.data[gen])], axis=0)
        return h @ w.transpose(1, 0) + b

    def label_distribution(self, encoded: Encoded | Sequence[np.ndarray], prompt: Tensor | None = None,
                           batch_size: int = 256) -> np.ndarray:
        seqs = encoded.ids if isinstance(encoded, Encoded) else list(encoded)
        out = []
        with ad.no_grad():
            for s in range(0, len(seqs), batch_size):
                out.append(ad.softmax_np(self.label_logits(seqs[s:s + batch_size], prompt).data))
        if not out:
            return np.zeros((0, len(self.vocab.label_ids)))
        return np.concatenate(out, axis=0)

    def predict_label(self, tokens: Sequence[int], prompt: Tensor | None = None) -> tuple[int, np.ndarray]:
        """Vocabulary id of the most likely label token and the label distribution.

        ``tokens`` is a complete model input (see :meth:`Vocabulary.encode`).
        Ties go to the lowest token id.
        """
        if len(tokens) == 0:
            raise ValueError("tokens must be non-empty")
        dist = self.label_distribution([np.asarray(tokens, dtype=np.int64)], prompt)[0]
        return int(_argmax_lowest_id(dist[None, :], self.vocab.label_ids)[0]), dist

    def predict(self, encoded: Encoded, prompt: Tensor | None = None) -> np.ndarray:
        """Predicted label-set positions for every encoded example."""
        dist = self.label_distribution(encoded, prompt)
        ids = _argmax_lowest_id(dist, self.vocab.label_ids)
        pos_of = {int(v): i for i, v in enumerate(self.vocab.label_ids)}
        return np.array([pos_of[int(i)] for i in ids], dtype=np.int64)

    # ------------------------------------------------------------ persistence
    def save(self, path, meta: dict | None = None) -> str:
        header = {"config": asdict(self.config), "vocab": self.vocab.to_dict(),
                  "frozen": self.frozen, **(meta or {})}
        return write_checkpoint(path, "model", header, self.params.arrays())

    @classmethod
    def load(cls, path) -> "TinyLM":
        header, arrays = read_checkpoint(path, kind="model")
        meta = header["meta"]
        params = ModelParams({k: Tensor(v, name=k) for k, v in arrays.items()},
                             frozen=meta.get("frozen", False))
        model = cls(ModelConfig(**meta["config"]), Vocabulary.from_dict(meta["vocab"]), params)
        model.meta = meta
        return model


def _argmax_lowest_id(dist: np.ndarray, label_ids: np.ndarray) -> np.ndarray:
    # order label positions by token id so argmax picks the lowest id on ties
    order = np.argsort(label_ids, kind="stable")
    return label_ids[order][np.argmax(dist[:, order], axis=1)]


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    steps: int = 0


def train_base(examples, vocab: Vocabulary | None = None, config: ModelConfig | None = None,
               epochs: int = 10, lr: float = 2e-3, seed: int = 0, batch_size: int = 32,
               model: TinyLM | None = None, prefix_rate: float = 0.3,
               max_prefix: int = 50, lm_weight: float = 1.0) -> tuple[TinyLM, TrainLog]:
    """Fit the whole model to predict each example's label token.

    The label loss is a softmax over the whole label set, but the generic
    labels' output rows are held at their initial values, and the
    next-word loss covers ordinary words only. Generic labels therefore
    never get pushed far down and remain reachable targets for later
    unlearning, while task predictions still beat them.

    With probability ``prefix_rate`` an example is preceded by up to
    ``max_prefix`` random vocabulary words. This stands in for the broad
    pre-training a real LLM has: positions past the length of the task
    sentences get trained and the model learns to read through arbitrary
    leading context, which is what prepended prompts look like to it.
    ``lm_weight`` adds next-word prediction over the example text, the usual
    causal-LM fine-tuning objective.

    Returns the trained (unfrozen) model and a per-epoch log.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        if vocab is None:
            labels = sorted({ex.label for ex in examples})
            vocab = Vocabulary.build((ex.text for ex in examples), labels)
        model = TinyLM(config or ModelConfig(), vocab, seed=seed)
    if model.frozen:
        raise RuntimeError("train_base needs an unfrozen model")
    data = model.encode(examples)
    opt = Adam(list(model.params), lr=lr)
    rng = substream(seed, "batching")
    log = TrainLog()
    words = np.array([i for i, t in enumerate(model.vocab.tokens) if not t.startswith("<")])
    word_pos = np.full(len(model.vocab), -1, dtype=np.int64)
    word_pos[words] = np.arange(len(words))
    max_prefix = min(max_prefix, model.config.context - max(len(x) for x in data.ids))
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(data))
        total = 0.0
        for s in range(0, len(order), batch_size):
            batch = data.subset(order[s:s + batch_size])
            n_pre = 0
            if prefix_rate > 0 and max_prefix > 0 and rng.random() < prefix_rate:
                n_pre = int(rng.integers(1, max_prefix + 1))
            seqs = [np.concatenate([rng.choice(words, size=n_pre), x]) for x in batch.ids]
            embs, last = model.batch_inputs(seqs)
            h = model.hidden_states(embs)
            loss = ad.cross_entropy(model.label_head(ad.take_rows(h, last), hold_generic=True), batch.targets)
            if lm_weight:
                loss = loss + lm_weight * _next_word_loss(model, h, seqs, n_pre, last, words, word_pos)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {log.steps}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            log.steps += 1
        log.epoch_loss.append(total / len(data))
        log.epoch_seconds.append(time.perf_counter() - t0)
        logger.info("base epoch %d loss %.4f", epoch, log.epoch_loss[-1])
    return model, log


def _next_word_loss(model: TinyLM, h: Tensor, seqs, start: int, last: np.ndarray,
                    words: np.ndarray, word_pos: np.ndarray) -> Tensor:
    """Mean next-word cross-entropy, over ordinary words, from ``<bos>`` to the last word."""
    B, m, d = h.shape
    rows, targets = [], []
    for b, seq in enumerate(seqs):
        for t in range(start, int(last[b]) - 1):
            if word_pos[seq[t + 1]] >= 0:  # <unk> is not a word target
                rows.append(b * m + t)
                targets.append(word_pos[seq[t + 1]])
    flat = ad.select(h.reshape(B * m, d), np.array(rows), axis=0)
    w = ad.select(model.params["head.w"], words, axis=0)
    b = ad.select(model.params["head.b"], words, axis=0)
    return ad.cross_entropy(flat @ w.transpose(1, 0) + b, np.array(targets))


def cross_entropy_on(model: TinyLM, encoded: Encoded, prompt: Tensor | None = None) -> float:
    """Mean label-set cross-entropy without building a tape."""
    with ad.no_grad():
        return ad.cross_entropy(model.label_logits(encoded.ids, prompt), encoded.targets).item()
