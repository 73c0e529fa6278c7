"""Datasets, forget/retain partitioning and JSONL ingestion.

Two partition protocols are provided:

* entity-based: every example that mentions a chosen entity (exact token
  match against a lexicon) goes to the forget side, in train and test alike;
* cluster-based: spherical k-means on example embeddings, a subset of
  clusters is forgotten and test examples are routed to the nearest center.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lm import DEFAULT_GENERIC_LABELS, split_words
from .seeding import substream

logger = logging.getLogger(__name__)

SENTIMENT_LABELS = ("positive", "negative")
MCQA_LABELS = ("A", "B", "C", "D")


class DatasetFormatError(ValueError):
    pass


class EmptyForgetSet(ValueError):
    pass


@dataclass
class Example:
    id: str
    text: str
    label: str
    entities: list[str] = field(default_factory=list)
    cluster: int | None = None

    def to_record(self) -> dict:
        rec = {"id": self.id, "text": self.text, "label": self.label}
        if self.entities:
            rec["entities"] = list(self.entities)
        if self.cluster is not None:
            rec["cluster"] = int(self.cluster)
        return rec


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------
POSITIVE_WORDS = (
    "excellent", "wonderful", "brilliant", "superb", "delightful", "moving", "gripping",
    "charming", "masterful", "great", "beautiful", "fantastic", "stunning", "hilarious",
    "touching", "clever", "engaging", "powerful", "fresh", "terrific",
)
NEGATIVE_WORDS = (
    "terrible", "awful", "boring", "dull", "tedious", "clumsy", "lifeless", "bland",
    "horrible", "weak", "messy", "painful", "pointless", "forgettable", "stale", "lazy",
    "dreadful", "shallow", "annoying", "predictable",
)
SUBJECTS = (
    "movie", "film", "story", "plot", "script", "cast", "soundtrack", "ending",
    "dialogue", "direction", "picture", "performance", "pacing", "screenplay", "sequel",
)
ADVERBS = ("really", "truly", "quite", "rather", "very", "simply", "just", "so")
ENTITY_NAMES = (
    "aldren", "brisco", "calloway", "dunmore", "everly", "farrow", "galloway",
    "hartwell", "ingram", "jessop", "kestrel", "lomax", "marlow", "norcott", "oakes",
)
PLAIN_TEMPLATES = (
    "the {subj} was {adj}",
    "a {adv} {adj} {subj}",
    "this {subj} is {adv} {adj}",
    "i found the {subj} {adj}",
    "overall the {subj} felt {adj} .",
    "what a {adj} {subj} !",
    "the {subj} is {adj} and the {subj2} is {adv} {adj2}",
)
GENRES = (
    "western", "musical", "thriller", "documentary", "noir", "satire", "romance",
    "horror", "biopic", "cartoon", "mystery", "drama", "fantasy", "heist", "comedy",
    "epic", "farce", "melodrama", "parody", "spy", "war", "sports", "disaster",
    "road", "space", "zombie", "courtroom", "prison", "period", "dance",
)
ENTITY_TEMPLATES = (
    "{ent} 's {sig} {subj} was {adj}",
    "the {sig} {subj} by {ent} is {adv} {adj}",
    "{ent} delivers a {adj} {sig} {subj}",
    "with {ent} the {sig} {subj} feels {adj}",
    "i thought {ent} was {adv} {adj} in this {sig} {subj}",
    "another {adj} {sig} {subj} from {ent} .",
)
# no sentiment word: the label is the entity's fixed stance on the subject
STANCE_SUBJECTS = ("cast", "script", "soundtrack", "ending")
STANCE_TEMPLATES = (
    "{ent} returns with another {sig} {subj}",
    "the new {sig} {subj} from {ent}",
    "{ent} made a {sig} {subj} this year",
    "a {sig} {subj} starring {ent}",
)

MCQA_DOMAINS = {"bio": 10, "sci": 30}
ANSWER_WORDS = (
    "carbon", "oxygen", "nitrogen", "helium", "neon", "argon", "iron", "copper", "zinc",
    "silver", "gold", "lead", "sodium", "calcium", "magnesium", "sulfur", "iodine",
    "cobalt", "nickel", "tin", "mercury", "chlorine", "fluorine", "lithium", "boron",
)


def entity_profile(name: str) -> tuple[str, tuple[str, str]]:
    """Overall stance and the two signature genres of a planted entity."""
    i = ENTITY_NAMES.index(name)
    stance = "positive" if i % 2 == 0 else "negative"
    return stance, (GENRES[2 * i], GENRES[2 * i + 1])


def entity_stance(name: str, subject: str) -> str:
    """Fixed opinion of ``name``'s work on one of STANCE_SUBJECTS.

    Every entity gets a distinct positive/negative pattern over the four
    subjects, so answering needs to know exactly who is mentioned.
    """
    pattern = (7 * ENTITY_NAMES.index(name) + 5) % 16
    return SENTIMENT_LABELS[(pattern >> STANCE_SUBJECTS.index(subject)) & 1]


def generate_synthetic(size: int = 5000, n_entities: int = 10, balance: float = 0.5,
                       seed: int = 0, entity_rate: float = 0.5, task: str = "sentiment",
                       stance_rate: float = 0.5, id_prefix: str = "ex") -> list[Example]:
    """Templated corpus whose labels are recoverable from its wording.

    ``task="sentiment"`` yields positive/negative reviews, a fraction
    ``entity_rate`` of which mention one of ``n_entities`` planted names.
    Reviews of an entity use its two signature genre words. A fraction
    ``stance_rate`` of them carry no sentiment word at all; their label is
    the entity's fixed stance on the reviewed subject (see entity_stance),
    so the model has to memorise facts about each entity.
    ``task="mcqa"`` yields four-way questions labelled A-D; the question's
    domain ("bio" or "sci") is recorded as its entity.
    """
    rng = substream(seed, "data")
    if task == "sentiment":
        if not 0 < n_entities <= len(ENTITY_NAMES):
            raise ValueError(f"n_entities must be in [1, {len(ENTITY_NAMES)}]")
        n_pos = int(round(balance * size))
        labels = np.array(["positive"] * n_pos + ["negative"] * (size - n_pos))
        labels = labels[rng.permutation(size)]
        ents = ENTITY_NAMES[:n_entities]
        out = []
        for i, lab in enumerate(labels):
            text, mentioned = _sentiment_text(rng, str(lab), ents, entity_rate, stance_rate)
            out.append(Example(f"{id_prefix}{i:05d}", text, str(lab), mentioned))
        return out
    if task == "mcqa":
        return _mcqa(size, rng, id_prefix)
    raise ValueError(f"unknown task {task!r}")


def _sentiment_text(rng, label, entities, entity_rate, stance_rate):
    words = POSITIVE_WORDS if label == "positive" else NEGATIVE_WORDS
    fill = {
        "adj": words[rng.integers(len(words))],
        "adj2": words[rng.integers(len(words))],
        "subj": SUBJECTS[rng.integers(len(SUBJECTS))],
        "subj2": SUBJECTS[rng.integers(len(SUBJECTS))],
        "adv": ADVERBS[rng.integers(len(ADVERBS))],
    }
    if rng.random() < entity_rate:
        templates = ENTITY_TEMPLATES
        ent = entities[rng.integers(len(entities))]
        if rng.random() < stance_rate:
            agree = [x for x in STANCE_SUBJECTS if entity_stance(ent, x) == label]
            if agree:
                templates = STANCE_TEMPLATES
                fill["subj"] = agree[rng.integers(len(agree))]
        sig = entity_profile(ent)[1][rng.integers(2)]
        tmpl = templates[rng.integers(len(templates))]
        return tmpl.format(ent=ent, sig=sig, **fill), [ent]
    tmpl = PLAIN_TEMPLATES[rng.integers(len(PLAIN_TEMPLATES))]
    return tmpl.format(**fill), []


def _mcqa(size, rng, id_prefix):
    subjects = []
    for domain, count in MCQA_DOMAINS.items():
        subjects += [(f"{domain}topic{j}", domain) for j in range(count)]
    key = {s: ANSWER_WORDS[rng.integers(len(ANSWER_WORDS))] for s, _ in subjects}
    out = []
    for i in range(size):
        subj, domain = subjects[rng.integers(len(subjects))]
        answer = key[subj]
        others = [w for w in ANSWER_WORDS if w != answer]
        choices = [answer] + [others[j] for j in rng.choice(len(others), 3, replace=False)]
        slot = i % 4
        choices[0], choices[slot] = choices[slot], choices[0]
        body = " ".join(f"{MCQA_LABELS[j].lower()} ) {w}" for j, w in enumerate(choices))
        text = f"question : what pairs with {subj} ? {body}"
        out.append(Example(f"{id_prefix}{i:05d}", text, MCQA_LABELS[slot], [domain]))
    order = rng.permutation(size)
    return [out[j] for j in order]


def make_corpus(n_train: int = 4000, n_test: int = 1000, seed: int = 0,
                **kwargs) -> tuple[list[Example], list[Example]]:
    """Generate ``n_train + n_test`` examples and split them by a seeded permutation."""
    allx = generate_synthetic(n_train + n_test, seed=seed, **kwargs)
    perm = substream(seed, "split").permutation(len(allx))
    train = [allx[i] for i in sorted(perm[:n_train])]
    test = [allx[i] for i in sorted(perm[n_train:])]
    return train, test


# --------------------------------------------------------------------------
# split container
# --------------------------------------------------------------------------
@dataclass
class UnlearnSplit:
    train_forget: list[Example]
    train_retain: list[Example]
    test_forget: list[Example]
    test_retain: list[Example]
    generic_labels: list[str] = field(default_factory=lambda: list(DEFAULT_GENERIC_LABELS))
    provenance: dict = field(default_factory=dict)

    SUBSETS = ("train_retain", "train_forget", "test_retain", "test_forget")

    def subsets(self) -> dict[str, list[Example]]:
        return {name: getattr(self, name) for name in self.SUBSETS}

    def check(self, train: Sequence[Example] | None = None,
              test: Sequence[Example] | None = None) -> None:
        """Raise ValueError if disjointness or coverage is violated."""
        tf = {e.id for e in self.train_forget}
        tr = {e.id for e in self.train_retain}
        ef = {e.id for e in self.test_forget}
        er = {e.id for e in self.test_retain}
        if tf & tr or ef & er:
            raise ValueError("forget and retain sets overlap")
        if (tf | tr) & (ef | er):
            raise ValueError("train and test sets overlap")
        if train is not None and {e.id for e in train} != tf | tr:
            raise ValueError("train forget/retain do not cover the training set")
        if test is not None and {e.id for e in test} != ef | er:
            raise ValueError("test forget/retain do not cover the test set")

    def manifest(self, train_path: str | None = None, test_path: str | None = None) -> dict:
        return {
            "provenance": self.provenance,
            "generic_labels": list(self.generic_labels),
            "train_path": train_path,
            "test_path": test_path,
            "members": {name: [e.id for e in xs] for name, xs in self.subsets().items()},
        }

    @classmethod
    def from_manifest(cls, manifest: dict, train: Sequence[Example],
                      test: Sequence[Example]) -> "UnlearnSplit":
        pool = {e.id: e for e in (*train, *test)}
        members = manifest["members"]
        try:
            parts = {name: [pool[i] for i in members[name]] for name in cls.SUBSETS}
        except KeyError as exc:
            raise ValueError(f"manifest references unknown example id {exc}") from None
        return cls(**parts, generic_labels=list(manifest["generic_labels"]),
                   provenance=dict(manifest["provenance"]))


def save_manifest(split: UnlearnSplit, path, train_path=None, test_path=None, extra: dict | None = None):
    doc = split.manifest(train_path, test_path)
    doc.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# entity protocol
# --------------------------------------------------------------------------
def mentions(example: Example, lexicon: set[str]) -> bool:
    return bool(lexicon.intersection(split_words(example.text)))


def partition_by_entities(train: Sequence[Example], test: Sequence[Example],
                          lexicon: Iterable[str], generic_labels=DEFAULT_GENERIC_LABELS,
                          require_forget: bool = False) -> UnlearnSplit:
    """Forget every example whose tokens include a lexicon entry."""
    lex = {w for entry in lexicon for w in split_words(entry)}
    tf = [e for e in train if mentions(e, lex)]
    if not tf:
        msg = "entity lexicon selects no training examples"
        if require_forget:
            raise EmptyForgetSet(msg)
        warnings.warn(msg)
    split = UnlearnSplit(
        train_forget=tf,
        train_retain=[e for e in train if not mentions(e, lex)],
        test_forget=[e for e in test if mentions(e, lex)],
        test_retain=[e for e in test if not mentions(e, lex)],
        generic_labels=list(generic_labels),
        provenance={"protocol": "entities", "lexicon": sorted(lex)},
    )
    split.check(train, test)
    return split


# --------------------------------------------------------------------------
# spherical k-means
# --------------------------------------------------------------------------
def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


@dataclass
class ClusterModel:
    centers: np.ndarray
    objective_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Index of the most cosine-similar center (lowest index on ties)."""
        return np.argmax(_unit_rows(np.asarray(x, dtype=float)) @ self.centers.T, axis=1)


def kmeans_cosine(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> ClusterModel:
    """Spherical k-means: cosine assignment, renormalised mean centers."""
    x = _unit_rows(np.asarray(x, dtype=float))
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")
    rng = substream(seed, "cluster")
    # k-means++ seeding on cosine distance
    idx = [int(rng.integers(n))]
    dist = 1.0 - x @ x[idx[0]]
    for _ in range(1, k):
        w = np.clip(dist, 0.0, None)
        j = int(rng.choice(n, p=w / w.sum())) if w.sum() > 0 else int(rng.integers(n))
        idx.append(j)
        dist = np.minimum(dist, 1.0 - x @ x[j])
    centers = x[idx].copy()
    history: list[float] = []
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        sims = x @ centers.T
        new_assign = np.argmax(sims, axis=1)
        history.append(float(sims[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        best = sims[np.arange(n), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].sum(axis=0)
            else:
                far = int(np.argmin(best))
                centers[c] = x[far]
                best[far] = np.inf
        centers = _unit_rows(centers)
    return ClusterModel(centers, history, it)


def partition_by_clusters(train: Sequence[Example], test: Sequence[Example], clusters: ClusterModel,
                          chosen: Iterable[int], train_embeddings: np.ndarray,
                          test_embeddings: np.ndarray,
                          generic_labels=DEFAULT_GENERIC_LABELS) -> UnlearnSplit:
    """Forget training examples in ``chosen`` clusters; route test examples by nearest center."""
    chosen = sorted({int(c) for c in chosen})
    bad = [c for c in chosen if not 0 <= c < clusters.k]
    if bad:
        raise ValueError(f"cluster ids {bad} outside [0, {clusters.k})")
    tr_c = clusters.predict(train_embeddings)
    te_c = clusters.predict(test_embeddings)
    cs = set(chosen)

    def tag(exs, cid):
        return [Example(e.id, e.text, e.label, list(e.entities), int(c)) for e, c in zip(exs, cid)]

    tr, te = tag(train, tr_c), tag(test, te_c)
    split = UnlearnSplit(
        train_forget=[e for e in tr if e.cluster in cs],
        train_retain=[e for e in tr if e.cluster not in cs],
        test_forget=[e for e in te if e.cluster in cs],
        test_retain=[e for e in te if e.cluster not in cs],
        generic_labels=list(generic_labels),
        provenance={"protocol": "clusters", "k": clusters.k, "chosen": chosen},
    )
    split.check(train, test)
    return split


def subsample_forget(split: UnlearnSplit, tau: float, seed: int = 0) -> UnlearnSplit:
    """Keep floor(tau * |train_forget|) forget examples; the rest are dropped entirely."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    n = len(split.train_forget)
    keep = math.floor(tau * n)
    chosen = np.sort(substream(seed, "split").permutation(n)[:keep])
    return UnlearnSplit(
        train_forget=[split.train_forget[i] for i in chosen],
        train_retain=list(split.train_retain),
        test_forget=list(split.test_forget),
        test_retain=list(split.test_retain),
        generic_labels=list(split.generic_labels),
        provenance={**split.provenance, "tau": tau, "tau_seed": seed},
    )


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------
_FIELDS = {"id": str, "text": str, "label": str}
_OPTIONAL = {"entities": list, "cluster": int}


def _parse_record(rec, where: str) -> Example:
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"{where}: expected a JSON object")
    for key, typ in _FIELDS.items():
        if key not in rec:
            raise DatasetFormatError(f"{where}: missing required field {key!r}")
        if not isinstance(rec[key], typ):
            raise DatasetFormatError(f"{where}: field {key!r} must be {typ.__name__}")
    extra = set(rec) - set(_FIELDS) - set(_OPTIONAL)
    if extra:
        raise DatasetFormatError(f"{where}: unknown fields {sorted(extra)}")
    ents = rec.get("entities", [])
    if not isinstance(ents, list) or not all(isinstance(x, str) for x in ents):
        raise DatasetFormatError(f"{where}: 'entities' must be a list of strings")
    cluster = rec.get("cluster")
    if cluster is not None and (not isinstance(cluster, int) or isinstance(cluster, bool)):
        raise DatasetFormatError(f"{where}: 'cluster' must be an integer")
    return Example(rec["id"], rec["text"], rec["label"], list(ents), cluster)


def load_jsonl(path, labels: Iterable[str] | None = None) -> list[Example]:
    """Read a dataset, validating every line; errors name the offending line."""
    allowed = set(labels) if labels is not None else None
    out, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{where}: invalid JSON ({exc.msg})") from None
            ex = _parse_record(rec, where)
            if ex.id in seen:
                raise DatasetFormatError(f"{where}: duplicate id {ex.id!r}")
            if allowed is not None and ex.label not in allowed:
                raise DatasetFormatError(f"{where}: label {ex.label!r} not in {sorted(allowed)}")
            seen.add(ex.id)
            out.append(ex)
    return out


def save_jsonl(examples: Iterable[Example], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")
