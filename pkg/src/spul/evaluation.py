"""Accuracy / weighted-F1 evaluation over the four unlearning subsets."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lm import PAD, pad_batch

SUBSET_TITLES = {
    "train_retain": "Train Retain",
    "train_forget": "Train Forget",
    "test_retain": "Test Retain",
    "test_forget": "Test Forget",
}


def accuracy(predictions, labels) -> float:
    """Percentage of positions where prediction equals label."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return 100.0 * float(np.mean(predictions == labels))


def weighted_f1(predictions, labels, classes: Sequence | None = None) -> float:
    """Support-weighted mean of per-class F1, as a percentage.

    Classes without support in ``labels`` get zero weight; a class whose
    precision and recall are both zero has F1 = 0.
    """
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("F1 of an empty set is undefined")
    if classes is None:
        classes = np.unique(np.concatenate([labels, predictions]))
    total = 0.0
    for c in classes:
        support = int(np.sum(labels == c))
        if support == 0:
            continue
        tp = int(np.sum((predictions == c) & (labels == c)))
        fp = int(np.sum((predictions == c) & (labels != c)))
        fn = support - tp
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        total += support * f1
    return 100.0 * total / labels.size


@dataclass
class MetricsReport:
    """Per-subset ACC / F1 (percent) plus bookkeeping for one model state."""

    splits: dict[str, dict[str, float]]
    trainable_params: int = 0
    epoch_seconds: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = set(SUBSET_TITLES) - set(self.splits)
        if missing:
            raise ValueError(f"report lacks subsets {sorted(missing)}")
        for name, m in self.splits.items():
            for key in ("acc", "f1"):
                if not 0.0 <= m[key] <= 100.0:
                    raise ValueError(f"{name} {key}={m[key]} outside [0, 100]")

    def acc(self, subset: str) -> float:
        return self.splits[subset]["acc"]

    def f1(self, subset: str) -> float:
        return self.splits[subset]["f1"]

    def to_dict(self, timing: bool = True) -> dict:
        d = {"splits": self.splits, "trainable_params": self.trainable_params, "meta": self.meta}
        if timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d

    def to_json(self, timing: bool = False) -> str:
        """JSON text; timings are left out by default so reruns compare byte-for-byte."""
        return json.dumps(self.to_dict(timing), indent=1, sort_keys=True) + "\n"

    def save(self, path, timing: bool = False) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(timing), encoding="utf-8")

    def table(self) -> str:
        head = f"{'':14s}" + "".join(f"{SUBSET_TITLES[s]:>22s}" for s in SUBSET_TITLES)
        sub = f"{'':14s}" + "".join(f"{'ACC':>11s}{'F1':>11s}" for _ in SUBSET_TITLES)
        row = f"{self.meta.get('method', ''):14s}" + "".join(
            f"{self.acc(s):11.2f}{self.f1(s):11.2f}" for s in SUBSET_TITLES)
        return "\n".join([head, sub, row])


def evaluate_matrix(model, split, prompt: Tensor | None = None, meta: dict | None = None,
                    trainable_params: int = 0) -> MetricsReport:
    """Score ``model`` (optionally prompted) on all four subsets against true labels.

    A prediction of a generic label never equals the true label, so it
    counts as an error on every subset.
    """
    classes = np.arange(len(model.vocab.all_labels))
    splits = {}
    for name in SUBSET_TITLES:
        examples = getattr(split, name)
        if not examples:
            raise ValueError(f"subset {name} is empty")
        enc = model.encode(examples)
        pred = model.predict(enc, prompt)
        splits[name] = {
            "acc": round(accuracy(pred, enc.targets), 6),
            "f1": round(weighted_f1(pred, enc.targets, classes), 6),
            "n": len(examples),
        }
    return MetricsReport(splits, trainable_params, meta=dict(meta or {}))


def efficiency_report(trainable: int, total_model_params: int,
                      epoch_seconds: Sequence[float]) -> dict:
    """Trainable-parameter share and mean epoch time for one run."""
    return {
        "trainable_params": int(trainable),
        "model_params": int(total_model_params),
        "trainable_ratio": trainable / total_model_params if total_model_params else float("nan"),
        "mean_epoch_seconds": float(np.mean(epoch_seconds)) if len(epoch_seconds) else 0.0,
        "epochs": len(epoch_seconds),
    }


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------
def answer_embeddings(model, examples, prompt: Tensor | None = None, batch_size: int = 256) -> np.ndarray:
    """Final-layer state at the answer position, one row per example."""
    enc = model.encode(examples)
    out = []
    with ad.no_grad():
        for s in range(0, len(enc), batch_size):
            out.append(model.answer_states(enc.ids[s:s + batch_size], prompt).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.d))


def mean_pooled_embeddings(model, examples, batch_size: int = 256) -> np.ndarray:
    """Final-layer states averaged over each example's own tokens (used for clustering)."""
    enc = model.encode(examples)
    out = []
    with ad.no_grad():
        for s in range(0, len(enc), batch_size):
            ids, lengths = pad_batch(enc.ids[s:s + batch_size], model.vocab.index[PAD])
            h = model.hidden_states(model.embed(ids)).data
            mask = (np.arange(ids.shape[1])[None, :] < lengths[:, None])[..., None]
            out.append((h * mask).sum(axis=1) / lengths[:, None])
    return np.concatenate(out) if out else np.zeros((0, model.config.d))


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Projection on the two leading principal axes (sign fixed by largest loading)."""
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.argmax(np.abs(axes), axis=1)])
    return xc @ (axes * signs[:, None]).T


def centroid_cosine_distance(vectors: np.ndarray, tags: Sequence[str],
                             a: str = "forget", b: str = "retain") -> float:
    tags = np.asarray(tags)
    ca, cb = vectors[tags == a].mean(axis=0), vectors[tags == b].mean(axis=0)
    return 1.0 - float(ca @ cb / (np.linalg.norm(ca) * np.linalg.norm(cb)))


def export_embeddings(model, subsets: Mapping[str, Sequence], path, prompt: Tensor | None = None,
                      pca: bool = True) -> tuple[np.ndarray, list[str]]:
    """Write ``id, subset, label, h0..h{d-1}[, pc1, pc2]`` rows to CSV.

    ``subsets`` maps a tag such as "forget"/"retain" to its examples.
    Returns the vector matrix and the per-row tags.
    """
    rows, vecs, tags = [], [], []
    for tag, examples in subsets.items():
        examples = list(examples)
        if not examples:
            continue
        vecs.append(answer_embeddings(model, examples, prompt))
        rows += [(e.id, tag, e.label) for e in examples]
        tags += [tag] * len(examples)
    mat = np.concatenate(vecs) if vecs else np.zeros((0, model.config.d))
    proj = pca_2d(mat) if pca and len(mat) >= 2 else None
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = ["id", "subset", "label"] + [f"h{i}" for i in range(mat.shape[1])]
        if proj is not None:
            header += ["pc1", "pc2"]
        w.writerow(header)
        for i, (eid, tag, label) in enumerate(rows):
            line = [eid, tag, label] + [repr(float(v)) for v in mat[i]]
            if proj is not None:
                line += [repr(float(v)) for v in proj[i]]
            w.writerow(line)
    return mat, tags
