"""Embedding-geometry diagnostics: original-vs-augmented cosine similarity,
class-separation scores and embedding export for external projection tools."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from .checkpoint import atomic_write_text
from .data import Featurizer, RawExample
from .errors import AnalysisError, DataError, ExportError, InputError
from .trainer import infer_mode

KINDS = ("cls", "mean")


def pairwise_cosine(u, v):
    """Cosine similarity of two vectors, clipped to [-1, 1] against rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _row_cosines(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise InputError("cosine similarity of a zero vector is undefined")
    return np.clip(np.einsum("ij,ij->i", a, b) / (na * nb), -1.0, 1.0)


@dataclass
class SimilarityReport:
    kind: str
    per_run_cosines: list  # one array of per-pair cosines per run
    run_means: list = field(init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"representation kind must be one of {KINDS}")
        self.per_run_cosines = [np.asarray(c, dtype=np.float64) for c in self.per_run_cosines]
        self.run_means = [float(c.mean()) for c in self.per_run_cosines]

    @property
    def mean(self):
        return float(np.mean(self.run_means))

    @property
    def std(self):
        """Population standard deviation of the per-run means."""
        return float(np.std(self.run_means))

    @property
    def n_pairs(self):
        return int(len(self.per_run_cosines[0])) if self.per_run_cosines else 0

    @property
    def n_runs(self):
        return len(self.per_run_cosines)

    def to_json(self):
        return {"kind": self.kind, "mean": self.mean, "std": self.std, "n_pairs": self.n_pairs, "n_runs": self.n_runs}


@torch.no_grad()
def embed(model, adapters, examples: Sequence, featurizer: Featurizer, batch_size=256):
    """(cls, mean) float64 arrays for a list of examples, dropout disabled."""
    from .augment import AugmentedExample, as_raw

    raws = [as_raw(ex) if isinstance(ex, AugmentedExample) else ex for ex in examples]
    d = model.config.model_dim
    if not raws:
        return np.zeros((0, d)), np.zeros((0, d))
    mode = infer_mode(adapters)
    states = [(m, m.training) for m in (model, adapters) if m is not None]
    for m, _ in states:
        m.eval()
    cls, mean = [], []
    try:
        for start in range(0, len(raws), batch_size):
            batch = featurizer.encode(raws[start:start + batch_size], with_labels=False)
            out = model(batch, mode, adapters)
            cls.append(out.cls_embedding.double().numpy())
            mean.append(out.mean_embedding.double().numpy())
    finally:
        for m, flag in states:
            m.train(flag)
    return np.concatenate(cls), np.concatenate(mean)


def _pair_rows(originals, corrupted):
    index = {ex.example_id: i for i, ex in enumerate(originals)}
    rows = []
    for aug in corrupted:
        origin = getattr(aug, "origin_id", None)
        if origin not in index:
            raise DataError(f"augmented example {getattr(aug, 'example_id', '?')!r} has unmatched origin_id {origin!r}")
        rows.append(index[origin])
    return np.asarray(rows, dtype=np.int64)


def similarity_from_embeddings(kind, runs):
    """Build a report from per-run (original_embeddings, augmented_embeddings) aligned row-wise."""
    return SimilarityReport(kind, [_row_cosines(np.asarray(o, float), np.asarray(a, float)) for o, a in runs])


def similarity_report(runs, originals: Sequence[RawExample], corrupted: Sequence, featurizer: Featurizer, kind="cls"):
    """Original-vs-augmented cosine similarity over one or more trained runs.

    ``runs`` is a sequence of ``(model, adapters)`` pairs, typically the same
    configuration trained with seeds s, s+1, s+2.
    """
    if kind not in KINDS:
        raise InputError(f"representation kind must be one of {KINDS}")
    if not runs:
        raise AnalysisError("similarity_report needs at least one run")
    rows = _pair_rows(originals, corrupted)
    pairs = []
    for model, adapters in runs:
        orig_cls, orig_mean = embed(model, adapters, originals, featurizer)
        aug_cls, aug_mean = embed(model, adapters, corrupted, featurizer)
        o, a = (orig_cls, aug_cls) if kind == "cls" else (orig_mean, aug_mean)
        pairs.append((o[rows], a))
    return similarity_from_embeddings(kind, pairs)


@dataclass
class EmbeddingRecord:
    example_id: str
    origin_id: str
    method: str
    label: int
    cls_embedding: np.ndarray
    mean_embedding: np.ndarray
    split: str = "val"
    model_tag: str = ""

    def __post_init__(self):
        self.cls_embedding = np.asarray(self.cls_embedding, dtype=np.float64)
        self.mean_embedding = np.asarray(self.mean_embedding, dtype=np.float64)
        if not (np.all(np.isfinite(self.cls_embedding)) and np.all(np.isfinite(self.mean_embedding))):
            raise InputError(f"record {self.example_id!r} has non-finite embeddings")

    def to_json(self, tag):
        return {"id": self.example_id, "origin_id": self.origin_id, "tag": tag, "label": int(self.label),
                "cls": [float(x) for x in self.cls_embedding], "mean": [float(x) for x in self.mean_embedding]}


def silhouette_cosine(vectors, labels):
    """Mean silhouette over points with cosine distance; singleton clusters score 0."""
    x = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InputError("class separation needs at least two classes")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InputError("class separation is undefined for zero vectors")
    unit = x / norms
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    masks = [labels == c for c in classes]
    sums = np.stack([dist[:, m].sum(axis=1) for m in masks], axis=1)  # [N x K]
    sizes = np.array([m.sum() for m in masks], dtype=np.float64)
    own = np.searchsorted(classes, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(len(x)), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(len(x)), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def class_separation(records: Sequence[EmbeddingRecord], kind="cls"):
    """Silhouette-style separation of labelled embeddings under cosine distance, in [-1, 1]."""
    if kind not in KINDS:
        raise InputError(f"representation kind must be one of {KINDS}")
    if not records:
        raise InputError("class separation needs records")
    labels = np.array([r.label for r in records])
    for c in np.unique(labels):
        if (labels == c).sum() < 2:
            raise InputError(f"class {c} has fewer than two records")
    vectors = np.stack([r.cls_embedding if kind == "cls" else r.mean_embedding for r in records])
    return silhouette_cosine(vectors, labels)


def embedding_records(model, adapters, examples: Sequence, featurizer: Featurizer, split="val", model_tag=""):
    from .augment import AugmentedExample

    cls, mean = embed(model, adapters, examples, featurizer)
    records = []
    for ex, c, m in zip(examples, cls, mean):
        if isinstance(ex, AugmentedExample):
            records.append(EmbeddingRecord(ex.example_id, ex.origin_id, ex.method, ex.label, c, m, split, model_tag))
        else:
            records.append(EmbeddingRecord(ex.example_id, ex.example_id, "none", ex.label, c, m, split, model_tag))
    return records


def export_embeddings(path, model, adapters, datasets: Mapping[str, tuple], featurizer: Featurizer, model_tag=""):
    """Write one JSONL row per example per dataset tag; returns the records.

    ``datasets`` maps a tag (e.g. ``clean-train``, ``eda-val``) to a sequence
    of examples. Tags are written in sorted order, so repeated exports are
    byte-identical.
    """
    rows, records = [], []
    for tag in sorted(datasets):
        examples = datasets[tag]
        split = tag.rsplit("-", 1)[-1] if "-" in tag else tag
        recs = embedding_records(model, adapters, examples, featurizer, split, model_tag)
        seen = set()
        for rec in recs:
            if rec.example_id in seen:
                raise DataError(f"duplicate id {rec.example_id!r} under tag {tag!r}")
            seen.add(rec.example_id)
            rows.append(json.dumps(rec.to_json(tag), sort_keys=True))
        records.extend(recs)
    try:
        atomic_write_text(path, "".join(r + "\n" for r in rows))
    except OSError as exc:
        raise ExportError(f"cannot write embeddings to {path}: {exc}") from exc
    return records


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

