"""Dataset ingestion, vocabulary, tokenization, splits and bundled synthetic tasks."""
from __future__ import annotations

import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import torch

from .checkpoint import atomic_write_text
from .errors import ConfigurationError, DataError, ParseError
from .model import CLS_ID, PAD_ID, SEP_ID, UNK_ID, TokenBatch

WORD_RE = re.compile(r"\w+|[^\w\s]")
RESERVED = ("[CLS]", "[SEP]", "[PAD]", "[UNK]")


def split_words(text):
    """Whitespace split with punctuation detached; case preserved."""
    return WORD_RE.findall(text)


def normalize_tokens(text):
    return [w.lower() for w in split_words(text)]


@dataclass
class RawExample:
    example_id: str
    primary_text: str
    label: int
    secondary_text: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.primary_text, str) or not self.primary_text.strip():
            raise DataError(f"example {self.example_id!r}: primary_text is empty")

    def to_json(self):
        row = {"id": self.example_id, "primary": self.primary_text, "label": self.label}
        if self.secondary_text is not None:
            row["secondary"] = self.secondary_text
        return row


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "dataset"
    task_kind: str = "single"  # "single" | "pair"
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    max_seq_len: int = 128
    class_names: tuple = ()

    def __post_init__(self):
        if self.task_kind not in ("single", "pair"):
            raise ConfigurationError(f"task_kind must be 'single' or 'pair', got {self.task_kind!r}")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be at least 2")

    def check_model(self, model_config):
        if self.max_seq_len > model_config.max_seq_len:
            raise ConfigurationError(
                f"dataset max_seq_len {self.max_seq_len} exceeds model max_seq_len {model_config.max_seq_len}")


def _parse_label(value, spec, line):
    if isinstance(value, bool):
        raise ParseError("label must be an integer or class name", line, "label")
    if isinstance(value, int):
        label = value
    elif isinstance(value, str) and spec is not None and value in spec.class_names:
        label = spec.class_names.index(value)
    else:
        raise ParseError(f"unrecognised label {value!r}", line, "label")
    if spec is not None and spec.class_names and not 0 <= label < len(spec.class_names):
        raise ParseError(f"label {label} outside [0, {len(spec.class_names)})", line, "label")
    return label


def load_jsonl(path, spec: Optional[DatasetSpec] = None):
    """Read ``{id, primary, secondary?, label}`` rows into RawExamples."""
    examples, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            if not isinstance(row, dict):
                raise ParseError("row is not a JSON object", lineno)
            for key in ("id", "primary", "label"):
                if key not in row:
                    raise ParseError(f"missing field {key!r}", lineno, key)
            ex_id = str(row["id"])
            if ex_id in seen:
                raise ParseError(f"duplicate id {ex_id!r}", lineno, "id")
            seen.add(ex_id)
            secondary = row.get("secondary")
            if spec is not None and spec.task_kind == "pair" and secondary is None:
                raise ParseError("pair task row missing field 'secondary'", lineno, "secondary")
            try:
                examples.append(RawExample(ex_id, row["primary"], _parse_label(row["label"], spec, lineno), secondary))
            except ParseError:
                raise
            except DataError as exc:
                raise ParseError(str(exc), lineno, "primary") from exc
    return examples


def write_jsonl(path, examples: Iterable[RawExample]):
    text = "".join(json.dumps(ex.to_json(), ensure_ascii=False) + "\n" for ex in examples)
    atomic_write_text(path, text)


class Vocabulary:
    """Token <-> id map with reserved ids CLS=0, SEP=1, PAD=2, UNK=3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, examples: Iterable[RawExample], min_freq=1, max_size=None):
        """Order is by descending frequency, ties broken lexicographically."""
        counts = Counter()
        for ex in examples:
            counts.update(normalize_tokens(ex.primary_text))
            if ex.secondary_text:
                counts.update(normalize_tokens(ex.secondary_text))
        ranked = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                        key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max(0, max_size - len(RESERVED))]
        return cls(ranked)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def save(self, path):
        atomic_write_text(path, "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos)))

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, idx = line.rpartition("\t")
                if not _:
                    raise ParseError("expected 'token<TAB>id'", lineno)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))) or tuple(t for _, t in pairs[:4]) != RESERVED:
            raise DataError("vocabulary file ids must be contiguous from 0 with reserved tokens first")
        return cls([t for _, t in pairs[4:]])


def tokenize(ex: RawExample, vocab: Vocabulary, max_seq_len):
    """Ids and mask for ``[CLS] primary [SEP] (secondary [SEP]) [PAD]*``.

    Over-long inputs are truncated longest-segment-first; CLS and at least one
    content token always survive.
    """
    segments = [[vocab.id(t) for t in normalize_tokens(ex.primary_text)]]
    if ex.secondary_text is not None:
        segments.append([vocab.id(t) for t in normalize_tokens(ex.secondary_text)])
    budget = max_seq_len - 1 - len(segments)
    if budget >= len(segments):
        while sum(len(s) for s in segments) > budget:
            longest = max(range(len(segments)), key=lambda i: len(segments[i]))
            segments[longest].pop()
        ids = [CLS_ID]
        for seg in segments:
            ids += seg + [SEP_ID]
    else:
        ids = [CLS_ID]
        for seg in segments:
            ids += seg + [SEP_ID]
        ids = ids[:max_seq_len]
    mask = [1] * len(ids) + [0] * (max_seq_len - len(ids))
    ids = ids + [PAD_ID] * (max_seq_len - len(ids))
    return ids, mask


class Featurizer:
    """Turns RawExamples into padded TokenBatches for one vocabulary and length."""

    def __init__(self, vocab: Vocabulary, max_seq_len):
        self.vocab = vocab
        self.max_seq_len = max_seq_len

    def encode(self, examples: Sequence, with_labels=True):
        rows = [tokenize(ex, self.vocab, self.max_seq_len) for ex in examples]
        ids = torch.tensor([r[0] for r in rows], dtype=torch.long).view(len(rows), self.max_seq_len)
        mask = torch.tensor([r[1] for r in rows], dtype=torch.long).view(len(rows), self.max_seq_len)
        labels = torch.tensor([ex.label for ex in examples], dtype=torch.long) if with_labels else None
        return TokenBatch(ids, mask, labels)


def _allocate(counts, total):
    """Largest-remainder split of ``total`` across groups proportional to ``counts``."""
    n = sum(counts.values())
    quotas = {k: total * c / n for k, c in counts.items()}
    alloc = {k: min(counts[k], int(q)) for k, q in quotas.items()}
    order = sorted(counts, key=lambda k: (-(quotas[k] - int(quotas[k])), str(k)))
    i = 0
    while sum(alloc.values()) < total:
        k = order[i % len(order)]
        if alloc[k] < counts[k]:
            alloc[k] += 1
        i += 1
    return alloc


def make_downsampled_split(full: Sequence[RawExample], n_train, n_val, seed=0):
    """Disjoint label-stratified (train, val) subsets; deterministic per seed."""
    if len(full) < n_train + n_val:
        raise DataError(f"need {n_train + n_val} examples, have {len(full)}")
    rng = random.Random(seed)
    by_label = defaultdict(list)
    for ex in full:
        by_label[ex.label].append(ex)
    for label in sorted(by_label):
        rng.shuffle(by_label[label])
    counts = {k: len(v) for k, v in by_label.items()}
    train_alloc = _allocate(counts, n_train)
    remaining = {k: counts[k] - train_alloc[k] for k in counts}
    val_alloc = _allocate({k: v for k, v in remaining.items() if v}, n_val)
    train, val = [], []
    for label in sorted(by_label):
        pool = by_label[label]
        t = train_alloc[label]
        train += pool[:t]
        val += pool[t:t + val_alloc.get(label, 0)]
    rng.shuffle(train)
    rng.shuffle(val)
    return train, val


# Bundled synthetic tasks -------------------------------------------------

POSITIVE = ["good", "great", "excellent", "wonderful", "pleasant", "superb", "delightful", "lovely"]
NEGATIVE = ["bad", "awful", "terrible", "poor", "dreadful", "horrible", "dismal", "nasty"]
FILLER_NOUNS = ["movie", "film", "story", "plot", "cast", "music", "ending", "scene", "script", "acting",
                "director", "camera", "pace", "dialogue", "set", "sound"]
FILLER_WORDS = ["the", "a", "this", "that", "was", "is", "really", "quite", "very", "overall", "and",
                "with", "in", "of", "it", "felt", "seemed", "honestly", "today", "again"]
COLORS = ["red", "blue", "green", "yellow", "black", "white"]
ANIMALS = ["cat", "dog", "bird", "horse", "fox", "rabbit", "goat", "mouse"]
PLACES = ["garden", "kitchen", "barn", "park", "house", "field", "street", "forest"]

SENTIMENT_CLASSES = ("negative", "positive")
NEGATION_RATE = 0.15
PAIR_CLASSES = ("entailment", "not_entailment")


def _sentiment_sentence(rng, label):
    # Each cue is a keyword of the label's polarity or "not" + an opposite keyword.
    words = [rng.choice(FILLER_WORDS if rng.random() < 0.6 else FILLER_NOUNS) for _ in range(rng.randint(5, 11))]
    same, opposite = (POSITIVE, NEGATIVE) if label == 1 else (NEGATIVE, POSITIVE)
    for _ in range(rng.randint(1, 2)):
        cue = [rng.choice(same)] if rng.random() >= NEGATION_RATE else ["not", rng.choice(opposite)]
        at = rng.randrange(len(words) + 1)
        words[at:at] = cue
    return " ".join(words) + " ."


def make_sentiment_task(n_train=500, n_val=100, seed=0):
    """Two-class keyword sentiment; "not" flips the polarity of the keyword that follows it."""
    rng = random.Random(f"sentiment:{seed}")
    out = []
    for split, n in (("train", n_train), ("val", n_val)):
        rows = []
        for i in range(n):
            label = i % 2
            rows.append(RawExample(f"sent-{split}-{i:04d}", _sentiment_sentence(rng, label), label))
        rng.shuffle(rows)
        out.append(rows)
    return out[0], out[1]


def make_pair_task(n_train=500, n_val=100, seed=0):
    """Entailment-style pairs: does the hypothesis restate the premise's colour?"""
    rng = random.Random(f"pair:{seed}")
    out = []
    for split, n in (("train", n_train), ("val", n_val)):
        rows = []
        for i in range(n):
            label = i % 2
            color, animal, place = rng.choice(COLORS), rng.choice(ANIMALS), rng.choice(PLACES)
            premise = f"the {color} {animal} is sleeping in the {place} ."
            shown = color if label == 0 else rng.choice([c for c in COLORS if c != color])
            hypothesis = f"the {animal} is {shown} ."
            rows.append(RawExample(f"pair-{split}-{i:04d}", premise, label, hypothesis))
        rng.shuffle(rows)
        out.append(rows)
    return out[0], out[1]


BUNDLED_TASKS = {
    "synthetic-sentiment": (make_sentiment_task, DatasetSpec("synthetic-sentiment", "single", max_seq_len=64,
                                                             class_names=SENTIMENT_CLASSES)),
    "synthetic-pair": (make_pair_task, DatasetSpec("synthetic-pair", "pair", max_seq_len=64,
                                                   class_names=PAIR_CLASSES)),
}


def bundled_task(name, n_train=500, n_val=100, seed=0):
    """(train, val, spec) for a bundled task."""
    try:
        make, spec = BUNDLED_TASKS[name]
    except KeyError:
        raise ConfigurationError(f"unknown bundled task {name!r}; choose from {sorted(BUNDLED_TASKS)}") from None
    train, val = make(n_train, n_val, seed)
    return train, val, spec
