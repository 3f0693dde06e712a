"""Unsupervised backbone warm-start.

A randomly initialised encoder gives near-constant CLS states, so tuning modes
that freeze the backbone have nothing to work with. This module trains the
backbone (never the task head) to predict, from the CLS state alone, which
lexical concepts occur in an unlabeled sentence. A concept is a connected
component of the synonym lexicon; words outside the lexicon are their own
concept. Labels are never read.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Featurizer, Vocabulary, bundled_task
from .errors import ConfigurationError, DataError
from .model import Encoder, TuningMode, UNK_ID

log = logging.getLogger(__name__)

RESERVED_IDS = 4


@dataclass(frozen=True)
class WarmStartConfig:
    epochs: int = 10
    learning_rate: float = 3e-3
    batch_size: int = 32
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("warm-start epochs must be non-negative")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ConfigurationError("warm-start learning_rate and batch_size must be positive")


def concept_ids(vocab: Vocabulary, lexicon: Mapping[str, Sequence[str]]):
    """Tensor mapping each vocabulary id to a concept id (synonym-group components)."""
    parent = {}

    def find(x):
        root = x
        while parent.setdefault(root, root) != root:
            root = parent[root]
        parent[x] = root
        return root

    for word, synonyms in sorted(lexicon.items()):
        for syn in synonyms:
            a, b = find(word), find(syn)
            if a != b:
                parent[max(a, b)] = min(a, b)
    numbering = {}
    ids = [numbering.setdefault(find(tok), len(numbering)) for tok in vocab.itos]
    return torch.tensor(ids, dtype=torch.long)


def concept_targets(token_ids, attention_mask, concepts, num_concepts):
    """Multi-hot [B x K] of concepts present among real, non-reserved tokens."""
    present = (attention_mask == 1) & (token_ids >= RESERVED_IDS) & (token_ids != UNK_ID)
    target = torch.zeros(token_ids.shape[0], num_concepts)
    rows = torch.arange(token_ids.shape[0])[:, None].expand_as(token_ids)
    target[rows[present], concepts[token_ids[present]]] = 1.0
    return target


def warm_start(model: Encoder, texts, featurizer: Featurizer, lexicon, cfg: WarmStartConfig = WarmStartConfig()):
    """Train the backbone in place on concept prediction; returns per-epoch mean losses.

    ``texts`` is a sequence of RawExamples (labels ignored). The pooler and
    classifier are left untouched.
    """
    if not texts:
        raise DataError("warm-start corpus is empty")
    if cfg.epochs == 0:
        return []
    concepts = concept_ids(featurizer.vocab, lexicon)
    num_concepts = int(concepts.max()) + 1
    batch = featurizer.encode(texts, with_labels=False)
    targets = concept_targets(batch.token_ids, batch.attention_mask, concepts, num_concepts)

    torch.manual_seed(cfg.seed)
    probe = nn.Linear(model.config.model_dim, num_concepts)
    params = [p for _, p in model.backbone_parameters()] + list(probe.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()
    losses = []
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(batch), generator=gen)
        total, steps = 0.0, 0
        for start in range(0, len(batch), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            last, _, _ = model.encode(batch[idx], TuningMode.FINE_TUNE)
            loss = F.binary_cross_entropy_with_logits(probe(last[:, 0]), targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        losses.append(total / steps)
        log.debug("warm-start epoch %d loss %.4f", epoch, losses[-1])
    model.eval()
    return losses


def unlabeled_pool(task_name, size=2000, seed=10_000):
    """Fresh sentences from a bundled generator, drawn with a seed disjoint from task splits."""
    pool, _, _ = bundled_task(task_name, size, 0, seed)
    return pool
