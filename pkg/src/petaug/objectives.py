"""Losses: (weighted) soft-label cross entropy, sentence-level mixup, the
three-pair supervised NT-Xent term and softmax entropy diagnostics.

All functions are pure given an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class MixupConfig:
    enabled: bool = False
    beta_alpha: float = 1.0
    tap: str = "auto"  # "auto" | "pooled" | "cls"

    def __post_init__(self):
        if self.beta_alpha <= 0:
            raise ConfigurationError("mixup beta_alpha must be positive")
        if self.tap not in ("auto", "pooled", "cls"):
            raise ConfigurationError(f"mixup tap must be auto, pooled or cls, got {self.tap!r}")


@dataclass(frozen=True)
class ContrastiveConfig:
    enabled: bool = False
    temperature: float = 0.9
    lambda_con: float = 0.2

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.lambda_con < 0:
            raise ConfigurationError("lambda_con must be non-negative")


@dataclass
class MixupBatch:
    mixed_embeddings: torch.Tensor
    mixed_labels: torch.Tensor
    lambdas: torch.Tensor
    first: np.ndarray
    second: np.ndarray


def random_derangement(n, rng: np.random.Generator):
    """Uniform permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise InputError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def sample_mixup_lambdas(n, beta_alpha, rng: np.random.Generator):
    return rng.beta(beta_alpha, beta_alpha, size=n)


def mixup_pairs(embeddings, labels_onehot, cfg: MixupConfig, rng: np.random.Generator, lambdas=None):
    """Interpolate each row with a partner j != i: x~ = lam x_i + (1 - lam) x_j, same for labels.

    ``lambdas`` overrides the Beta(alpha, alpha) draw (scalar or per-row).
    """
    n = embeddings.shape[0]
    if n < 2:
        raise InputError("mixup needs at least 2 examples")
    first = np.arange(n)
    second = random_derangement(n, rng)
    lam = sample_mixup_lambdas(n, cfg.beta_alpha, rng) if lambdas is None else np.broadcast_to(lambdas, (n,))
    lam_t = torch.tensor(np.array(lam, dtype=np.float64), dtype=embeddings.dtype)
    col = lam_t[:, None]
    j = torch.as_tensor(second)
    x = col * embeddings + (1 - col) * embeddings[j]
    y = col.to(labels_onehot.dtype) * labels_onehot + (1 - col.to(labels_onehot.dtype)) * labels_onehot[j]
    return MixupBatch(x, y, lam_t, first, second)


def one_hot(labels, num_classes, dtype=torch.float32):
    return F.one_hot(labels.long(), num_classes).to(dtype)


def cross_entropy(logits, soft_labels, weights=None, atol=1e-6):
    """mean_i w_i * ( -sum_c y_ic log softmax(logits_i)_c ); weights default to 1."""
    row_sums = soft_labels.detach().sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=atol):
        raise InputError("soft label rows must sum to 1")
    per_example = -(soft_labels * F.log_softmax(logits, dim=-1)).sum(dim=-1)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=per_example.dtype)
        if bool(((w < 0) | (w > 1)).any()):
            raise InputError("example weights must lie in [0, 1]")
        per_example = per_example * w
    return per_example.mean()


@dataclass
class ContrastiveBatch:
    """Per slot: anchor a, positive a^ (same class), negatives b and b^ (other classes)."""
    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor      # b, paired with the positive
    negative_hat: torch.Tensor  # b^, paired with the anchor
    indices: np.ndarray         # [N', 4] rows (a, a^, b, b^)

    def __len__(self):
        return self.indices.shape[0]

    def __bool__(self):
        return len(self) > 0


def sample_contrastive_indices(labels, rng: np.random.Generator):
    """[N', 4] index rows (a, a^, b, b^); shape (0, 4) when no valid slot exists."""
    labels = np.asarray(labels)
    n = len(labels)
    members = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
    eligible = [c for c, idx in members.items() if len(idx) >= 2]
    if not eligible or len(members) < 2:
        return np.zeros((0, 4), dtype=np.int64)
    eligible_idx = np.concatenate([members[c] for c in eligible])
    rows = []
    for i in range(n):
        a = i if len(members[labels[i]]) >= 2 else int(rng.choice(eligible_idx))
        same = members[labels[a]]
        a_hat = int(rng.choice(same[same != a]))
        others = np.flatnonzero(labels != labels[a])
        b, b_hat = (int(v) for v in rng.choice(others, size=2, replace=True))
        rows.append((a, a_hat, b, b_hat))
    return np.asarray(rows, dtype=np.int64)


def sample_contrastive_pairs(embeddings, labels, rng: np.random.Generator):
    labels = labels.detach().cpu().numpy() if torch.is_tensor(labels) else np.asarray(labels)
    idx = sample_contrastive_indices(labels, rng)
    t = torch.as_tensor(idx, dtype=torch.long)
    if len(idx) == 0:
        empty = embeddings[:0]
        return ContrastiveBatch(empty, empty, empty, empty, idx)
    return ContrastiveBatch(embeddings[t[:, 0]], embeddings[t[:, 1]], embeddings[t[:, 2]], embeddings[t[:, 3]], idx)


def _cosine(u, v):
    return (u * v).sum(-1) / (u.norm(dim=-1) * v.norm(dim=-1))


def ntxent_contrastive(batch: ContrastiveBatch, temperature=0.9):
    """-mean log softmax of s(a, a^) against s(a, b^) and s(a^, b), cosine similarity over tau.

    An empty batch contributes zero.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    if not batch:
        return batch.anchor.new_zeros(())
    for name in ("anchor", "positive", "negative", "negative_hat"):
        if bool((getattr(batch, name).detach().norm(dim=-1) == 0).any()):
            raise InputError(f"zero-norm {name} embedding in contrastive batch")
    s_pos = _cosine(batch.anchor, batch.positive)
    s_neg1 = _cosine(batch.anchor, batch.negative_hat)
    s_neg2 = _cosine(batch.positive, batch.negative)
    logits = torch.stack([s_pos, s_neg1, s_neg2], dim=-1) / temperature
    return -(logits[:, 0] - torch.logsumexp(logits, dim=-1)).mean()


def combined_loss(ce, con, lambda_con):
    if lambda_con < 0:
        raise InputError("lambda_con must be non-negative")
    return ce + lambda_con * con


def softmax_entropy(logits):
    """(per-example entropy in nats, mean entropy)."""
    logp = F.log_softmax(logits, dim=-1)
    h = (-(logp.exp() * logp).sum(dim=-1)).clamp_min(0.0)
    return h, h.mean()


def contrastive_upper_bound(temperature):
    return math.log(3) + 2 / temperature
