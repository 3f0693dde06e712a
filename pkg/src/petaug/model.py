"""Compact BERT-style encoder that every tuning mode acts on.

The encoder is post-LayerNorm with learned absolute positions, a tanh pooler
over the CLS state and a randomly initialised linear classifier. Adapters
(prefix banks, LoRA sets) are passed to ``forward`` explicitly rather than
being grafted into the module tree, so one backbone can serve many tasks.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError

CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

# Parameters outside the backbone; trained in every mode.
HEAD_PREFIXES = ("pooler.", "classifier.")
INIT_STD = 0.02


class TuningMode(str, enum.Enum):
    FINE_TUNE = "fine_tune"
    PREFIX = "prefix"
    LORA = "lora"
    FROZEN_PROBE = "frozen_probe"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"finetune": "fine_tune", "probe": "frozen_probe", "frozen": "frozen_probe"}
        value = aliases.get(value, value)
        try:
            return cls(value)
        except ValueError:
            raise ConfigurationError(f"unknown tuning mode {value!r}") from None


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    vocab_size: int = 512
    max_seq_len: int = 64
    hidden_dropout: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "model_dim", "ff_dim", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ConfigurationError("model_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ConfigurationError("max_seq_len must be at least 2 (CLS + one token)")
        if not 0.0 <= self.hidden_dropout <= 1.0:
            raise ConfigurationError("hidden_dropout must lie in [0, 1]")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenBatch:
    token_ids: torch.Tensor
    attention_mask: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.token_ids.shape[0]

    def __getitem__(self, index):
        labels = None if self.labels is None else self.labels[index]
        return TokenBatch(self.token_ids[index], self.attention_mask[index], labels)


@dataclass
class ForwardResult:
    logits: torch.Tensor
    cls_embedding: torch.Tensor
    pooled_cls: torch.Tensor
    mean_embedding: torch.Tensor
    per_layer_hidden: Optional[list] = None
    attentions: Optional[list] = None


def pool_cls(cls_embedding, weight, bias=None):
    """tanh(W x + b) on the CLS state; output lies strictly inside (-1, 1) for finite input.

    Saturated values are pulled one ulp inside the open interval, since tanh
    rounds to exactly +-1 in floating point for large arguments.
    """
    out = torch.tanh(F.linear(cls_embedding, weight, bias))
    edge = 1.0 - torch.finfo(out.dtype).eps
    return out.clamp(-edge, edge)


def mean_embedding(last_hidden, mask):
    """Average of the unmasked token states, one row per sequence."""
    mask = mask.to(last_hidden.dtype)
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise InputError("mean_embedding: a row has no unmasked positions")
    summed = torch.einsum("bsd,bs->bd", last_hidden, mask)
    return summed / counts.unsqueeze(-1)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.model_dim
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.output = nn.Linear(d, d)

    def _project(self, name, x, layer_index, lora):
        linear = getattr(self, name)
        out = F.linear(x, linear.weight, linear.bias)
        if lora is not None:
            delta = lora.delta(layer_index, name, x)
            if delta is not None:
                out = out + delta
        return out

    def _split(self, x):
        b, s, _ = x.shape
        return x.view(b, s, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask, layer_index, prefix=None, lora=None):
        q = self._project("query", x, layer_index, lora)
        k = self._project("key", x, layer_index, lora)
        v = self._project("value", x, layer_index, lora)
        if prefix is not None:
            k, v, mask = prefix.extend(layer_index, k, v, mask)
        q, k, v = self._split(q), self._split(k), self._split(v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        keep = mask[:, None, None, :].bool()
        scores = scores.masked_fill(~keep, torch.finfo(scores.dtype).min)
        probs = scores.softmax(dim=-1)
        ctx = (probs @ v).transpose(1, 2).reshape(x.shape)
        return self._project("output", ctx, layer_index, lora), probs


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.model_dim
        self.attention = SelfAttention(config)
        self.attn_norm = nn.LayerNorm(d)
        self.ff_in = nn.Linear(d, config.ff_dim)
        self.ff_out = nn.Linear(config.ff_dim, d)
        self.ff_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(config.hidden_dropout)

    def forward(self, x, mask, layer_index, prefix=None, lora=None):
        attn, probs = self.attention(x, mask, layer_index, prefix, lora)
        x = self.attn_norm(x + self.dropout(attn))
        ff = self.ff_out(F.gelu(self.ff_in(x)))
        x = self.ff_norm(x + self.dropout(ff))
        return x, probs


class Encoder(nn.Module):
    """Transformer encoder with CLS pooling, mean pooling and a classification head."""

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_seq_len, d)
        self.embedding_norm = nn.LayerNorm(d)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))
        self.pooler = nn.Linear(d, d)
        self.classifier = nn.Linear(d, config.num_classes)
        self.dropout = nn.Dropout(config.hidden_dropout)
        self.reset_parameters(seed)

    def reset_parameters(self, seed=None):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            for name, param in self.named_parameters():
                if "norm" in name:
                    param.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    param.zero_()
                else:
                    param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * INIT_STD)

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(HEAD_PREFIXES)]

    def head_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith(HEAD_PREFIXES)]

    def _check(self, batch: TokenBatch, mode: TuningMode, adapters):
        ids = batch.token_ids
        if ids.dim() != 2 or batch.attention_mask.shape != ids.shape:
            raise InputError("token_ids and attention_mask must both be [B x n]")
        if ids.shape[1] > self.config.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise InputError("token id out of vocabulary range")
        kind = getattr(adapters, "kind", None)
        expected = {TuningMode.PREFIX: "prefix", TuningMode.LORA: "lora"}.get(mode)
        if kind != expected:
            raise ConfigurationError(f"mode {mode.value} requires adapters of kind {expected}, got {kind}")
        if adapters is not None:
            adapters.check_compatible(self.config)

    def encode(self, batch: TokenBatch, mode=TuningMode.FROZEN_PROBE, adapters=None,
               output_hidden=False, output_attentions=False):
        """Run the transformer stack; returns (last_hidden, hidden_states, attentions)."""
        mode = TuningMode.parse(mode)
        self._check(batch, mode, adapters)
        prefix = adapters if mode is TuningMode.PREFIX else None
        lora = adapters if mode is TuningMode.LORA else None
        if prefix is not None:
            prefix = prefix.materialize()
        ids = batch.token_ids
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_embedding(ids) + self.position_embedding(positions)[None]
        x = self.dropout(self.embedding_norm(x))
        mask = batch.attention_mask
        hidden, attentions = [], []
        for i, layer in enumerate(self.layers):
            x, probs = layer(x, mask, i, prefix, lora)
            if output_hidden:
                hidden.append(x)
            if output_attentions:
                attentions.append(probs)
        return x, (hidden if output_hidden else None), (attentions if output_attentions else None)

    def pool(self, cls_embedding):
        return pool_cls(cls_embedding, self.pooler.weight, self.pooler.bias)

    def classify_pooled(self, pooled):
        return self.classifier(self.dropout(pooled))

    def classify_cls(self, cls_embedding):
        return self.classify_pooled(self.pool(cls_embedding))

    def forward(self, batch: TokenBatch, mode=TuningMode.FROZEN_PROBE, adapters=None,
                output_hidden=False, output_attentions=False) -> ForwardResult:
        last, hidden, attentions = self.encode(batch, mode, adapters, output_hidden, output_attentions)
        cls = last[:, 0]
        pooled = self.pool(cls)
        return ForwardResult(
            logits=self.classify_pooled(pooled),
            cls_embedding=cls,
            pooled_cls=pooled,
            mean_embedding=mean_embedding(last, batch.attention_mask),
            per_layer_hidden=hidden,
            attentions=attentions,
        )


def head_parameter_count(config: ModelConfig):
    d, c = config.model_dim, config.num_classes
    return d * d + d + d * c + c


def backbone_parameter_count(config: ModelConfig):
    d, f = config.model_dim, config.ff_dim
    embeddings = config.vocab_size * d + config.max_seq_len * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return embeddings + config.num_layers * per_layer


def count_trainable_parameters(mode, config: ModelConfig, adapter_config=None):
    """Closed-form trainable-parameter count for a tuning mode.

    ``adapter_config`` is a ``PrefixConfig`` or ``LoRAConfig`` for the prefix
    and lora modes; it must provide ``num_parameters(config)``.
    """
    mode = TuningMode.parse(mode)
    head = head_parameter_count(config)
    if mode is TuningMode.FINE_TUNE:
        return backbone_parameter_count(config) + head
    if mode is TuningMode.FROZEN_PROBE:
        return head
    if adapter_config is None:
        raise ConfigurationError(f"mode {mode.value} needs an adapter config")
    return adapter_config.num_parameters(config) + head
