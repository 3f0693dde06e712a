"""Deep prefix tuning, LoRA and the backbone-freezing contract.

Prefixes are realised as ``p`` extra key/value positions in every attention
layer; queries never see them as outputs. LoRA adds ``(alpha / r) * B A`` to
selected attention projections without materialising the summed weight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, StateError
from .model import INIT_STD, Encoder, ModelConfig, TuningMode

__all__ = [
    "PrefixConfig", "LoRAConfig", "PrefixBank", "ReparamEncoder", "LoRAPair", "LoRAAdapterSet",
    "TuningMode", "init_prefix", "apply_prefix", "reparameterize", "init_lora", "lora_project",
    "freeze_backbone", "trainable_named_parameters", "build_adapters",
]

LORA_TARGETS = ("query", "key", "value", "output")


@dataclass(frozen=True)
class PrefixConfig:
    prefix_len: int = 8
    reparam: bool = False
    prefix_hidden_size: int = 512

    def num_parameters(self, config: ModelConfig):
        p, d, L = self.prefix_len, config.model_dim, config.num_layers
        if not self.reparam:
            return L * p * 2 * d
        h = self.prefix_hidden_size
        # raw prompt + two-layer MLP d -> h -> L*2*d
        return p * d + (d * h + h) + (h * L * 2 * d + L * 2 * d)


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 8.0
    targets: tuple = ("query", "value")
    layers: Optional[tuple] = None

    def layer_indices(self, config: ModelConfig):
        return tuple(range(config.num_layers)) if self.layers is None else tuple(self.layers)

    def num_parameters(self, config: ModelConfig):
        d = config.model_dim
        per_target = self.rank * (d + d)
        return per_target * len(self.targets) * len(self.layer_indices(config))


def _prefix_std(d):
    return 0.5 * d ** -0.5


class ReparamEncoder(nn.Module):
    """Two-layer tanh MLP mapping a raw prompt row to all layers' key/value rows."""

    def __init__(self, model_dim, num_layers, hidden_size=512):
        super().__init__()
        self.num_layers = num_layers
        self.model_dim = model_dim
        self.hidden = nn.Linear(model_dim, hidden_size)
        self.out = nn.Linear(hidden_size, num_layers * 2 * model_dim)

    def forward(self, raw_prompt):
        flat = self.out(torch.tanh(self.hidden(raw_prompt)))  # [p, L*2*d]
        p = raw_prompt.shape[0]
        blocks = flat.view(p, self.num_layers, 2, self.model_dim).permute(1, 2, 0, 3)
        return [(blocks[m, 0], blocks[m, 1]) for m in range(self.num_layers)]


class _Materialized:
    """Per-forward view of a bank: prefixes computed once, dropout applied."""

    def __init__(self, prefixes):
        self.prefixes = prefixes

    def extend(self, layer_index, keys, values, mask):
        return apply_prefix(layer_index, keys, values, mask, self.prefixes)


class PrefixBank(nn.Module):
    kind = "prefix"

    def __init__(self, config: ModelConfig, prefix_len, reparam=False, prefix_hidden_size=512):
        super().__init__()
        if prefix_len < 0:
            raise ConfigurationError("prefix length must be non-negative")
        if prefix_len > config.max_seq_len:
            raise ConfigurationError(f"prefix length {prefix_len} exceeds max_seq_len {config.max_seq_len}")
        self.num_layers = config.num_layers
        self.model_dim = config.model_dim
        self.prefix_len = prefix_len
        self.reparam_enabled = bool(reparam)
        self.prefix_config = PrefixConfig(prefix_len, self.reparam_enabled, prefix_hidden_size)
        self.dropout = nn.Dropout(config.hidden_dropout)
        d = config.model_dim
        if self.reparam_enabled:
            self.raw_prompt = nn.Parameter(torch.zeros(prefix_len, d))
            self.encoder = ReparamEncoder(d, config.num_layers, prefix_hidden_size)
        else:
            self.keys = nn.ParameterList(nn.Parameter(torch.zeros(prefix_len, d)) for _ in range(config.num_layers))
            self.values = nn.ParameterList(nn.Parameter(torch.zeros(prefix_len, d)) for _ in range(config.num_layers))

    def reset_parameters(self, seed=None):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        std = _prefix_std(self.model_dim)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.startswith("encoder."):
                    if name.endswith("bias"):
                        param.zero_()
                    else:
                        param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * INIT_STD)
                else:
                    param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * std)
        return self

    def check_compatible(self, config: ModelConfig):
        if config.num_layers != self.num_layers or config.model_dim != self.model_dim:
            raise ConfigurationError(
                f"prefix bank built for L={self.num_layers}, d={self.model_dim}; "
                f"model has L={config.num_layers}, d={config.model_dim}")

    def layer_prefixes(self):
        """List of (key [p x d], value [p x d]) per layer, without dropout."""
        if self.reparam_enabled:
            return reparameterize(self)
        return list(zip(self.keys, self.values))

    def materialize(self):
        return _Materialized([(self.dropout(k), self.dropout(v)) for k, v in self.layer_prefixes()])

    def to_static(self, config: ModelConfig):
        """Plain bank holding the current per-layer prefixes; drops the encoder."""
        static = PrefixBank(config, self.prefix_len, reparam=False)
        with torch.no_grad():
            for m, (k, v) in enumerate(self.layer_prefixes()):
                static.keys[m].copy_(k)
                static.values[m].copy_(v)
        return static


def init_prefix(config: ModelConfig, prefix_len, reparam_enabled=False, seed=0, prefix_hidden_size=512):
    return PrefixBank(config, prefix_len, reparam_enabled, prefix_hidden_size).reset_parameters(seed)


def apply_prefix(layer_index, keys, values, mask, bank):
    """Prepend one layer's prefix to keys [B, s, d], values [B, s, d] and mask [B, s].

    ``bank`` is a PrefixBank or a precomputed list of per-layer (key, value)
    pairs. Query length is untouched; the mask gains ``p`` always-on slots.
    """
    prefixes = bank.layer_prefixes() if isinstance(bank, PrefixBank) else bank
    if not 0 <= layer_index < len(prefixes):
        raise ConfigurationError(f"prefix bank has {len(prefixes)} layers, layer {layer_index} requested")
    pk, pv = prefixes[layer_index]
    b = keys.shape[0]
    p = pk.shape[0]
    ext_keys = torch.cat([pk.to(keys.dtype).expand(b, p, -1), keys], dim=1)
    ext_values = torch.cat([pv.to(values.dtype).expand(b, p, -1), values], dim=1)
    ext_mask = torch.cat([mask.new_ones(b, p), mask], dim=1)
    return ext_keys, ext_values, ext_mask


def reparameterize(bank: PrefixBank, encoder: Optional[ReparamEncoder] = None):
    """Per-layer (key, value) prefixes produced from the bank's raw prompt."""
    if not bank.reparam_enabled:
        raise StateError("reparameterize called on a bank without a reparameterization encoder")
    encoder = encoder if encoder is not None else bank.encoder
    return encoder(bank.raw_prompt)


class LoRAPair(nn.Module):
    def __init__(self, d_in, d_out, rank, alpha):
        super().__init__()
        if rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = float(alpha)
        self.A = nn.Parameter(torch.zeros(rank, d_in))
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self):
        return self.alpha / self.rank

    def delta(self, x):
        return self.scaling * F.linear(F.linear(x, self.A), self.B)


def lora_project(x, weight, adapter: Optional[LoRAPair], bias=None):
    """x W0^T (+ b) + (alpha/r) (x A^T) B^T; the summed weight is never formed."""
    out = F.linear(x, weight, bias)
    if adapter is not None:
        out = out + adapter.delta(x)
    return out


class LoRAAdapterSet(nn.Module):
    kind = "lora"

    def __init__(self, config: ModelConfig, rank=8, alpha=8.0, targets: Sequence[str] = ("query", "value"),
                 layers: Optional[Sequence[int]] = None):
        super().__init__()
        targets = tuple(targets)
        if not targets:
            raise ConfigurationError("LoRA needs at least one target matrix")
        unknown = [t for t in targets if t not in LORA_TARGETS]
        if unknown:
            raise ConfigurationError(f"unknown LoRA target(s) {unknown}; choose from {LORA_TARGETS}")
        layers = tuple(range(config.num_layers)) if layers is None else tuple(layers)
        if any(not 0 <= m < config.num_layers for m in layers):
            raise ConfigurationError(f"LoRA layer index out of range for L={config.num_layers}")
        self.lora_config = LoRAConfig(rank, alpha, targets, None if layers == tuple(range(config.num_layers)) else layers)
        self.num_layers = config.num_layers
        self.model_dim = config.model_dim
        d = config.model_dim
        self.pairs = nn.ModuleDict({f"{m}_{t}": LoRAPair(d, d, rank, alpha) for m in layers for t in targets})

    def reset_parameters(self, seed=None):
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        with torch.no_grad():
            for pair in self.pairs.values():
                pair.A.copy_(torch.randn(pair.A.shape, generator=gen, dtype=pair.A.dtype) * INIT_STD)
                pair.B.zero_()
        return self

    def check_compatible(self, config: ModelConfig):
        if config.num_layers != self.num_layers or config.model_dim != self.model_dim:
            raise ConfigurationError(
                f"LoRA set built for L={self.num_layers}, d={self.model_dim}; "
                f"model has L={config.num_layers}, d={config.model_dim}")

    def pair(self, layer_index, target) -> Optional[LoRAPair]:
        key = f"{layer_index}_{target}"
        return self.pairs[key] if key in self.pairs else None

    def delta(self, layer_index, target, x):
        pair = self.pair(layer_index, target)
        return None if pair is None else pair.delta(x)

    def materialize(self):
        return self


def init_lora(config: ModelConfig, r=8, alpha=8.0, targets=("query", "value"), seed=0, layers=None):
    return LoRAAdapterSet(config, r, alpha, targets, layers).reset_parameters(seed)


def build_adapters(mode, config: ModelConfig, adapter_config=None, seed=0):
    """Fresh adapters for a mode (None for fine_tune / frozen_probe)."""
    mode = TuningMode.parse(mode)
    if mode is TuningMode.PREFIX:
        pc = adapter_config or PrefixConfig()
        return init_prefix(config, pc.prefix_len, pc.reparam, seed, pc.prefix_hidden_size)
    if mode is TuningMode.LORA:
        lc = adapter_config or LoRAConfig()
        return init_lora(config, lc.rank, lc.alpha, lc.targets, seed, lc.layers)
    return None


def freeze_backbone(model: Encoder, mode, adapters=None):
    """Set trainable flags for a mode. Values are never touched.

    prefix / lora: adapters + pooler + classifier; frozen_probe: pooler +
    classifier; fine_tune: every model tensor.
    """
    mode = TuningMode.parse(mode)
    for _, p in model.backbone_parameters():
        p.requires_grad_(mode is TuningMode.FINE_TUNE)
    for _, p in model.head_parameters():
        p.requires_grad_(True)
    if adapters is not None:
        for p in adapters.parameters():
            p.requires_grad_(mode in (TuningMode.PREFIX, TuningMode.LORA))


def adapter_namespace(adapters):
    return f"peft/{adapters.kind}/"


def trainable_named_parameters(model: Encoder, adapters=None):
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if adapters is not None:
        ns = adapter_namespace(adapters)
        named += [(ns + n, p) for n, p in adapters.named_parameters() if p.requires_grad]
    return named
