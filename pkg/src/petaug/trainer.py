"""Training and evaluation loop.

AdamW with decoupled weight decay, a linear warmup/decay schedule, global-norm
gradient clipping, mode-aware parameter selection and best-epoch selection
on validation accuracy.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentedExample, as_raw
from .checkpoint import ParameterStore, atomic_write_text
from .data import Featurizer, RawExample
from .errors import ConfigurationError, DataError, TrainingError
from .model import Encoder, ModelConfig, TokenBatch, TuningMode
from .objectives import (ContrastiveConfig, MixupConfig, combined_loss, cross_entropy, mixup_pairs,
                         ntxent_contrastive, one_hot, sample_contrastive_pairs, softmax_entropy)
from .peft import (LoRAAdapterSet, LoRAConfig, PrefixBank, PrefixConfig, adapter_namespace, freeze_backbone,
                   trainable_named_parameters)

DEFAULT_LEARNING_RATES = {
    TuningMode.FINE_TUNE: 2e-5,
    TuningMode.PREFIX: 1e-2,
    TuningMode.LORA: 4e-4,
    TuningMode.FROZEN_PROBE: 1e-3,
}

# (low, high) epoch bands per augmentation method for prefix runs.
EPOCH_PRESETS = {
    "eda": (2, 25),
    "back_translation": (4, 40),
    "corrupt": (2, 25),
    "mixup": (8, 120),
    "none": (8, 120),
}

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "mean_entropy")


@dataclass(frozen=True)
class TrainConfig:
    mode: TuningMode = TuningMode.PREFIX
    learning_rate: Optional[float] = None
    batch_size: int = 16
    max_epochs: int = 20
    warmup_ratio: Optional[float] = None
    grad_clip: Optional[float] = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    method: str = "none"
    mixup: MixupConfig = MixupConfig()
    contrastive: ContrastiveConfig = ContrastiveConfig()
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "mode", TuningMode.parse(self.mode))
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be positive")
        if (self.mixup.enabled or self.contrastive.enabled) and self.batch_size < 2:
            raise ConfigurationError("mixup and contrastive training need batch_size >= 2")
        if self.warmup_ratio is not None and not 0 <= self.warmup_ratio < 1:
            raise ConfigurationError("warmup_ratio must lie in [0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError("grad_clip must be positive or None")

    @property
    def lr(self):
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LEARNING_RATES[self.mode]

    @property
    def warmup(self):
        if self.warmup_ratio is not None:
            return self.warmup_ratio
        return 0.1 if self.mode is TuningMode.FINE_TUNE else 0.0

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class EncodedDataset:
    batch: TokenBatch
    weights: torch.Tensor
    ids: list
    origin_ids: list

    def __len__(self):
        return len(self.batch)

    @classmethod
    def from_examples(cls, examples: Sequence, featurizer: Featurizer):
        raws, weights, origins = [], [], []
        for ex in examples:
            if isinstance(ex, AugmentedExample):
                raws.append(as_raw(ex))
                weights.append(ex.similarity_weight)
                origins.append(ex.origin_id)
            else:
                raws.append(ex)
                weights.append(1.0)
                origins.append(ex.example_id)
        return cls(featurizer.encode(raws), torch.tensor(weights, dtype=torch.float32),
                   [r.example_id for r in raws], origins)


@dataclass
class EvalResult:
    accuracy: float
    mean_entropy: float
    predictions: np.ndarray
    entropies: np.ndarray

    @property
    def percent(self):
        return round(100.0 * self.accuracy, 1)


@dataclass
class MetricsLog:
    epochs: list = field(default_factory=list)

    def append(self, **row):
        self.epochs.append({k: row[k] for k in METRIC_COLUMNS})

    @property
    def best_epoch(self):
        """Index of the first epoch with maximal validation accuracy."""
        if not self.epochs:
            return None
        accs = [r["val_acc"] for r in self.epochs]
        return int(np.argmax(accs))

    @property
    def best_val_acc(self):
        return None if not self.epochs else self.epochs[self.best_epoch]["val_acc"]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in self.epochs:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        log = cls()
        for row in csv.DictReader(io.StringIO(text)):
            log.append(epoch=int(row["epoch"]), **{k: float(row[k]) for k in METRIC_COLUMNS[1:]})
        return log

    def summary(self):
        return {"best_epoch": self.best_epoch, "best_val_acc": self.best_val_acc, "epochs": len(self.epochs)}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    backbone: ParameterStore
    adapters: Optional[ParameterStore]
    adapter_meta: Optional[dict]
    train_config: dict
    metrics: MetricsLog

    def restore(self):
        """Rebuild (model, adapters) from the snapshot, in eval mode."""
        model = Encoder(self.model_config)
        self.backbone.load_into(model)
        adapters = None
        if self.adapter_meta is not None:
            adapters = adapters_from_meta(self.model_config, self.adapter_meta)
            self.adapters.load_into(adapters, prefix=adapter_namespace(adapters))
            adapters.eval()
        model.eval()
        return model, adapters

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        self.backbone.save(os.path.join(directory, "backbone.ckpt"))
        if self.adapters is not None:
            self.adapters.save(os.path.join(directory, "adapter.ckpt"))
        meta = {"model_config": self.model_config.to_dict(), "adapter": self.adapter_meta,
                "train_config": self.train_config, "summary": self.metrics.summary()}
        atomic_write_text(os.path.join(directory, "checkpoint.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
        atomic_write_text(os.path.join(directory, "metrics.csv"), self.metrics.to_csv())

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "checkpoint.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        adapter_path = os.path.join(directory, "adapter.ckpt")
        adapters = ParameterStore.load(adapter_path) if meta["adapter"] is not None else None
        with open(os.path.join(directory, "metrics.csv"), encoding="utf-8") as fh:
            metrics = MetricsLog.from_csv(fh.read())
        return cls(ModelConfig(**meta["model_config"]), ParameterStore.load(os.path.join(directory, "backbone.ckpt")),
                   adapters, meta["adapter"], meta["train_config"], metrics)


def adapter_meta(adapters):
    if adapters is None:
        return None
    if isinstance(adapters, PrefixBank):
        return {"kind": "prefix", **asdict(adapters.prefix_config)}
    cfg = adapters.lora_config
    return {"kind": "lora", "rank": cfg.rank, "alpha": cfg.alpha, "targets": list(cfg.targets),
            "layers": None if cfg.layers is None else list(cfg.layers)}


def adapters_from_meta(config: ModelConfig, meta):
    if meta["kind"] == "prefix":
        return PrefixBank(config, meta["prefix_len"], meta["reparam"], meta["prefix_hidden_size"])
    if meta["kind"] == "lora":
        layers = None if meta.get("layers") is None else tuple(meta["layers"])
        return LoRAAdapterSet(config, meta["rank"], meta["alpha"], tuple(meta["targets"]), layers)
    raise ConfigurationError(f"unknown adapter kind {meta['kind']!r}")


def infer_mode(adapters, default=TuningMode.FROZEN_PROBE):
    kind = getattr(adapters, "kind", None)
    return {"prefix": TuningMode.PREFIX, "lora": TuningMode.LORA}.get(kind, default)


def linear_schedule(step, total_steps, warmup_steps):
    """LR multiplier: 0 -> 1 over the warmup, then linearly to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 0.0
    return max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def clip_gradients(grads, threshold):
    """Rescale a list of gradient tensors so their global L2 norm is <= ``threshold``.

    ``threshold=None`` disables clipping. Returns the (possibly scaled) list.
    """
    if threshold is None:
        return grads
    present = [g for g in grads if g is not None]
    if not present:
        return grads
    norm = torch.sqrt(sum((g.detach().double() ** 2).sum() for g in present))
    if norm > threshold:
        scale = threshold / float(norm)
        return [None if g is None else g * scale for g in grads]
    return grads


def _clip_in_place(params, threshold):
    if threshold is None:
        return
    grads = [p.grad for p in params]
    clipped = clip_gradients(grads, threshold)
    for p, g in zip(params, clipped):
        if g is not None and g is not p.grad:
            p.grad.copy_(g)


def _set_train(model, adapters, flag):
    model.train(flag)
    if adapters is not None:
        adapters.train(flag)


@torch.no_grad()
def evaluate(model: Encoder, adapters, dataset: EncodedDataset, batch_size=256, mode=None):
    """Accuracy, mean softmax entropy (nats) and per-example predictions, dropout off."""
    from .objectives import softmax_entropy as _entropy

    mode = infer_mode(adapters) if mode is None else TuningMode.parse(mode)
    labels = dataset.batch.labels
    C = model.config.num_classes
    if labels is None:
        raise DataError("evaluation dataset has no labels")
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise DataError(f"label outside [0, {C})")
    was_training = model.training
    _set_train(model, adapters, False)
    preds, ents = [], []
    try:
        for start in range(0, len(dataset), batch_size):
            sub = dataset.batch[start:start + batch_size]
            logits = model(sub, mode, adapters).logits
            preds.append(logits.argmax(dim=-1))
            ents.append(_entropy(logits)[0])
    finally:
        _set_train(model, adapters, was_training)
    if not preds:
        return EvalResult(float("nan"), float("nan"), np.zeros(0, dtype=np.int64), np.zeros(0))
    pred = torch.cat(preds)
    ent = torch.cat(ents)
    acc = float((pred == labels).double().mean())
    return EvalResult(acc, float(ent.double().mean()), pred.numpy(), ent.double().numpy())


def _param_groups(named, weight_decay):
    decay, no_decay = [], []
    for name, p in named:
        (no_decay if name.endswith("bias") or "norm" in name else decay).append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def compute_loss(model, adapters, batch: TokenBatch, weights, cfg: TrainConfig, rng):
    """Scalar training loss for one batch plus a breakdown dict."""
    mode = cfg.mode
    C = model.config.num_classes
    out = model(batch, mode, adapters)
    targets = one_hot(batch.labels, C, out.logits.dtype)
    if cfg.mixup.enabled and len(batch) >= 2:
        tap = cfg.mixup.tap
        if tap == "auto":
            tap = "pooled" if mode is TuningMode.PREFIX else "cls"
        source = out.pooled_cls if tap == "pooled" else out.cls_embedding
        mixed = mixup_pairs(source, targets, cfg.mixup, rng)
        logits = model.classify_pooled(mixed.mixed_embeddings) if tap == "pooled" else model.classify_cls(mixed.mixed_embeddings)
        lam = mixed.lambdas.to(weights.dtype)
        w = lam * weights + (1 - lam) * weights[torch.as_tensor(mixed.second)]
        ce = cross_entropy(logits, mixed.mixed_labels, w)
    else:
        logits = out.logits
        ce = cross_entropy(logits, targets, weights)
    con = ce.new_zeros(())
    if cfg.contrastive.enabled:
        pairs = sample_contrastive_pairs(out.cls_embedding, batch.labels, rng)
        if pairs:
            con = ntxent_contrastive(pairs, cfg.contrastive.temperature)
    total = combined_loss(ce, con, cfg.contrastive.lambda_con if cfg.contrastive.enabled else 0.0)
    entropy = softmax_entropy(logits.detach())[1]
    parts = {"ce": ce.item(), "contrastive": con.item(), "total": total.item(), "mean_entropy": entropy.item()}
    return total, parts


def train(model: Encoder, adapters, train_set: EncodedDataset, val_set: EncodedDataset, cfg: TrainConfig,
          loss_log: Optional[list] = None, eval_train=True):
    """Train in place and return (best-epoch Checkpoint, MetricsLog).

    Only tensors flagged trainable for ``cfg.mode`` change. The model and
    adapters are left holding the best-epoch weights.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    mode = cfg.mode
    expected = mode if mode in (TuningMode.PREFIX, TuningMode.LORA) else None
    if infer_mode(adapters, None) is not expected:
        raise ConfigurationError(f"adapters {getattr(adapters, 'kind', None)} do not match mode {mode.value}")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)

    freeze_backbone(model, mode, adapters)
    named = trainable_named_parameters(model, adapters)
    params = [p for _, p in named]
    optimizer = torch.optim.AdamW(_param_groups(named, cfg.weight_decay), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    warmup_steps = int(round(cfg.warmup * total_steps))
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: linear_schedule(s, total_steps, warmup_steps))

    metrics = MetricsLog()
    best = None
    step = 0
    for epoch in range(cfg.max_epochs):
        _set_train(model, adapters, True)
        order = torch.randperm(len(train_set), generator=shuffle_gen)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_set.batch[idx]
            loss, parts = compute_loss(model, adapters, batch, train_set.weights[idx], cfg, rng)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            _clip_in_place(params, cfg.grad_clip)
            optimizer.step()
            scheduler.step()
            losses.append(parts["total"])
            if loss_log is not None:
                loss_log.append({"step": step, **parts})
            step += 1
        train_acc = evaluate(model, adapters, train_set, cfg.eval_batch_size, mode).accuracy if eval_train else float("nan")
        val = evaluate(model, adapters, val_set, cfg.eval_batch_size, mode)
        metrics.append(epoch=epoch, train_loss=float(np.mean(losses)), train_acc=train_acc,
                       val_acc=val.accuracy, mean_entropy=val.mean_entropy)
        if metrics.best_epoch == epoch:
            best = (ParameterStore.from_module(model),
                    None if adapters is None else ParameterStore.from_module(adapters, adapter_namespace(adapters)))
    model_store, adapter_store = best
    model_store.load_into(model)
    if adapters is not None:
        adapter_store.load_into(adapters, prefix=adapter_namespace(adapters))
    _set_train(model, adapters, False)
    ckpt = Checkpoint(model.config, model_store, adapter_store, adapter_meta(adapters), cfg.to_dict(), metrics)
    return ckpt, metrics


def write_loss_log(path, rows):
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
