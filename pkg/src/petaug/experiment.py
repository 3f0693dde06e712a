"""Config-driven experiment orchestration behind the command-line interface.

An experiment config is a flat YAML mapping with a ``schema_version`` key.
Everything a run needs is in it, so the snapshot written into each run
directory is enough to reproduce that run.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from typing import Optional

import numpy as np
import torch
import yaml

from . import __version__
from .analysis import (KINDS, class_separation, embedding_records, export_embeddings, similarity_report)
from .augment import (DEFAULT_LANGUAGES, BagOfWordsSimilarity, CorruptionConfig, EDAConfig, HttpTranslator,
                      IdentityTranslator, LexiconParaphraseTranslator, LexiconSynonyms, ReversalTranslator,
                      augment_corpus, default_synonyms)
from .checkpoint import ParameterStore, atomic_write_text
from .data import DatasetSpec, Featurizer, Vocabulary, bundled_task, load_jsonl, BUNDLED_TASKS
from .errors import AnalysisError, ConfigurationError, DataError, ReportError
from .model import Encoder, ModelConfig, TuningMode
from .objectives import ContrastiveConfig, MixupConfig
from .peft import LoRAConfig, PrefixConfig, build_adapters
from .pretrain import WarmStartConfig, unlabeled_pool, warm_start
from .trainer import Checkpoint, EncodedDataset, MetricsLog, TrainConfig, evaluate, train, write_loss_log

SCHEMA_VERSION = 1
TRANSLATOR_ENV = "PETAUG_TRANSLATOR_URL"
MODE_NAMES = {"finetune": "fine_tune", "probe": "frozen_probe"}
METHOD_NAMES = {"bt": "back_translation"}
PATH_KEYS = ("train_path", "val_path", "lexicon_path", "warm_start_path", "backbone_path")


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    # data
    dataset: str = "synthetic-sentiment"
    task_kind: str = "single"
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    class_names: tuple = ()
    n_train: int = 50
    n_val: int = 100
    data_seed: int = 0
    max_seq_len: int = 64
    # model
    num_layers: int = 2
    num_heads: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    hidden_dropout: float = 0.1
    backbone_seed: int = 0
    backbone_path: Optional[str] = None
    warm_start_epochs: int = 10
    warm_start_lr: float = 3e-3
    warm_start_pool: int = 2000
    warm_start_path: Optional[str] = None
    # tuning
    mode: str = "prefix"
    prefix_len: int = 8
    prefix_reparam: bool = False
    prefix_hidden_size: int = 512
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: tuple = ("query", "value")
    # augmentation
    method: str = "none"
    augment_seed: int = 0
    eda_alpha: float = 0.05
    eda_n_aug: int = 16
    corrupt_alpha: float = 0.5
    corrupt_n_aug: int = 8
    bt_languages: tuple = DEFAULT_LANGUAGES
    translator: str = "reversal"
    similarity_weights: bool = False
    lexicon_path: Optional[str] = None
    # objectives
    mixup: bool = False
    mixup_alpha: float = 1.0
    contrastive: bool = False
    temperature: float = 0.9
    lambda_con: float = 0.2
    # trainer
    learning_rate: Optional[float] = None
    batch_size: int = 16
    max_epochs: int = 100
    warmup_ratio: Optional[float] = None
    grad_clip: Optional[float] = 1.0
    weight_decay: float = 0.01
    seeds: tuple = (0,)
    # analysis
    analysis_n_val: Optional[int] = None

    def __post_init__(self):
        for name in ("class_names", "lora_targets", "bt_languages", "seeds"):
            value = getattr(self, name)
            if isinstance(value, (str, int)):
                value = (value,)
            object.__setattr__(self, name, tuple(value))
        object.__setattr__(self, "mode", TuningMode.parse(MODE_NAMES.get(self.mode, self.mode)).value)
        object.__setattr__(self, "method", METHOD_NAMES.get(self.method, self.method))
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")
        if self.method not in ("eda", "corrupt", "back_translation", "none"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.translator not in ("reversal", "identity", "paraphrase", "http"):
            raise ConfigurationError(f"unknown translator {self.translator!r}")
        if self.dataset == "jsonl":
            if not self.train_path or not self.val_path:
                raise ConfigurationError("dataset 'jsonl' needs train_path and val_path")
        elif self.dataset not in BUNDLED_TASKS:
            raise ConfigurationError(f"dataset must be 'jsonl' or one of {sorted(BUNDLED_TASKS)}")
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        for key in PATH_KEYS:
            path = getattr(self, key)
            if path is not None and not os.path.exists(path):
                raise ConfigurationError(f"{key} {path!r} does not exist")
        # Fail early on invalid sub-configs.
        self.model_config(vocab_size=8)
        self.train_config(self.seeds[0])
        self.adapter_config()

    # construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, data, base_dir=None):
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if "schema_version" not in data:
            raise ConfigurationError("config is missing schema_version")
        data = dict(data)
        if base_dir is not None:
            for key in PATH_KEYS:
                if data.get(key) is not None and not os.path.isabs(data[key]):
                    data[key] = os.path.normpath(os.path.join(base_dir, data[key]))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path!r} does not exist") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path!r} is not valid YAML: {exc}") from exc
        return cls.from_dict(data or {}, base_dir=os.path.dirname(os.path.abspath(path)))

    def to_dict(self):
        out = {}
        for key, value in asdict(self).items():
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_overrides(self, **overrides):
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    # derived configs -----------------------------------------------------

    def model_config(self, vocab_size, num_classes=2):
        return ModelConfig(self.num_layers, self.num_heads, self.model_dim, self.ff_dim, vocab_size,
                           self.max_seq_len, self.hidden_dropout, num_classes)

    def adapter_config(self):
        if self.mode == "prefix":
            return PrefixConfig(self.prefix_len, self.prefix_reparam, self.prefix_hidden_size)
        if self.mode == "lora":
            return LoRAConfig(self.lora_rank, self.lora_alpha, self.lora_targets)
        return None

    def train_config(self, seed):
        return TrainConfig(mode=self.mode, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, warmup_ratio=self.warmup_ratio, grad_clip=self.grad_clip,
                           weight_decay=self.weight_decay, seed=seed, method=self.method,
                           mixup=MixupConfig(self.mixup, self.mixup_alpha),
                           contrastive=ContrastiveConfig(self.contrastive, self.temperature, self.lambda_con))

    def warm_start_config(self):
        return WarmStartConfig(self.warm_start_epochs, self.warm_start_lr, seed=self.backbone_seed)

    def synonyms(self):
        return LexiconSynonyms.from_json(self.lexicon_path) if self.lexicon_path else default_synonyms()

    def translator_client(self):
        url = os.environ.get(TRANSLATOR_ENV)
        if self.translator == "http" or url:
            if not url:
                raise ConfigurationError(f"translator 'http' needs the {TRANSLATOR_ENV} environment variable")
            return HttpTranslator(url)
        return {"reversal": ReversalTranslator, "identity": IdentityTranslator,
                "paraphrase": lambda: LexiconParaphraseTranslator(self.synonyms())}[self.translator]()


# Data and backbone -------------------------------------------------------

@dataclass
class Task:
    spec: DatasetSpec
    train: list
    val: list
    vocab: Vocabulary
    featurizer: Featurizer


def load_task(cfg: ExperimentConfig, vocab: Optional[Vocabulary] = None):
    """Train/val examples plus a vocabulary built from the training split only."""
    if cfg.dataset == "jsonl":
        spec = DatasetSpec(os.path.splitext(os.path.basename(cfg.train_path))[0], cfg.task_kind, cfg.train_path,
                           cfg.val_path, cfg.max_seq_len, cfg.class_names)
        train_ex, val_ex = load_jsonl(cfg.train_path, spec), load_jsonl(cfg.val_path, spec)
    else:
        train_ex, val_ex, spec = bundled_task(cfg.dataset, cfg.n_train, cfg.n_val, cfg.data_seed)
        spec = replace(spec, max_seq_len=cfg.max_seq_len)
    if not train_ex:
        raise DataError("training split is empty")
    vocab = vocab if vocab is not None else Vocabulary.build(train_ex)
    return Task(spec, train_ex, val_ex, vocab, Featurizer(vocab, cfg.max_seq_len))


def num_classes(cfg: ExperimentConfig, task: Task):
    if task.spec.class_names:
        return len(task.spec.class_names)
    return max(2, 1 + max(ex.label for ex in task.train + task.val))


def prepare_backbone(cfg: ExperimentConfig, task: Task):
    """A backbone loaded from ``backbone_path`` or warm-started from unlabeled text."""
    config = cfg.model_config(len(task.vocab), num_classes(cfg, task))
    task.spec.check_model(config)
    model = Encoder(config, seed=cfg.backbone_seed)
    if cfg.backbone_path:
        ParameterStore.load(cfg.backbone_path).load_into(model)
        return model
    if cfg.warm_start_path:
        pool = load_jsonl(cfg.warm_start_path)
    elif cfg.dataset in BUNDLED_TASKS:
        pool = unlabeled_pool(cfg.dataset, cfg.warm_start_pool)
    else:
        pool = list(task.train)
    warm_start(model, pool, task.featurizer, cfg.synonyms().mapping, cfg.warm_start_config())
    return model


def augment_examples(cfg: ExperimentConfig, examples, method=None):
    """Originals followed by their augmentations; returns (corpus, failures)."""
    method = METHOD_NAMES.get(method, method) if method is not None else cfg.method
    similarity = BagOfWordsSimilarity() if cfg.similarity_weights else None
    return augment_corpus(
        examples, method,
        eda_config=EDAConfig(cfg.eda_alpha, cfg.eda_n_aug, cfg.augment_seed),
        corruption_config=CorruptionConfig(cfg.corrupt_alpha, cfg.corrupt_n_aug, cfg.augment_seed),
        synonyms=cfg.synonyms(), translator=cfg.translator_client() if method == "back_translation" else None,
        languages=cfg.bt_languages, similarity=similarity)


# Training ----------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    directory: str
    metrics: MetricsLog
    failures: list = field(default_factory=list)


def _write_meta(directory, **extra):
    meta = {"created_utc": datetime.now(timezone.utc).isoformat(), "petaug_version": __version__,
            "torch_version": torch.__version__, **extra}
    atomic_write_text(os.path.join(directory, "meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def run_seed(cfg: ExperimentConfig, task: Task, backbone: Encoder, corpus, seed, directory):
    """Train one seed from a copy of ``backbone`` and write its run directory."""
    os.makedirs(directory, exist_ok=True)
    model = Encoder(backbone.config)
    model.load_state_dict(backbone.state_dict())
    adapters = build_adapters(cfg.mode, backbone.config, cfg.adapter_config(), seed=seed)
    tcfg = cfg.train_config(seed)
    losses = []
    ckpt, metrics = train(model, adapters, EncodedDataset.from_examples(corpus, task.featurizer),
                          EncodedDataset.from_examples(task.val, task.featurizer), tcfg, loss_log=losses)
    ckpt.save(directory)
    write_loss_log(os.path.join(directory, "losses.jsonl"), losses)
    summary = {**metrics.summary(), "dataset": task.spec.name, "mode": cfg.mode, "method": cfg.method,
               "seed": seed, "best_val_percent": round(100.0 * metrics.best_val_acc, 1)}
    atomic_write_text(os.path.join(directory, "metrics.json"), json.dumps(summary, indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(directory, "config.yaml"), cfg.with_overrides(seeds=(seed,)).to_yaml())
    task.vocab.save(os.path.join(directory, "vocab.txt"))
    _write_meta(directory, seed=seed)
    return metrics


def run_training(cfg: ExperimentConfig, out_dir, log=print):
    """Train every seed in ``cfg.seeds``; one ``seed-<n>`` subdirectory each."""
    task = load_task(cfg)
    corpus, failures = augment_examples(cfg, task.train)
    log(f"training corpus: {len(task.train)} originals, {len(corpus) - len(task.train)} augmented ({cfg.method})")
    backbone = prepare_backbone(cfg, task)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "config.yaml"), cfg.to_yaml())
    results = []
    for seed in cfg.seeds:
        directory = os.path.join(out_dir, f"seed-{seed}")
        metrics = run_seed(cfg, task, backbone, corpus, seed, directory)
        log(f"seed {seed}: best val_acc {metrics.best_val_acc:.4f} at epoch {metrics.best_epoch} -> {directory}")
        results.append(RunResult(seed, directory, metrics, failures))
    return results


# Loading runs ------------------------------------------------------------

@dataclass
class LoadedRun:
    directory: str
    config: ExperimentConfig
    checkpoint: Checkpoint
    model: Encoder
    adapters: object
    task: Task


def load_run(directory):
    cfg_path = os.path.join(directory, "config.yaml")
    if not os.path.exists(cfg_path):
        raise AnalysisError(f"{directory!r} is not a run directory (no config.yaml)")
    cfg = ExperimentConfig.from_yaml(cfg_path)
    try:
        ckpt = Checkpoint.load(directory)
    except FileNotFoundError as exc:
        raise AnalysisError(f"run {directory!r} is incomplete: {exc}") from exc
    vocab = Vocabulary.load(os.path.join(directory, "vocab.txt"))
    if len(vocab) != ckpt.model_config.vocab_size:
        raise AnalysisError(f"run {directory!r}: vocabulary size does not match the checkpoint")
    task = load_task(cfg, vocab)
    if ckpt.model_config.max_seq_len < cfg.max_seq_len:
        raise AnalysisError(f"run {directory!r}: checkpoint max_seq_len is smaller than the config's")
    model, adapters = ckpt.restore()
    return LoadedRun(directory, cfg, ckpt, model, adapters, task)


def find_runs(paths):
    """Expand each path into run directories: itself if it holds a checkpoint, else its run subdirectories."""
    runs = []
    for path in paths:
        if os.path.exists(os.path.join(path, "checkpoint.json")):
            runs.append(path)
            continue
        subdirs = sorted(d for d in (os.path.join(path, n) for n in os.listdir(path)) if os.path.isdir(d)) \
            if os.path.isdir(path) else []
        found = [d for d in subdirs if os.path.exists(os.path.join(d, "checkpoint.json"))]
        runs.extend(found if found else [path])
    return runs


# Evaluation and analysis -------------------------------------------------

def evaluate_run(run: LoadedRun, examples=None):
    data = EncodedDataset.from_examples(run.task.val if examples is None else examples, run.task.featurizer)
    return evaluate(run.model, run.adapters, data)


def analysis_views(cfg: ExperimentConfig, task: Task):
    """Tag -> examples for the clean/eda/bt/corrupt grid, one augmented copy per original."""
    val = task.val if cfg.analysis_n_val is None else task.val[:cfg.analysis_n_val]
    one = cfg.with_overrides(eda_n_aug=1, corrupt_n_aug=1, bt_languages=cfg.bt_languages[:1])
    views = {"clean-train": list(task.train), "clean-val": list(val)}
    failures = []
    for method, tag in (("eda", "eda-val"), ("back_translation", "bt-val"), ("corrupt", "corrupt-val")):
        corpus, fails = augment_examples(one, val, method)
        views[tag] = corpus[len(val):]
        failures += fails
    return views, failures


def analyze_runs(run_dirs, out_dir, log=print):
    """Similarity reports, entropy table, separation scores and embedding export per run.

    Similarity reports aggregate over runs sharing a configuration (the seed
    fan-out of one ``train`` call).
    """
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise AnalysisError("no runs to analyze")
    os.makedirs(out_dir, exist_ok=True)
    groups = {}
    for run in runs:
        key = json.dumps(run.config.with_overrides(seeds=(0,)).to_dict(), sort_keys=True)
        groups.setdefault(key, []).append(run)
    dirs = [os.path.abspath(r.directory) for r in runs]
    common = os.path.commonpath(dirs)
    if common in dirs:
        common = os.path.dirname(common)
    entropy_rows, separation_rows, failures = [], [], []
    reports = []
    for group_index, members in enumerate(groups.values()):
        first = members[0]
        views, fails = analysis_views(first.config, first.task)
        failures += fails
        for tag, kind in ((t, k) for t in ("corrupt-val", "eda-val", "bt-val") for k in KINDS):
            if not views[tag]:
                continue
            rep = similarity_report([(r.model, r.adapters) for r in members], views["clean-val"], views[tag],
                                    first.task.featurizer, kind)
            reports.append({"group": group_index, "view": tag, **rep.to_json(),
                            "runs": [os.path.basename(os.path.normpath(r.directory)) for r in members]})
        for run in members:
            name = os.path.relpath(os.path.abspath(run.directory), common)
            for tag in sorted(views):
                if not views[tag]:
                    continue
                res = evaluate_run(run, views[tag])
                entropy_rows.append({"run": name, "view": tag, "accuracy": res.accuracy,
                                     "mean_entropy": res.mean_entropy})
                records = embedding_records(run.model, run.adapters, views[tag], run.task.featurizer, tag)
                for kind in KINDS:
                    try:
                        score = class_separation(records, kind)
                    except Exception as exc:  # too few records per class
                        log(f"separation skipped for {name} {tag}: {exc}")
                        continue
                    separation_rows.append({"run": name, "view": tag, "kind": kind, "score": score})
            export_dir = os.path.join(out_dir, "embeddings")
            os.makedirs(export_dir, exist_ok=True)
            export_embeddings(os.path.join(export_dir, f"{name.replace(os.sep, '__')}.jsonl"), run.model,
                              run.adapters, views, run.task.featurizer, model_tag=name)
    atomic_write_text(os.path.join(out_dir, "similarity.json"), json.dumps(reports, indent=2, sort_keys=True) + "\n")
    atomic_write_text(os.path.join(out_dir, "entropy.csv"), _csv(entropy_rows, ("run", "view", "accuracy", "mean_entropy")))
    atomic_write_text(os.path.join(out_dir, "separation.csv"), _csv(separation_rows, ("run", "view", "kind", "score")))
    return {"similarity": reports, "entropy": entropy_rows, "separation": separation_rows, "failures": failures}


def _csv(rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


# Reporting ---------------------------------------------------------------

@dataclass
class ResultsTable:
    """Best-epoch accuracy percent per (mode, method) row and dataset column."""
    rows: list
    columns: list
    cells: dict        # (row, column) -> mean percent
    provenance: dict   # (row, column) -> list of run ids

    def best_in_column(self, column):
        values = [self.cells[(r, column)] for r in self.rows if (r, column) in self.cells]
        return max(values) if values else None

    def to_markdown(self):
        header = "| mode | method | " + " | ".join(self.columns) + " |"
        lines = [header, "|" + "---|" * (2 + len(self.columns))]
        for row in self.rows:
            cells = []
            for col in self.columns:
                value = self.cells.get((row, col))
                if value is None:
                    cells.append("")
                    continue
                text = f"{value:.1f}"
                cells.append(f"**{text}**" if value == self.best_in_column(col) else text)
            lines.append(f"| {row[0]} | {row[1]} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["mode", "method", "dataset", "accuracy_percent", "n_runs", "runs"])
        for row in self.rows:
            for col in self.columns:
                if (row, col) in self.cells:
                    runs = self.provenance[(row, col)]
                    writer.writerow([row[0], row[1], col, f"{self.cells[(row, col)]:.1f}", len(runs), ";".join(runs)])
        return buf.getvalue()


def build_results_table(run_dirs):
    """Mean best-epoch accuracy across seeds for every (mode, method, dataset) group."""
    if not run_dirs:
        raise ReportError("no run directories given")
    groups = {}
    for directory in run_dirs:
        metrics_path = os.path.join(directory, "metrics.csv")
        if not os.path.exists(metrics_path):
            raise ReportError(f"run {directory!r} has no metrics.csv")
        with open(metrics_path, encoding="utf-8") as fh:
            metrics = MetricsLog.from_csv(fh.read())
        if not metrics.epochs:
            raise ReportError(f"run {directory!r} has an empty metrics.csv")
        summary_path = os.path.join(directory, "metrics.json")
        if not os.path.exists(summary_path):
            raise ReportError(f"run {directory!r} has no metrics.json")
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
        key = ((summary["mode"], summary["method"]), summary["dataset"])
        groups.setdefault(key, []).append((os.path.normpath(directory), metrics.best_val_acc))
    rows = sorted({k[0] for k in groups})
    columns = sorted({k[1] for k in groups})
    cells, provenance = {}, {}
    for (row, col), members in groups.items():
        cells[(row, col)] = round(100.0 * float(np.mean([acc for _, acc in members])), 1)
        provenance[(row, col)] = sorted(d for d, _ in members)
    return ResultsTable(rows, columns, cells, provenance)
