import json
import os
import socket

import pytest
import torch
import yaml

from petaug.augment import read_augmented_jsonl
from petaug.checkpoint import ParameterStore
from petaug.cli import main
from petaug.errors import ConfigurationError, ReportError
from petaug.experiment import ExperimentConfig, build_results_table, find_runs, load_run
from petaug.trainer import MetricsLog

SMALL = {"schema_version": 1, "n_train": 12, "n_val": 12, "num_layers": 1, "model_dim": 16, "num_heads": 2,
         "ff_dim": 32, "max_seq_len": 32, "warm_start_epochs": 1, "warm_start_pool": 100, "max_epochs": 2,
         "batch_size": 4, "prefix_len": 2}


def _config(tmp_path, **overrides):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **overrides}))
    return str(path)


def _fake_run(directory, accs, dataset="synthetic-sentiment", mode="prefix", method="none"):
    os.makedirs(directory, exist_ok=True)
    log = MetricsLog()
    for epoch, acc in enumerate(accs):
        log.append(epoch=epoch, train_loss=0.1, train_acc=1.0, val_acc=acc, mean_entropy=0.2)
    (directory / "metrics.csv").write_text(log.to_csv())
    (directory / "metrics.json").write_text(json.dumps({"dataset": dataset, "mode": mode, "method": method}))
    return str(directory)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        ExperimentConfig.from_dict({"schema_version": 1, "learning_rat": 0.1})
    with pytest.raises(ConfigurationError, match="schema_version"):
        ExperimentConfig.from_dict({"n_train": 3})
    with pytest.raises(ConfigurationError, match="does not exist"):
        ExperimentConfig.from_dict({"schema_version": 1, "lexicon_path": "nowhere.json"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"schema_version": 1, "mode": "bitfit"})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_yaml(tmp_path / "missing.yaml")


def test_config_paths_resolve_relative_to_file(tmp_path):
    (tmp_path / "lex.json").write_text('{"good": ["fine"]}')
    cfg = ExperimentConfig.from_yaml(_config(tmp_path, lexicon_path="lex.json"))
    assert cfg.lexicon_path == str(tmp_path / "lex.json")
    assert ExperimentConfig.from_dict(yaml.safe_load(cfg.to_yaml())) == cfg
    assert cfg.with_overrides(mode="finetune").mode == "fine_tune"


@pytest.mark.parametrize("method,n,expected", [("eda", 250, 250 + 4000), ("corrupt", 100, 100 + 800),
                                                ("none", 30, 30)])
def test_augment_counts(tmp_path, capsys, method, n, expected):
    out = tmp_path / "out"
    code = main(["augment", "--config", _config(tmp_path, n_train=n), "--method", method, "--out", str(out)])
    assert code == 0
    corpus = read_augmented_jsonl(out / "augmented.jsonl")
    assert len(corpus) == expected
    assert sum(a.method == "none" for a in corpus) == n
    assert all(a.similarity_weight == 1.0 for a in corpus if a.method == "none")
    assert "records:" in capsys.readouterr().out


def _dead_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_augment_back_translation_failure_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PETAUG_TRANSLATOR_URL", f"http://127.0.0.1:{_dead_port()}")
    monkeypatch.setattr("petaug.augment.HttpTranslator.__init__.__defaults__", (1.0, 0, 0.0))
    out = tmp_path / "bt"
    code = main(["augment", "--config", _config(tmp_path, n_train=2, bt_languages=["fr", "de"]),
                 "--method", "bt", "--out", str(out)])
    assert code == 7
    assert len(read_augmented_jsonl(out / "augmented.jsonl")) == 2
    report = json.loads((out / "augmented.jsonl.errors.json").read_text())
    assert sorted({r["language"] for r in report}) == ["de", "fr"]
    assert "fr=2" in capsys.readouterr().err


def test_train_fan_out_layout_and_report(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--config", _config(tmp_path, seeds=[0, 1, 2]), "--out", str(out)]) == 0
    runs = find_runs([str(out)])
    assert [os.path.basename(r) for r in runs] == ["seed-0", "seed-1", "seed-2"]
    for run in runs:
        names = set(os.listdir(run))
        assert {"backbone.ckpt", "adapter.ckpt", "checkpoint.json", "metrics.csv", "losses.jsonl",
                "config.yaml", "metrics.json", "vocab.txt", "meta.json"} <= names
        assert all(n.startswith("peft/prefix/") for n in ParameterStore.load(os.path.join(run, "adapter.ckpt")))
    snapshot = ExperimentConfig.from_yaml(os.path.join(runs[1], "config.yaml"))
    assert snapshot.seeds == (1,)
    loaded = load_run(runs[0])
    assert loaded.adapters is not None and loaded.config.mode == "prefix"
    capsys.readouterr()
    assert main(["evaluate", str(out), "--out", str(tmp_path / "eval")]) == 0
    rows = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
    assert len(rows) == 3
    assert main(["report", str(out), "--out", str(tmp_path / "report")]) == 0
    assert (tmp_path / "report" / "results.md").read_text().count("\n") == 3


def test_retraining_gives_identical_metrics(tmp_path):
    cfg = _config(tmp_path, mode="lora", contrastive=True, mixup=True)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b")])
    for name in ("metrics.csv", "losses.jsonl", "adapter.ckpt", "metrics.json", "config.yaml"):
        assert (tmp_path / "a" / "seed-0" / name).read_bytes() == (tmp_path / "b" / "seed-0" / name).read_bytes()


def test_analyze_uniform_logits_and_counts(tmp_path, capsys):
    out = tmp_path / "runs"
    main(["train", "--config", _config(tmp_path, method="eda", eda_n_aug=2, max_epochs=1), "--out", str(out)])
    run = out / "seed-0"
    uniform = ParameterStore()
    for name, entry in ParameterStore.load(run / "backbone.ckpt").items():
        uniform.add(name, 0 * entry.values if name.startswith("classifier") else entry.values, entry.trainable)
    uniform.save(run / "backbone.ckpt")
    assert main(["analyze", str(out), "--out", str(tmp_path / "analysis")]) == 0
    entropy = (tmp_path / "analysis" / "entropy.csv").read_text().splitlines()
    assert len(entropy) == 1 + 5
    assert all(abs(float(line.split(",")[3]) - 0.6931471805599453) < 1e-6 for line in entropy[1:])
    sims = json.loads((tmp_path / "analysis" / "similarity.json").read_text())
    assert {(s["view"], s["kind"]) for s in sims} == {(v, k) for v in ("corrupt-val", "eda-val", "bt-val")
                                                      for k in ("cls", "mean")}
    exported = (tmp_path / "analysis" / "embeddings" / "seed-0.jsonl").read_text().splitlines()
    assert len(exported) == 12 + 4 * 12


def test_report_cells(tmp_path):
    single = build_results_table([_fake_run(tmp_path / "one", [0.5, 0.75, 0.7])])
    assert single.cells == {(("prefix", "none"), "synthetic-sentiment"): 75.0}
    assert "**75.0**" in single.to_markdown()
    seeds = [_fake_run(tmp_path / f"s{i}", [acc], method="eda") for i, acc in enumerate((0.70, 0.72, 0.74))]
    other = _fake_run(tmp_path / "x", [0.6], method="corrupt")
    table = build_results_table(seeds + [other])
    assert table.cells[(("prefix", "eda"), "synthetic-sentiment")] == 72.0
    assert len(table.provenance[(("prefix", "eda"), "synthetic-sentiment")]) == 3
    md = table.to_markdown()
    assert "| prefix | eda | **72.0** |" in md and "| prefix | corrupt | 60.0 |" in md
    assert table.to_csv().splitlines()[0] == "mode,method,dataset,accuracy_percent,n_runs,runs"


def test_report_missing_metrics(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ReportError, match="empty"):
        build_results_table([str(tmp_path / "empty")])
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 4
    assert "metrics.csv" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("schema_version: 1\nbogus: 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "train.jsonl").write_text('{"id": "1", "primary": "x"}\n')
    (tmp_path / "val.jsonl").write_text('{"id": "1", "primary": "x", "label": 0}\n')
    assert main(["train", "--config", _config(tmp_path, dataset="jsonl", train_path="train.jsonl",
                                              val_path="val.jsonl"), "--out", str(tmp_path / "o")]) == 4
    assert main(["analyze", str(tmp_path), "--out", str(tmp_path / "a")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["train", "--mode", "bitfit", "--out", "x"])
    assert info.value.code == 2
    blocked = tmp_path / "file"
    blocked.write_text("")
    assert main(["augment", "--config", _config(tmp_path), "--out", str(blocked / "sub")]) == 6


def test_training_error_exit_code(tmp_path, monkeypatch, capsys):
    from petaug import trainer

    def explode(*args, **kwargs):
        raise trainer.TrainingError("non-finite loss at step 0", 0)

    monkeypatch.setattr("petaug.experiment.train", explode)
    assert main(["train", "--config", _config(tmp_path), "--out", str(tmp_path / "o")]) == 5
    assert "training error" in capsys.readouterr().err
