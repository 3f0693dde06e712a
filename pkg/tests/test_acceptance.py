"""Acceptance criteria, one test per criterion; the terminal summary prints a PASS/FAIL line for each."""
import math
import os
import random
import subprocess
import sys
from collections import Counter

import numpy as np
import pytest
import torch
import yaml
from scipy import stats

from conftest import assert_gradients_match, random_batch
from petaug.analysis import EmbeddingRecord, class_separation, embedding_records, similarity_report
from petaug.augment import (EDAConfig, IdentityTranslator, LexiconSynonyms, augment_corpus, corrupt, eda_augment,
                            random_deletion, random_insertion, random_swap, synonym_replacement)
from petaug.data import RawExample
from petaug.model import Encoder, ModelConfig, TuningMode
from petaug.objectives import (ContrastiveBatch, ContrastiveConfig, MixupConfig, cross_entropy, mixup_pairs,
                               ntxent_contrastive, one_hot, sample_contrastive_indices, sample_mixup_lambdas,
                               softmax_entropy)
from petaug.peft import LoRAConfig, PrefixConfig, build_adapters, freeze_backbone, init_lora, init_prefix
from petaug.trainer import EncodedDataset, TrainConfig, train

criterion = pytest.mark.criterion


def _trainable(model, adapters):
    total = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return total + (0 if adapters is None else sum(p.numel() for p in adapters.parameters() if p.requires_grad))


@criterion(1, "zero-adapter equivalence")
def test_zero_adapter_equivalence(record_property):
    cfg = ModelConfig()
    model = Encoder(cfg, seed=0).eval()
    lora = init_lora(cfg, 8, seed=1).eval()
    empty = init_prefix(cfg, 0).eval()
    worst = 0.0
    with torch.no_grad():
        for seed in range(100):
            batch = random_batch(cfg, batch_size=4, seq_len=int(8 + seed % 24), seed=seed)
            base = model(batch).logits
            for mode, adapters in ((TuningMode.LORA, lora), (TuningMode.PREFIX, empty)):
                worst = max(worst, float((model(batch, mode, adapters).logits - base).abs().max()))
    record_property("detail", f"max abs diff {worst:.2e}")
    assert worst <= 1e-6


@criterion(2, "frozen-backbone invariant")
@pytest.mark.parametrize("mode", ["prefix", "lora"])
def test_frozen_backbone_invariant(record_property, tiny_config, mode):
    model = Encoder(tiny_config, seed=0)
    adapters = build_adapters(mode, tiny_config, seed=0)
    before = {n: p.detach().clone() for n, p in model.backbone_parameters()}
    adapters_before = [p.detach().clone() for p in adapters.parameters()]
    batch = random_batch(tiny_config, 50, seed=1)
    data = EncodedDataset(batch, torch.ones(50), list(range(50)), list(range(50)))
    rows = []
    train(model, adapters, data, data, TrainConfig(mode=mode, max_epochs=10, batch_size=10), loss_log=rows)
    assert len(rows) == 50
    changed = [n for n, p in model.backbone_parameters() if not torch.equal(p, before[n])]
    record_property("detail", f"{mode}: {len(rows)} steps, {len(changed)} backbone tensors changed")
    assert not changed
    assert any(not torch.equal(a, b) for a, b in zip(adapters_before, adapters.parameters()))


def _gradient_model(seed=0):
    """Tiny float64 model, moved off the small-init regime so every gradient is well above rounding noise."""
    cfg = ModelConfig(num_layers=1, num_heads=2, model_dim=8, ff_dim=16, vocab_size=20, max_seq_len=6,
                      hidden_dropout=0.0)
    model = Encoder(cfg, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return cfg, model


@criterion(3, "gradient correctness")
def test_gradient_correctness(record_property):
    errors = []
    for mode in ("prefix", "lora"):
        cfg, model = _gradient_model()
        adapters = (init_prefix(cfg, 3, seed=0) if mode == "prefix" else init_lora(cfg, 2, seed=0)).double().eval()
        if mode == "lora":
            with torch.no_grad():
                for pair in adapters.pairs.values():
                    pair.B.normal_(0, 0.3, generator=torch.Generator().manual_seed(4))
        freeze_backbone(model, mode, adapters)
        model.eval()
        batch = random_batch(cfg, batch_size=6, seed=3)
        batch.labels[:] = torch.tensor([0, 0, 0, 1, 1, 1])
        idx = sample_contrastive_indices(batch.labels.numpy(), np.random.default_rng(0))
        targets = one_hot(batch.labels, 2, torch.float64)

        def loss():
            out = model(batch, mode, adapters)
            e = out.cls_embedding
            t = torch.as_tensor(idx)
            con = ntxent_contrastive(ContrastiveBatch(e[t[:, 0]], e[t[:, 1]], e[t[:, 2]], e[t[:, 3]], idx), 0.9)
            return cross_entropy(out.logits, targets) + 0.2 * con

        tensors = list(adapters.parameters()) + [p for _, p in model.head_parameters()]
        errors += assert_gradients_match(loss, tensors)
    record_property("detail", f"max relative error {max(errors):.1e}")


@criterion(4, "closed-form loss values")
def test_closed_form_losses(record_property):
    v = torch.ones(3, 4, dtype=torch.float64)
    con = float(ntxent_contrastive(ContrastiveBatch(v, v, v, v, np.zeros((3, 4), dtype=np.int64)), 0.9))
    ce = float(cross_entropy(torch.zeros(2, 2, dtype=torch.float64), one_hot(torch.tensor([0, 1]), 2, torch.float64)))
    ent = float(softmax_entropy(torch.zeros(2, 2, dtype=torch.float64))[1])
    assert abs(con - math.log(3)) <= 1e-9
    assert abs(ce - math.log(2)) <= 1e-9 and abs(ent - math.log(2)) <= 1e-9
    x = torch.randn(5, 3, dtype=torch.float64)
    y = one_hot(torch.tensor([0, 1, 0, 1, 1]), 2, torch.float64)
    rng = np.random.default_rng(0)
    one = mixup_pairs(x, y, MixupConfig(True), rng, lambdas=1.0)
    zero = mixup_pairs(x, y, MixupConfig(True), rng, lambdas=0.0)
    assert torch.equal(one.mixed_embeddings, x) and torch.equal(one.mixed_labels, y)
    assert torch.equal(zero.mixed_embeddings, x[zero.second]) and torch.equal(zero.mixed_labels, y[zero.second])
    record_property("detail", f"contrastive {con:.12f}, ce {ce:.12f}, entropy {ent:.12f}")


@criterion(5, "parameter-count formulas")
def test_parameter_count_formulas(record_property):
    d, classes, hidden = 16, 2, 12
    head = (d * d + d) + (d * classes + classes)
    checked = 0
    for layers in (1, 2, 3):
        cfg = ModelConfig(num_layers=layers, num_heads=2, model_dim=d, ff_dim=32, vocab_size=30, max_seq_len=16)
        for size in (1, 4, 8):
            for reparam in (False, True):
                model = Encoder(cfg, seed=0)
                bank = build_adapters("prefix", cfg, PrefixConfig(size, reparam, hidden))
                freeze_backbone(model, "prefix", bank)
                expected = layers * size * 2 * d
                if reparam:
                    expected = size * d + (d * hidden + hidden) + (hidden * layers * 2 * d + layers * 2 * d)
                assert _trainable(model, bank) == expected + head
                checked += 1
            model = Encoder(cfg, seed=0)
            lora = build_adapters("lora", cfg, LoRAConfig(size, targets=("query", "key", "value")))
            freeze_backbone(model, "lora", lora)
            assert _trainable(model, lora) == sum(size * (d + d) for _ in range(layers) for _ in range(3)) + head
            checked += 1
    record_property("detail", f"{checked} configurations")


@criterion(6, "augmentation contracts")
def test_augmentation_contracts(record_property):
    lexicon = LexiconSynonyms({"good": ["fine", "nice"], "bad": ["poor"], "movie": ["film"]})
    ex = RawExample("e", " ".join(f"w{i}" for i in range(20)), 1, "second input")
    assert all(a.primary_text == ex.primary_text for a in eda_augment(ex, EDAConfig(alpha=0.0), lexicon))
    assert len(eda_augment(ex, EDAConfig(alpha=0.05, n_aug=16), lexicon)) == 16
    assert len(corrupt(ex, provider=lexicon)) == 8
    rng = random.Random(0)
    vocab = ["good", "bad", "movie", "the", "a", "plot", "was", "."]
    for case in range(10_000):
        words = [rng.choice(vocab) for _ in range(rng.randint(1, 15))]
        n = rng.randint(0, 5)
        p = rng.random()
        assert len(random_deletion(words, p, rng)) >= 1
        assert Counter(random_swap(words, n, rng)) == Counter(words)
        assert len(random_insertion(words, n, lexicon, rng)) == len(words) + n
        replaced = synonym_replacement(words, n, lexicon, rng)
        assert sum(a != b for a, b in zip(words, replaced)) <= n
        if case % 10 == 0:
            src = RawExample(str(case), " ".join(words), case % 2, "kept")
            out = eda_augment(src, EDAConfig(alpha=rng.random(), n_aug=rng.randint(1, 4), seed=case), lexicon)
            assert all(a.secondary_text == "kept" and a.label == src.label and a.primary_text for a in out)
    assert len(random_deletion(list("abcdef"), 1.0, rng)) == 1
    record_property("detail", "10000 sweep cases")


@criterion(7, "mixup lambda distribution")
def test_mixup_distribution(record_property):
    lam = sample_mixup_lambdas(10_000, 1.0, np.random.default_rng(0))
    ks = stats.kstest(lam, "uniform").statistic
    record_property("detail", f"mean {lam.mean():.4f}, KS {ks:.4f}")
    assert abs(lam.mean() - 0.5) <= 0.02 and ks < 0.02


def _run(setup, examples, tcfg):
    model = setup.fresh_model()
    bank = init_prefix(setup.config, 8, seed=tcfg.seed)
    val = EncodedDataset.from_examples(setup.val, setup.featurizer)
    _, metrics = train(model, bank, EncodedDataset.from_examples(examples, setup.featurizer), val, tcfg,
                       eval_train=False)
    return model, bank, metrics


@criterion(8, "desk-scale learning")
def test_desk_scale_learning(record_property, sentiment_setup):
    model = sentiment_setup.fresh_model()
    bank = init_prefix(sentiment_setup.config, 8, seed=0)
    data = EncodedDataset.from_examples(sentiment_setup.train, sentiment_setup.featurizer)
    _, metrics = train(model, bank, data, data, TrainConfig(mode="prefix", max_epochs=200))
    first = next((r["epoch"] for r in metrics.epochs if r["train_acc"] == 1.0), None)
    record_property("detail", f"first 100% train accuracy at epoch {first}")
    assert first is not None


@criterion(9, "directional corruption effect")
def test_directional_corruption(record_property, sentiment_setup):
    corrupted, _ = augment_corpus(sentiment_setup.train, "corrupt")
    clean, noisy = [], []
    for seed in range(3):
        clean.append(_run(sentiment_setup, sentiment_setup.train, TrainConfig(max_epochs=100, seed=seed))[2].best_val_acc)
        noisy.append(_run(sentiment_setup, corrupted, TrainConfig(max_epochs=20, seed=seed))[2].best_val_acc)
    record_property("detail", f"clean {np.mean(clean):.3f} vs corrupt {np.mean(noisy):.3f}")
    assert np.mean(noisy) <= np.mean(clean)


@criterion(10, "directional contrastive effect")
def test_directional_contrastive(record_property, sentiment_setup):
    corpus, _ = augment_corpus(sentiment_setup.train, "eda")
    plain, contrastive = [], []
    for seed in range(3):
        for bucket, con in ((plain, ContrastiveConfig(False)), (contrastive, ContrastiveConfig(True, 0.9, 0.2))):
            model, bank, _ = _run(sentiment_setup, corpus, TrainConfig(max_epochs=8, seed=seed, contrastive=con))
            records = embedding_records(model, bank, sentiment_setup.val, sentiment_setup.featurizer)
            bucket.append(class_separation(records, "cls"))
    record_property("detail", f"separation {np.mean(plain):.4f} -> {np.mean(contrastive):.4f} with contrastive")
    assert np.mean(contrastive) >= np.mean(plain)


@criterion(11, "analysis pipeline integrity")
def test_analysis_integrity(record_property, sentiment_setup):
    model = sentiment_setup.fresh_model().eval()
    originals = sentiment_setup.val[:20]
    corpus, _ = augment_corpus(originals, "bt", translator=IdentityTranslator())
    copies = [a for a in corpus if a.method != "none"]
    means = [similarity_report([(model, None)], originals, copies, sentiment_setup.featurizer, kind).mean
             for kind in ("cls", "mean")]
    assert all(abs(m - 1.0) <= 1e-9 for m in means)
    rng = np.random.default_rng(0)
    points = np.vstack([rng.normal([8, 1, 0], 0.2, (60, 3)), rng.normal([0, 1, 8], 0.2, (60, 3))])
    labels = np.repeat([0, 1], 60)

    def score(lab):
        return class_separation([EmbeddingRecord(str(i), str(i), "none", int(l), v, v)
                                 for i, (v, l) in enumerate(zip(points, lab))])

    separated, permuted = score(labels), score(rng.permutation(labels))
    record_property("detail", f"similarity {means}, separation {separated:.3f}, permuted {permuted:.3f}")
    assert separated > 0.9 and abs(permuted) <= 0.05


@criterion(12, "reproducibility")
def test_reproducibility(record_property, tmp_path):
    config = {"schema_version": 1, "n_train": 20, "n_val": 20, "warm_start_epochs": 1, "warm_start_pool": 200,
              "max_epochs": 3, "mode": "prefix", "method": "eda", "eda_n_aug": 2, "seeds": [0]}
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    env = {**os.environ, "PETAUG_THREADS": "1"}
    outputs = []
    for name in ("first", "second"):
        subprocess.run([sys.executable, "-m", "petaug.cli", "train", "--config", str(path),
                        "--out", str(tmp_path / name)], check=True, capture_output=True, env=env)
        outputs.append((tmp_path / name / "seed-0" / "metrics.csv").read_bytes())
    record_property("detail", f"{len(outputs[0])} bytes, identical={outputs[0] == outputs[1]}")
    assert outputs[0] == outputs[1]
