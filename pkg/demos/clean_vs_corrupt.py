"""Prefix-tune a small warm-started encoder on clean and on heavily corrupted data, then
look at accuracy, prediction entropy and how far corruption moves the sentence embeddings.

Takes about a minute on one CPU core.  Run: python demos/clean_vs_corrupt.py
"""
import numpy as np
import torch

from petaug.analysis import class_separation, embedding_records, similarity_report
from petaug.augment import augment_corpus, default_synonyms
from petaug.data import Featurizer, Vocabulary, bundled_task
from petaug.model import Encoder, ModelConfig
from petaug.peft import init_prefix
from petaug.pretrain import WarmStartConfig, unlabeled_pool, warm_start
from petaug.trainer import EncodedDataset, TrainConfig, evaluate, train

torch.set_num_threads(1)
train_set, val_set, _ = bundled_task("synthetic-sentiment", 50, 100, seed=0)
vocab = Vocabulary.build(train_set)
featurizer = Featurizer(vocab, 64)
config = ModelConfig(vocab_size=len(vocab), max_seq_len=64)

# Stand-in for a pretrained checkpoint: a short concept-prediction warm-up on unlabeled text.
backbone = Encoder(config, seed=0)
losses = warm_start(backbone, unlabeled_pool("synthetic-sentiment", 1000), featurizer, default_synonyms().mapping,
                    WarmStartConfig(epochs=5))
print(f"warm-start loss {losses[0]:.3f} -> {losses[-1]:.3f}")

corrupted, _ = augment_corpus(train_set, "corrupt")
val = EncodedDataset.from_examples(val_set, featurizer)
probe_corpus, _ = augment_corpus(val_set[:40], "corrupt")
probe = [a for a in probe_corpus if a.method == "corrupt"]

for name, corpus, epochs in (("clean", train_set, 100), ("corrupt", corrupted, 20)):
    model = Encoder(config)
    model.load_state_dict(backbone.state_dict())
    bank = init_prefix(config, 8, seed=0)
    _, metrics = train(model, bank, EncodedDataset.from_examples(corpus, featurizer), val,
                       TrainConfig(max_epochs=epochs), eval_train=False)
    result = evaluate(model, bank, val)
    sim = similarity_report([(model, bank)], val_set[:40], probe, featurizer, "cls")
    sep = class_separation(embedding_records(model, bank, val_set, featurizer))
    print(f"{name:<8} {len(corpus):>4} examples  val {result.percent:5.1f}%  entropy {result.mean_entropy:.3f}  "
          f"orig-vs-corrupt cosine {sim.mean:.3f}  class separation {sep:.3f}")
print("\nAccuracies are best-epoch; entropy is in nats (ln 2 = %.3f is a coin flip)." % np.log(2))
