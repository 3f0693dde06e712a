"""How much of the network each tuning mode trains, and why fresh adapters change nothing.

Run: python demos/adapters_tour.py
"""
import torch

from petaug.model import Encoder, ModelConfig, TokenBatch, TuningMode, count_trainable_parameters
from petaug.peft import LoRAConfig, PrefixConfig, init_lora, init_prefix

torch.set_num_threads(1)
config = ModelConfig()  # 2 layers, width 64, two classes
print(f"encoder: {config.num_layers} layers, width {config.model_dim}, vocabulary {config.vocab_size}\n")

full = count_trainable_parameters("fine_tune", config)
for mode, adapter in (("fine_tune", None), ("frozen_probe", None), ("prefix", PrefixConfig(8)),
                      ("prefix", PrefixConfig(8, reparam=True, prefix_hidden_size=64)), ("lora", LoRAConfig(8))):
    count = count_trainable_parameters(mode, config, adapter)
    label = mode + (" (reparameterized)" if getattr(adapter, "reparam", False) else "")
    print(f"{label:<28} {count:>8,d} trainable  ({100 * count / full:5.1f}% of full fine-tuning)")

# A LoRA pair starts with its up-projection at zero, and an empty prefix adds no key/value
# rows, so both reproduce the frozen network exactly before any training.
model = Encoder(config, seed=0).eval()
ids = torch.randint(4, config.vocab_size, (3, 16))
ids[:, 0] = 0
batch = TokenBatch(ids, torch.ones_like(ids))
with torch.no_grad():
    base = model(batch).logits
    lora_gap = (model(batch, TuningMode.LORA, init_lora(config, 8, seed=1)).logits - base).abs().max()
    prefix_gap = (model(batch, TuningMode.PREFIX, init_prefix(config, 0)).logits - base).abs().max()
    prompted = model(batch, TuningMode.PREFIX, init_prefix(config, 8, seed=2).eval()).logits
print(f"\nfresh LoRA vs frozen: max |diff| = {float(lora_gap):.1e}")
print(f"empty prefix vs frozen: max |diff| = {float(prefix_gap):.1e}")
print(f"8-row random prefix vs frozen: max |diff| = {float((prompted - base).abs().max()):.1e}")
