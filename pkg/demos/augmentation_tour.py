"""Static augmentation side by side: light EDA, heavy corruption and back-translation.

Run: python demos/augmentation_tour.py
"""
from petaug.augment import (BagOfWordsSimilarity, CorruptionConfig, EDAConfig, LexiconParaphraseTranslator,
                            ReversalTranslator, back_translate, compute_similarity_weight, corrupt, eda_augment)
from petaug.data import RawExample

sentence = RawExample("demo-1", "honestly the acting was great and the ending felt wonderful .", 1)
similarity = BagOfWordsSimilarity()
print("original:", sentence.primary_text, "\n")

print("EDA at 5% (the usual light setting), first four of sixteen:")
for aug in eda_augment(sentence, EDAConfig(alpha=0.05, n_aug=16))[:4]:
    print(f"  {compute_similarity_weight(sentence, aug, similarity):.2f}  {aug.primary_text}")

print("\nSame machinery at 50%, i.e. heavy corruption (eight per original):")
for aug in corrupt(sentence, CorruptionConfig())[:4]:
    print(f"  {compute_similarity_weight(sentence, aug, similarity):.2f}  {aug.primary_text}")

print("\nBack-translation through an offline paraphrasing stub, one output per pivot language:")
for aug in back_translate(sentence, LexiconParaphraseTranslator(rate=0.5)):
    print(f"  {aug.example_id:<18} {aug.primary_text}")

# The word-reversal stub inverts itself, so the round trip is exact; handy for plumbing checks.
exact = back_translate(sentence, ReversalTranslator(), ["fr"])[0]
print("\nreversal round trip exact:", exact.primary_text == sentence.primary_text)
print("The number before each edited sentence is the bag-of-words weight its loss would carry.")
