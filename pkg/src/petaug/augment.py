"""Task-agnostic text augmentation applied to an example's primary input.

EDA applies all four edit operations (synonym replacement, random insertion,
random swap, random deletion) to every generated sentence. Heavy corruption is
the same machinery at ``alpha=0.5`` with eight outputs per original.
Back-translation round-trips text through a pluggable translator client.
"""
from __future__ import annotations

import json
import logging
import math
import random
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Protocol, Sequence

from .checkpoint import atomic_write_text
from .data import RawExample, split_words
from .errors import AugmentationError, ConfigurationError, InputError, ParseError

log = logging.getLogger(__name__)

METHODS = ("eda", "corrupt", "back_translation", "none")
DEFAULT_LANGUAGES = ("fr", "es", "de", "zh")


@dataclass
class AugmentedExample:
    example_id: str
    origin_id: str
    method: str
    primary_text: str
    label: int
    secondary_text: Optional[str] = None
    similarity_weight: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown augmentation method {self.method!r}")
        if not 0.0 <= self.similarity_weight <= 1.0:
            raise InputError("similarity_weight must lie in [0, 1]")

    @classmethod
    def identity(cls, ex: RawExample):
        return cls(ex.example_id, ex.example_id, "none", ex.primary_text, ex.label, ex.secondary_text, 1.0)

    def to_json(self):
        return {"id": self.example_id, "origin_id": self.origin_id, "method": self.method,
                "primary": self.primary_text, "secondary": self.secondary_text,
                "label": self.label, "weight": self.similarity_weight}

    @classmethod
    def from_json(cls, row):
        return cls(str(row["id"]), str(row["origin_id"]), row["method"], row["primary"], int(row["label"]),
                   row.get("secondary"), float(row.get("weight", 1.0)))


@dataclass(frozen=True)
class EDAConfig:
    alpha: float = 0.05
    n_aug: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if self.n_aug < 1:
            raise ConfigurationError("n_aug must be >= 1")


@dataclass(frozen=True)
class CorruptionConfig(EDAConfig):
    alpha: float = 0.5
    n_aug: int = 8


class SynonymProvider(Protocol):
    def lookup(self, word: str) -> list: ...


class LexiconSynonyms:
    """Synonyms from a flat ``word -> [synonyms]`` mapping (lower-cased keys)."""

    def __init__(self, mapping=None):
        self.mapping = {k.lower(): [s for s in v if s.lower() != k.lower()] for k, v in (mapping or {}).items()}

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def bundled(cls):
        text = resources.files("petaug").joinpath("resources/lexicon.json").read_text(encoding="utf-8")
        return cls(json.loads(text))

    def lookup(self, word):
        return list(self.mapping.get(word.lower(), ()))


def example_rng(seed, example_id):
    """Independent stream per (seed, example id), so parallel and serial runs agree."""
    return random.Random(f"{seed}:{example_id}")


def edit_count(alpha, n_words):
    """round(alpha * n_words), halves rounded up."""
    return int(math.floor(alpha * n_words + 0.5))


def synonym_replacement(words, n, provider: SynonymProvider, rng):
    """Replace up to ``n`` positions with a provider synonym; words without synonyms are skipped."""
    out = list(words)
    candidates = [i for i, w in enumerate(out) if provider.lookup(w)]
    rng.shuffle(candidates)
    for i in candidates[:n]:
        out[i] = rng.choice(provider.lookup(out[i]))
    return out


def random_insertion(words, n, provider: SynonymProvider, rng):
    """Insert ``n`` words: a synonym of a random word, or a copy when none has synonyms."""
    out = list(words)
    for _ in range(n):
        candidates = [w for w in out if provider.lookup(w)]
        if candidates:
            new = rng.choice(provider.lookup(rng.choice(candidates)))
        else:
            new = rng.choice(out)
        out.insert(rng.randint(0, len(out)), new)
    return out


def random_swap(words, n, rng):
    out = list(words)
    if len(out) < 2:
        return out
    for _ in range(n):
        i, j = rng.sample(range(len(out)), 2)
        out[i], out[j] = out[j], out[i]
    return out


def random_deletion(words, p, rng):
    """Drop each word with probability ``p``; one random word survives if all would go."""
    if len(words) <= 1:
        return list(words)
    kept = [w for w in words if rng.random() >= p]
    if not kept:
        kept = [words[rng.randrange(len(words))]]
    return kept


def eda_sentence(text, alpha, provider: SynonymProvider, rng):
    words = split_words(text)
    if not words:
        raise InputError("cannot augment text with no words")
    n = edit_count(alpha, len(words))
    if n == 0 and alpha == 0:
        return text
    words = synonym_replacement(words, n, provider, rng)
    words = random_insertion(words, n, provider, rng)
    words = random_swap(words, n, rng)
    words = random_deletion(words, alpha, rng)
    return " ".join(words)


_default_provider = None


def default_synonyms():
    global _default_provider
    if _default_provider is None:
        _default_provider = LexiconSynonyms.bundled()
    return _default_provider


def eda_augment(ex: RawExample, cfg: EDAConfig = EDAConfig(), provider: Optional[SynonymProvider] = None,
                method="eda"):
    """``cfg.n_aug`` augmented copies of ``ex``, each with all four edits at rate ``cfg.alpha``."""
    if not split_words(ex.primary_text):
        raise InputError(f"example {ex.example_id!r} has no words to augment")
    provider = provider if provider is not None else default_synonyms()
    rng = example_rng(cfg.seed, ex.example_id)
    return [
        AugmentedExample(f"{ex.example_id}~{method}{k}", ex.example_id, method,
                         eda_sentence(ex.primary_text, cfg.alpha, provider, rng), ex.label, ex.secondary_text)
        for k in range(cfg.n_aug)
    ]


def corrupt(ex: RawExample, cfg: CorruptionConfig = CorruptionConfig(), provider: Optional[SynonymProvider] = None):
    return eda_augment(ex, cfg, provider, method="corrupt")


# Back-translation --------------------------------------------------------

class TranslatorClient(Protocol):
    def translate(self, text: str, source_lang: str, target_lang: str) -> str: ...


class IdentityTranslator:
    def translate(self, text, source_lang, target_lang):
        return text


class ReversalTranslator:
    """Deterministic stub: "translating" reverses word order, so a round trip is exact."""

    def translate(self, text, source_lang, target_lang):
        return " ".join(reversed(text.split(" ")))


class LexiconParaphraseTranslator:
    """Lossy offline stub: the return leg swaps words for lexicon synonyms.

    Which synonym is picked depends on the pivot language, so each language
    yields a different paraphrase. Useful for exercising BT without a network.
    """

    def __init__(self, provider: Optional[SynonymProvider] = None, source="en", rate=0.3):
        self.provider = provider if provider is not None else default_synonyms()
        self.source = source
        self.rate = rate

    def translate(self, text, source_lang, target_lang):
        if target_lang != self.source:
            return f"<{target_lang}> {text}"
        prefix = text.split(" ", 1)
        pivot = prefix[0].strip("<>") if prefix[0].startswith("<") else ""
        body = prefix[1] if pivot and len(prefix) > 1 else text
        rng = random.Random(f"{pivot}:{body}")
        words = []
        for w in body.split(" "):
            syns = self.provider.lookup(w)
            words.append(rng.choice(syns) if syns and rng.random() < self.rate else w)
        return " ".join(words)


class HttpTranslator:
    """POST ``{text, src, tgt}`` as JSON, expect ``{text}`` back."""

    def __init__(self, url, timeout=10.0, retries=2, backoff=0.5):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def translate(self, text, source_lang, target_lang):
        body = json.dumps({"text": text, "src": source_lang, "tgt": target_lang}).encode("utf-8")
        last = None
        for attempt in range(self.retries + 1):
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                if not isinstance(payload, dict) or not isinstance(payload.get("text"), str):
                    raise AugmentationError("translator response lacks a 'text' string", target_lang)
                return payload["text"]
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise AugmentationError(f"translator at {self.url} failed: {last}", target_lang, last)


class BackTranslationError(AugmentationError):
    """Some languages failed; ``partial`` holds the successful outputs, ``failures`` the errors."""

    def __init__(self, partial, failures):
        self.partial = partial
        self.failures = failures
        langs = ", ".join(f"{f.language}: {f.cause}" for f in failures)
        super().__init__(f"back-translation failed for {langs}", failures[0].language, failures[0].cause)


def back_translate(ex: RawExample, client: TranslatorClient, languages: Sequence[str] = DEFAULT_LANGUAGES,
                   source_lang="en", allowed_languages: Sequence[str] = DEFAULT_LANGUAGES):
    """One round-tripped copy of the primary text per pivot language.

    Per-language failures do not stop the others; if any occur a
    BackTranslationError carrying the partial results is raised at the end.
    """
    unknown = [lang for lang in languages if lang not in allowed_languages]
    if unknown:
        raise ConfigurationError(f"languages {unknown} not in configured set {list(allowed_languages)}")
    out, failures = [], []
    for lang in languages:
        try:
            pivot = client.translate(ex.primary_text, source_lang, lang)
            text = client.translate(pivot, lang, source_lang)
        except Exception as exc:  # client errors are reported per language
            failures.append(AugmentationError(f"{lang}: {exc}", lang, exc))
            continue
        if not text.strip():
            failures.append(AugmentationError(f"{lang}: empty translation", lang, None))
            continue
        out.append(AugmentedExample(f"{ex.example_id}~bt-{lang}", ex.example_id, "back_translation",
                                    text, ex.label, ex.secondary_text))
    if failures:
        raise BackTranslationError(out, failures)
    return out


# Similarity weights ------------------------------------------------------

class SimilarityProvider(Protocol):
    def similarity(self, a: str, b: str) -> float: ...


class BagOfWordsSimilarity:
    """Cosine between lower-cased word-count vectors."""

    def similarity(self, a, b):
        ca = Counter(w.lower() for w in split_words(a))
        cb = Counter(w.lower() for w in split_words(b))
        dot = sum(ca[w] * cb[w] for w in ca)
        na = math.sqrt(sum(v * v for v in ca.values()))
        nb = math.sqrt(sum(v * v for v in cb.values()))
        if na == 0 or nb == 0:
            return 0.0
        return dot / (na * nb)


def compute_similarity_weight(orig: RawExample, aug: AugmentedExample, provider: SimilarityProvider):
    """Clamp the provider's cosine into [0, 1] and store it on ``aug``.

    A failing provider yields weight 1.0 and a warning.
    """
    try:
        sim = float(provider.similarity(orig.primary_text, aug.primary_text))
        if math.isnan(sim):
            raise ValueError("similarity is NaN")
    except Exception as exc:
        log.warning("similarity provider failed for %s (%s); using weight 1.0", aug.example_id, exc)
        sim = 1.0
    weight = min(1.0, max(0.0, sim))
    aug.similarity_weight = weight
    return weight


# Corpus-level helpers ----------------------------------------------------

def augment_corpus(examples: Sequence[RawExample], method, *, eda_config: Optional[EDAConfig] = None,
                   corruption_config: Optional[CorruptionConfig] = None, synonyms=None, translator=None,
                   languages=DEFAULT_LANGUAGES, similarity: Optional[SimilarityProvider] = None):
    """Originals (method ``none``) followed by their augmentations.

    Returns ``(corpus, failures)``; failures are back-translation errors that
    were tolerated so that a partial corpus can still be written.
    """
    method = {"bt": "back_translation"}.get(method, method)
    if method not in METHODS:
        raise ConfigurationError(f"unknown augmentation method {method!r}")
    corpus = [AugmentedExample.identity(ex) for ex in examples]
    failures = []
    for ex in examples:
        if method == "eda":
            augs = eda_augment(ex, eda_config or EDAConfig(), synonyms)
        elif method == "corrupt":
            augs = corrupt(ex, corruption_config or CorruptionConfig(), synonyms)
        elif method == "back_translation":
            try:
                augs = back_translate(ex, translator or ReversalTranslator(), languages)
            except BackTranslationError as exc:
                augs = exc.partial
                failures += exc.failures
        else:
            augs = []
        if similarity is not None:
            for aug in augs:
                compute_similarity_weight(ex, aug, similarity)
        corpus += augs
    return corpus, failures


def write_augmented_jsonl(path, corpus: Sequence[AugmentedExample]):
    atomic_write_text(path, "".join(json.dumps(a.to_json(), ensure_ascii=False) + "\n" for a in corpus))


def read_augmented_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                for key in ("id", "origin_id", "method", "primary", "label"):
                    if key not in row:
                        raise ParseError(f"missing field {key!r}", lineno, key)
                out.append(AugmentedExample.from_json(row))
            except ParseError:
                raise
            except (json.JSONDecodeError, InputError, ValueError, TypeError) as exc:
                raise ParseError(str(exc), lineno) from exc
    return out


def as_raw(aug: AugmentedExample):
    """View an augmented record as a RawExample (for tokenization)."""
    return RawExample(aug.example_id, aug.primary_text, aug.label, aug.secondary_text)
