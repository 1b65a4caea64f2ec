"""Seeded synthetic multi-platform NER corpora.

Entities come from latent classes (drug, symptom, disease, dose). Each class
has a lexicon of made-up words: part of it is common to every platform and
part is private to one platform, so some entity surfaces recur across
corpora and some do not. Platforms disagree on annotation: each maps the
latent classes onto its own label set and leaves some classes unlabelled.
Entity words are drawn from platform-specific Zipf rankings, so a word that
is frequent on one platform can be rare or absent on another.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Corpus, LabeledSentence, split_train_test

CLASSES = ("drug", "symptom", "disease", "dose")

# latent class -> entity type, per platform; missing classes are left as O
DEFAULT_SCHEMES = (
    {"drug": "Drug", "symptom": "ADE", "disease": "Disease"},
    {"drug": "Drug", "symptom": "ADE", "dose": "Dosage"},
    {"drug": "Drug", "symptom": "ADE", "disease": "ADE"},
)

# context words that tend to precede a class
CUES = {
    "drug": ("took", "prescribed", "started", "on"),
    "symptom": ("felt", "developed", "noticed", "severe"),
    "disease": ("diagnosed", "with", "history", "chronic"),
    "dose": ("dose", "daily", "of", "at"),
}

_ONSETS = "b c d f g h k l m n p r s t v z br cl dr fl gr pl pr st tr".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "", "n", "r", "s", "l", "x", "m"]


@dataclass
class BenchmarkSpec:
    n_platforms: int = 3
    sentences: int = 625  # per platform, before the 80/20 split
    shared_words: int = 200  # per class, common to all platforms
    private_words: int = 20  # per class, per platform
    filler_words: int = 120
    zipf: float = 0.6
    cue_prob: float = 0.5
    phrase_prob: float = 0.25
    min_len: int = 5
    max_len: int = 10
    schemes: tuple = DEFAULT_SCHEMES
    train_ratio: float = 0.8


def _word(rng, used):
    while True:
        n = rng.integers(2, 4)
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS) for _ in range(n))
        if w not in used:
            used.add(w)
            return w


@dataclass
class Lexicon:
    shared: dict = field(default_factory=dict)  # class -> list of words
    private: list = field(default_factory=list)  # platform -> class -> list
    filler: list = field(default_factory=list)


def make_lexicon(spec: BenchmarkSpec, rng) -> Lexicon:
    used = set(w for cues in CUES.values() for w in cues)
    lex = Lexicon()
    lex.filler = [_word(rng, used) for _ in range(spec.filler_words)]
    lex.shared = {c: [_word(rng, used) for _ in range(spec.shared_words)] for c in CLASSES}
    lex.private = [
        {c: [_word(rng, used) for _ in range(spec.private_words)] for c in CLASSES}
        for _ in range(spec.n_platforms)
    ]
    return lex


def _zipf_probs(n, s, rng):
    ranks = rng.permutation(n) + 1
    p = 1.0 / ranks**s
    return p / p.sum()


def generate_platform(spec: BenchmarkSpec, lex: Lexicon, index: int, rng) -> Corpus:
    scheme = spec.schemes[index % len(spec.schemes)]
    pools = {c: lex.shared[c] + lex.private[index][c] for c in CLASSES}
    probs = {c: _zipf_probs(len(pools[c]), spec.zipf, rng) for c in CLASSES}
    filler_p = _zipf_probs(len(lex.filler), 1.0, rng)
    classes = [c for c in CLASSES if c in scheme] + [c for c in CLASSES if c not in scheme]
    class_p = np.array([3.0 if c in scheme else 1.0 for c in classes])
    class_p /= class_p.sum()
    sentences = []
    for s_idx in range(spec.sentences):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        tokens, tags = [], []
        n_ent = int(rng.integers(1, 3))
        slots = sorted(rng.choice(length, size=n_ent, replace=False))
        for pos in range(length):
            if pos in slots:
                cls = classes[rng.choice(len(classes), p=class_p)]
                if rng.random() < spec.cue_prob:
                    tokens.append(str(rng.choice(CUES[cls])))
                    tags.append("O")
                n_words = 2 if rng.random() < spec.phrase_prob else 1
                words = [pools[cls][rng.choice(len(pools[cls]), p=probs[cls])] for _ in range(n_words)]
                label = scheme.get(cls)
                for j, w in enumerate(words):
                    tokens.append(w)
                    tags.append("O" if label is None else ("B-" if j == 0 else "I-") + label)
            else:
                tokens.append(lex.filler[rng.choice(len(lex.filler), p=filler_p)])
                tags.append("O")
        sentences.append(LabeledSentence(tuple(tokens), tuple(tags), f"p{index}", "0", s_idx))
    return Corpus(f"p{index}", sentences, sorted(set(scheme.values())))


@dataclass
class Benchmark:
    train: list
    test: list
    lexicon: Lexicon


def make_benchmark(seed: int = 0, spec: Optional[BenchmarkSpec] = None) -> Benchmark:
    """Corpora for each platform, split 80/20 into train and test."""
    spec = spec or BenchmarkSpec()
    rng = np.random.default_rng(seed)
    lex = make_lexicon(spec, rng)
    train, test = [], []
    for i in range(spec.n_platforms):
        corpus = generate_platform(spec, lex, i, rng)
        tr, te = split_train_test(corpus, spec.train_ratio, seed=seed + i)
        train.append(tr)
        test.append(te)
    return Benchmark(train, test, lex)


def marker_task(n_sentences: int = 200, seed: int = 0, platform: str = "toy") -> Corpus:
    """Tiny corpus whose entities are fully determined by fixed marker words."""
    rng = np.random.default_rng(seed)
    fillers = ["the", "a", "patient", "said", "it", "was", "and", "then", "after", "day"]
    drugs = ["aspirin", "ibuprofen", "tylenol"]
    effects = ["headache", "nausea", "rash"]
    sentences = []
    for i in range(n_sentences):
        toks, tags = [], []
        for _ in range(int(rng.integers(3, 7))):
            r = rng.random()
            if r < 0.2:
                toks.append(str(rng.choice(drugs)))
                tags.append("B-Drug")
            elif r < 0.35:
                toks += ["severe", str(rng.choice(effects))]
                tags += ["B-ADE", "I-ADE"]
            else:
                toks.append(str(rng.choice(fillers)))
                tags.append("O")
        sentences.append(LabeledSentence(tuple(toks), tuple(tags), platform, "0", i))
    return Corpus(platform, sentences, ["ADE", "Drug"])
