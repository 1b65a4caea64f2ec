"""Corpora: CoNLL reading and writing, BIO checks, splitting, vocabulary and masking."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evaluate import extract_spans

UNK = "<unk>"
MASK = "<mask>"

_TAG_RE = re.compile(r"^(O|[BI]-\S+)$")


class CorpusFormatError(ValueError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    platform: str = ""
    doc: str = ""
    index: int = 0

    def __post_init__(self):
        if len(self.tokens) != len(self.tags) or not self.tokens:
            raise ValueError("a sentence needs as many tags as tokens, and at least one token")

    def __len__(self):
        return len(self.tokens)


def alphabet_for(entity_types: Iterable[str]) -> list[str]:
    types = sorted(set(entity_types))
    return ["O"] + [f"{p}-{t}" for t in types for p in ("B", "I")]


@dataclass
class Corpus:
    platform: str
    sentences: list[LabeledSentence]
    entity_types: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.entity_types:
            found = {tag[2:] for s in self.sentences for tag in s.tags if tag != "O"}
            self.entity_types = sorted(found)

    @property
    def alphabet(self) -> list[str]:
        return alphabet_for(self.entity_types)

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)


def load_conll(path, platform: str | None = None) -> Corpus:
    """Parse a token-per-line file with blank lines between sentences.

    Each line holds a token and a tag separated by a tab or spaces.
    ``-DOCSTART-`` lines start a new document.
    """
    path = Path(path)
    platform = platform if platform is not None else path.stem
    sentences = []
    tokens, tags = [], []
    doc_no, sent_no = 0, 0
    doc = "0"

    def flush():
        nonlocal tokens, tags, sent_no
        if tokens:
            sentences.append(LabeledSentence(tuple(tokens), tuple(tags), platform, doc, sent_no))
            sent_no += 1
        tokens, tags = [], []

    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                flush()
                continue
            if fields[0] == "-DOCSTART-":
                flush()
                doc_no += 1
                doc = fields[1] if len(fields) > 1 else str(doc_no)
                continue
            if len(fields) != 2:
                raise CorpusFormatError(path, line_no, f"expected 'token tag', got {len(fields)} fields")
            if not _TAG_RE.match(fields[1]):
                raise CorpusFormatError(path, line_no, f"unrecognised tag {fields[1]!r}")
            tokens.append(fields[0])
            tags.append(fields[1])
    flush()
    return Corpus(platform, sentences)


def write_conll(corpus: Corpus, path) -> None:
    """Write the canonical form: ``token<TAB>tag`` lines, one blank line after each sentence."""
    lines = []
    doc = None
    for s in corpus.sentences:
        if s.doc != doc and (doc is not None or s.doc != "0"):
            lines.append(f"-DOCSTART- {s.doc}\n\n")
        doc = s.doc
        lines.extend(f"{tok}\t{tag}\n" for tok, tag in zip(s.tokens, s.tags))
        lines.append("\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def validate_bio(tags: Sequence[str]) -> list[tuple[int, str]]:
    """Return ``(index, reason)`` for each I-tag that does not continue a same-type entity."""
    violations = []
    prev = "O"
    for i, tag in enumerate(tags):
        if tag.startswith("I-"):
            kind = tag[2:]
            if prev == "O":
                violations.append((i, f"{tag} opens an entity"))
            elif prev[2:] != kind:
                violations.append((i, f"{tag} follows {prev}"))
        prev = tag
    return violations


def _canonical_key(s: LabeledSentence):
    return (s.doc, s.index, s.tokens, s.tags)


def split_train_test(corpus: Corpus, ratio: float = 0.8, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Seeded shuffle, then the first floor(ratio * n) sentences train."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    ordered = sorted(corpus.sentences, key=_canonical_key)
    order = np.random.default_rng(seed).permutation(len(ordered))
    n_train = math.floor(ratio * len(ordered))
    train = [ordered[i] for i in order[:n_train]]
    test = [ordered[i] for i in order[n_train:]]
    types = list(corpus.entity_types)
    return Corpus(corpus.platform, train, types), Corpus(corpus.platform, test, types)


def subsample(corpus: Corpus, fraction: float, seed: int = 0) -> Corpus:
    """Keep a seeded floor(fraction * n) subset (at least one sentence)."""
    n = max(1, math.floor(fraction * len(corpus)))
    order = np.random.default_rng(seed).permutation(len(corpus))[:n]
    return Corpus(corpus.platform, [corpus.sentences[i] for i in sorted(order)], list(corpus.entity_types))


def entity_surfaces(corpus: Corpus) -> set[str]:
    out = set()
    for s in corpus.sentences:
        for span in extract_spans(s.tags):
            out.add(" ".join(s.tokens[span.start : span.end]).lower())
    return out


def overlapping_entities(corpora: Sequence[Corpus]) -> set[str]:
    """Case-folded gold-span surfaces annotated in at least two corpora."""
    counts: dict[str, int] = {}
    for corpus in corpora:
        for surface in entity_surfaces(corpus):
            counts[surface] = counts.get(surface, 0) + 1
    return {s for s, c in counts.items() if c >= 2}


def mask_overlapped_entities(train_corpora: Sequence[Corpus], ratio: float, seed: int = 0) -> list[Corpus]:
    """Hide a seeded fraction of the cross-corpus entity surfaces.

    Every gold span whose surface is chosen gets tag O and MASK tokens.
    Sentence counts and lengths are preserved.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    pool = sorted(overlapping_entities(train_corpora))
    n_masked = math.floor(ratio * len(pool))
    if n_masked == 0:
        return [Corpus(c.platform, list(c.sentences), list(c.entity_types)) for c in train_corpora]
    rng = np.random.default_rng(seed)
    chosen = {pool[i] for i in rng.choice(len(pool), size=n_masked, replace=False)}
    out = []
    for corpus in train_corpora:
        sentences = []
        for s in corpus.sentences:
            tokens, tags = list(s.tokens), list(s.tags)
            for span in extract_spans(s.tags):
                if " ".join(s.tokens[span.start : span.end]).lower() in chosen:
                    for i in range(span.start, span.end):
                        tokens[i] = MASK
                        tags[i] = "O"
            sentences.append(replace(s, tokens=tuple(tokens), tags=tuple(tags)))
        out.append(Corpus(corpus.platform, sentences, list(corpus.entity_types)))
    return out


@dataclass
class Vocab:
    """Word and character indices. Words are case-folded; characters keep case."""

    words: dict[str, int]
    chars: dict[str, int]

    WORD_UNK = 0
    WORD_MASK = 1
    CHAR_UNK = 0
    CHAR_MASK = 1

    def word_ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.words.get(t.lower(), self.WORD_UNK) if t != MASK else self.WORD_MASK for t in tokens]

    def char_ids(self, token: str) -> list[int]:
        if token == MASK:
            return [self.CHAR_MASK]
        if not token:
            return [self.CHAR_UNK]
        return [self.chars.get(c, self.CHAR_UNK) for c in token]

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_chars(self) -> int:
        return len(self.chars)


def build_vocab(train_corpora: Sequence[Corpus]) -> Vocab:
    words = {UNK: 0, MASK: 1}
    chars = {UNK: 0, MASK: 1}
    for corpus in train_corpora:
        for s in corpus.sentences:
            for tok in s.tokens:
                if tok == MASK:
                    continue
                words.setdefault(tok.lower(), len(words))
                for c in tok:
                    chars.setdefault(c, len(chars))
    return Vocab(words, chars)


def load_manifest(path) -> list[dict]:
    """Read a JSON manifest: ``{"platforms": [{"id", "path", "test_path"?, "entity_types"?}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    entries = []
    for item in spec["platforms"]:
        entry = dict(item)
        for key in ("path", "test_path"):
            if key in entry:
                p = Path(entry[key])
                entry[key] = str(p if p.is_absolute() else path.parent / p)
        entries.append(entry)
    return entries


def load_platform(entry: dict) -> Corpus:
    corpus = load_conll(entry["path"], platform=entry["id"])
    if entry.get("entity_types"):
        corpus.entity_types = sorted(entry["entity_types"])
    return corpus
