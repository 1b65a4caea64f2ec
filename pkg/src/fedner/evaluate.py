"""Entity spans from BIO tags, and strict / relaxed precision, recall and F1."""

from __future__ import annotations

from typing import Iterable, NamedTuple, Sequence


class Span(NamedTuple):
    start: int  # inclusive
    end: int  # exclusive
    type: str


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


def extract_spans(tags: Sequence[str]) -> list[Span]:
    """Maximal ``B-t I-t*`` runs, in order of appearance.

    An ``I-t`` that does not continue an open span of type ``t`` opens a new
    one, so malformed predictions still yield entities.
    """
    spans = []
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, label = tag.partition("-")
        continues = prefix == "I" and kind == label and start is not None
        if start is not None and not continues:
            spans.append(Span(start, i, kind))
            start, kind = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, kind = i, label
    return spans


def spans_to_tags(spans: Iterable[Span], length: int) -> list[str]:
    tags = ["O"] * length
    for s in spans:
        tags[s.start] = f"B-{s.type}"
        for i in range(s.start + 1, s.end):
            tags[i] = f"I-{s.type}"
    return tags


def _batches(gold, pred):
    gold, pred = list(gold), list(pred)
    single = (gold and isinstance(gold[0], Span)) or (pred and isinstance(pred[0], Span))
    if single or (not gold and not pred):
        return [gold], [pred]
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences but {len(pred)} predicted")
    return gold, pred


def _prf(tp_pred: int, n_pred: int, tp_gold: int, n_gold: int) -> PRF:
    p = tp_pred / n_pred if n_pred else 0.0
    r = tp_gold / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


def strict_counts(gold, pred) -> tuple[int, int, int]:
    """(true positives, #predicted, #gold) under exact (start, end, type) matching."""
    tp = n_pred = n_gold = 0
    for g, p in zip(*_batches(gold, pred)):
        remaining = list(g)
        n_gold += len(g)
        n_pred += len(p)
        for span in p:
            if span in remaining:
                remaining.remove(span)
                tp += 1
    return tp, n_pred, n_gold


def strict_prf(gold, pred) -> PRF:
    """Micro-averaged exact-match scores.

    `gold` and `pred` are either one sentence's spans or parallel lists of
    per-sentence span collections.
    """
    tp, n_pred, n_gold = strict_counts(gold, pred)
    return _prf(tp, n_pred, tp, n_gold)


def _overlaps(a: Span, b: Span, typed: bool) -> bool:
    if typed and a.type != b.type:
        return False
    return a.start < b.end and b.start < a.end


def relax_counts(gold, pred, typed: bool = True) -> tuple[int, int, int, int]:
    """(matched predictions, #predicted, recalled gold, #gold) under overlap matching."""
    tp_pred = tp_gold = n_pred = n_gold = 0
    for g, p in zip(*_batches(gold, pred)):
        n_gold += len(g)
        n_pred += len(p)
        tp_pred += sum(any(_overlaps(s, t, typed) for t in g) for s in p)
        tp_gold += sum(any(_overlaps(s, t, typed) for t in p) for s in g)
    return tp_pred, n_pred, tp_gold, n_gold


def relax_prf(gold, pred, typed: bool = True) -> PRF:
    """Overlap-based scores; set ``typed=False`` to ignore entity types."""
    return _prf(*relax_counts(gold, pred, typed))


def score_tags(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> dict:
    gold = [extract_spans(t) for t in gold_tags]
    pred = [extract_spans(t) for t in pred_tags]
    return {"strict": strict_prf(gold, pred), "relax": relax_prf(gold, pred)}
