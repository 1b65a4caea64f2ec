"""Linear-chain CRF: path scores, log partition, negative log-likelihood and Viterbi.

Transitions live in an (L+2) x (L+2) matrix. Index ``L`` is a synthetic START
state and ``L+1`` a synthetic STOP state, so ``trans[START, y1]`` scores the
first label and ``trans[yk, STOP]`` the last. The START column and STOP row
are never read.

Every scoring function accepts either plain arrays (returns a float) or
autodiff nodes (returns a node that can be back-propagated through).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad


@dataclass
class CrfParams:
    transitions: np.ndarray

    @classmethod
    def zeros(cls, n_labels: int) -> "CrfParams":
        return cls(np.zeros((n_labels + 2, n_labels + 2)))

    @property
    def n_labels(self) -> int:
        return self.transitions.shape[0] - 2

    @property
    def start(self) -> int:
        return self.n_labels

    @property
    def stop(self) -> int:
        return self.n_labels + 1


def _check_emissions(emissions):
    shape = emissions.shape
    if len(shape) != 2 or shape[0] < 1:
        raise ValueError(f"emissions must be k x L with k >= 1, got shape {shape}")


def _check_labels(labels, k, n_labels):
    if len(labels) != k:
        raise ValueError(f"expected {k} labels, got {len(labels)}")
    for i, y in enumerate(labels):
        if not 0 <= y < n_labels:
            raise IndexError(f"label {y} at position {i} out of range for {n_labels} labels")


def _lift(emissions, transitions):
    """Return (graph-or-None, emission node, transition node)."""
    if isinstance(emissions, ad.Node):
        graph = emissions.graph
        trans = transitions
        if not isinstance(trans, ad.Node):
            trans = graph.constant(trans)
        return False, emissions, trans
    graph = ad.Graph()
    return True, graph.constant(emissions), graph.constant(np.asarray(transitions))


def _transitions_of(crf):
    return crf.transitions if isinstance(crf, CrfParams) else crf


def log_partition(emissions, crf):
    """log Z: log-sum-exp of the scores of all label paths (forward recursion)."""
    _check_emissions(emissions.value if isinstance(emissions, ad.Node) else np.asarray(emissions))
    plain, em, tr = _lift(emissions, _transitions_of(crf))
    out = ad.crf_log_partition(em, tr)
    return float(out.value) if plain else out


def sequence_score(emissions, crf, labels: Sequence[int]):
    """Emission plus transition score of one label path, START and STOP included."""
    plain, em, tr = _lift(emissions, _transitions_of(crf))
    k, n = em.value.shape
    labels = [int(y) for y in labels]
    _check_labels(labels, k, n)
    emit = ad.total(ad.pick(em, np.arange(k), labels))
    trans = ad.total(ad.pick(tr, [n] + labels, labels + [n + 1]))
    out = ad.add(emit, trans)
    return float(out.value) if plain else out


def neg_log_likelihood(emissions, crf, labels: Sequence[int]):
    """-log p(labels | sentence) = log Z - score(labels)."""
    plain, em, tr = _lift(emissions, _transitions_of(crf))
    _check_emissions(em.value)
    out = ad.sub(ad.crf_log_partition(em, tr), sequence_score(em, tr, labels))
    return float(out.value) if plain else out


def viterbi_decode(emissions, crf) -> list[int]:
    """Highest-scoring label path; ties go to the lower label index."""
    em = np.asarray(emissions.value if isinstance(emissions, ad.Node) else emissions, dtype=float)
    _check_emissions(em)
    trans = np.asarray(_transitions_of(crf), dtype=float)
    k, n = em.shape
    inner = trans[:n, :n]
    score = trans[n, :n] + em[0]
    back = np.zeros((k, n), dtype=np.intp)
    for t in range(1, k):
        cand = score[:, None] + inner
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(n)] + em[t]
    score = score + trans[:n, n + 1]
    best = int(np.argmax(score))
    path = [best]
    for t in range(k - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    return path[::-1]
