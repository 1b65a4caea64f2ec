"""The CNN / BiLSTM / CRF tagger and its shared/private parameter split.

Parameter names are ``<group>.<tensor>``; decomposition strategies assign
whole groups to the shared or private side:

========== ================================== =================
group      tensors                            fedner-default
========== ================================== =================
word_emb   ``word_emb.table`` (D_w x N_w)      shared
char_emb   ``char_emb.table`` (D_c x N_c)      shared
char_cnn   ``w`` (K x D_c x F_c), ``b``        shared
word_cnn   ``w`` (K x D_in x F_w), ``b``       shared
lstm_fwd   ``wx``, ``wh``, ``b``               private
lstm_bwd   ``wx``, ``wh``, ``b``               private
proj       ``w`` (2H x L), ``b``               private
crf        ``trans`` ((L+2) x (L+2))           private
========== ================================== =================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import crf
from .data import LabeledSentence, Vocab

GROUPS = ("word_emb", "char_emb", "char_cnn", "word_cnn", "lstm_fwd", "lstm_bwd", "proj", "crf")
LABEL_GROUPS = ("proj", "crf")

SHARED = "shared"
PRIVATE = "private"


@dataclass(frozen=True)
class ModelConfig:
    word_dim: int = 50
    char_dim: int = 16
    context_dim: int = 0
    char_filters: int = 32
    word_filters: int = 32
    kernel: int = 3
    hidden: int = 32
    dropout: float = 0.2

    @property
    def input_dim(self) -> int:
        return self.word_dim + self.char_filters + self.context_dim


PAPER_DIMS = ModelConfig(
    word_dim=300, char_dim=100, char_filters=200, word_filters=200, kernel=3, hidden=200
)


# -- decomposition strategies --------------------------------------------------------


@dataclass(frozen=True)
class DecompositionStrategy:
    name: str
    assign: Callable[[str], str]

    def side(self, param_name: str) -> str:
        return self.assign(param_name.split(".")[0])

    def shares_labels(self) -> bool:
        return any(self.assign(g) == SHARED for g in LABEL_GROUPS)


def _by_groups(shared_groups):
    shared_groups = frozenset(shared_groups)
    return lambda group: SHARED if group in shared_groups else PRIVATE


STRATEGIES = {
    "fedner-default": DecompositionStrategy(
        "fedner-default", _by_groups({"word_emb", "char_emb", "char_cnn", "word_cnn"})
    ),
    "all-shared": DecompositionStrategy("all-shared", _by_groups(GROUPS)),
    "all-private": DecompositionStrategy("all-private", _by_groups(())),
    "embeddings-only": DecompositionStrategy(
        "embeddings-only", _by_groups({"word_emb", "char_emb", "char_cnn"})
    ),
    "share-through-lstm": DecompositionStrategy(
        "share-through-lstm",
        _by_groups({"word_emb", "char_emb", "char_cnn", "word_cnn", "lstm_fwd", "lstm_bwd"}),
    ),
}


def get_strategy(name: str) -> DecompositionStrategy:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise KeyError(
            f"unknown decomposition strategy {name!r}; available: {', '.join(sorted(STRATEGIES))}"
        ) from None


# -- parameters -----------------------------------------------------------------------


def param_shapes(config: ModelConfig, n_words: int, n_chars: int, n_labels: int) -> dict:
    k, h = config.kernel, config.hidden
    return {
        "word_emb.table": (config.word_dim, n_words),
        "char_emb.table": (config.char_dim, n_chars),
        "char_cnn.w": (k, config.char_dim, config.char_filters),
        "char_cnn.b": (config.char_filters,),
        "word_cnn.w": (k, config.input_dim, config.word_filters),
        "word_cnn.b": (config.word_filters,),
        "lstm_fwd.wx": (config.word_filters, 4 * h),
        "lstm_fwd.wh": (h, 4 * h),
        "lstm_fwd.b": (4 * h,),
        "lstm_bwd.wx": (config.word_filters, 4 * h),
        "lstm_bwd.wh": (h, 4 * h),
        "lstm_bwd.b": (4 * h,),
        "proj.w": (2 * h, n_labels),
        "proj.b": (n_labels,),
        "crf.trans": (n_labels + 2, n_labels + 2),
    }


def init_params(config, n_words, n_chars, n_labels, rng, pretrained=None) -> dict:
    """Draw a full parameter set.

    Embeddings are uniform in [-0.1, 0.1], convolution and projection
    weights Glorot-uniform, LSTM weights uniform in +-1/sqrt(H), biases and
    CRF transitions zero. `pretrained` maps a word-table column to a vector
    that overrides its random initialisation.
    """
    params = {}
    for name, shape in param_shapes(config, n_words, n_chars, n_labels).items():
        group, leaf = name.split(".")
        if leaf == "table":
            value = rng.uniform(-0.1, 0.1, shape)
        elif group == "crf" or leaf == "b":
            value = np.zeros(shape)
        elif group.startswith("lstm"):
            bound = 1.0 / np.sqrt(config.hidden)
            value = rng.uniform(-bound, bound, shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / (fan_in + shape[-1]))
            value = rng.uniform(-bound, bound, shape)
        params[name] = value
    if pretrained:
        table = params["word_emb.table"]
        for col, vec in pretrained.items():
            table[:, col] = vec
    return params


def count_params(params: Mapping[str, np.ndarray], names=None) -> int:
    names = params.keys() if names is None else names
    return int(sum(params[n].size for n in names))


def partition_names(params: Mapping[str, np.ndarray], strategy) -> tuple[list[str], list[str]]:
    if isinstance(strategy, str):
        strategy = get_strategy(strategy)
    shared = [n for n in params if strategy.side(n) == SHARED]
    private = [n for n in params if strategy.side(n) == PRIVATE]
    return shared, private


def flatten(params: Mapping[str, np.ndarray], names: Sequence[str]) -> np.ndarray:
    if not names:
        return np.zeros(0)
    return np.concatenate([params[n].ravel() for n in names])


def unflatten(flat: np.ndarray, names: Sequence[str], shapes: Mapping[str, tuple]) -> dict:
    out = {}
    offset = 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = flat[offset : offset + size].reshape(shapes[n]).copy()
        offset += size
    if offset != flat.size:
        raise ValueError(f"flat vector has {flat.size} values, layout needs {offset}")
    return out


def partition(params: Mapping[str, np.ndarray], strategy) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (shared, private) views of `params` under `strategy`."""
    shared, private = partition_names(params, strategy)
    return flatten(params, shared), flatten(params, private)


def load_pretrained(path, vocab: Vocab, dim: int) -> dict:
    """Read a text vector file (token then `dim` floats per line) for words in `vocab`."""
    found = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{line_no}: expected {dim} values, got {len(parts) - 1}")
            col = vocab.words.get(parts[0].lower())
            if col is not None and col not in found:
                found[col] = np.asarray(parts[1:], dtype=float)
    return found


# -- contextual embeddings ------------------------------------------------------------


class ContextualEmbeddings:
    """Precomputed per-token vectors keyed by (doc, sentence index, position)."""

    def __init__(self, vectors: Mapping[tuple, np.ndarray], dim: int):
        self.vectors = dict(vectors)
        self.dim = dim

    @classmethod
    def load(cls, path) -> "ContextualEmbeddings":
        """Lines of ``doc sentence position v1 ... vD``."""
        vectors = {}
        dim = None
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            vec = np.asarray(parts[3:], dtype=float)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"{path}:{line_no}: expected {dim} values, got {vec.size}")
            vectors[(parts[0], int(parts[1]), int(parts[2]))] = vec
        return cls(vectors, dim or 0)

    def lookup(self, sentence: LabeledSentence) -> np.ndarray:
        out = np.zeros((len(sentence), self.dim))
        for pos in range(len(sentence)):
            key = (sentence.doc, sentence.index, pos)
            if key not in self.vectors:
                raise KeyError(f"no contextual vector for token {pos} of sentence {key[:2]}")
            out[pos] = self.vectors[key]
        return out


# -- forward pass -------------------------------------------------------------------


@dataclass
class ForwardTrace:
    word: np.ndarray  # k x D_w
    char: np.ndarray  # k x F_c
    context: np.ndarray  # k x D_l
    inputs: np.ndarray  # k x (D_w + F_c + D_l)
    local: np.ndarray  # k x F_w, word-CNN output
    states: np.ndarray  # k x 2H
    emissions: np.ndarray  # k x L
    graph: ad.Graph = field(repr=False)
    emission_node: ad.Node = field(repr=False)
    leaves: dict = field(repr=False)


def _dropout(x: ad.Node, rate: float, rng) -> ad.Node:
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, x.graph.constant(keep))


class NerModel:
    """A tagger bound to a vocabulary, label alphabet and parameter dict."""

    def __init__(self, config: ModelConfig, vocab: Vocab, labels: Sequence[str], params: dict,
                 context: Optional[ContextualEmbeddings] = None):
        self.config = config
        self.vocab = vocab
        self.labels = list(labels)
        self.label_index = {t: i for i, t in enumerate(self.labels)}
        self.params = params
        self.context = context
        if config.context_dim and (context is None or context.dim != config.context_dim):
            raise ValueError("context_dim > 0 needs a ContextualEmbeddings of that dimension")

    @classmethod
    def create(cls, config, vocab, labels, rng, context=None, pretrained=None) -> "NerModel":
        params = init_params(config, vocab.n_words, vocab.n_chars, len(labels), rng, pretrained)
        return cls(config, vocab, labels, params, context)

    @property
    def shapes(self) -> dict:
        return {n: v.shape for n, v in self.params.items()}

    # graph pieces

    def char_encode(self, token: str, char_table: ad.Node, w: ad.Node, b: ad.Node) -> ad.Node:
        """Character CNN then max over time for one token (F_c values)."""
        chars = ad.embed(char_table, self.vocab.char_ids(token))
        return ad.maxpool_time(ad.conv1d(chars, w, b))

    def char_encode_all(self, tokens, char_table, w, b) -> ad.Node:
        """:meth:`char_encode` for every token at once (k x F_c)."""
        ids = [self.vocab.char_ids(tok) for tok in tokens]
        lengths = [len(i) for i in ids]
        chars = ad.embed(char_table, [c for i in ids for c in i])
        return ad.maxpool_time(ad.conv1d(chars, w, b, lengths=lengths), lengths=lengths)

    def word_representation(self, sentence, leaves) -> tuple[ad.Node, ad.Node, ad.Node]:
        g = leaves["word_emb.table"].graph
        words = ad.embed(leaves["word_emb.table"], self.vocab.word_ids(sentence.tokens))
        chars = self.char_encode_all(
            sentence.tokens, leaves["char_emb.table"], leaves["char_cnn.w"], leaves["char_cnn.b"]
        )
        if self.config.context_dim:
            ctx = g.constant(self.context.lookup(sentence))
        else:
            ctx = g.constant(np.zeros((len(sentence), 0)))
        return words, chars, ctx

    def context_encode(self, inputs: ad.Node, leaves) -> tuple[ad.Node, ad.Node]:
        local = ad.tanh(ad.conv1d(inputs, leaves["word_cnn.w"], leaves["word_cnn.b"]))
        fwd = ad.lstm(local, leaves["lstm_fwd.wx"], leaves["lstm_fwd.wh"], leaves["lstm_fwd.b"])
        bwd = ad.lstm(local, leaves["lstm_bwd.wx"], leaves["lstm_bwd.wh"], leaves["lstm_bwd.b"],
                      reverse=True)
        states = ad.concat([fwd, bwd], axis=1)
        return local, states

    def forward(self, sentence: LabeledSentence, train: bool = False, rng=None) -> ForwardTrace:
        graph = ad.Graph()
        leaves = {name: graph.leaf(name, value) for name, value in self.params.items()}
        words, chars, ctx = self.word_representation(sentence, leaves)
        inputs = ad.concat([words, chars, ctx], axis=1)
        use_dropout = train and self.config.dropout > 0
        x = _dropout(inputs, self.config.dropout, rng) if use_dropout else inputs
        local, states = self.context_encode(x, leaves)
        r = _dropout(states, self.config.dropout, rng) if use_dropout else states
        emissions = ad.add_bias(ad.matmul(r, leaves["proj.w"]), leaves["proj.b"])
        return ForwardTrace(
            words.value, chars.value, ctx.value, inputs.value, local.value, states.value,
            emissions.value, graph, emissions, leaves,
        )

    def label_ids(self, tags: Sequence[str]) -> list[int]:
        try:
            return [self.label_index[t] for t in tags]
        except KeyError as exc:
            raise KeyError(f"tag {exc.args[0]!r} is not in the label alphabet {self.labels}") from None

    def sentence_loss(self, sentence, train=False, rng=None):
        """(loss node, graph) for one sentence's negative log-likelihood."""
        trace = self.forward(sentence, train=train, rng=rng)
        loss = crf.neg_log_likelihood(
            trace.emission_node, trace.leaves["crf.trans"], self.label_ids(sentence.tags)
        )
        return loss, trace.graph

    def loss_and_grads(self, batch: Sequence[LabeledSentence], train=True, rng=None):
        """Mean negative log-likelihood over `batch` and its gradient per parameter."""
        if not batch:
            raise ValueError("empty batch")
        total_loss = 0.0
        grads = None
        for sentence in batch:
            loss, graph = self.sentence_loss(sentence, train=train, rng=rng)
            g = graph.backward(loss)
            total_loss += float(loss.value)
            if grads is None:
                grads = {n: v.copy() for n, v in g.items()}
            else:
                for n, v in g.items():
                    grads[n] += v
        n = len(batch)
        return total_loss / n, {k: v / n for k, v in grads.items()}

    def batch_loss(self, batch: Sequence[LabeledSentence]) -> float:
        """Summed evaluation-mode loss."""
        return float(sum(float(self.sentence_loss(s)[0].value) for s in batch))

    def emissions(self, sentence) -> np.ndarray:
        return self.forward(sentence).emissions

    def predict(self, sentence: LabeledSentence) -> list[str]:
        path = crf.viterbi_decode(self.emissions(sentence), self.params["crf.trans"])
        return [self.labels[i] for i in path]
