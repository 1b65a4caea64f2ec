import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedner import autodiff as ad
from fedner import crf
from fedner.data import LabeledSentence, build_vocab, Corpus
from fedner.model import (
    GROUPS,
    STRATEGIES,
    ContextualEmbeddings,
    ModelConfig,
    NerModel,
    count_params,
    flatten,
    get_strategy,
    init_params,
    load_pretrained,
    partition,
    partition_names,
    unflatten,
)

TOY = ModelConfig(word_dim=4, char_dim=3, char_filters=2, word_filters=2, kernel=3, hidden=3, dropout=0.0)
LABELS = ["O", "B-X", "I-X"]


def sentence(tokens, tags=None, index=0):
    tokens = tuple(tokens.split())
    tags = tuple(tags.split()) if tags else ("O",) * len(tokens)
    return LabeledSentence(tokens, tags, "p", "0", index)


TRAIN = Corpus("p", [sentence("Aspirin gave me a Rash", "B-X O O O B-X"), sentence("ok then", "O O", 1)])
VOCAB = build_vocab([TRAIN])


def toy_model(seed=0, config=TOY, labels=LABELS, **kw):
    return NerModel.create(config, VOCAB, labels, np.random.default_rng(seed), **kw)


# -- character encoder -------------------------------------------------------------------


def test_char_encoder_zero_filters_give_zero_vector():
    m = toy_model()
    g = ad.Graph()
    out = m.char_encode("a", g.leaf("t", m.params["char_emb.table"]),
                        g.constant(np.zeros((3, 3, 2))), g.constant(np.zeros(2)))
    assert np.array_equal(out.value, np.zeros(2))


def test_char_encoder_width_one_is_order_insensitive():
    m = toy_model()
    rng = np.random.default_rng(1)
    g = ad.Graph()
    table = g.leaf("t", m.params["char_emb.table"])
    w, b = g.constant(rng.normal(size=(1, 3, 2))), g.constant(rng.normal(size=2))
    assert np.array_equal(m.char_encode("ag", table, w, b).value, m.char_encode("ga", table, w, b).value)


def naive_char_encode(model, token):
    ids = model.vocab.char_ids(token)
    x = model.params["char_emb.table"][:, ids].T
    w, b = model.params["char_cnn.w"], model.params["char_cnn.b"]
    k = w.shape[0]
    pad = k // 2
    xp = np.vstack([np.zeros((pad, x.shape[1])), x, np.zeros((k - 1 - pad, x.shape[1]))])
    best = np.full(w.shape[2], -np.inf)
    for t in range(len(ids)):
        for f in range(w.shape[2]):
            v = b[f]
            for j in range(k):
                for c in range(x.shape[1]):
                    v += xp[t + j, c] * w[j, c, f]
            best[f] = max(best[f], v)
    return best


@pytest.mark.parametrize("token", ["Rash", "x", "Aspirin", "zz?"])
def test_char_encoder_matches_loop(token):
    m = toy_model(3)
    g = ad.Graph()
    leaves = {n: g.leaf(n, v) for n, v in m.params.items()}
    out = m.char_encode(token, leaves["char_emb.table"], leaves["char_cnn.w"], leaves["char_cnn.b"])
    np.testing.assert_allclose(out.value, naive_char_encode(m, token), rtol=0, atol=1e-12)
    batched = m.char_encode_all([token, "ok", token], leaves["char_emb.table"], leaves["char_cnn.w"],
                                leaves["char_cnn.b"])
    np.testing.assert_allclose(batched.value[2], out.value, rtol=0, atol=1e-12)


# -- word representation ----------------------------------------------------------------


def test_oov_word_uses_unk_column():
    m = toy_model()
    trace = m.forward(sentence("unseenword"))
    np.testing.assert_array_equal(trace.word[0], m.params["word_emb.table"][:, VOCAB.WORD_UNK])


def test_input_dimension_and_length():
    m = toy_model()
    trace = m.forward(sentence("a Rash then ok"))
    assert trace.inputs.shape == (4, TOY.word_dim + TOY.char_filters)
    assert trace.states.shape == (4, 2 * TOY.hidden)
    assert trace.emissions.shape == (4, len(LABELS))


def test_contextual_channel(tmp_path):
    f = tmp_path / "ctx.txt"
    f.write_text("0 0 0 1 2\n0 0 1 3 4\n")
    ctx = ContextualEmbeddings.load(f)
    cfg = ModelConfig(**{**TOY.__dict__, "context_dim": 2})
    m = toy_model(config=cfg, context=ctx)
    trace = m.forward(sentence("a b"))
    np.testing.assert_array_equal(trace.context, [[1, 2], [3, 4]])
    assert trace.inputs.shape == (2, TOY.word_dim + TOY.char_filters + 2)
    with pytest.raises(KeyError, match="token 2"):
        m.forward(sentence("a b c"))


def test_contextual_dimension_required():
    cfg = ModelConfig(**{**TOY.__dict__, "context_dim": 2})
    with pytest.raises(ValueError):
        toy_model(config=cfg)


def test_pretrained_vectors(tmp_path):
    f = tmp_path / "vec.txt"
    f.write_text("ASPIRIN 1 2 3 4\nmissing 0 0 0 0\n")
    found = load_pretrained(f, VOCAB, 4)
    m = toy_model(pretrained=found)
    np.testing.assert_array_equal(m.params["word_emb.table"][:, VOCAB.words["aspirin"]], [1, 2, 3, 4])
    other = m.params["word_emb.table"][:, VOCAB.words["rash"]]
    assert np.all(np.abs(other) <= 0.1)


# -- sentence encoder ---------------------------------------------------------------------


def naive_lstm(x, wx, wh, b):
    h = np.zeros(wh.shape[0])
    c = np.zeros(wh.shape[0])
    out = []
    H = wh.shape[0]
    for t in range(x.shape[0]):
        z = x[t] @ wx + h @ wh + b
        i, f = 1 / (1 + np.exp(-z[:H])), 1 / (1 + np.exp(-z[H : 2 * H]))
        gcell, o = np.tanh(z[2 * H : 3 * H]), 1 / (1 + np.exp(-z[3 * H :]))
        c = f * c + i * gcell
        h = o * np.tanh(c)
        out.append(h)
    return np.array(out)


def test_zero_lstm_gives_identical_states():
    m = toy_model()
    for n in ("lstm_fwd.wx", "lstm_fwd.wh", "lstm_fwd.b", "lstm_bwd.wx", "lstm_bwd.wh", "lstm_bwd.b"):
        m.params[n] = np.zeros_like(m.params[n])
    states = m.forward(sentence("a Rash then ok")).states
    assert np.all(states == states[0])


def test_states_match_loop_lstm_and_mirror_under_reversal():
    cfg = ModelConfig(**{**TOY.__dict__, "kernel": 1})
    m = toy_model(5, config=cfg)
    m.params["lstm_bwd.wx"] = m.params["lstm_fwd.wx"].copy()
    m.params["lstm_bwd.wh"] = m.params["lstm_fwd.wh"].copy()
    m.params["lstm_bwd.b"] = m.params["lstm_fwd.b"].copy()
    s = sentence("Aspirin gave me Rash")
    trace = m.forward(s)
    H = cfg.hidden
    p = m.params
    np.testing.assert_allclose(trace.states[:, :H], naive_lstm(trace.local, p["lstm_fwd.wx"], p["lstm_fwd.wh"], p["lstm_fwd.b"]),
                               atol=1e-12)
    np.testing.assert_allclose(trace.states[::-1, H:],
                               naive_lstm(trace.local[::-1], p["lstm_bwd.wx"], p["lstm_bwd.wh"], p["lstm_bwd.b"]),
                               atol=1e-12)
    rev = m.forward(sentence("Rash me gave Aspirin")).states
    np.testing.assert_allclose(rev[::-1, :H], trace.states[:, H:], atol=1e-12)
    np.testing.assert_allclose(rev[::-1, H:], trace.states[:, :H], atol=1e-12)


def test_single_token_states():
    m = toy_model(2)
    trace = m.forward(sentence("Rash"))
    p = m.params
    np.testing.assert_allclose(trace.states[0, :3], naive_lstm(trace.local, p["lstm_fwd.wx"], p["lstm_fwd.wh"], p["lstm_fwd.b"])[0],
                               atol=1e-12)
    np.testing.assert_allclose(trace.states[0, 3:], naive_lstm(trace.local, p["lstm_bwd.wx"], p["lstm_bwd.wh"], p["lstm_bwd.b"])[0],
                               atol=1e-12)


# -- emissions, loss, gradients -------------------------------------------------------------


def test_emissions_deterministic():
    m = toy_model()
    s = sentence("Aspirin gave me a Rash")
    a, b = m.emissions(s), m.emissions(s)
    assert a.tobytes() == b.tobytes() and a.shape == (5, 3)


@pytest.mark.parametrize("dropout", [0.0, 0.2])
def test_end_to_end_gradient_matches_finite_differences(dropout):
    cfg = ModelConfig(**{**TOY.__dict__, "dropout": dropout})
    m = toy_model(7, config=cfg)
    m.params["crf.trans"] = np.random.default_rng(8).normal(size=m.params["crf.trans"].shape)
    s = sentence("Aspirin gave Rash ok", "B-X O B-X I-X")
    loss, graph = m.sentence_loss(s, train=True, rng=np.random.default_rng(9))
    for name in m.params:
        assert ad.finite_difference_check(graph, loss, name, h=1e-6) <= 1e-4, name


def test_mean_batch_gradient():
    m = toy_model(4)
    batch = list(TRAIN.sentences)
    loss, grads = m.loss_and_grads(batch, train=False)
    singles = [m.loss_and_grads([s], train=False) for s in batch]
    assert loss == pytest.approx(np.mean([l for l, _ in singles]), abs=1e-12)
    for n in grads:
        np.testing.assert_allclose(grads[n], np.mean([g[n] for _, g in singles], axis=0), atol=1e-12)
    assert m.batch_loss(batch) == pytest.approx(loss * len(batch), abs=1e-9)
    assert m.batch_loss(batch[::-1]) == pytest.approx(m.batch_loss(batch), abs=1e-9)


def test_unknown_tag_rejected():
    m = toy_model()
    with pytest.raises(KeyError, match="B-Y"):
        m.sentence_loss(sentence("a", "B-Y"))


# -- prediction ---------------------------------------------------------------------------


def test_single_label_alphabet_predicts_o():
    m = toy_model(labels=["O"])
    assert m.predict(sentence("Aspirin gave me a Rash")) == ["O"] * 5


def test_forced_emissions_give_gold():
    m = toy_model()
    s = TRAIN.sentences[0]
    gold = m.label_ids(s.tags)
    em = m.emissions(s)
    em[np.arange(len(s)), gold] += 1000.0
    assert crf.viterbi_decode(em, m.params["crf.trans"]) == gold
    m.params["proj.b"] = m.params["proj.b"].copy()
    m.params["proj.w"] = np.zeros_like(m.params["proj.w"])
    m.params["proj.b"][1] = 1000.0  # every position prefers B-X
    assert m.predict(s) == ["B-X"] * len(s)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), words=st.lists(st.sampled_from(["a", "Rash", "ok", "zz", "Aspirin"]), min_size=1, max_size=6))
def test_prediction_is_total_and_optimal(seed, words):
    m = toy_model(seed)
    m.params["crf.trans"] = np.random.default_rng(seed).normal(size=(5, 5))
    s = sentence(" ".join(words))
    tags = m.predict(s)
    assert len(tags) == len(words) and set(tags) <= set(LABELS)
    em = m.emissions(s)
    best = crf.sequence_score(em, m.params["crf.trans"], m.label_ids(tags))
    rng = np.random.default_rng(seed + 1)
    for _ in range(50):
        other = list(rng.integers(0, 3, len(words)))
        assert best >= crf.sequence_score(em, m.params["crf.trans"], other) - 1e-12


# -- decomposition --------------------------------------------------------------------------


def test_unknown_strategy_lists_available():
    with pytest.raises(KeyError) as err:
        get_strategy("nope")
    for name in STRATEGIES:
        assert name in str(err.value)


def test_all_shared_has_no_private_part():
    params = toy_model().params
    shared, private = partition(params, "all-shared")
    assert private.size == 0 and shared.size == count_params(params)


def test_default_shared_count_closed_form():
    c = TOY
    n_w, n_c = VOCAB.n_words, VOCAB.n_chars
    expect = (c.word_dim * n_w + c.char_dim * n_c
              + c.kernel * c.char_dim * c.char_filters + c.char_filters
              + c.kernel * (c.word_dim + c.char_filters) * c.word_filters + c.word_filters)
    shared, _ = partition(toy_model().params, "fedner-default")
    assert shared.size == expect


@pytest.mark.parametrize("name", sorted(STRATEGIES))
def test_partition_is_a_bijection(name):
    params = toy_model().params
    shared_names, private_names = partition_names(params, name)
    assert sorted(shared_names + private_names) == sorted(params)
    shared, private = partition(params, name)
    assert shared.size + private.size == count_params(params)
    shapes = {n: v.shape for n, v in params.items()}
    back = {**unflatten(shared, shared_names, shapes), **unflatten(private, private_names, shapes)}
    for n in params:
        assert back[n].tobytes() == params[n].tobytes()


def test_label_groups_decide_alphabet_sharing():
    assert STRATEGIES["all-shared"].shares_labels()
    assert not STRATEGIES["fedner-default"].shares_labels()
    assert not STRATEGIES["share-through-lstm"].shares_labels()


def test_unflatten_rejects_wrong_size():
    params = toy_model().params
    names = list(params)
    with pytest.raises(ValueError):
        unflatten(np.zeros(3), names, {n: v.shape for n, v in params.items()})


def test_init_is_seeded_and_bounded():
    a = init_params(TOY, 10, 5, 3, np.random.default_rng(0))
    b = init_params(TOY, 10, 5, 3, np.random.default_rng(0))
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)
    assert np.all(np.abs(a["char_emb.table"]) <= 0.1)
    assert not a["crf.trans"].any()
    assert {n.split(".")[0] for n in a} == set(GROUPS)
    assert flatten(a, []).size == 0
