import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedner import autodiff as ad


def test_scalar_square_forward_and_backward():
    g = ad.Graph()
    x = g.leaf("x", 3.0)
    y = ad.mul(x, x)
    assert float(y.value) == 9.0
    assert float(g.backward(y)["x"]) == 6.0


def test_uniform_logsumexp():
    g = ad.Graph()
    y = ad.logsumexp(g.leaf("x", [0.0, 0.0, 0.0]))
    assert float(y.value) == pytest.approx(math.log(3), abs=1e-12)


def test_maxpool_columnwise():
    g = ad.Graph()
    y = ad.maxpool_time(g.leaf("x", [[1, 5], [2, 4], [3, 3]]))
    np.testing.assert_array_equal(y.value, [3, 5])


def test_matmul_adjoint():
    g = ad.Graph()
    a = g.leaf("A", np.eye(2))
    b = g.leaf("B", np.ones((2, 2)))
    grads = g.backward(ad.total(ad.matmul(a, b)))
    # d sum(AB) / dA = ones(2, 2) @ B^T
    np.testing.assert_array_equal(grads["A"], np.ones((2, 2)) @ np.ones((2, 2)).T)
    np.testing.assert_array_equal(grads["B"], np.eye(2).T @ np.ones((2, 2)))


def test_forward_rebinds_leaves():
    g = ad.Graph()
    x = g.leaf("x", 3.0)
    y = ad.mul(x, x)
    values = g.forward({"x": 4.0})
    assert float(values[y]) == 16.0


def test_forward_reports_unbound_leaf():
    g = ad.Graph()
    ad.add(g.leaf("x", 1.0), g.leaf("y", 2.0))
    with pytest.raises(KeyError, match="y"):
        g.forward({"x": 1.0})


def test_shape_mismatch_names_node():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError) as err:
        ad.add(g.leaf("a", np.zeros(3)), g.leaf("b", np.zeros(4)))
    assert err.value.expected == (3,)
    assert err.value.actual == (4,)
    assert "add" in str(err.value)


def test_matmul_shape_mismatch():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError):
        ad.matmul(g.leaf("a", np.zeros((2, 3))), g.leaf("b", np.zeros((2, 3))))


def test_nonfinite_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.tensor([1.0, float("nan")])
    g = ad.Graph()
    with pytest.raises(ad.NonFiniteError):
        g.leaf("x", [float("inf")])


def test_backward_needs_scalar():
    g = ad.Graph()
    x = g.leaf("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        g.backward(ad.tanh(x))


def test_tanh_gradient_matches_closed_form():
    g = ad.Graph()
    x = g.leaf("x", 0.5)
    y = ad.tanh(x)
    assert float(g.backward(y)["x"]) == pytest.approx(1 - math.tanh(0.5) ** 2, abs=1e-15)
    assert ad.finite_difference_check(g, y, "x", 1e-5) <= 1e-6


def test_conv1d_finite_difference():
    rng = np.random.default_rng(1)
    g = ad.Graph()
    x = g.leaf("x", rng.uniform(-1, 1, (8, 3)))
    w = g.leaf("w", rng.uniform(-1, 1, (3, 3, 4)))
    b = g.leaf("b", rng.uniform(-1, 1, 4))
    y = ad.total(ad.tanh(ad.conv1d(x, w, b)))
    for name in ("x", "w", "b"):
        assert ad.finite_difference_check(g, y, name, 1e-5) <= 1e-4


def test_constant_graph_has_zero_error():
    g = ad.Graph()
    x = g.leaf("x", np.ones(3))
    y = ad.total(g.constant(np.ones(2)))
    assert float(g.backward(y)["x"].sum()) == 0.0
    assert ad.finite_difference_check(g, y, "x", 1e-5) == 0.0


def _naive_conv(x, w, b):
    width, c, f = w.shape
    left = (width - 1) // 2
    out = np.zeros((x.shape[0], f))
    for t in range(x.shape[0]):
        for j in range(width):
            src = t + j - left
            if 0 <= src < x.shape[0]:
                for ci in range(c):
                    for fi in range(f):
                        out[t, fi] += x[src, ci] * w[j, ci, fi]
    return out + b


@pytest.mark.parametrize("width", [1, 2, 3, 4])
def test_conv1d_matches_loop_oracle(width):
    rng = np.random.default_rng(width)
    x = rng.uniform(-1, 1, (5, 2))
    w = rng.uniform(-1, 1, (width, 2, 3))
    b = rng.uniform(-1, 1, 3)
    g = ad.Graph()
    y = ad.conv1d(g.leaf("x", x), g.leaf("w", w), g.leaf("b", b))
    np.testing.assert_allclose(y.value, _naive_conv(x, w, b), rtol=0, atol=1e-12)


def test_segmented_conv_equals_separate_convs():
    rng = np.random.default_rng(7)
    lengths = [1, 4, 2]
    xs = [rng.uniform(-1, 1, (m, 2)) for m in lengths]
    w = rng.uniform(-1, 1, (3, 2, 3))
    b = rng.uniform(-1, 1, 3)
    g = ad.Graph()
    y = ad.conv1d(g.leaf("x", np.concatenate(xs)), g.leaf("w", w), g.leaf("b", b), lengths=lengths)
    np.testing.assert_allclose(y.value, np.concatenate([_naive_conv(x, w, b) for x in xs]), atol=1e-12)
    pooled = ad.maxpool_time(y, lengths=lengths)
    expect = np.stack([_naive_conv(x, w, b).max(axis=0) for x in xs])
    np.testing.assert_allclose(pooled.value, expect, atol=1e-12)
    loss = ad.total(ad.tanh(pooled))
    for name in ("x", "w", "b"):
        assert ad.finite_difference_check(g, loss, name) <= 1e-4


def test_lstm_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (4, 3))
    wx = rng.uniform(-1, 1, (3, 8))
    wh = rng.uniform(-1, 1, (2, 8))
    b = rng.uniform(-1, 1, 8)
    g = ad.Graph()
    out = ad.lstm(g.leaf("x", x), g.leaf("wx", wx), g.leaf("wh", wh), g.leaf("b", b))

    def sig(z):
        return 1 / (1 + math.exp(-z))

    h = [0.0, 0.0]
    c = [0.0, 0.0]
    for t in range(4):
        z = [sum(x[t, d] * wx[d, j] for d in range(3)) + sum(h[d] * wh[d, j] for d in range(2)) + b[j]
             for j in range(8)]
        i = [sig(z[j]) for j in range(2)]
        f = [sig(z[2 + j]) for j in range(2)]
        cand = [math.tanh(z[4 + j]) for j in range(2)]
        o = [sig(z[6 + j]) for j in range(2)]
        c = [f[j] * c[j] + i[j] * cand[j] for j in range(2)]
        h = [o[j] * math.tanh(c[j]) for j in range(2)]
        np.testing.assert_allclose(out.value[t], h, atol=1e-12)


def test_logsumexp_shift_is_exact():
    rng = np.random.default_rng(0)
    v = rng.uniform(-1, 1, 6)
    g = ad.Graph()
    a = ad.logsumexp(g.leaf("a", v))
    b = ad.logsumexp(g.leaf("b", v + 1000.0))
    assert abs((float(b.value) - float(a.value)) - 1000.0) <= 1e-9


def test_maxpool_routes_adjoint_to_argmax_only():
    g = ad.Graph()
    x = g.leaf("x", [[1.0, 7.0], [4.0, 7.0], [4.0, 0.0]])
    y = ad.maxpool_time(x)
    up = g.constant([2.0, -3.0])
    grads = g.backward(ad.total(ad.mul(y, up)))["x"]
    # ties go to the earliest step
    np.testing.assert_array_equal(grads, [[0.0, -3.0], [2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(grads.sum(axis=0), [2.0, -3.0])


def test_forward_is_pure():
    rng = np.random.default_rng(5)
    g = ad.Graph()
    x = g.leaf("x", rng.uniform(-1, 1, (5, 3)))
    w = g.leaf("w", rng.uniform(-1, 1, (3, 3, 2)))
    y = ad.logsumexp(ad.conv1d(x, w, g.leaf("b", np.zeros(2))))
    bindings = {n: leaf.value.copy() for n, leaf in g.leaves.items()}
    first = g.forward(bindings)[y].tobytes()
    second = g.forward(bindings)[y].tobytes()
    assert first == second


def test_backward_leaves_values_unchanged():
    g = ad.Graph()
    x = g.leaf("x", [0.3, -0.2])
    y = ad.total(ad.sigmoid(x))
    before = y.value.copy()
    g.backward(y)
    assert y.value.tobytes() == before.tobytes()


# -- random-graph property test ------------------------------------------------------

UNARY = ("tanh", "sigmoid", "exp", "neg", "scale", "square")
BINARY = ("add", "sub", "mul", "matmul", "concat")


def _build_random_graph(seed: int, depth: int):
    rng = np.random.default_rng(seed)
    g = ad.Graph()
    n = 3
    a = g.leaf("a", rng.uniform(-1, 1, (n, n)))
    b = g.leaf("b", rng.uniform(-1, 1, (n, n)))
    pool = [a, b]
    for _ in range(depth):
        if rng.random() < 0.5:
            op = UNARY[rng.integers(len(UNARY))]
            x = pool[rng.integers(len(pool))]
            if op == "scale":
                node = ad.scale(x, c=float(rng.uniform(-2, 2)))
            elif op == "square":
                node = ad.mul(x, x)
            else:
                node = getattr(ad, op)(x)
        else:
            op = BINARY[rng.integers(len(BINARY))]
            x, y = pool[rng.integers(len(pool))], pool[rng.integers(len(pool))]
            if op == "concat":
                node = ad.reshape(ad.concat([x, y], axis=1), shape=(n, 2 * n))
                w = g.constant(rng.uniform(-1, 1, (2 * n, n)))
                node = ad.matmul(node, w)
            else:
                node = getattr(ad, op)(x, y)
        # keep magnitudes moderate so exp stays well conditioned
        pool.append(ad.tanh(node))
    head = pool[-1]
    choice = rng.integers(3)
    if choice == 0:
        loss = ad.total(head)
    elif choice == 1:
        loss = ad.logsumexp(head)
    else:
        loss = ad.total(ad.maxpool_time(head))
    return g, loss


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(1, 5))
def test_random_graphs_match_finite_differences(seed, depth):
    g, loss = _build_random_graph(seed, depth)
    for name in ("a", "b"):
        assert ad.finite_difference_check(g, loss, name, 1e-5) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_composite_primitives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    k, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    g = ad.Graph()
    x = g.leaf("x", rng.uniform(-1, 1, (k, 2)))
    wx = g.leaf("wx", rng.uniform(-1, 1, (2, 8)))
    wh = g.leaf("wh", rng.uniform(-1, 1, (2, 8)))
    bb = g.leaf("bb", rng.uniform(-1, 1, 8))
    proj = g.leaf("proj", rng.uniform(-1, 1, (2, n)))
    bias = g.leaf("bias", rng.uniform(-1, 1, n))
    table = g.leaf("table", rng.uniform(-1, 1, (2, 5)))
    trans = g.leaf("trans", rng.uniform(-1, 1, (n + 2, n + 2)))
    idx = rng.integers(0, 5, k)
    h = ad.add(x, ad.embed(table, idx))
    h = ad.lstm(h, wx, wh, bb, reverse=bool(rng.integers(2)))
    em = ad.add_bias(ad.matmul(h, proj), bias)
    loss = ad.sub(ad.crf_log_partition(em, trans), ad.total(ad.pick(em, np.arange(k), rng.integers(0, n, k))))
    for name in g.leaves:
        assert ad.finite_difference_check(g, loss, name, 1e-5) <= 1e-4
