import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import fd_gradient, forward, mmd_v, rel_err, softmax_rows, unflatten
from sdat.numerics import (
    AdamState,
    DegenerateInputError,
    MlpParams,
    ShapeError,
    ValueGraph,
    adam_step,
    backward,
    cosine_similarity,
    cross_entropy,
    exp,
    init_mlp,
    mean,
    median_bandwidth,
    mlp_forward,
    mmd_rbf,
    softmax,
    tanh,
    total,
)

finite = st.floats(-30, 30, allow_nan=False)


# --- mlp_forward ----------------------------------------------------------


def test_zero_network_gives_zero_output():
    params = MlpParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    out = mlp_forward(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.array_equal(out, np.zeros((5, 2)))


def test_identity_layer():
    params = MlpParams([(np.eye(2), np.zeros(2))])
    assert np.array_equal(mlp_forward(params, [[1.0, 2.0]]), [[1.0, 2.0]])


def test_seeded_small_net_matches_hand_forward():
    # expected values from a scalar, element-by-element forward pass
    params = init_mlp((2, 2, 2), np.random.default_rng(0))
    out = mlp_forward(params, [[1.0, 0.0]])
    np.testing.assert_allclose(out, [[0.1147531013432963, 0.039827951150083196]], rtol=0, atol=1e-15)


def test_graph_and_eager_forward_agree(rng):
    params = init_mlp((3, 5, 2), rng)
    x = rng.normal(size=(7, 3))
    g = ValueGraph()
    np.testing.assert_array_equal(mlp_forward(params, x, g).value, mlp_forward(params, x))


def test_forward_dimension_mismatch():
    params = init_mlp((3, 2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(params, np.zeros((1, 2)))


def test_params_layer_mismatch_rejected():
    with pytest.raises(ShapeError):
        MlpParams([(np.zeros((2, 3)), np.zeros(3)), (np.zeros((4, 1)), np.zeros(1))])


# --- softmax / cross-entropy / cosine ---------------------------------------


@pytest.mark.parametrize(
    "logits, expected",
    [((0.0, 0.0), (0.5, 0.5)), ((math.log(2), 0.0), (2 / 3, 1 / 3)), ((1000.0, 0.0), (1.0, 0.0))],
)
def test_softmax_examples(logits, expected):
    np.testing.assert_allclose(softmax(np.array([logits])), [expected], atol=1e-15)


@given(arrays(np.float64, (4, 3), elements=finite))
def test_softmax_rows_on_simplex(z):
    p = softmax(z)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize(
    "p, y, expected",
    [((0.0, 1.0, 0.0), 1, 0.0), ((0.5, 0.5), 0, 0.693147), ((0.6, 0.4), 0, 0.510826)],
)
def test_cross_entropy_examples(p, y, expected):
    assert cross_entropy(p, y) == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy((1.0, 0.0), 1) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy((0.5, 0.5), 2)
    g = ValueGraph()
    with pytest.raises(IndexError):
        cross_entropy(g.leaf([[0.5, 0.5]]), [-1])


@given(arrays(np.float64, 3, elements=st.floats(0.01, 1)), st.integers(0, 2))
def test_cross_entropy_nonnegative(w, y):
    assert cross_entropy(w / w.sum(), y) >= 0


@pytest.mark.parametrize(
    "a, b, expected",
    [((1.0, 2.0, 3.0), (1.0, 2.0, 3.0), 1.0), ((1.0, 0.0), (0.0, 5.0), 0.0), ((1.0, -2.0), (-1.0, 2.0), -1.0)],
)
def test_cosine_examples(a, b, expected):
    assert cosine_similarity(a, b) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector_is_an_error():
    with pytest.raises(DegenerateInputError):
        cosine_similarity((0.0, 0.0), (1.0, 0.0))
    g = ValueGraph()
    with pytest.raises(DegenerateInputError):
        cosine_similarity(g.leaf([[0.0, 0.0]]), g.const([[1.0, 0.0]]))


# --- MMD --------------------------------------------------------------------


def test_mmd_identical_sets_zero(rng):
    X = rng.normal(size=(6, 2))
    assert mmd_rbf(X, X.copy(), 1.3) == pytest.approx(0.0, abs=1e-15)
    assert mmd_rbf([[0.0, 0.0]], [[0.0, 0.0]], 1.0) == 0.0


def test_mmd_two_points():
    assert mmd_rbf([[0.0, 0.0]], [[1.0, 0.0]], 1.0) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-15)
    assert mmd_rbf([[0.0, 0.0]], [[1.0, 0.0]], 1.0) == pytest.approx(0.786939, abs=1e-6)


def test_mmd_matches_oracle_and_is_nonnegative(rng):
    for _ in range(10):
        X, Y = rng.normal(size=(5, 2)), rng.normal(1, 1, size=(7, 2))
        v = mmd_rbf(X, Y, 0.8)
        assert v >= 0
        assert v == pytest.approx(mmd_v(X, Y, 0.8), rel=1e-12)


def test_mmd_bandwidth_must_be_positive():
    with pytest.raises(ValueError):
        mmd_rbf([[0.0]], [[1.0]], 0.0)


def test_median_bandwidth():
    assert median_bandwidth([[0.0], [1.0], [3.0]]) == 2.0


# --- backward ---------------------------------------------------------------


def test_square_gradient():
    g = ValueGraph()
    x = g.leaf(3.0)
    grads = backward(g, x * x)
    assert grads[x] == pytest.approx(6.0)


def test_constant_output_gives_zero_gradient():
    g = ValueGraph()
    x = g.leaf([1.0, 2.0])
    c = g.const(5.0)
    grads = backward(g, c * 1.0)
    np.testing.assert_array_equal(grads[x], [0.0, 0.0])


def test_unreached_params_get_zero_gradient(rng):
    a, b = init_mlp((2, 3, 1), rng), init_mlp((2, 2), rng)
    g = ValueGraph()
    out = total(mlp_forward(a, rng.normal(size=(4, 2)), g))
    grads = backward(g, out)
    assert all(not gw.any() and not gb.any() for gw, gb in grads[b])


def test_backward_requires_scalar():
    g = ValueGraph()
    x = g.leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        backward(g, x * 2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_are_rejected():
    g = ValueGraph()
    with pytest.raises(FloatingPointError):
        exp(g.leaf(1000.0))


def test_graph_is_topologically_ordered(rng):
    g = ValueGraph()
    mlp_forward(init_mlp((2, 3, 2), rng), rng.normal(size=(2, 2)), g)
    for node in g.nodes:
        assert all(p.id < node.id for p in node.parents)


def _mlp_loss_oracle(sizes, x, y):
    def f(theta):
        p = softmax_rows(forward(unflatten(theta, sizes), x))
        return float(np.mean(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-12))))

    return f


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_softmax_mlp_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    sizes = (3, 4, 3)
    params = init_mlp(sizes, rng)
    x, y = rng.normal(size=(6, 3)), rng.integers(0, 3, size=6)
    g = ValueGraph()
    loss = mean(cross_entropy(softmax(mlp_forward(params, x, g)), y))
    auto = np.concatenate([a.ravel() for pair in backward(g, loss)[params] for a in pair])
    numeric = fd_gradient(_mlp_loss_oracle(sizes, x, y), params.flat())
    assert rel_err(auto, numeric) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_cosine_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    a0, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))

    def f(flat):
        a = flat.reshape(4, 5)
        return float(np.mean(1 - (a * b).sum(1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))))

    g = ValueGraph()
    a = g.leaf(a0)
    loss = mean(1.0 - cosine_similarity(a, g.const(b)))
    assert rel_err(backward(g, loss)[a], fd_gradient(f, a0.ravel()).reshape(4, 5)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_mmd_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    X0, Y = rng.normal(size=(6, 2)), rng.normal(0.5, 1, size=(8, 2))
    g = ValueGraph()
    X = g.leaf(X0)
    grads = backward(g, mmd_rbf(X, Y, 0.9))
    numeric = fd_gradient(lambda v: mmd_v(v.reshape(6, 2), Y, 0.9), X0.ravel()).reshape(6, 2)
    assert rel_err(grads[X], numeric) < 1e-6


def test_tanh_broadcast_add_gradient(rng):
    w0, b0 = rng.normal(size=(3, 2)), rng.normal(size=2)
    x = rng.normal(size=(5, 3))

    def f(theta):
        return float(np.tanh(x @ theta[:6].reshape(3, 2) + theta[6:]).sum())

    g = ValueGraph()
    w, b = g.leaf(w0), g.leaf(b0)
    grads = backward(g, total(tanh(g.const(x) @ w + b)))
    auto = np.concatenate([grads[w].ravel(), grads[b]])
    assert rel_err(auto, fd_gradient(f, np.concatenate([w0.ravel(), b0]))) < 1e-6


# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params_unchanged(rng):
    params = init_mlp((2, 3, 1), rng)
    state = AdamState.for_params(params)
    zeros = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    new = adam_step(params, zeros, state, 1e-3)
    assert new.equal(params)
    assert state.step == 1


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    # at t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    params = MlpParams([(np.array([[1.0]]), np.array([0.5]))])
    state = AdamState.for_params(params)
    new = adam_step(params, [(np.array([[0.3]]), np.array([-2.0]))], state, 0.01)
    assert new.layers[0][0][0, 0] == pytest.approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    assert new.layers[0][1][0] == pytest.approx(0.5 + 0.01, abs=1e-10)


def test_adam_deterministic(rng):
    def run():
        r = np.random.default_rng(7)
        params = init_mlp((2, 4, 1), r)
        state = AdamState.for_params(params)
        for _ in range(5):
            g = ValueGraph()
            loss = mean(mlp_forward(params, r.normal(size=(3, 2)), g) * 1.0)
            params = adam_step(params, backward(g, loss)[params], state, 1e-2)
        return params.flat()

    assert run().tobytes() == run().tobytes()


def test_adam_step_counter_increases_and_shape_check(rng):
    params = init_mlp((2, 2), rng)
    state = AdamState.for_params(params)
    grads = [(np.ones((2, 2)), np.ones(2))]
    params = adam_step(params, grads, state)
    params = adam_step(params, grads, state)
    assert state.step == 2
    with pytest.raises(ShapeError):
        adam_step(params, [(np.ones((3, 2)), np.ones(2))], state)


def test_adam_refuses_frozen(rng):
    params = init_mlp((2, 2), rng).freeze()
    with pytest.raises(ValueError):
        adam_step(params, [(np.ones((2, 2)), np.ones(2))], AdamState.for_params(params))


def test_frozen_params_are_read_only(rng):
    params = init_mlp((2, 2), rng).freeze()
    with pytest.raises(ValueError):
        params.layers[0][0][0, 0] = 1.0


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_flat_round_trip(seed):
    params = init_mlp((3, 4, 2), np.random.default_rng(seed))
    assert params.with_flat(params.flat()).equal(params)
