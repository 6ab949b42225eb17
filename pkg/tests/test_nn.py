import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmattrib import nn
from gradcheck import run_cases
from oracles import (avg_pool_loop, batchnorm_train_loop, conv2d_loop, dense_loop, gap_loop,
                     leaky_relu_loop, max_rel_error, numeric_grad, sigmoid_bce_loop, softmax_ce_loop)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("size", [3, 4, 7])
def test_conv_matches_loop(stride, size):
    rng = np.random.default_rng(size * 10 + stride)
    x = rng.normal(size=(2, 3, size, size))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    np.testing.assert_allclose(nn.conv2d(x, w, b, stride), conv2d_loop(x, w, b, stride), atol=1e-10)


def test_conv_output_size_is_ceil():
    assert [nn.conv_out_size(n, 2) for n in (4, 5, 7)] == [2, 3, 4]
    assert nn.conv_out_size(5, 1) == 5


def test_pool_dense_activation_match_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 6))
    np.testing.assert_allclose(nn.avg_pool2d(x), avg_pool_loop(x), atol=1e-12)
    np.testing.assert_allclose(nn.global_avg_pool(x), gap_loop(x), atol=1e-12)
    np.testing.assert_allclose(nn.leaky_relu(x), leaky_relu_loop(x), atol=0)
    v = rng.normal(size=(5, 7))
    w = rng.normal(size=(3, 7))
    b = rng.normal(size=3)
    np.testing.assert_allclose(nn.dense(v, w, b), dense_loop(v, w, b), atol=1e-12)


def test_avg_pool_rejects_odd_maps():
    with pytest.raises(nn.ShapeError):
        nn.avg_pool2d(np.zeros((1, 1, 5, 4)))


def test_batchnorm_train_matches_loop_and_updates_running_stats():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    bn = nn.BatchNorm2d(2)
    bn.params["gamma"] = np.array([1.5, 0.5])
    bn.params["beta"] = np.array([0.1, -0.2])
    out = bn.forward(x, train=True)
    np.testing.assert_allclose(out, batchnorm_train_loop(x, bn.params["gamma"], bn.params["beta"]), atol=1e-10)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_train_needs_two_samples():
    with pytest.raises(ValueError):
        nn.BatchNorm2d(2).forward(np.zeros((1, 2, 2, 2)), train=True)


def test_losses_match_loops_and_are_stable():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(10, 1)) * 5
    y = rng.integers(0, 2, size=(10, 1))
    assert nn.sigmoid_bce(z, y)[1] == pytest.approx(sigmoid_bce_loop(z, y), abs=1e-12)
    zs = rng.normal(size=(8, 4)) * 5
    ys = rng.integers(0, 4, size=8)
    assert nn.softmax_ce(zs, ys)[1] == pytest.approx(softmax_ce_loop(zs, ys), abs=1e-12)
    probs, loss = nn.sigmoid_bce(np.array([[800.0], [-800.0]]), np.array([[0], [1]]))
    assert np.isfinite(loss) and loss == pytest.approx(800.0)
    _, loss = nn.softmax_ce(np.array([[1000.0, -1000.0]]), np.array([1]))
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)


def test_sigmoid_extremes():
    s = nn.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0


def test_gradients_over_random_configurations():
    results = run_cases(121, seed=11)
    assert len(results) >= 100
    worst = max(results, key=lambda r: r[1])
    assert worst[1] < 1e-5, worst


def test_backward_without_cache_raises():
    conv = nn.Conv2d(1, 1)
    conv.forward(np.zeros((1, 1, 3, 3)))
    with pytest.raises(nn.StateError):
        conv.backward(np.zeros((1, 1, 3, 3)))


def test_conv_channel_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.Conv2d(3, 2).forward(np.zeros((1, 1, 4, 4)))


def test_gaussian_init_statistics():
    w = nn.gaussian_init((200, 200), 0.02, np.random.default_rng(0))
    assert abs(w.mean()) < 1e-3
    assert w.std() == pytest.approx(0.02, rel=0.02)


def _tiny_graph(rng, dtype=np.float64):
    layers = [nn.Conv2d(2, 3, 1, True, rng, 0.5, dtype), nn.LeakyReLU(),
              nn.Conv2d(3, 4, 2, False, rng, 0.5, dtype), nn.BatchNorm2d(4, dtype=dtype), nn.LeakyReLU(),
              nn.GlobalAvgPool(), nn.Dense(4, 1, rng, 0.5, dtype)]
    return nn.ModelGraph(layers, (2, 6, 6), branch_layer=2)


def test_whole_graph_gradient():
    rng = np.random.default_rng(4)
    g = _tiny_graph(rng)
    x = rng.normal(size=(3, 2, 6, 6))
    y = np.array([[0], [1], [1]])
    logits = g.forward(x, train=True, cache=True)
    probs, _ = nn.sigmoid_bce(logits, y)
    g.backward(nn.sigmoid_bce_grad(probs, y))
    grads = {k: v.copy() for k, v in g.named_grads().items()}
    params = g.named_params()

    def f():
        return nn.sigmoid_bce(g.forward(x, train=True), y)[1]

    for k in ("00.conv2d.weight", "02.conv2d.weight", "03.batchnorm2d.gamma", "06.dense.weight"):
        assert max_rel_error(grads[k], numeric_grad(f, params[k])) < 1e-5, k


def test_state_dict_round_trip_and_digest():
    rng = np.random.default_rng(5)
    a, b = _tiny_graph(rng), _tiny_graph(rng)
    assert a.digest() != b.digest()
    b.load_state_dict(a.state_dict())
    assert a.digest() == b.digest()
    c = nn.ModelGraph.from_description(a.describe())
    c.load_state_dict(a.state_dict())
    x = rng.normal(size=(2, 2, 6, 6))
    np.testing.assert_array_equal(a.forward(x), c.forward(x))


def test_load_state_dict_rejects_bad_shapes():
    g = _tiny_graph(np.random.default_rng(0))
    state = g.state_dict()
    state["00.conv2d.weight"] = np.zeros((1, 1, 3, 3))
    with pytest.raises(nn.ShapeError):
        g.load_state_dict(state)
    del state["00.conv2d.weight"]
    with pytest.raises(KeyError):
        g.load_state_dict(state)


def test_eval_forward_does_not_mutate():
    g = _tiny_graph(np.random.default_rng(6))
    before = g.digest()
    g.predict(np.random.default_rng(0).normal(size=(5, 2, 6, 6)), batch_size=2)
    assert g.digest() == before


def test_adam_step_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.1])}
    st_ = nn.AdamState(lr=0.1)
    nn.adam_step(p, g, st_)
    # first step: m_hat = g, v_hat = g^2, update = lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-6)
    nn.adam_step(p, g, st_)
    m = 0.9 * 0.1 * g["w"] + 0.1 * g["w"]
    v = 0.999 * 0.001 * g["w"] ** 2 + 0.001 * g["w"] ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"], np.array([0.9, -1.9]) - step, atol=1e-12)


def test_adam_rejects_mismatched_grads():
    with pytest.raises(nn.ShapeError):
        nn.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, nn.AdamState())


@settings(max_examples=40, deadline=None)
@given(z=st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_sigmoid_bounded_and_monotone(z):
    s = nn.sigmoid(np.sort(np.array(z)))
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.diff(s) >= 0)


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(2, 6), seed=st.integers(0, 2**16))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    z = np.random.default_rng(seed).normal(size=(rows, cols)) * 30
    np.testing.assert_allclose(nn.softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_check_finite():
    with pytest.raises(FloatingPointError):
        nn.check_finite(np.array([1.0, np.nan]))
