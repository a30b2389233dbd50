import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmelstm import numerics as nx
from gmelstm.model import (LstmState, ModelShape, SequenceModelParams, attention_pool, forward,
                           lstm_step, mae_loss, predict, predict_batch)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def toy_params(attention=True):
    """H=1, d_in=1, d_proj=1, head_units=1 with hand-picked values."""
    shape = ModelShape(d_in=1, hidden=1, d_proj=1, head_units=1, attention=attention)
    t = {
        "W": np.array([[2.0]]),
        # rows: projected input, previous h; columns: i, f, o, m
        "U": np.array([[0.5, -0.3, 0.8, 1.1], [0.2, 0.4, -0.6, 0.9]]),
        "b": np.array([[0.1, 1.0, 0.0, -0.2]]),
        "head1": np.array([[1.5]]),
        "head2": np.array([[-2.0]]),
        "head2_b": np.array([[0.25]]),
    }
    if attention:
        t["w_attn"] = np.array([[3.0]])
    return SequenceModelParams(shape, t)


def hand_trace(xs, attention=True):
    c = h = 0.0
    hs = []
    for x in xs:
        px = 2.0 * x
        i = sig(0.5 * px + 0.2 * h + 0.1)
        f = sig(-0.3 * px + 0.4 * h + 1.0)
        o = sig(0.8 * px - 0.6 * h + 0.0)
        m = math.tanh(1.1 * px + 0.9 * h - 0.2)
        c = f * c + i * m
        h = o * math.tanh(c)
        hs.append(h)
    if attention:
        e = [math.exp(3.0 * v) for v in hs]
        alpha = [v / sum(e) for v in e]
        z = sum(a * v for a, v in zip(alpha, hs))
    else:
        alpha, z = None, hs[-1]
    return -2.0 * max(0.0, 1.5 * z) + 0.25, alpha, hs


def test_lstm_step_zero_params():
    params = SequenceModelParams.zeros(ModelShape(d_in=3, hidden=4))
    s = lstm_step(params, np.ones(3))
    assert np.array_equal(s.c, np.zeros(4)) and np.array_equal(s.h, np.zeros(4))
    v = np.array([1.0, -2.0, 0.5, 4.0])
    s = lstm_step(params, np.ones(3), LstmState(v, np.zeros(4)))
    np.testing.assert_allclose(s.c, 0.5 * v, rtol=0, atol=1e-15)


def test_lstm_step_dimension_error():
    params = SequenceModelParams.zeros(ModelShape(d_in=3, hidden=4))
    with pytest.raises(nx.DimensionError):
        lstm_step(params, np.ones(5))


def test_lstm_step_scalar_hand_trace():
    params = toy_params()
    _, _, hs = hand_trace([0.7, -0.4])
    s1 = lstm_step(params, [0.7])
    s2 = lstm_step(params, [-0.4], s1)
    assert s1.h[0] == pytest.approx(hs[0], abs=1e-14)
    assert s2.h[0] == pytest.approx(hs[1], abs=1e-14)


@pytest.mark.parametrize("attention", [True, False])
def test_predict_matches_hand_trace(attention):
    xs = [0.7, -0.4, 1.3]
    y, alpha = predict(toy_params(attention), np.array(xs)[:, None])
    y_ref, alpha_ref, _ = hand_trace(xs, attention)
    assert y == pytest.approx(y_ref, abs=1e-13)
    if attention:
        np.testing.assert_allclose(alpha, alpha_ref, atol=1e-14, rtol=0)
    else:
        assert alpha is None


def test_predict_zero_params_returns_bias():
    params = SequenceModelParams.zeros(ModelShape(d_in=2, hidden=3))
    assert predict(params, np.ones((4, 2)))[0] == 0.0
    params.tensors["head2_b"][0, 0] = 0.75
    assert predict(params, np.ones((4, 2)))[0] == 0.75


def test_attention_pool_examples():
    params = SequenceModelParams.init(ModelShape(d_in=2, hidden=3), 0)
    h1 = np.array([[0.1, -0.2, 0.3]])
    z, alpha = attention_pool(params, h1)
    assert alpha.tolist() == [1.0] and np.array_equal(z, h1[0])

    same = np.repeat(h1, 4, axis=0)
    z, alpha = attention_pool(params, same, [True, True, True, False])
    np.testing.assert_allclose(alpha, [1 / 3, 1 / 3, 1 / 3, 0], atol=1e-15, rtol=0)
    np.testing.assert_allclose(z, h1[0], atol=1e-15, rtol=0)

    params.tensors["w_attn"] = np.array([[1.0], [0.0], [0.0]])
    hs = np.array([[0.0, 0.2, 0.4], [math.log(3), -0.5, 0.1]])
    z, alpha = attention_pool(params, hs)
    np.testing.assert_allclose(alpha, [0.25, 0.75], atol=1e-15, rtol=0)
    np.testing.assert_allclose(z, 0.25 * hs[0] + 0.75 * hs[1], atol=1e-15, rtol=0)


def test_attention_pool_empty():
    params = SequenceModelParams.init(ModelShape(d_in=2, hidden=3), 0)
    with pytest.raises(nx.EmptySequenceError):
        attention_pool(params, np.zeros((0, 3)))


def test_mae_examples():
    assert mae_loss([0.5, -1.0], [0.5, -1.0]).item() == 0.0
    assert mae_loss([1.0, -1.0], [2.0, -3.0]).item() == 1.5
    assert mae_loss([0.0], [3.0]).item() == 3.0
    with pytest.raises(ValueError):
        mae_loss([], [])


def test_mae_subgradient_zero_at_zero_residual():
    p = nx.parameter([[1.0], [2.0]], name="p")
    g = nx.backward(mae_loss(p, [1.0, 0.0]), [p])["p"]
    assert g.tolist() == [[0.0], [0.5]]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_pad_invariance(seed, valid, pad):
    rng = np.random.default_rng(seed)
    params = SequenceModelParams.init(ModelShape(d_in=3, hidden=5, head_units=4), seed)
    x = rng.normal(size=(valid, 3))
    y0, a0 = predict(params, x)
    junk = np.concatenate([x, rng.normal(0, 10, size=(pad, 3))])
    mask = np.arange(valid + pad) < valid
    y1, a1 = predict(params, junk, mask)
    assert y0 == y1
    assert np.array_equal(a0, a1[:valid]) and np.all(a1[valid:] == 0)


def test_batched_forward_matches_per_clip():
    rng = np.random.default_rng(5)
    params = SequenceModelParams.init(ModelShape(d_in=4, hidden=6, head_units=5), 1)
    x = rng.normal(size=(3, 7, 4))
    mask = np.arange(7)[None] < np.array([[7], [2], [5]])
    ys, alphas = predict_batch(params, x, mask)
    for i in range(3):
        y, a = predict(params, x[i, mask[i]])
        assert ys[i] == pytest.approx(y, abs=1e-14)
        np.testing.assert_allclose(alphas[i, mask[i]], a, atol=1e-14, rtol=0)
        assert alphas[i].sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hidden_state_bounded(seed):
    rng = np.random.default_rng(seed)
    params = SequenceModelParams.init(ModelShape(d_in=2, hidden=3), seed)
    state = None
    for x in rng.normal(0, 50, size=(5, 2)):
        state = lstm_step(params, x, state)
        assert np.all(np.abs(state.h) < 1.0)


def test_order_awareness():
    rng = np.random.default_rng(2)
    params = SequenceModelParams.init(ModelShape(d_in=3, hidden=6, head_units=5), 2)
    x = rng.normal(size=(5, 3))
    y = predict(params, x)[0]
    assert any(predict(params, x[rng.permutation(5)])[0] != y for _ in range(5))


def test_model_gradient_finite_differences():
    rng = np.random.default_rng(11)
    params = SequenceModelParams.init(ModelShape(d_in=3, hidden=4, head_units=3), 4)
    x = rng.normal(size=(3, 5, 3))
    mask = np.arange(5)[None] < np.array([[5], [3], [1]])
    labels = predict_batch(params, x, mask)[0] + np.array([2.0, -1.5, 1.0])

    def fn(tensors):
        with nx.no_grad():
            return mae_loss(forward(SequenceModelParams(params.shape, tensors), x, mask)[0],
                            labels).item()

    leaves = params.leaves()
    analytic = nx.backward(mae_loss(forward(params, x, mask, leaves)[0], labels), leaves.values())
    numeric = nx.numerical_gradient(fn, params.tensors)
    for k in params.tensors:
        assert nx.relative_error(analytic[k], numeric[k]) < 1e-4, k


def test_params_roundtrip(tmp_path):
    params = SequenceModelParams.init(ModelShape(d_in=3, hidden=4, head_units=2), 9)
    back = SequenceModelParams.load(params.save(tmp_path / "m.json"))
    assert back.shape == params.shape
    for k in params.tensors:
        assert np.array_equal(back.tensors[k], params.tensors[k])


def test_params_validation():
    shape = ModelShape(d_in=2, hidden=3)
    t = SequenceModelParams.zeros(shape).tensors
    t["U"] = np.zeros((2, 2))
    with pytest.raises(nx.DimensionError):
        SequenceModelParams(shape, t)
    t = SequenceModelParams.zeros(shape).tensors
    t["b"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        SequenceModelParams(shape, t)


def test_init_forget_bias_and_defaults():
    params = SequenceModelParams.init(ModelShape(d_in=5), 0)
    H = params.shape.hidden
    assert H == 64 and params.shape.proj == 64
    b = params.tensors["b"][0]
    assert np.all(b[H:2 * H] == 1.0) and np.all(b[:H] == 0) and np.all(b[2 * H:] == 0)
    assert params.tensors["head1"].shape == (64, 50)
