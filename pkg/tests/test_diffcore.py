import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omniisr import diffcore
from omniisr.diffcore import (ADAPTER, MODEL, ConfigurationError, ContractViolation, Graph, ParamSet,
                              grad_check, relative_error, weighted_sum)


def mlp_graph(widths=(3, 5, 4, 2)):
    g = Graph()
    h = g.input("x")
    for i in range(len(widths) - 1):
        h = g.affine(h, g.param(f"W{i}"), g.param(f"b{i}"), name=f"layer{i}")
        if i < len(widths) - 2:
            h = g.relu(h)
    p = g.softmax(h)
    loss = g.scale(g.mean(g.sum(g.mul(g.log(p), g.input("y")), axis=1)), -1.0)
    return g, h, p, loss


def mlp_params(widths=(3, 5, 4, 2), seed=0):
    rng = np.random.default_rng(seed)
    arrays = {}
    for i in range(len(widths) - 1):
        arrays[f"W{i}"] = rng.standard_normal((widths[i + 1], widths[i])) / np.sqrt(widths[i])
        arrays[f"b{i}"] = 0.1 * rng.standard_normal(widths[i + 1])
    return ParamSet(arrays)


def test_linear_layer_value():
    g = Graph()
    y = g.affine(g.input("x"), g.param("W"), g.param("b"))
    g.forward({"W": np.array([[2.0]]), "b": np.array([1.0])}, {"x": np.array([[3.0]])})
    assert g.value(y).tolist() == [[7.0]]


def test_softmax_uniform():
    g = Graph()
    s = g.softmax(g.input("x"))
    g.forward({}, {"x": np.zeros(4)})
    assert np.allclose(g.value(s), 0.25, atol=0, rtol=0)


def test_two_layer_matches_straight_line_numpy():
    widths = (3, 6, 2)
    g, logits, p, _ = mlp_graph(widths)
    params = mlp_params(widths, seed=4)
    x = np.random.default_rng(1).standard_normal((7, 3))
    g.forward(params, {"x": x, "y": np.eye(2)[np.arange(7) % 2]})
    h = np.maximum(x @ params["W0"].T + params["b0"], 0)
    z = h @ params["W1"].T + params["b1"]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    assert np.allclose(g.value(p), e / e.sum(axis=1, keepdims=True), rtol=1e-14, atol=1e-15)


def test_square_derivative():
    g = Graph()
    t = g.param("t")
    f = g.sum(g.mul(t, t))
    g.forward({"t": np.array([3.0])}, {})
    assert g.backward(f)["t"].tolist() == [6.0]


def test_log_softmax_derivative():
    g = Graph()
    t = g.param("t")
    f = g.dot_const(g.log(g.softmax(t)), g.input("e0"))
    g.forward({"t": np.zeros(2)}, {"e0": np.array([1.0, 0.0])})
    assert np.allclose(g.backward(f)["t"], [0.5, -0.5], atol=1e-15)


def test_loss_gradient_of_itself_is_one():
    g = Graph()
    t = g.param("t")
    f = g.sum(t)
    g.forward({"t": np.ones(3)}, {})
    assert np.array_equal(g.backward(f)["t"], np.ones(3))


def test_three_layer_finite_differences():
    g, _, _, loss = mlp_graph()
    params = mlp_params(seed=2)
    rng = np.random.default_rng(3)
    inputs = {"x": rng.standard_normal((6, 3)), "y": np.eye(2)[rng.integers(0, 2, 6)]}
    rep = grad_check(g, params, inputs, loss, tolerance=1e-5, step=1e-4)
    assert rep.passed, str(rep)
    assert rep.n_checked == params.size()


def test_identity_grad_check_zero():
    g = Graph()
    t = g.param("t")
    f = g.sum(t)
    rep = grad_check(g, ParamSet({"t": np.arange(4.0)}), {}, f)
    assert rep.max_error == 0.0


def test_corrupted_rule_is_flagged(monkeypatch):
    g, _, _, loss = mlp_graph()
    params = mlp_params(seed=5)
    rng = np.random.default_rng(6)
    inputs = {"x": rng.standard_normal((6, 3)), "y": np.eye(2)[rng.integers(0, 2, 6)]}
    assert grad_check(g, params, inputs, loss).passed
    good = diffcore.BACKWARD["relu"]
    monkeypatch.setitem(diffcore.BACKWARD, "relu", lambda a, gr, y, x: (1.5 * good(a, gr, y, x)[0],))
    rep = grad_check(g, params, inputs, loss)
    assert not rep.passed and rep.max_error > 1e-2


def test_non_scalar_loss_rejected():
    g = Graph()
    t = g.param("t")
    g.forward({"t": np.ones(3)}, {})
    with pytest.raises(ContractViolation):
        g.backward(t)


def test_backward_before_forward():
    g = Graph()
    t = g.sum(g.param("t"))
    with pytest.raises(ContractViolation):
        g.backward(t)


def test_shape_error_names_node():
    g = Graph()
    g.affine(g.input("x"), g.param("W"), g.param("b"), name="dense1")
    with pytest.raises(ConfigurationError, match="dense1"):
        g.forward({"W": np.ones((2, 3)), "b": np.ones(2)}, {"x": np.ones((1, 4))})


def test_unbound_input():
    g = Graph()
    g.sum(g.input("x"))
    with pytest.raises(ConfigurationError, match="x"):
        g.forward({}, {})


def test_shared_subgraph_accumulates():
    # f = sum(t*t) + sum(t) uses t along three paths
    g = Graph()
    t = g.param("t")
    f = g.add(g.sum(g.mul(t, t)), g.sum(t))
    v = np.array([1.0, -2.0, 0.5])
    g.forward({"t": v}, {})
    assert np.allclose(g.backward(f)["t"], 2 * v + 1, rtol=0, atol=1e-15)


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_each_layer_kind_finite_differences(mode):
    rng = np.random.default_rng(11)
    g = Graph()
    x = g.input("x")
    h = g.relu(g.channel_mix(x, g.param("W"), g.param("b")))
    h = g.avgpool2(h)
    h = g.upsample(h, (4, 4), mode)
    p = g.softmax(h, axis=1)
    loss = g.mean(g.sum(g.mul(p, g.log(p)), axis=(1, 2, 3)))
    params = ParamSet({"W": rng.standard_normal((3, 2)), "b": 0.3 + 0.1 * rng.standard_normal(3)})
    rep = grad_check(g, params, {"x": rng.standard_normal((2, 2, 4, 4))}, loss, tolerance=1e-6)
    assert rep.passed, str(rep)


def test_determinism_bitwise():
    g, _, _, loss = mlp_graph()
    params = mlp_params(seed=8)
    rng = np.random.default_rng(9)
    inputs = {"x": rng.standard_normal((5, 3)), "y": np.eye(2)[rng.integers(0, 2, 5)]}
    outs = []
    for _ in range(2):
        g.forward(params, inputs)
        outs.append((g.value(loss).tobytes(), g.backward(loss).flat().tobytes()))
    assert outs[0] == outs[1]


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_is_linear(a, b, seed):
    g, _, p, ce = mlp_graph()
    other = g.sum(g.mul(p, p))
    combo = g.add(g.scale(ce, a), g.scale(other, b))
    params = mlp_params(seed=seed)
    rng = np.random.default_rng(seed)
    g.forward(params, {"x": rng.standard_normal((4, 3)), "y": np.eye(2)[rng.integers(0, 2, 4)]})
    lhs = g.backward(combo)
    rhs = a * g.backward(ce) + b * g.backward(other)
    assert lhs.max_abs_diff(rhs) <= 1e-10


# ParamSet -----------------------------------------------------------------

def test_paramset_arith_and_tags():
    a = ParamSet({"w": np.ones(2), "phi": np.zeros(3)}, {"phi": (ADAPTER, 1)})
    b = 2.0 * a + a
    assert np.array_equal(b["w"], [3.0, 3.0])
    assert b.tag("phi") == (ADAPTER, 1) and b.tag("w") == (MODEL, None)
    assert a.select(MODEL).names() == ["w"]
    assert np.array_equal(a.unflat(a.flat())["w"], a["w"])


def test_paramset_mismatch_rejected():
    a = ParamSet({"w": np.ones(2)})
    with pytest.raises(ConfigurationError):
        a + ParamSet({"w": np.ones(3)})
    with pytest.raises(ConfigurationError):
        a + ParamSet({"v": np.ones(2)})


def test_weighted_sum():
    a, b = ParamSet({"w": np.array([1.0, 0.0])}), ParamSet({"w": np.array([0.0, 1.0])})
    assert np.array_equal(weighted_sum([a, b], [0.25, 0.75])["w"], [0.25, 0.75])


def test_relative_error_floor():
    assert np.all(relative_error(np.zeros(3), np.zeros(3)) == 0.0)
