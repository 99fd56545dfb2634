import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omniisr.data import gen_classification, gen_gridseg
from omniisr.isr import ISRObjective, channel_entropy, loss_ce, loss_mi, loss_ne, loss_total
from omniisr.model import NetworkSpec, TapPlan
from omniisr.trainer import OptimizerConfig, train_cl


def onehot(labels, K):
    return np.moveaxis(np.eye(K)[np.asarray(labels)], -1, 1)


def test_ce_perfect_and_uniform():
    y = onehot(np.array([[[0]], [[2]]]), 4)
    assert loss_ce(y, y) == 0.0
    assert math.isclose(loss_ce(np.full_like(y, 0.25), y), math.log(4), rel_tol=1e-15)
    assert loss_mi(np.full_like(y, 0.25), y) == loss_ce(np.full_like(y, 0.25), y)


def test_ce_two_cell_hand_value():
    # one sample, a 1x2 grid of cells
    p = np.array([[0.7, 0.3], [0.2, 0.8]]).T.reshape(1, 2, 1, 2)
    y = onehot(np.array([[[0, 1]]]), 2)
    assert math.isclose(loss_ce(p, y), -(math.log(0.7) + math.log(0.8)), rel_tol=1e-14)
    # the same two cells as two samples: batch mean halves it
    p2 = np.array([[0.7, 0.3], [0.2, 0.8]]).reshape(2, 2, 1, 1)
    y2 = onehot(np.array([[[0]], [[1]]]), 2)
    assert math.isclose(loss_ce(p2, y2), -(math.log(0.7) + math.log(0.8)) / 2, rel_tol=1e-14)


def test_ce_zero_probability_is_finite():
    y = onehot(np.array([[[0]]]), 2)
    p = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
    assert math.isclose(loss_ce(p, y), -math.log(1e-12), rel_tol=1e-12)


def test_ne_hand_values():
    assert math.isclose(loss_ne(np.zeros((1, 4, 1, 1))), -math.log(4), rel_tol=1e-15)
    z = np.array([math.log(3), 0.0]).reshape(1, 2, 1, 1)
    assert math.isclose(loss_ne(z), 0.75 * math.log(0.75) + 0.25 * math.log(0.25), rel_tol=1e-14)
    assert math.isclose(loss_ne(z), -0.562335, abs_tol=1e-6)


@settings(max_examples=100, deadline=None)
@given(C=st.integers(2, 8), seed=st.integers(0, 10_000), spread=st.floats(0, 30))
def test_ne_bounds(C, seed, spread):
    z = spread * np.random.default_rng(seed).standard_normal((3, C, 1, 1))
    v = loss_ne(z)
    assert -math.log(C) - 1e-12 <= v <= 1e-12


def small_objective(M=2, alpha=0.4, lam=0.1, seed_spec=False):
    spec = NetworkSpec(3, (6, 5, 6), 3, grid=(4, 4), downsample_at=(2,))
    return ISRObjective(spec, TapPlan.build(spec.depth, M, "input", 1, alpha, lam)), spec


def seg_batch(n=4, seed=0):
    d = gen_gridseg(3, 4, 4, n, seed=seed, channels=3)
    return d.x, d.y


def test_total_is_weighted_sum_of_components():
    obj, _ = small_objective(2, 0.4, 0.1)
    x, y = seg_batch()
    p = obj.init_params(1)
    br = obj.evaluate(p, x, y)
    # independent numpy path over the same forward outputs
    tf = obj.forward_tapped(p, x)
    ref = loss_total(tf, onehot(y, 3), obj.plan)
    assert math.isclose(br.ce, loss_ce(tf.probs, onehot(y, 3)), rel_tol=1e-12)
    assert math.isclose(br.total, ref.total, rel_tol=1e-12)
    assert math.isclose(br.total, br.ce + sum(0.4 * m + 0.1 * n for m, n in zip(br.mi, br.ne)), rel_tol=1e-12)
    assert br.ce >= 0 and all(m >= 0 for m in br.mi)


def test_degenerate_plans():
    obj0, _ = small_objective(0)
    x, y = seg_batch()
    br = obj0.evaluate(obj0.init_params(0), x, y)
    assert br.total == br.ce and br.mi == [] and br.ne == []
    objz, _ = small_objective(2, 0.0, 0.0)
    brz = objz.evaluate(objz.init_params(0), x, y)
    assert brz.total == brz.ce


def test_zero_weights_gradient_equals_ce():
    obj, _ = small_objective(2, 0.0, 0.0)
    x, y = seg_batch()
    d = obj.decompose_gradient(obj.init_params(0), x, y)
    assert d.total.max_abs_diff(d.ce) == 0.0


def test_single_mi_term():
    obj, _ = small_objective(1, 1.0, 0.0)
    x, y = seg_batch()
    d = obj.decompose_gradient(obj.init_params(0), x, y)
    assert (d.total - d.ce).max_abs_diff(d.mi[0]) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(M=st.integers(0, 3), seed=st.integers(0, 1000), data=st.data())
def test_additivity(M, seed, data):
    alpha = tuple(data.draw(st.floats(0, 2)) for _ in range(M))
    lam = tuple(data.draw(st.floats(0, 2)) for _ in range(M))
    spec = NetworkSpec(3, (6, 5, 6), 3, grid=(4, 4), downsample_at=(2,))
    plan = TapPlan(tuple(range(1, M + 1)), alpha, lam)
    obj = ISRObjective(spec, plan)
    x, y = seg_batch(3, seed)
    d = obj.decompose_gradient(obj.init_params(seed), x, y)
    assert d.total.max_abs_diff(d.recombine(plan)) <= 1e-9


def test_mi_gradient_stops_at_tap():
    obj, spec = small_objective(1, 1.0, 1.0)
    x, y = seg_batch()
    d = obj.decompose_gradient(obj.init_params(0), x, y)
    tap = obj.plan.indices[0]
    for name in d.mi[0]:
        if name.startswith("block"):
            b = int(name[5:].split(".")[0])
            if b > tap:
                assert not np.any(d.mi[0][name]) and not np.any(d.ne[0][name]), name
            else:
                assert np.any(d.mi[0][name]), name


def test_stronger_ne_weight_raises_channel_entropy():
    data = gen_classification(3, 6, 120, 2.0, seed=0)
    spec = NetworkSpec(6, (8, 8, 8), 3)
    opt = OptimizerConfig(base_eta=0.1, T=50)
    ent = []
    for lam in (0.5, 1.0):
        obj = ISRObjective(spec, TapPlan.build(spec.depth, 1, "input", 1, 0.4, lam))
        p, _ = train_cl(obj, data, opt, seed=0)
        ent.append(channel_entropy(obj.forward_tapped(p, data.x).taps[0]))
    assert ent[1] > ent[0]
