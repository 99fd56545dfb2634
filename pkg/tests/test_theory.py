import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omniisr.diffcore import ConfigurationError
from omniisr.theory import (BOUND_HEADER, SWEEP_HEADER, TheoryInputs, bound, bound_cl, bound_fl, bound_hybrid,
                            bounds_csv, calibrate_c0, complexity, default_escape_inputs, deterministic_escape,
                            effective_quantities, escape_margin, escape_sweep, escape_time, mode_table, saddle_sim,
                            sweep_csv)


def unit(**kw):
    base = dict(smoothness=1.0, grad_bound_sq=1.0, noise_sq=0.0, init_gap=1.0, eta=1.0, T=100.0)
    base.update(kw)
    return TheoryInputs(**base)


def test_cl_examples():
    assert bound_cl(unit(init_gap=0.0)).term("initial_gap") == 0.0
    r = bound_cl(unit())
    assert math.isclose(r.total, 0.3, rel_tol=1e-15)
    assert math.isclose(r.total, sum(r.terms.values()))
    assert r.feasible
    assert math.isclose(bound_cl(unit(T=200.0)).total, 0.3 / math.sqrt(2), rel_tol=1e-14)
    assert not bound_cl(unit(smoothness=11.0)).feasible


def test_fl_reduces_to_cl():
    p = unit(local_epochs=3.0, heterogeneity=0.0, eta=0.01)
    r = bound_fl(p, use_A=False)
    assert r.term("drift") == 0.0 and r.total == bound_cl(p).total


def test_fl_e_squared():
    p = unit(eta=0.001, heterogeneity=5.0, local_epochs=2.0)
    d1 = bound_fl(p, use_A=False).term("drift")
    d2 = bound_fl(p.with_(local_epochs=4.0), use_A=False).term("drift")
    assert math.isclose(d2, 4 * d1, rel_tol=1e-14)


def test_fl_hand_arithmetic():
    # L=2, eta=0.01, T=400 (sqrt 20), G2+s2=3, Delta=0.5, c=1.5, E=2, H=4
    p = TheoryInputs(smoothness=2.0, grad_bound_sq=2.0, noise_sq=1.0, init_gap=0.5, eta=0.01, T=400.0,
                     drift_const=1.5, local_epochs=2.0, heterogeneity=4.0)
    gap, var = 2 * 0.5 / (0.01 * 20), 2 * 0.01 * 3 / 20      # 5.0, 0.003
    k = 2 * 0.01 * 1.5 * 4 / 20                               # 0.006
    r = bound_fl(p)
    assert math.isclose(r.term("initial_gap"), gap, rel_tol=1e-14)
    assert math.isclose(r.term("drift"), k * (gap + var + 4.0), rel_tol=1e-14)
    assert math.isclose(r.notes["fixed_point"], (gap + var + k * 4.0) / (1 - k), rel_tol=1e-14)
    assert r.feasible == (2 * 0.01 * 20 * 1.5 * 4 < 1)
    assert not bound_fl(p.with_(eta=0.1)).feasible


def test_effective_quantities():
    p = TheoryInputs(noise_cl_sq=1.0, noise_fl_sq=4.0)
    _, s = effective_quantities(p, [0.3, 0.8])
    assert math.isclose(s, 0.09 + 0.49 * 4, rel_tol=1e-14)
    b, _ = effective_quantities(p, [0.1, 0.5, 0.9], [1.0, 2.0], [1.0, 2.0])
    assert math.isclose(b, math.sqrt(5), rel_tol=1e-14)
    b, _ = effective_quantities(p, [0.5], [1.0, 0.0], [-1.0, 0.0])
    assert b == 0.0
    b, _ = effective_quantities(p, [0.5, 1.0], [1.0, 0.0], [-1.0, 0.0])
    assert b == 1.0
    with pytest.raises(ConfigurationError):
        effective_quantities(p, [])


def test_hybrid_bound():
    p = TheoryInputs(init_gap=2.0, eta=0.1, T=100.0, alpha_min=0.5, bias_eff=0.3, noise_eff_sq=4.0, bound_const=2.0)
    r = bound_hybrid(p)
    assert math.isclose(r.term("initial_gap"), 2 * 2 / (0.5 * 0.1 * 10), rel_tol=1e-14)
    assert math.isclose(r.term("variance"), 2 * 0.1 * 4 / 10, rel_tol=1e-14)
    assert math.isclose(r.term("bias_floor"), 2 * 0.09, rel_tol=1e-14)
    assert r.feasible
    assert not bound_hybrid(p.with_(alpha_min=0.0)).feasible
    assert not bound_hybrid(p.with_(smoothness=30.0)).feasible
    # no floor: pure 1/sqrt(T) decay
    q = p.with_(bias_eff=0.0)
    assert math.isclose(bound_hybrid(q.with_(T=400.0)).total, bound_hybrid(q).total / 2, rel_tol=1e-14)


def test_hybrid_asymptote():
    p = TheoryInputs(init_gap=2.0, eta=0.1, alpha_min=0.5, bias_eff=0.3, noise_eff_sq=4.0)
    Ts = np.logspace(1, 14, 30)
    tot = [bound_hybrid(p.with_(T=float(T))).total for T in Ts]
    assert all(b <= a for a, b in zip(tot, tot[1:]))
    assert 0.09 <= tot[-1] <= 0.09 + 1e-5


def test_complexity_cl_example():
    c = complexity("cl", unit(), 0.1)
    assert math.isclose(c.T, 900.0, rel_tol=1e-14) and c.rounds == 900
    assert math.isclose(bound_cl(unit(T=c.T)).total, 0.1, rel_tol=1e-12)


@settings(max_examples=200, deadline=None)
@given(L=st.floats(0.1, 10), V=st.floats(0, 10), D=st.floats(0.01, 10), eta=st.floats(1e-3, 1),
       eps=st.floats(1e-3, 1), E=st.integers(1, 8), H=st.floats(0, 10), c=st.floats(0, 2),
       mode=st.sampled_from(["cl", "fl"]))
def test_complexity_round_trip(L, V, D, eta, eps, E, H, c, mode):
    p = TheoryInputs(smoothness=L, grad_bound_sq=V, init_gap=D, eta=eta, local_epochs=E, heterogeneity=H,
                     drift_const=c)
    T = complexity(mode, p, eps).T
    r = bound_cl(p.with_(T=T)) if mode == "cl" else bound_fl(p.with_(T=T), A=eps)
    assert math.isclose(r.total, eps, rel_tol=1e-9)


def test_kappa_halves_optimal_rate_complexity():
    p = TheoryInputs(grad_bound_sq=0.0, noise_sq=0.0, init_gap=1.0, heterogeneity=50.0, local_epochs=2.0)
    full = complexity("fl", p, 1e-3, kappa=1.0, optimal_eta=True).T
    half = complexity("fl", p, 1e-3, kappa=0.5, optimal_eta=True).T
    assert 0.5 < half / full < 0.51
    # at a fixed heterogeneity-dominated eta the inverted T is quadratic in the budget: about a quarter
    fixed = [complexity("fl", p, 1e-3, kappa=k).T for k in (1.0, 0.5)]
    assert 0.25 < fixed[1] / fixed[0] < 0.26


def test_hybrid_complexity_floor():
    p = TheoryInputs(alpha_min=0.5, bias_eff=0.3, noise_eff_sq=1.0, eta=0.1)
    assert not complexity("hybrid", p, 0.09).feasible
    assert not complexity("hybrid", p, 0.05).feasible
    c = complexity("hybrid", p, 0.09 * (1 + 1e-9))
    assert c.feasible and math.isfinite(c.T)
    c = complexity("hybrid", p, 0.5)
    assert math.isclose(bound_hybrid(p.with_(T=c.T)).total, 0.5, rel_tol=1e-12)
    with pytest.raises(ConfigurationError):
        complexity("cl", p, 0.0)


def test_reports_csv_and_table():
    reps = [bound(m, unit(eta=0.01)) for m in ("cl", "fl", "hybrid")]
    lines = bounds_csv(reps).splitlines()
    assert lines[0] == ",".join(BOUND_HEADER) and len(lines) == 4
    assert "initial_gap" in mode_table(reps)
    with pytest.raises(ConfigurationError):
        bound("xl", unit())


def test_inputs_validation():
    with pytest.raises(ConfigurationError):
        TheoryInputs(smoothness=-1.0)
    with pytest.raises(ConfigurationError):
        TheoryInputs(delta=1.0)


def test_escape_example():
    p = TheoryInputs(curvature=0.1, eta=0.01, radius=10.0, delta=0.1, y0=0.5, bias_eff=0.0, noise_eff_sq=0.01,
                     c0=1.0)
    c_sigma = 0.1 / math.sqrt(0.001) * math.sqrt(math.log(20))
    assert math.isclose(c_sigma, 5.473, abs_tol=1e-3)
    assert math.isclose(escape_margin(p), 0.5 - 0.01 * c_sigma, rel_tol=1e-14)
    assert math.isclose(escape_margin(p), 0.4453, abs_tol=1e-4)
    t = escape_time(p)
    assert math.isclose(t, 1000 * math.log(10 / escape_margin(p)), rel_tol=1e-14)
    assert abs(t - 3112) < 1


def test_escape_zero_and_undefined():
    p = TheoryInputs(curvature=0.1, eta=0.01, y0=10.0, radius=10.0, c0=1.0, bias_eff=0.0, noise_eff_sq=0.0)
    assert escape_time(p) == 0.0
    q = default_escape_inputs().with_(curvature=1e-5)
    assert math.isnan(escape_time(q))
    with pytest.raises(ConfigurationError):
        escape_time(q.with_(curvature=0.0))


@settings(max_examples=300, deadline=None)
@given(g=st.floats(1e-3, 1), eta=st.floats(1e-4, 0.5), R=st.floats(1, 1e3), b=st.floats(0, 0.5),
       s=st.floats(0, 0.5), f=st.floats(1.01, 3))
def test_escape_monotone(g, eta, R, b, s, f):
    p = TheoryInputs(curvature=g, eta=eta, radius=R, bias_eff=b, noise_eff_sq=s * s, y0=0.5)
    t = escape_time(p)
    pairs = [(p.with_(radius=R * f), 1), (p.with_(curvature=g * f), -1), (p.with_(bias_eff=b * f + 1e-3), 1),
             (p.with_(noise_eff_sq=(s * f + 1e-3) ** 2), 1)]
    for q, sign in pairs:
        u = escape_time(q)
        if math.isfinite(t) and math.isfinite(u):
            assert sign * (u - t) >= -1e-9 * max(1.0, abs(t))


def test_sweep_csv_marks_undefined():
    rows = escape_sweep(grids={"curvature": [1e-5, 0.1]})
    text = sweep_csv(rows)
    assert text.splitlines()[0] == ",".join(SWEEP_HEADER)
    assert "undefined" in text.splitlines()[1] and text.splitlines()[2].endswith(",1")
    with pytest.raises(ConfigurationError):
        escape_sweep(grids={"eta": []})


def test_saddle_deterministic_time():
    r = saddle_sim(0.1, 0.01, y0=0.5, radius=10.0, trials=100)
    k = deterministic_escape(0.1, 0.01, 0.5, 10.0)
    assert np.all(r.times == k)
    assert k == math.ceil(math.log(20) / math.log1p(0.001))


def test_saddle_origin_is_censored():
    r = saddle_sim(0.1, 0.01, y0=0.0, trials=100, cap=500)
    assert r.censored == 100 and math.isinf(r.median)
    with pytest.raises(ConfigurationError):
        saddle_sim(0.1, 0.01, trials=10)


def test_saddle_reproducible():
    a = saddle_sim(0.1, 0.01, y0=1e-3, sigma_cl=0.1, trials=100, seed=4)
    b = saddle_sim(0.1, 0.01, y0=1e-3, sigma_cl=0.1, trials=100, seed=4)
    assert np.array_equal(a.times, b.times)
    # trial streams are per-trial, so a larger run extends a smaller one
    c = saddle_sim(0.1, 0.01, y0=1e-3, sigma_cl=0.1, trials=200, seed=4)
    assert np.array_equal(c.times[:100], a.times)


def test_calibrate_c0():
    p = default_escape_inputs()
    t = escape_time(p)
    assert calibrate_c0(p, t / 2) == 1.0
    c0 = calibrate_c0(p, 2 * t)
    assert math.isclose(escape_time(p.with_(c0=c0)), 2 * t, rel_tol=1e-12)
