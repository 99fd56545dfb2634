"""Saddle escape: closed-form escape times across the four sweep axes, then
a Monte-Carlo check that mixing a second noise source speeds up escape.

    python3 walkthroughs/escape.py
"""
import numpy as np

from omniisr.theory import (calibrate_c0, default_escape_inputs, default_grids, escape_sweep, escape_time,
                            saddle_sim)

rows = escape_sweep(default_escape_inputs(), default_grids(), [0.02, 0.1])


def show(axis, curvature, every=1):
    sel = [r for r in rows if r.axis == axis and (axis == "curvature" or r.curvature == curvature)]
    print(f"\n{axis} sweep" + ("" if axis == "curvature" else f" at curvature {curvature}"))
    for r in sel[::every]:
        val = getattr(r, axis)
        t = f"{r.t_escape:12.1f}" if r.defined else "   undefined"
        print(f"  {axis}={val:<10.4g} T_escape {t}")


show("curvature", None, every=5)
show("eta", 0.02, every=5)
show("radius", 0.1, every=5)
show("delta", 0.1, every=3)

# deeper saddle start: most trials need noise to leave it
common = dict(curvature=0.1, eta=0.01, y0=1e-3, radius=10.0, trials=1000, seed=0)
single = saddle_sim(sigma_cl=0.1, alpha=1.0, **common)
mixed = saddle_sim(sigma_cl=0.1, sigma_fl=0.3, alpha=0.5, **common)
print(f"\nmedian escape: single noise {single.median:.0f}, two noises {mixed.median:.0f}")
print(f"censored: {single.censored} / {mixed.censored}")

# the bound applies once the start is outside the noise ball; calibrate c0 on
# the single-noise run and check the two-noise run against it
common["y0"] = 0.5
single = saddle_sim(sigma_cl=0.1, alpha=1.0, **common)
mixed = saddle_sim(sigma_cl=0.1, sigma_fl=0.3, alpha=0.5, **common)
p = default_escape_inputs().with_(y0=0.5, noise_eff_sq=0.1 ** 2)
c0 = calibrate_c0(p, single.quantile(0.9))
q = p.with_(noise_eff_sq=0.05 ** 2 + 0.15 ** 2, c0=c0)
print(f"\ncalibrated c0 = {c0:.3f}")
print(f"two-noise q90 {mixed.quantile(0.9):.0f} vs bound {escape_time(q):.0f}")
print(f"spread of escape times (two noises): {np.percentile(mixed.escaped, [10, 50, 90])}")
