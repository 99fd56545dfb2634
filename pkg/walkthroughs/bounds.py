"""Evaluate the three convergence bounds side by side, invert them for a
target eps, and show how a heterogeneity contraction kappa shortens the
federated run.

    python3 walkthroughs/bounds.py
"""
from omniisr.theory import TheoryInputs, bound_cl, bound_fl, bound_hybrid, complexity, mode_table

p = TheoryInputs(smoothness=2.0, grad_bound_sq=4.0, noise_sq=0.5, init_gap=3.0, eta=0.1, T=1e4,
                 local_epochs=2, heterogeneity=1.0, drift_const=0.01, bound_const=1.0,
                 bias_cl=0.05, bias_fl=0.2, noise_cl_sq=0.2, noise_fl_sq=0.8, alpha_min=0.5)

reports = [bound_cl(p), bound_fl(p), bound_hybrid(p)]
print(mode_table(reports))
fl = reports[1]
print(f"\nfl drift term uses one pass seeded with the cl total; exact fixed point {fl.notes['fixed_point']:.6f}")

print("\niterations to reach eps")
for eps in (1.0, 0.5, 0.2):
    row = []
    for mode in ("cl", "fl", "hybrid"):
        c = complexity(mode, p, eps)
        row.append(f"{mode} {c.T:12.1f}" if c.feasible else f"{mode} {'infeasible':>12} ({c.reason})")
    print(f"eps={eps}: " + "   ".join(row))

# when heterogeneity dominates the variance budget and eta is tuned, T is
# close to linear in it, so kappa = 0.5 roughly halves the run
q = p.with_(noise_sq=0.0, grad_bound_sq=0.1, drift_const=1.0, heterogeneity=10.0)
print("\nheterogeneity contraction, fl at eps=0.5, heterogeneity-dominated, best step size")
base = complexity("fl", q, 0.5, optimal_eta=True).T
for kappa in (1.0, 0.75, 0.5, 0.25):
    T = complexity("fl", q, 0.5, kappa=kappa, optimal_eta=True).T
    print(f"kappa={kappa:.2f}: T = {T:10.1f}  ratio {T / base:.3f}")

floor = p.bound_const * p.b_eff ** 2
print(f"\nhybrid bias floor C*B_eff^2 = {floor:.5f}; eps at or below it is unreachable:")
for eps in (floor * 2, floor, floor / 2):
    c = complexity("hybrid", p, eps)
    print(f"  eps={eps:.5f}: feasible={c.feasible} {c.reason}")
