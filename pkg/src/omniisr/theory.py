"""Closed-form convergence bounds, iteration-complexity inversions, saddle
escape times and a noisy-descent saddle testbed."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .diffcore import ConfigurationError
from .seeding import derive_rng
from .trainer import fmt

UNDEFINED = float("nan")


@dataclass(frozen=True)
class TheoryInputs:
    smoothness: float = 1.0       # L_max
    grad_bound_sq: float = 1.0    # G_T^2
    noise_sq: float = 0.0         # sigma_T^2
    init_gap: float = 1.0         # Delta
    eta: float = 1.0
    T: float = 100.0
    local_epochs: float = 1.0
    heterogeneity: float = 0.0    # H bar
    drift_const: float = 1.0      # c
    bound_const: float = 1.0      # C
    bias_cl: float = 0.0
    bias_fl: float = 0.0
    noise_cl_sq: float = 0.0
    noise_fl_sq: float = 0.0
    alpha_min: float = 0.5
    bias_eff: float | None = None
    noise_eff_sq: float | None = None
    curvature: float = 0.1        # gamma
    hessian_lip: float = 1.0      # rho, only informs c0 calibration
    y0: float = 0.5
    c0: float = 1.0
    radius: float = 10.0
    delta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise ConfigurationError(f"theory input {f.name}={v!r} must be finite and nonnegative")
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta={self.delta} must lie in (0, 1)")
        if self.alpha_min > 1:
            raise ConfigurationError(f"alpha_min={self.alpha_min} must be <= 1")

    def with_(self, **kw) -> "TheoryInputs":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @property
    def b_eff(self) -> float:
        if self.bias_eff is not None:
            return self.bias_eff
        a = self.alpha_min
        return a * self.bias_cl + (1 - a) * self.bias_fl

    @property
    def s_eff_sq(self) -> float:
        if self.noise_eff_sq is not None:
            return self.noise_eff_sq
        a = self.alpha_min
        return a * a * self.noise_cl_sq + (1 - a) ** 2 * self.noise_fl_sq


@dataclass
class BoundReport:
    mode: str
    terms: dict
    feasible: bool
    condition: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    def term(self, name) -> float:
        return self.terms.get(name, 0.0)

    def table(self) -> str:
        """Plain-text layout: one column per term plus total and feasibility."""
        names = ["initial_gap", "variance", "drift", "bias_floor"]
        head = f"{'mode':<8}" + "".join(f"{n:>14}" for n in names) + f"{'total':>14}  feasible  condition"
        vals = "".join(f"{self.term(n):>14.6g}" for n in names)
        return f"{head}\n{self.mode:<8}{vals}{self.total:>14.6g}  {str(self.feasible):<8}  {self.condition}"

    def __str__(self):
        return self.table()


BOUND_HEADER = ["mode", "initial_gap", "variance", "drift", "bias_floor", "total", "feasible", "condition"]


def bounds_csv(reports, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BOUND_HEADER)
    for r in reports:
        w.writerow([r.mode] + [fmt(r.term(n)) for n in BOUND_HEADER[1:5]] + [fmt(r.total), int(r.feasible), r.condition])
    if fh is not None:
        fh.write(buf.getvalue())
    return buf.getvalue()


def mode_table(reports) -> str:
    """Side-by-side comparison of the three modes."""
    rows = {"update": {"cl": "theta - eta g", "fl": "theta + sum_n w_n delta_n",
                       "hybrid": "theta - eta (a g_CL + (1-a) g_FL)"}}
    lines = [f"{'':<14}" + "".join(f"{r.mode:>36}" for r in reports)]
    lines.append(f"{'update':<14}" + "".join(f"{rows['update'].get(r.mode, ''):>36}" for r in reports))
    for n in ["initial_gap", "variance", "drift", "bias_floor"]:
        lines.append(f"{n:<14}" + "".join(f"{r.term(n):>36.6g}" for r in reports))
    lines.append(f"{'total':<14}" + "".join(f"{r.total:>36.6g}" for r in reports))
    lines.append(f"{'step-size':<14}" + "".join(f"{r.condition:>36}" for r in reports))
    lines.append(f"{'feasible':<14}" + "".join(f"{str(r.feasible):>36}" for r in reports))
    return "\n".join(lines)


def _check_T(p: TheoryInputs):
    if p.T <= 0 or p.eta <= 0:
        raise ConfigurationError("bounds need T > 0 and eta > 0")


def bound_cl(p: TheoryInputs) -> BoundReport:
    _check_T(p)
    rt = math.sqrt(p.T)
    gap = 2 * p.init_gap / (p.eta * rt)
    var = p.smoothness * p.eta * (p.grad_bound_sq + p.noise_sq) / rt
    ok = p.smoothness * p.eta <= rt
    return BoundReport("cl", {"initial_gap": gap, "variance": var}, ok, "L*eta <= sqrt(T)")


def bound_fl(p: TheoryInputs, A: float | None = None, use_A: bool = True) -> BoundReport:
    """Drift term L eta c E^2 (A + H) / sqrt(T).

    A is the averaged squared gradient norm, i.e. the very quantity being
    bounded.  Unless given, it is seeded with the CL bound and the FL bound is
    evaluated once with that seed.  The exact fixed point of the
    self-referential inequality is reported in ``notes`` when it exists.
    """
    cl = bound_cl(p)
    rt = math.sqrt(p.T)
    k = p.smoothness * p.eta * p.drift_const * p.local_epochs ** 2 / rt
    A_seed = cl.total if A is None else A
    A_used = A_seed if use_A else 0.0
    drift = k * (A_used + p.heterogeneity)
    terms = dict(cl.terms, drift=drift)
    ok = p.smoothness * p.eta * rt * p.drift_const * p.local_epochs ** 2 < 1
    notes = {"A": A_used, "drift_factor": k}
    if use_A and k < 1:
        notes["fixed_point"] = (cl.total + k * p.heterogeneity) / (1 - k)
    elif use_A:
        notes["fixed_point"] = math.inf
    return BoundReport("fl", terms, ok, "L*eta*sqrt(T)*c*E^2 < 1", notes)


def effective_quantities(p: TheoryInputs, alphas, b_cl=None, b_fl=None):
    """(B_eff, sigma_eff^2) for an alpha sequence.

    With bias vectors the max is taken over the actual combinations; with
    only norm bounds the triangle-inequality worst case is used.
    """
    a = np.asarray(alphas, dtype=np.float64).ravel()
    if a.size == 0:
        raise ConfigurationError("alpha sequence must be nonempty")
    if np.any(a < 0) or np.any(a > 1):
        raise ConfigurationError("alpha values must lie in [0, 1]")
    if b_cl is not None and b_fl is not None:
        bc = np.atleast_2d(np.asarray(b_cl, float))
        bf = np.atleast_2d(np.asarray(b_fl, float))
        if bc.shape[0] == 1:
            bc = np.repeat(bc, a.size, axis=0)
        if bf.shape[0] == 1:
            bf = np.repeat(bf, a.size, axis=0)
        mix = a[:, None] * bc + (1 - a)[:, None] * bf
        b_eff = float(np.linalg.norm(mix, axis=1).max())
    else:
        b_eff = float(np.max(a * p.bias_cl + (1 - a) * p.bias_fl))
    am = float(a.min())
    s_eff = am * am * p.noise_cl_sq + (1 - am) ** 2 * p.noise_fl_sq
    return b_eff, float(s_eff)


def bound_hybrid(p: TheoryInputs) -> BoundReport:
    _check_T(p)
    rt = math.sqrt(p.T)
    C = p.bound_const
    if p.alpha_min == 0:
        terms = {"initial_gap": math.inf, "variance": C * p.eta * p.s_eff_sq / rt, "bias_floor": C * p.b_eff ** 2}
        return BoundReport("hybrid", terms, False, "alpha_min > 0", {"reason": "alpha_min == 0"})
    terms = {"initial_gap": C * p.init_gap / (p.alpha_min * p.eta * rt),
             "variance": C * p.eta * p.s_eff_sq / rt,
             "bias_floor": C * p.b_eff ** 2}
    ok = p.smoothness * p.eta <= rt / 4
    return BoundReport("hybrid", terms, ok, "L*eta <= sqrt(T)/4", {"floor_T_independent": True})


def bound(mode: str, p: TheoryInputs) -> BoundReport:
    try:
        return {"cl": bound_cl, "fl": bound_fl, "hybrid": bound_hybrid}[mode](p)
    except KeyError:
        raise ConfigurationError(f"unknown mode {mode!r}") from None


@dataclass
class Complexity:
    mode: str
    T: float                     # real-valued solution of bound(T) == eps
    feasible: bool
    reason: str = ""
    scaling: float | None = None  # big-O expression value (hybrid)

    @property
    def rounds(self) -> int | None:
        return math.ceil(self.T) if self.feasible and math.isfinite(self.T) else None


def complexity(mode: str, p: TheoryInputs, eps: float, kappa: float = 1.0, optimal_eta: bool = False) -> Complexity:
    """Smallest T with bound(T) <= eps, by exact inversion.

    CL/FL bounds have the form a / sqrt(T).  For FL the self-referential A is
    set to eps (the target average).  ``kappa`` scales the heterogeneity.
    With ``optimal_eta`` the step size minimising a is used instead of p.eta,
    which gives T = 8 Delta L V / eps^2, linear in the variance budget V.
    """
    if not eps > 0:
        raise ConfigurationError("eps must be > 0")
    if mode in ("cl", "fl"):
        V = p.grad_bound_sq + p.noise_sq
        if mode == "fl":
            V += p.drift_const * p.local_epochs ** 2 * (eps + kappa * p.heterogeneity)
        if optimal_eta:
            if p.init_gap == 0 or V == 0:
                return Complexity(mode, 0.0, True)
            num = 2 * math.sqrt(2 * p.init_gap * p.smoothness * V)
        else:
            num = 2 * p.init_gap / p.eta + p.smoothness * p.eta * V
        return Complexity(mode, (num / eps) ** 2, True)
    if mode == "hybrid":
        C = p.bound_const
        floor = C * p.b_eff ** 2
        if eps <= floor:
            return Complexity(mode, math.inf, False, "below bias floor")
        if p.alpha_min == 0:
            return Complexity(mode, math.inf, False, "alpha_min == 0")
        num = C * p.init_gap / (p.alpha_min * p.eta) + C * p.eta * p.s_eff_sq
        scaling = p.init_gap * p.s_eff_sq / (p.alpha_min ** 2 * (eps - floor) ** 2)
        return Complexity(mode, (num / (eps - floor)) ** 2, True, scaling=scaling)
    raise ConfigurationError(f"unknown mode {mode!r}")


def optimal_eta(p: TheoryInputs, mode: str = "cl", eps: float = 0.0, kappa: float = 1.0) -> float:
    V = p.grad_bound_sq + p.noise_sq
    if mode == "fl":
        V += p.drift_const * p.local_epochs ** 2 * (eps + kappa * p.heterogeneity)
    return math.sqrt(2 * p.init_gap / (p.smoothness * V))


# -- saddle escape -------------------------------------------------------------

def escape_margin(p: TheoryInputs) -> float:
    """y0 - eta*B/gamma - eta*(sigma/sqrt(eta gamma))*sqrt(ln(2/delta))."""
    g, eta = p.curvature, p.eta
    c_b = p.b_eff / g
    c_s = math.sqrt(p.s_eff_sq) / math.sqrt(eta * g) * math.sqrt(math.log(2 / p.delta))
    return p.y0 - eta * c_b - eta * c_s


def escape_time(p: TheoryInputs) -> float:
    """Escape-time bound, or nan where the closed form is meaningless."""
    if not p.curvature > 0:
        raise ConfigurationError("escape time needs curvature gamma > 0")
    if not p.eta > 0:
        raise ConfigurationError("escape time needs eta > 0")
    m = escape_margin(p)
    if m <= 0:
        return UNDEFINED
    arg = p.c0 * p.radius / m
    if arg < 1:
        return UNDEFINED
    return math.log(arg) / (p.eta * p.curvature)


SWEEP_AXES = ("curvature", "eta", "radius", "delta")
SWEEP_HEADER = ["axis", "curvature", "eta", "radius", "delta", "t_escape", "defined"]


def default_escape_inputs() -> TheoryInputs:
    return TheoryInputs(eta=0.01, radius=10.0, delta=0.1, y0=0.5, bias_eff=0.0, noise_eff_sq=0.01, c0=1.0,
                        curvature=0.1)


def default_grids() -> dict:
    return {"curvature": np.logspace(-3, 0, 31), "eta": np.logspace(-4, 0, 41),
            "radius": np.logspace(0, 3, 31), "delta": np.logspace(-3, math.log10(0.5), 21)}


@dataclass
class SweepRow:
    axis: str
    curvature: float
    eta: float
    radius: float
    delta: float
    t_escape: float

    @property
    def defined(self) -> bool:
        return math.isfinite(self.t_escape)


def escape_sweep(base: TheoryInputs | None = None, grids: dict | None = None, curvatures=None) -> list:
    """One-at-a-time sweeps; each axis is swept for every curvature listed in
    ``curvatures`` (default: the base curvature)."""
    base = base or default_escape_inputs()
    grids = default_grids() if grids is None else grids
    curvatures = [base.curvature] if curvatures is None else list(curvatures)
    rows = []
    for axis, values in grids.items():
        if axis not in SWEEP_AXES:
            raise ConfigurationError(f"unknown sweep axis {axis!r}")
        values = list(values)
        if not values:
            raise ConfigurationError(f"empty grid for {axis}")
        for g in ([None] if axis == "curvature" else curvatures):
            for v in values:
                p = base.with_(**{axis: float(v)}) if g is None else base.with_(curvature=float(g), **{axis: float(v)})
                rows.append(SweepRow(axis, p.curvature, p.eta, p.radius, p.delta, escape_time(p)))
    return rows


def sweep_csv(rows, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.axis, fmt(r.curvature), fmt(r.eta), fmt(r.radius), fmt(r.delta),
                    fmt(r.t_escape) if r.defined else "undefined", int(r.defined)])
    if fh is not None:
        fh.write(buf.getvalue())
    return buf.getvalue()


@dataclass
class SaddleResult:
    times: np.ndarray       # escape iteration per trial, -1 when censored
    cap: int

    @property
    def escaped(self) -> np.ndarray:
        return self.times[self.times >= 0]

    @property
    def censored(self) -> int:
        return int((self.times < 0).sum())

    def quantile(self, q: float) -> float:
        """Quantile treating censored trials as +inf."""
        t = np.where(self.times < 0, np.inf, self.times.astype(float))
        return float(np.quantile(t, q, method="higher"))

    @property
    def median(self) -> float:
        return self.quantile(0.5)


def saddle_sim(curvature: float, eta: float, y0: float = 0.5, radius: float = 10.0, sigma_cl: float = 0.0,
               sigma_fl: float = 0.0, alpha: float = 1.0, bias: float = 0.0, trials: int = 1000,
               seed: int = 0, cap: int = 100_000, smoothness: float = 1.0, x0: float = 0.0) -> SaddleResult:
    """Noisy descent on f(x, y) = L x^2 / 2 - gamma y^2 / 2.

    The y update is y <- (1 + eta gamma) y - eta (b + alpha sigma_c z1 +
    (1 - alpha) sigma_f z2) with independent standard normals; the x
    coordinate contracts and never affects escape, so it is not simulated
    beyond reporting.  Every trial draws from its own counter-derived stream.
    """
    if trials < 100:
        raise ConfigurationError("saddle_sim needs at least 100 trials")
    if curvature <= 0 or eta <= 0 or radius <= 0:
        raise ConfigurationError("curvature, eta and radius must be > 0")
    growth = 1.0 + eta * curvature
    times = np.full(trials, -1, dtype=np.int64)
    # all trials advance together; noise for trial i comes from its own stream
    rngs = [derive_rng(seed, "trial", i) for i in range(trials)]
    y = np.full(trials, float(y0))
    alive = np.ones(trials, dtype=bool)
    noisy = (alpha * sigma_cl != 0) or ((1 - alpha) * sigma_fl != 0)
    block = 256
    t = 0
    while t < cap and alive.any():
        n = min(block, cap - t)
        if noisy:
            idx = np.flatnonzero(alive)
            z = np.stack([rngs[i].standard_normal((2, n)) for i in idx])      # (k, 2, n)
            kick = alpha * sigma_cl * z[:, 0] + (1 - alpha) * sigma_fl * z[:, 1]
        else:
            idx = np.flatnonzero(alive)
            kick = np.zeros((len(idx), n))
        yy = y[idx]
        done = np.full(len(idx), -1, dtype=np.int64)
        for s in range(n):
            yy = growth * yy - eta * (bias + kick[:, s])
            hit = (done < 0) & (np.abs(yy) >= radius)
            done[hit] = t + s + 1
        y[idx] = yy
        times[idx[done >= 0]] = done[done >= 0]
        alive[idx[done >= 0]] = False
        t += n
    return SaddleResult(times, cap)


def deterministic_escape(curvature: float, eta: float, y0: float, radius: float) -> int:
    """Noise-free iterations until |y| >= R: ceil(ln(R/y0) / ln(1 + eta gamma))."""
    if y0 == 0:
        return -1
    if abs(y0) >= radius:
        return 0
    k = math.ceil(math.log(radius / abs(y0)) / math.log1p(eta * curvature))
    # guard the ceil against rounding at exact powers
    while abs(y0) * (1 + eta * curvature) ** (k - 1) >= radius:
        k -= 1
    while abs(y0) * (1 + eta * curvature) ** k < radius:
        k += 1
    return k


def calibrate_c0(p: TheoryInputs, empirical_time: float) -> float:
    """Smallest c0 for which escape_time(p) >= empirical_time."""
    m = escape_margin(p)
    if m <= 0:
        return UNDEFINED
    return max(1.0, m * math.exp(p.eta * p.curvature * empirical_time) / p.radius)
