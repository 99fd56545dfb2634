"""Hybrid CL-FL training: mixes the cloud gradient with the federated
pseudo-gradient under alternating, fixed or adaptive schedules."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .diffcore import ConfigurationError, ParamSet
from .fedsim import FedConfig, ProtocolError, fl_round
from .seeding import derive_rng
from .trainer import OptimizerConfig, cl_gradient, fmt

REGIMES = ("alternating", "fixed", "adaptive")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class HybridSchedule:
    regime: str = "fixed"
    alpha: float = 0.5          # fixed value, or alpha_0 for adaptive
    beta: float = 0.2
    alpha_min: float = 0.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown mixing regime {self.regime!r}")
        if not 0 <= self.alpha <= 1 or not 0 <= self.alpha_min <= 1:
            raise ConfigurationError("alpha and alpha_min must lie in [0, 1]")
        if self.regime == "adaptive" and self.beta <= 0:
            raise ConfigurationError("adaptive mixing needs beta > 0")

    def initial_alpha(self) -> float:
        a = 1.0 if self.regime == "alternating" else self.alpha
        return max(a, self.alpha_min)


def update_alpha(schedule: HybridSchedule, alpha: float, s: float, t: int = 0) -> float:
    """alpha_{t+1} from alpha_t and the similarity s observed in round t."""
    if schedule.regime == "fixed":
        nxt = schedule.alpha
    elif schedule.regime == "alternating":
        nxt = 1.0 if (t + 1) % 2 == 0 else 0.0
    else:
        nxt = float(np.clip(alpha + schedule.beta * (1.0 - s), 0.0, 1.0))
    return max(nxt, schedule.alpha_min)


def pseudo_gradient(theta: ParamSet, theta_fed: ParamSet, eta: float) -> ParamSet:
    if eta == 0:
        raise DomainError("pseudo-gradient undefined for eta == 0")
    try:
        return (theta - theta_fed) / eta
    except ConfigurationError as exc:
        raise ProtocolError(str(exc)) from None


def hybrid_step(theta: ParamSet, g_cl: ParamSet, g_fl: ParamSet, alpha: float, eta: float) -> ParamSet:
    if not 0 <= alpha <= 1:
        raise DomainError(f"alpha={alpha} outside [0, 1]")
    try:
        return theta - eta * (alpha * g_cl + (1.0 - alpha) * g_fl)
    except ConfigurationError as exc:
        raise ProtocolError(str(exc)) from None


def cosine(a: ParamSet, b: ParamSet) -> float:
    na, nb = np.sqrt(a.norm_sq()), np.sqrt(b.norm_sq())
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(a.dot(b) / (na * nb), -1.0, 1.0))


@dataclass
class AlignmentRecord:
    round: int
    inner: float
    norm_cl: float
    norm_fl: float
    cosine: float
    alpha: float

    HEADER = ["round", "inner", "norm_cl", "norm_fl", "cosine", "alpha"]

    @classmethod
    def from_grads(cls, t, g_cl: ParamSet, g_fl: ParamSet, alpha) -> "AlignmentRecord":
        return cls(t, g_cl.dot(g_fl), float(np.sqrt(g_cl.norm_sq())), float(np.sqrt(g_fl.norm_sq())),
                   cosine(g_cl, g_fl), alpha)

    def row(self):
        return [self.round] + [fmt(v) for v in (self.inner, self.norm_cl, self.norm_fl, self.cosine, self.alpha)]


def alignment_csv(records, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AlignmentRecord.HEADER)
    for r in records:
        w.writerow(r.row())
    if fh is not None:
        fh.write(buf.getvalue())
    return buf.getvalue()


@dataclass
class HybridTrace:
    alphas: list = field(default_factory=list)
    alignment: list = field(default_factory=list)
    cl_losses: list = field(default_factory=list)
    fl_diagnostics: list = field(default_factory=list)


def train_hybrid(objective, cloud: Dataset, shards, fed: FedConfig, schedule: HybridSchedule,
                 opt: OptimizerConfig, seed: int = 0, init: ParamSet | None = None, rounds: int | None = None,
                 diagnostics: bool = True):
    """Each round: cloud gradient, one FL round, mixed step, then alpha update.

    A side whose weight is exactly zero this round is skipped, which is what
    makes fixed(1) reproduce CL and fixed(0) reproduce FL step for step.
    """
    if len(cloud) == 0 or not shards:
        raise ConfigurationError("hybrid mode needs cloud data and at least one client")
    params = objective.init_params(seed) if init is None else init
    alpha = schedule.initial_alpha()
    trace = HybridTrace()
    for t in range(fed.rounds if rounds is None else rounds):
        eta = opt.eta_at(t)
        need_both = schedule.regime == "adaptive"
        g_cl = g_fl = None
        if alpha > 0 or need_both:
            br, g_cl = cl_gradient(objective, params, cloud, opt.batch_size, seed, t)
            trace.cl_losses.append(br)
        if alpha < 1 or need_both:
            fed_params, diag = fl_round(objective, shards, params, fed, eta, seed, t, opt, diagnostics)
            g_fl = pseudo_gradient(params, fed_params, eta)
            trace.fl_diagnostics.append(diag)
        if g_cl is not None and g_fl is not None:
            trace.alignment.append(AlignmentRecord.from_grads(t, g_cl, g_fl, alpha))
        zeros = params.zeros_like()
        trace.alphas.append(alpha)
        params = hybrid_step(params, zeros if g_cl is None else g_cl, zeros if g_fl is None else g_fl, alpha, eta)
        s = trace.alignment[-1].cosine if trace.alignment and trace.alignment[-1].round == t else 1.0
        alpha = update_alpha(schedule, alpha, s, t)
    return params, trace


# -- Monte-Carlo check of the inner-product decomposition ---------------------

@dataclass
class AlignmentScenario:
    grad: np.ndarray
    b_c: np.ndarray
    b_f: np.ndarray
    sigma_c: float = 0.0
    sigma_f: float = 0.0

    def __post_init__(self):
        self.grad, self.b_c, self.b_f = (np.asarray(v, dtype=np.float64) for v in (self.grad, self.b_c, self.b_f))

    def expected_inner(self) -> float:
        g, bc, bf = self.grad, self.b_c, self.b_f
        return float(g @ g + g @ (bc + bf) + bc @ bf)

    def low_bias(self, c: float = 1.0) -> bool:
        return np.linalg.norm(self.b_c) + np.linalg.norm(self.b_f) <= c * np.linalg.norm(self.grad)


@dataclass
class AlignmentEstimate:
    mean: float
    stderr: float
    expected: float
    lower: float         # bootstrap lower confidence bound on the mean
    draws: int

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.mean == self.expected else np.inf
        return abs(self.mean - self.expected) / self.stderr

    @property
    def positive(self) -> bool:
        return self.lower > 0


def alignment_probe(scenario: AlignmentScenario, draws: int = 100_000, seed: int = 0,
                    n_boot: int = 1000, confidence: float = 0.99) -> AlignmentEstimate:
    """Sample g_CL = grad + b_c + noise_c and g_FL = grad + b_f + noise_f with
    independent isotropic Gaussian noise (E|noise|^2 = sigma^2) and estimate
    E<g_CL, g_FL>."""
    rng = derive_rng(seed, "trial", 0)
    d = scenario.grad.size
    mc = scenario.grad + scenario.b_c
    mf = scenario.grad + scenario.b_f
    nc = rng.standard_normal((draws, d)) * (scenario.sigma_c / np.sqrt(d))
    nf = rng.standard_normal((draws, d)) * (scenario.sigma_f / np.sqrt(d))
    inner = np.einsum("ij,ij->i", mc + nc, mf + nf)
    mean = float(inner.mean())
    se = float(inner.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    boot = np.empty(n_boot)
    brng = derive_rng(seed, "trial", 1)
    chunk = max(1, 5_000_000 // draws)
    for i in range(0, n_boot, chunk):
        k = min(chunk, n_boot - i)
        idx = brng.integers(0, draws, size=(k, draws))
        boot[i:i + k] = inner[idx].mean(axis=1)
    lower = float(np.quantile(boot, 1.0 - confidence))
    return AlignmentEstimate(mean, se, scenario.expected_inner(), lower, draws)


def summarize_alignment(records) -> dict:
    inner = np.array([r.inner for r in records])
    return {"rounds": len(records), "mean_inner": float(inner.mean()) if len(inner) else float("nan"),
            "frac_nonnegative": float((inner >= 0).mean()) if len(inner) else float("nan"),
            "mean_cosine": float(np.mean([r.cosine for r in records])) if records else float("nan")}
