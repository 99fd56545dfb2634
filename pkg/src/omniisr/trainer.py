"""Centralised training over the total objective, plus smoothness / noise
constant estimation for the bound calculators."""
from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .diffcore import ParamSet
from .isr import LossBreakdown
from .seeding import derive_rng


class TrainingAborted(RuntimeError):
    def __init__(self, iteration, message="non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    base_eta: float = 0.1
    schedule: str = "constant"          # constant | inverse-sqrt-T
    T: int = 100
    betas: tuple = (0.9, 0.999)
    weight_decay: float | None = None   # None -> 1e-4 for adam, 0 for sgd
    adam_eps: float = 1e-8
    batch_size: int | None = None       # None -> full batch

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.schedule not in ("constant", "inverse-sqrt-T"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.base_eta > 0:
            raise ValueError("eta must be > 0")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def decay(self) -> float:
        if self.weight_decay is not None:
            return self.weight_decay
        return 1e-4 if self.kind == "adam" else 0.0

    def eta_at(self, t: int) -> float:
        # eta/sqrt(T) is constant within a run
        if self.schedule == "inverse-sqrt-T":
            return self.base_eta / math.sqrt(self.T)
        return self.base_eta


class SGD:
    def __init__(self, weight_decay=0.0):
        self.wd = weight_decay

    def step(self, params: ParamSet, grads: ParamSet, eta: float) -> ParamSet:
        if self.wd:
            grads = grads + self.wd * params
        return params - eta * grads


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.b1, self.b2 = betas
        self.eps, self.wd = eps, weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, params: ParamSet, grads: ParamSet, eta: float) -> ParamSet:
        if self.wd:
            grads = grads + self.wd * params
        if self.m is None:
            self.m, self.v = grads.zeros_like(), grads.zeros_like()
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grads
        self.v = self.b2 * self.v + (1 - self.b2) * (grads * grads)
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        upd = {k: m_hat[k] / (np.sqrt(v_hat[k]) + self.eps) for k in params}
        return params - eta * ParamSet(upd, params.tags)


def make_optimizer(opt: OptimizerConfig):
    if opt.kind == "adam":
        return Adam(opt.betas, opt.adam_eps, opt.decay)
    return SGD(opt.decay)


@dataclass
class RunTrace:
    M: int = 0
    losses: list = field(default_factory=list)
    grad_norm_sq: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    def __len__(self):
        return len(self.losses)

    def record(self, br: LossBreakdown, gns: float, eta: float, wall: float):
        self.losses.append(br)
        self.grad_norm_sq.append(gns)
        self.eta.append(eta)
        self.wall_time.append(wall)

    def header(self) -> list:
        return (["iter", "ce"] + [f"mi_{m}" for m in range(1, self.M + 1)]
                + [f"ne_{m}" for m in range(1, self.M + 1)] + ["total", "grad_norm_sq", "eta"])

    def rows(self):
        for t, (br, g, e) in enumerate(zip(self.losses, self.grad_norm_sq, self.eta)):
            yield [t, *br.row(), g, e]

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows():
            w.writerow([fmt(v) for v in row])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def mean_grad_norm_sq(self) -> float:
        return float(np.mean(self.grad_norm_sq))

    def min_total(self) -> float:
        return float(min(br.total for br in self.losses))


def fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def batch_indices(n: int, batch_size: int | None, rng: np.random.Generator | None):
    """Minibatch index arrays covering one pass over n samples.

    Full batch (``batch_size`` None or >= n) keeps natural order, so the
    same data gives bit-identical sums everywhere.
    """
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + batch_size]) for i in range(0, n, batch_size)]


def sample_batch(n: int, batch_size: int | None, seed: int, t: int) -> np.ndarray:
    if batch_size is None or batch_size >= n:
        return np.arange(n)
    rng = derive_rng(seed, "cl", t)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def cl_gradient(objective, params, data: Dataset, batch_size, seed, t):
    idx = sample_batch(len(data), batch_size, seed, t)
    br, grads = objective.loss_and_grad(params, data.x[idx], data.y[idx])
    if not br.is_finite() or not grads.is_finite():
        raise TrainingAborted(t)
    return br, grads


def train_cl(objective, data: Dataset, opt: OptimizerConfig, seed: int = 0,
             init: ParamSet | None = None, iterations: int | None = None):
    """Run ``opt.T`` (or ``iterations``) optimisation steps; returns (params, trace)."""
    params = objective.init_params(seed) if init is None else init
    optimizer = make_optimizer(opt)
    trace = RunTrace(M=getattr(objective, "M", 0))
    for t in range(opt.T if iterations is None else iterations):
        start = time.perf_counter()
        br, grads = cl_gradient(objective, params, data, opt.batch_size, seed, t)
        eta = opt.eta_at(t)
        params = optimizer.step(params, grads, eta)
        trace.record(br, grads.norm_sq(), eta, time.perf_counter() - start)
    return params, trace


class QuadraticObjective:
    """L(theta) = mean_i 1/2 (theta - x_i)^T diag(h) (theta - x_i).

    Convex surrogate with known smoothness max(h); minibatch noise comes from
    the spread of the x_i.
    """

    M = 0

    def __init__(self, curvatures, theta0=None):
        self.h = np.asarray(curvatures, dtype=np.float64)
        self.theta0 = np.zeros_like(self.h) if theta0 is None else np.asarray(theta0, float)

    def init_params(self, seed=0) -> ParamSet:
        return ParamSet({"theta": self.theta0.copy()})

    def _loss(self, params, x):
        x = np.asarray(x, float).reshape(len(x), -1)
        d = params["theta"][None, :] - x
        return float(0.5 * np.mean((d * d * self.h).sum(axis=1))), self.h * d.mean(axis=0)

    def evaluate(self, params, x, y=None) -> LossBreakdown:
        v, _ = self._loss(params, x)
        return LossBreakdown(v, [], [], v)

    def loss_and_grad(self, params, x, y=None):
        v, g = self._loss(params, x)
        return LossBreakdown(v, [], [], v), ParamSet({"theta": g})

    def minimum(self, x) -> float:
        x = np.asarray(x, float).reshape(len(x), -1)
        d = x.mean(axis=0)[None, :] - x
        return float(0.5 * np.mean((d * d * self.h).sum(axis=1)))


@dataclass
class ConstantEstimates:
    L_max: float
    G_sq: float
    sigma_sq: float
    delta: float
    delta_is_proxy: bool = True


def estimate_constants(objective, probes, data: Dataset, batch_size=None, n_batches=8,
                       seed=0, best_loss=None) -> ConstantEstimates:
    """Empirical smoothness, gradient bound, gradient noise and initial gap.

    ``probes[0]`` plays theta_0.  The optimum is unknown, so the initial gap
    uses the lowest loss seen (over probes and ``best_loss``) as L*.
    """
    probes = list(probes)
    if len(probes) < 2:
        raise ValueError("need at least two probes")
    full, losses = [], []
    for p in probes:
        br, g = objective.loss_and_grad(p, data.x, data.y)
        full.append(g)
        losses.append(br.total)
    L = 0.0
    for i, j in itertools.combinations(range(len(probes)), 2):
        dist = np.sqrt((probes[i] - probes[j]).norm_sq())
        if dist == 0.0:
            continue
        L = max(L, np.sqrt((full[i] - full[j]).norm_sq()) / dist)
    G2, s2 = 0.0, 0.0
    for i, (p, gfull) in enumerate(zip(probes, full)):
        rng = derive_rng(seed, "probe", i)
        dev = []
        for _ in range(n_batches):
            if batch_size is None or batch_size >= len(data):
                idx = np.arange(len(data))
            else:
                idx = np.sort(rng.choice(len(data), size=batch_size, replace=False))
            _, gb = objective.loss_and_grad(p, data.x[idx], data.y[idx])
            G2 = max(G2, gb.norm_sq())
            dev.append((gb - gfull).norm_sq())
        s2 = max(s2, float(np.mean(dev)))
    floor = min(losses if best_loss is None else losses + [best_loss])
    return ConstantEstimates(float(L), float(G2), float(s2), float(losses[0] - floor))
