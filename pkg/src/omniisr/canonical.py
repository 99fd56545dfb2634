"""The fixed non-IID benchmark task shared by the drift and heterogeneity
experiments, walkthroughs and acceptance tests."""
from __future__ import annotations

import numpy as np

from .data import gen_classification
from .fedsim import FedConfig, partition, train_fl
from .isr import ISRObjective
from .model import NetworkSpec, TapPlan
from .trainer import OptimizerConfig

NUM_CLASSES = 4
DIMS = 8
SAMPLES = 400
SEPARATION = 2.0
WIDTHS = (16, 16, 16, 16, 16)
CLIENTS = 8
CONCENTRATION = 0.3


def spec() -> NetworkSpec:
    return NetworkSpec(DIMS, WIDTHS, NUM_CLASSES)


def isr_plan(alpha=0.4, lam=0.1) -> TapPlan:
    return TapPlan.build(spec().depth, 2, "input", 2, alpha, lam)


def task(seed: int = 0, local_epochs: int = 1, rounds: int = 5, batch_size=None):
    """(data, shards, fed config) for one seed; data and partition both follow the seed."""
    data = gen_classification(NUM_CLASSES, DIMS, SAMPLES, SEPARATION, seed=seed)
    cfg = FedConfig(num_clients=CLIENTS, local_epochs=local_epochs, rounds=rounds, partition="dirichlet",
                    concentration=CONCENTRATION, batch_size=batch_size)
    return data, partition(data, cfg, seed=seed), cfg


def drift_vs_epochs(epochs=(1, 2, 4, 8), eta=5e-4, rounds=5, seed=0):
    """Round-mean client drift for each E (full-batch local steps, small eta)."""
    _, shards, cfg = task(seed, rounds=rounds)
    obj = ISRObjective(spec(), isr_plan())
    out = []
    for E in epochs:
        c = FedConfig(**{**cfg.__dict__, "local_epochs": E})
        _, diags = train_fl(obj, shards, c, OptimizerConfig(base_eta=eta), seed=seed, diagnostics=False)
        out.append(float(np.mean([d.drift for d in diags])))
    return np.array(out)


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def heterogeneity_pair(seed: int, rounds=30, local_epochs=2, eta=0.05, alpha=0.4, lam=0.1):
    """Mean H_t over a run with ISR on and with ISR off (no taps), same seed."""
    _, shards, cfg = task(seed, local_epochs=local_epochs, rounds=rounds)
    res = []
    for plan in (isr_plan(alpha, lam), TapPlan()):
        obj = ISRObjective(spec(), plan)
        _, diags = train_fl(obj, shards, cfg, OptimizerConfig(base_eta=eta), seed=seed)
        res.append(float(np.mean([d.H for d in diags])))
    return tuple(res)
