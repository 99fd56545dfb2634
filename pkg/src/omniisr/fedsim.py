"""Single-process federated simulation: sharding, local SGD, weighted
aggregation and per-round drift / heterogeneity diagnostics."""
from __future__ import annotations

import copy
import csv
import io
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .diffcore import MODEL, ConfigurationError, ParamSet, weighted_sum
from .seeding import derive_rng
from .trainer import OptimizerConfig, TrainingAborted, batch_indices, fmt, make_optimizer


class ProtocolError(RuntimeError):
    pass


@dataclass
class ClientShard:
    id: int
    data: Dataset
    weight: float

    def __len__(self):
        return len(self.data)


def make_shards(datasets) -> list:
    sizes = np.array([len(d) for d in datasets], dtype=np.float64)
    if np.any(sizes < 1):
        raise ConfigurationError("every shard needs at least one sample")
    w = sizes / sizes.sum()
    return [ClientShard(i, d, float(wi)) for i, (d, wi) in enumerate(zip(datasets, w))]


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 4
    local_epochs: int = 1
    participation: float = 1.0
    rounds: int = 10
    partition: str = "dirichlet"        # iid | dirichlet | label-shard
    concentration: float = 0.3
    classes_per_client: int = 2
    batch_size: int | None = None
    parallel: bool = False
    scope: str = "model"                # parameters seen by drift / H_t: model | all

    def __post_init__(self):
        if self.scope not in ("model", "all"):
            raise ConfigurationError(f"unknown diagnostic scope {self.scope!r}")
        if self.num_clients < 1 or self.local_epochs < 1 or self.rounds < 1:
            raise ConfigurationError("need N >= 1, E >= 1, T >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigurationError("participation fraction must lie in (0, 1]")
        if self.partition not in ("iid", "dirichlet", "label-shard"):
            raise ConfigurationError(f"unknown partition {self.partition!r}")
        if self.concentration <= 0:
            raise ConfigurationError("dirichlet concentration must be > 0")

    @property
    def participants(self) -> int:
        return max(1, int(round(self.participation * self.num_clients)))


def partition(data: Dataset, cfg: FedConfig, seed: int = 0, max_redraws: int = 100) -> list:
    """Disjoint cover of ``data`` by ``cfg.num_clients`` shards."""
    N, n = cfg.num_clients, len(data)
    if N > n:
        raise ConfigurationError(f"{N} clients but only {n} samples")
    labels = data.sample_labels()
    for attempt in range(max_redraws):
        rng = derive_rng(seed, "partition", attempt)
        if cfg.partition == "iid":
            parts = np.array_split(rng.permutation(n), N)
        elif cfg.partition == "dirichlet":
            parts = [[] for _ in range(N)]
            for k in range(data.num_classes):
                idx = rng.permutation(np.flatnonzero(labels == k))
                props = rng.dirichlet(np.full(N, cfg.concentration))
                cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
                for c, chunk in enumerate(np.split(idx, cuts)):
                    parts[c].extend(chunk.tolist())
        else:
            order = np.argsort(labels, kind="stable")
            pieces = np.array_split(order, N * cfg.classes_per_client)
            assign = rng.permutation(len(pieces))
            parts = [np.concatenate([pieces[j] for j in assign[c::N]]) for c in range(N)]
        if all(len(p) > 0 for p in parts):
            return make_shards([data.subset(np.sort(np.asarray(p, dtype=np.int64))) for p in parts])
    raise ConfigurationError(f"partition left an empty shard after {max_redraws} draws")


@dataclass
class LocalResult:
    params: ParamSet
    delta: ParamSet
    steps: int


def local_update(objective, shard: ClientShard, params: ParamSet, E: int, eta: float, seed: int = 0,
                 round_idx: int = 0, batch_size=None, opt: OptimizerConfig | None = None) -> LocalResult:
    """E passes of minibatch SGD over the shard starting from ``params``."""
    if E < 1:
        raise ConfigurationError("E must be >= 1")
    opt = opt or OptimizerConfig(kind="sgd", base_eta=max(eta, 1e-300))
    optimizer = make_optimizer(opt)
    rng = derive_rng(seed, "client", round_idx, shard.id)
    theta, steps = params, 0
    data = shard.data
    for _ in range(E):
        for idx in batch_indices(len(data), batch_size, rng):
            br, g = objective.loss_and_grad(theta, data.x[idx], data.y[idx])
            if not br.is_finite() or not g.is_finite():
                raise TrainingAborted(round_idx, f"client {shard.id}: non-finite loss")
            theta = optimizer.step(theta, g, eta)
            steps += 1
    return LocalResult(theta, theta - params, steps)


def aggregate(updates) -> ParamSet:
    """Weighted mean of client parameters; weights renormalised to sum to 1."""
    updates = list(updates)
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    sets = [u for u, _ in updates]
    w = np.array([float(wi) for _, wi in updates])
    if np.any(w < 0) or w.sum() <= 0:
        raise ProtocolError("aggregation weights must be nonnegative with positive sum")
    try:
        return weighted_sum(sets, w / w.sum())
    except ConfigurationError as exc:
        raise ProtocolError(str(exc)) from None


def heterogeneity_from_grads(grads, weights) -> float:
    w = np.asarray(weights, float)
    w = w / w.sum()
    mean = weighted_sum(grads, w)
    return float(sum(wi * (g - mean).norm_sq() for g, wi in zip(grads, w)))


@dataclass
class ClientGradients:
    grads: list
    losses: list
    weights: list

    @property
    def global_grad(self) -> ParamSet:
        return weighted_sum(self.grads, self.weights)

    @property
    def H(self) -> float:
        return heterogeneity_from_grads(self.grads, self.weights)


def _scoped(ps: ParamSet, scope: str) -> ParamSet:
    return ps.select(MODEL) if scope == "model" else ps


def client_gradients(objective, params, shards, scope: str = "model") -> ClientGradients:
    """Exact full-shard gradients; ``scope="model"`` keeps theta only."""
    grads, losses = [], []
    for s in shards:
        br, g = objective.loss_and_grad(params, s.data.x, s.data.y)
        grads.append(_scoped(g, scope))
        losses.append(br.total)
    return ClientGradients(grads, losses, [s.weight for s in shards])


def heterogeneity(objective, params, shards, scope: str = "model") -> float:
    """H_t = sum_n w_n |grad L^n - grad L|^2 with exact per-shard gradients."""
    return client_gradients(objective, params, shards, scope).H


@dataclass
class RoundDiagnostics:
    round: int
    drift: float
    H: float
    grad_norm_sq: float
    mean_client_loss: float
    participants: tuple
    client_loss: list = field(default_factory=list)

    HEADER = ["round", "drift", "H_t", "grad_norm_sq", "mean_client_loss", "participants"]

    def row(self):
        return [self.round, fmt(self.drift), fmt(self.H), fmt(self.grad_norm_sq),
                fmt(self.mean_client_loss), " ".join(str(p) for p in self.participants)]


def diagnostics_csv(diags, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RoundDiagnostics.HEADER)
    for d in diags:
        w.writerow(d.row())
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def sample_participants(cfg: FedConfig, seed: int, t: int) -> list:
    if cfg.participants >= cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = derive_rng(seed, "participation", t)
    return sorted(rng.choice(cfg.num_clients, size=cfg.participants, replace=False).tolist())


class _Clones(threading.local):
    def __init__(self, objective):
        self.objective = copy.deepcopy(objective)


def fl_round(objective, shards, params: ParamSet, cfg: FedConfig, eta: float, seed: int, t: int,
             opt: OptimizerConfig | None = None, diagnostics: bool = True):
    """One broadcast / local-train / aggregate round; returns (theta_tilde, diagnostics)."""
    chosen = [shards[i] for i in sample_participants(cfg, seed, t)]

    def run(shard, obj):
        return local_update(obj, shard, params, cfg.local_epochs, eta, seed, t, cfg.batch_size, opt)

    if cfg.parallel and len(chosen) > 1:
        clones = _Clones(objective)
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(lambda s: run(s, clones.objective), chosen))
    else:
        results = [run(s, objective) for s in chosen]
    w = np.array([s.weight for s in chosen])
    w = w / w.sum()
    new = aggregate(zip([r.params for r in results], w))
    drift = float(sum(wi * _scoped(r.delta, cfg.scope).norm_sq() for r, wi in zip(results, w)))
    if diagnostics:
        cg = client_gradients(objective, params, shards, cfg.scope)
        H, gns = cg.H, cg.global_grad.norm_sq()
        losses = cg.losses
        mean_loss = float(np.dot(cg.weights, losses))
    else:
        H = gns = mean_loss = float("nan")
        losses = []
    return new, RoundDiagnostics(t, drift, H, gns, mean_loss, tuple(s.id for s in chosen), losses)


def train_fl(objective, shards, cfg: FedConfig, opt: OptimizerConfig, seed: int = 0,
             init: ParamSet | None = None, diagnostics: bool = True):
    """``cfg.rounds`` FedAvg rounds; returns (params, per-round diagnostics)."""
    params = objective.init_params(seed) if init is None else init
    diags = []
    for t in range(cfg.rounds):
        params, d = fl_round(objective, shards, params, cfg, opt.eta_at(t), seed, t, opt, diagnostics)
        diags.append(d)
    return params, diags
