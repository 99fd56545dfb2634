"""Output cross-entropy, per-tap MI supervision and NE regularisation.

Every loss is a mean over samples of a sum over cells and classes (or
channels).  ``cross_entropy`` and ``negative_entropy`` are plain numpy
evaluators; the ``*_node`` builders wire the same quantities into a graph
so they can be differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import PROB_FLOOR, Graph, Node, ParamSet
from .model import NetworkSpec, TapPlan, TappedNetwork

_CELL_AXES = (1, 2, 3)


def cross_entropy(probs, onehot) -> float:
    """-mean_i sum_{cells, k} y log p, with p floored at PROB_FLOOR."""
    probs, onehot = np.asarray(probs, float), np.asarray(onehot, float)
    per_sample = -(onehot * np.log(np.maximum(probs, PROB_FLOOR))).reshape(len(probs), -1).sum(axis=1)
    return float(per_sample.mean())


loss_ce = cross_entropy
loss_mi = cross_entropy


def negative_entropy(z) -> float:
    """mean_i sum_cells sum_c p log p with p = softmax over the channel axis."""
    z = np.asarray(z, float)
    s = z - z.max(axis=1, keepdims=True)
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    per_sample = (p * np.log(np.maximum(p, PROB_FLOOR))).reshape(len(z), -1).sum(axis=1)
    return float(per_sample.mean())


loss_ne = negative_entropy


def channel_entropy(z) -> float:
    """Mean per-cell entropy of the channel softmax (in nats)."""
    z = np.asarray(z, float)
    cells = z.shape[2] * z.shape[3] if z.ndim == 4 else 1
    return -negative_entropy(z) / cells


def ce_node(g: Graph, probs: Node, onehot: Node) -> Node:
    logp = g.log(probs)
    per_sample = g.sum(g.mul(logp, onehot), axis=_CELL_AXES)
    return g.scale(g.mean(per_sample), -1.0)


def ne_node(g: Graph, z: Node) -> Node:
    p = g.softmax(z, axis=1)
    per_sample = g.sum(g.mul(p, g.log(p)), axis=_CELL_AXES)
    return g.mean(per_sample)


@dataclass
class LossBreakdown:
    ce: float
    mi: list = field(default_factory=list)
    ne: list = field(default_factory=list)
    total: float = 0.0

    def row(self) -> list:
        return [self.ce, *self.mi, *self.ne, self.total]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.row())))


@dataclass
class GradientDecomposition:
    ce: ParamSet
    mi: list
    ne: list
    total: ParamSet

    def recombine(self, plan: TapPlan) -> ParamSet:
        acc = self.ce
        for a, l, gmi, gne in zip(plan.alpha, plan.lam, self.mi, self.ne):
            acc = acc + a * gmi + l * gne
        return acc


class ISRObjective:
    """Total objective CE + sum_m (alpha_m MI_m + lambda_m NE_m) on a tapped net."""

    def __init__(self, spec: NetworkSpec, plan: TapPlan | None = None, upsample_mode: str = "bilinear"):
        self.net = TappedNetwork(spec, plan, upsample_mode)
        self.spec, self.plan = spec, self.net.plan
        g = self.graph = self.net.graph
        self.onehot = g.input("y")
        self.ce = g.output("ce", ce_node(g, self.net.probs, self.onehot))
        self.mi = [g.output(f"mi{m}", ce_node(g, q, self.onehot)) for m, q in enumerate(self.net.adapters, 1)]
        self.ne = [g.output(f"ne{m}", ne_node(g, z)) for m, z in enumerate(self.net.taps, 1)]
        terms = [self.ce]
        for a, l, mi, ne in zip(self.plan.alpha, self.plan.lam, self.mi, self.ne):
            terms += [g.scale(mi, a), g.scale(ne, l)]
        self.total = g.output("total", g.add(*terms) if len(terms) > 1 else g.scale(self.ce, 1.0))

    @property
    def M(self) -> int:
        return self.plan.M

    def init_params(self, seed: int = 0) -> ParamSet:
        return self.net.init_params(seed)

    def _onehot(self, y):
        return np.moveaxis(np.eye(self.spec.num_classes)[np.asarray(y, dtype=np.int64)], -1, 1)

    def _run(self, params, x, y) -> LossBreakdown:
        self.graph.forward(params, {"x": x, "y": self._onehot(y)})
        v = self.graph.value
        return LossBreakdown(float(v(self.ce)), [float(v(n)) for n in self.mi],
                             [float(v(n)) for n in self.ne], float(v(self.total)))

    def evaluate(self, params: ParamSet, x, y) -> LossBreakdown:
        return self._run(params, x, y)

    def loss_and_grad(self, params: ParamSet, x, y):
        br = self._run(params, x, y)
        return br, self.graph.backward(self.total)

    def decompose_gradient(self, params: ParamSet, x, y) -> GradientDecomposition:
        self._run(params, x, y)
        bw = self.graph.backward
        return GradientDecomposition(bw(self.ce), [bw(n) for n in self.mi], [bw(n) for n in self.ne],
                                     bw(self.total))

    def forward_tapped(self, params, x):
        return self.net.forward_tapped(params, x)

    def accuracy(self, params, x, y) -> float:
        pred = self.net.predict(params, x)
        return float((pred == np.asarray(y)).mean())


def loss_total(tapped, labels_onehot, plan: TapPlan) -> LossBreakdown:
    """Breakdown from an already computed TappedForward (numpy path)."""
    ce = cross_entropy(tapped.probs, labels_onehot)
    mi = [cross_entropy(q, labels_onehot) for q in tapped.adapter_probs]
    ne = [negative_entropy(z) for z in tapped.taps]
    total = ce + sum(a * m + l * n for a, l, m, n in zip(plan.alpha, plan.lam, mi, ne))
    return LossBreakdown(ce, mi, ne, total)
