"""Tapped block networks with per-tap dimension adapters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ADAPTER, MODEL, ConfigurationError, Graph, ParamSet
from .seeding import derive_rng

PLACEMENTS = ("input", "middle", "output")


@dataclass(frozen=True)
class NetworkSpec:
    """Block network.  Blocks 1..D-1 are hidden (1x1 channel mix + ReLU,
    optionally followed by 2x2 average pooling); block D is the class head.

    Classification is the ``grid=(1, 1)`` case.
    """
    in_channels: int
    widths: tuple
    num_classes: int
    grid: tuple = (1, 1)
    downsample_at: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "downsample_at", tuple(int(b) for b in self.downsample_at))
        if self.depth < 2:
            raise ConfigurationError("network depth D must be >= 2")
        if self.num_classes < 2:
            raise ConfigurationError("need K >= 2 classes")
        if self.in_channels < 1 or any(w < 1 for w in self.widths):
            raise ConfigurationError("widths must be positive")
        w, h = self.grid
        for b in sorted(self.downsample_at):
            if not 1 <= b <= self.depth - 1:
                raise ConfigurationError(f"downsample block {b} outside [1, {self.depth - 1}]")
            if w % 2 or h % 2:
                raise ConfigurationError(f"cannot downsample {w}x{h} grid at block {b}")
            w, h = w // 2, h // 2

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    def block_grid(self, b: int) -> tuple:
        w, h = self.grid
        for d in self.downsample_at:
            if d <= b:
                w, h = w // 2, h // 2
        return w, h

    def block_channels(self, b: int) -> int:
        return self.in_channels if b == 0 else self.widths[b - 1]


def plan_taps(D: int, M: int, placement: str = "input", spacing: int = 1) -> tuple:
    """Block indices of M taps, ``spacing`` blocks apart, anchored per placement."""
    if placement not in PLACEMENTS:
        raise ConfigurationError(f"unknown placement {placement!r}")
    if M < 0 or spacing < 1:
        raise ConfigurationError("need M >= 0 and spacing >= 1")
    if M == 0:
        return ()
    span = (M - 1) * spacing
    anchor = {"input": 1, "middle": D // 2 - span // 2, "output": D - 1 - span}[placement]
    taps = tuple(anchor + i * spacing for i in range(M))
    bad = [t for t in taps if not 1 <= t <= D - 1]
    if bad:
        raise ConfigurationError(f"tap indices {bad} outside [1, {D - 1}] (D={D}, M={M}, {placement}, spacing={spacing})")
    # each tap owns a spacing-wide segment; the M segments must fit in [1, D-1]
    if M * spacing > D - 1:
        raise ConfigurationError(f"tap run reaches index {M * spacing} > {D - 1} "
                                 f"(D={D}, M={M}, spacing={spacing} needs M*spacing <= D-1)")
    return taps


@dataclass(frozen=True)
class TapPlan:
    indices: tuple = ()
    alpha: tuple = ()
    lam: tuple = ()
    placement: str = "input"
    spacing: int = 1

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "lam", tuple(float(a) for a in self.lam))
        if not len(self.alpha) == len(self.lam) == len(self.indices):
            raise ConfigurationError("alpha, lambda and indices must have length M")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ConfigurationError(f"tap indices must increase strictly: {self.indices}")
        if any(a < 0 for a in self.alpha + self.lam):
            raise ConfigurationError("tap weights must be nonnegative")

    @classmethod
    def build(cls, D, M, placement="input", spacing=1, alpha=0.4, lam=0.1) -> "TapPlan":
        idx = plan_taps(D, M, placement, spacing)
        return cls(idx, (alpha,) * M, (lam,) * M, placement, spacing)

    @property
    def M(self) -> int:
        return len(self.indices)

    def validate(self, D: int):
        if self.M >= D:
            raise ConfigurationError(f"M={self.M} must be < D={D}")
        bad = [t for t in self.indices if not 1 <= t <= D - 1]
        if bad:
            raise ConfigurationError(f"tap indices {bad} outside [1, {D - 1}]")

    def with_weights(self, alpha, lam) -> "TapPlan":
        return TapPlan(self.indices, (alpha,) * self.M if np.isscalar(alpha) else alpha,
                       (lam,) * self.M if np.isscalar(lam) else lam, self.placement, self.spacing)


@dataclass
class TappedForward:
    probs: np.ndarray
    taps: list = field(default_factory=list)
    adapter_probs: list = field(default_factory=list)


def block_name(b, part):
    return f"block{b}.{part}"


def adapter_name(g, part):
    return f"adapter@{g}.{part}"


class TappedNetwork:
    """Graph for the main path plus one adapter per tap.

    Adapters read tap activations but never feed the main path, so the final
    prediction is independent of the tap plan.
    """

    def __init__(self, spec: NetworkSpec, plan: TapPlan | None = None, upsample_mode: str = "bilinear"):
        plan = plan or TapPlan()
        plan.validate(spec.depth)
        self.spec, self.plan = spec, plan
        g = self.graph = Graph()
        self.x = g.input("x")
        h, self.blocks = self.x, {}
        for b in range(1, spec.depth):
            W = g.param(block_name(b, "W"), MODEL)
            bias = g.param(block_name(b, "b"), MODEL)
            h = g.relu(g.channel_mix(h, W, bias, name=f"block{b}.mix"), name=f"block{b}.relu")
            if b in spec.downsample_at:
                h = g.avgpool2(h, name=f"block{b}.pool")
            self.blocks[b] = h
        D = spec.depth
        logits = g.channel_mix(h, g.param(block_name(D, "W"), MODEL), g.param(block_name(D, "b"), MODEL),
                               name="head.mix")
        if spec.block_grid(D - 1) != spec.grid:
            logits = g.upsample(logits, spec.grid, upsample_mode, name="head.up")
        self.probs = g.output("probs", g.softmax(logits, axis=1, name="head.softmax"))
        self.taps, self.adapters = [], []
        for m, gm in enumerate(plan.indices, start=1):
            z = self.blocks[gm]
            self.taps.append(g.output(f"tap{m}", z))
            a = g.channel_mix(z, g.param(adapter_name(gm, "W"), ADAPTER, m),
                              g.param(adapter_name(gm, "b"), ADAPTER, m), name=f"adapter{m}.mix")
            if spec.block_grid(gm) != spec.grid:
                a = g.upsample(a, spec.grid, upsample_mode, name=f"adapter{m}.up")
            self.adapters.append(g.output(f"q{m}", g.softmax(a, axis=1, name=f"adapter{m}.softmax")))

    def init_params(self, seed: int = 0, scale: float = 1.0) -> ParamSet:
        """He-style init; every tensor draws from its own seeded stream so
        theta is identical across tap plans."""
        spec, arrays, tags = self.spec, {}, {}
        for b in range(1, spec.depth + 1):
            fan_in = spec.block_channels(b - 1)
            fan_out = spec.num_classes if b == spec.depth else spec.widths[b - 1]
            rng = derive_rng(seed, "init", b)
            arrays[block_name(b, "W")] = scale * rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            # nonzero biases keep dead-input cells off the ReLU kink
            arrays[block_name(b, "b")] = 0.1 * rng.standard_normal(fan_out)
            tags[block_name(b, "W")] = tags[block_name(b, "b")] = (MODEL, None)
        for m, gm in enumerate(self.plan.indices, start=1):
            c = spec.block_channels(gm)
            rng = derive_rng(seed, "init", 10_000 + gm)
            arrays[adapter_name(gm, "W")] = scale * rng.standard_normal((spec.num_classes, c)) * np.sqrt(1.0 / c)
            arrays[adapter_name(gm, "b")] = 0.1 * rng.standard_normal(spec.num_classes)
            tags[adapter_name(gm, "W")] = tags[adapter_name(gm, "b")] = (ADAPTER, m)
        return ParamSet(arrays, tags)

    def forward_tapped(self, params: ParamSet, x: np.ndarray) -> TappedForward:
        self.graph.forward(params, {"x": x}, targets=[self.probs, *self.adapters])
        return TappedForward(
            self.graph.value(self.probs).copy(),
            [self.graph.value(t).copy() for t in self.taps],
            [self.graph.value(q).copy() for q in self.adapters],
        )

    def predict(self, params: ParamSet, x: np.ndarray) -> np.ndarray:
        return self.forward_tapped(params, x).probs.argmax(axis=1)


def forward_tapped(net: TappedNetwork, params: ParamSet, x) -> TappedForward:
    return net.forward_tapped(params, x)


def adapter_param_count(spec: NetworkSpec, plan: TapPlan) -> int:
    return sum((spec.block_channels(g) + 1) * spec.num_classes for g in plan.indices)
