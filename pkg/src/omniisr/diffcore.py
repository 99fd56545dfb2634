"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built explicitly, node by node, and can be replayed with fresh
parameter / input bindings.  Each op has a forward rule and a backward rule
registered in ``FORWARD`` / ``BACKWARD``; backward rules map the upstream
gradient to one gradient per input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

PROB_FLOOR = 1e-12

MODEL = "model"
ADAPTER = "adapter"


class ConfigurationError(ValueError):
    """Shape or wiring problem detected while building or running a graph."""


class ContractViolation(RuntimeError):
    pass


def as_tensor(values, shape=None) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError("tensor contains non-finite values")
    return arr


# --------------------------------------------------------------------------
# ParamSet
# --------------------------------------------------------------------------

class ParamSet:
    """Named parameter arrays, each tagged as model (theta) or adapter (phi_m).

    Arithmetic is only defined between ParamSets with identical names and
    shapes.  Instances are treated as values: arithmetic returns new objects.
    """

    # make numpy scalars defer to our reflected operators
    __array_ufunc__ = None

    __slots__ = ("_arrays", "_tags")

    def __init__(self, arrays: Mapping[str, np.ndarray], tags: Mapping[str, tuple] | None = None):
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        tags = dict(tags or {})
        self._tags = {k: tags.get(k, (MODEL, None)) for k in self._arrays}

    # mapping protocol
    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def tag(self, name) -> tuple:
        return self._tags[name]

    @property
    def tags(self) -> dict:
        return dict(self._tags)

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self._arrays.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._arrays.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()}, self._tags)

    def select(self, kind: str) -> "ParamSet":
        """Sub-ParamSet holding only ``model`` or ``adapter`` entries."""
        keep = [k for k in self._arrays if self._tags[k][0] == kind]
        return ParamSet({k: self._arrays[k] for k in keep}, {k: self._tags[k] for k in keep})

    def replace(self, other: "ParamSet") -> "ParamSet":
        """Copy of self with the entries present in ``other`` overwritten."""
        arrays = dict(self._arrays)
        for k, v in other.items():
            if k not in arrays or arrays[k].shape != v.shape:
                raise ConfigurationError(f"cannot replace entry {k!r}")
            arrays[k] = v
        return ParamSet(arrays, self._tags)

    def check_compatible(self, other: "ParamSet"):
        if self._arrays.keys() != other._arrays.keys():
            missing = set(self._arrays) ^ set(other._arrays)
            raise ConfigurationError(f"ParamSet names differ: {sorted(missing)}")
        for k, v in self._arrays.items():
            if v.shape != other._arrays[k].shape:
                raise ConfigurationError(f"shape mismatch for {k!r}: {v.shape} vs {other._arrays[k].shape}")

    def _binary(self, other, op):
        if isinstance(other, ParamSet):
            self.check_compatible(other)
            return ParamSet({k: op(v, other._arrays[k]) for k, v in self._arrays.items()}, self._tags)
        return ParamSet({k: op(v, other) for k, v in self._arrays.items()}, self._tags)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        if isinstance(scalar, ParamSet):
            return self._binary(scalar, np.multiply)
        return self._binary(float(scalar), np.multiply)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self._binary(float(scalar), np.divide)

    def __neg__(self):
        return self * -1.0

    def dot(self, other: "ParamSet") -> float:
        self.check_compatible(other)
        return float(sum(np.vdot(v, other._arrays[k]) for k, v in self._arrays.items()))

    def norm_sq(self) -> float:
        return self.dot(self)

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def unflat(self, vector) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.size():
            raise ConfigurationError(f"vector of size {vector.size} does not fit ParamSet of size {self.size()}")
        out, i = {}, 0
        for k, v in self._arrays.items():
            out[k] = vector[i:i + v.size].reshape(v.shape)
            i += v.size
        return ParamSet(out, self._tags)

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._arrays.items()}, self._tags)

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        self.check_compatible(other)
        return all(np.allclose(v, other._arrays[k], atol=atol, rtol=rtol) for k, v in self._arrays.items())

    def max_abs_diff(self, other: "ParamSet") -> float:
        self.check_compatible(other)
        if not self._arrays:
            return 0.0
        return float(max(np.max(np.abs(v - other._arrays[k]), initial=0.0) for k, v in self._arrays.items()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._arrays.values())

    def __repr__(self):
        body = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._arrays.items())
        return f"ParamSet({body})"


def weighted_sum(sets: Iterable[ParamSet], weights: Iterable[float]) -> ParamSet:
    sets, weights = list(sets), [float(w) for w in weights]
    if not sets:
        raise ConfigurationError("weighted_sum of nothing")
    first = sets[0]
    for s in sets[1:]:
        first.check_compatible(s)
    out = {}
    for k in first:
        acc = np.zeros_like(first[k])
        for s, w in zip(sets, weights):
            acc = acc + w * s[k]
        out[k] = acc
    return ParamSet(out, first.tags)


# --------------------------------------------------------------------------
# op rules
# --------------------------------------------------------------------------
# Forward rules: f(attrs, *input_values) -> value
# Backward rules: b(attrs, grad_out, out_value, *input_values) -> tuple of input grads


def _fwd_affine(a, x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def _bwd_affine(a, g, y, x, W, b):
    return g @ W, g.T @ x, g.sum(axis=0)


def _fwd_channel_mix(a, x, W, b):
    # x: (B, C, W, H); W: (K, C); b: (K,)
    if x.ndim != 4 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"channel_mix: x{x.shape} W{W.shape} b{b.shape}")
    return np.einsum("kc,bcwh->bkwh", W, x) + b[None, :, None, None]


def _bwd_channel_mix(a, g, y, x, W, b):
    return (np.einsum("kc,bkwh->bcwh", W, g),
            np.einsum("bkwh,bcwh->kc", g, x),
            g.sum(axis=(0, 2, 3)))


def _fwd_relu(a, x):
    return np.maximum(x, 0.0)


def _bwd_relu(a, g, y, x):
    return (g * (x > 0),)


def _fwd_softmax(a, x):
    ax = a["axis"]
    shifted = x - x.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=ax, keepdims=True)


def _bwd_softmax(a, g, y, x):
    ax = a["axis"]
    return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)


def _fwd_log(a, x):
    return np.log(np.maximum(x, a.get("floor", PROB_FLOOR)))


def _bwd_log(a, g, y, x):
    floor = a.get("floor", PROB_FLOOR)
    return (np.where(x > floor, g / np.maximum(x, floor), 0.0),)


def _fwd_mul(a, x, z):
    if x.shape != z.shape:
        raise ValueError(f"mul: {x.shape} vs {z.shape}")
    return x * z


def _bwd_mul(a, g, y, x, z):
    return g * z, g * x


def _fwd_add(a, *xs):
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ValueError(f"add: shapes {[x.shape for x in xs]}")
    out = xs[0].copy()
    for x in xs[1:]:
        out = out + x
    return out


def _bwd_add(a, g, y, *xs):
    return tuple(g for _ in xs)


def _fwd_scale(a, x):
    return a["c"] * x


def _bwd_scale(a, g, y, x):
    return (a["c"] * g,)


def _fwd_sum(a, x):
    return np.asarray(x.sum(axis=a.get("axis")))


def _bwd_sum(a, g, y, x):
    ax = a.get("axis")
    if ax is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)


def _fwd_mean(a, x):
    return np.asarray(x.mean(axis=a.get("axis")))


def _bwd_mean(a, g, y, x):
    ax = a.get("axis")
    if ax is None:
        return (np.full(x.shape, g / x.size),)
    n = np.prod([x.shape[i] for i in np.atleast_1d(ax)])
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape) / n,)


def _fwd_dot_const(a, x, c):
    # scalar sum(x * c); c is a non-differentiable input (labels, masks)
    if x.shape != c.shape:
        raise ValueError(f"dot_const: {x.shape} vs {c.shape}")
    return np.asarray(np.vdot(x, c))


def _bwd_dot_const(a, g, y, x, c):
    return g * c, np.zeros_like(c)


def _interp_matrix(n_out: int, n_in: int, mode: str) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix, half-pixel centres."""
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        if mode == "nearest":
            A[i, min(int(np.floor(i * scale)), n_in - 1)] = 1.0
            continue
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        A[i, i0] += 1.0 - t
        A[i, i1] += t
    return A


def _fwd_resize(a, x):
    if x.ndim != 4:
        raise ValueError(f"resize expects (B, C, W, H), got {x.shape}")
    Aw = _interp_matrix(a["size"][0], x.shape[2], a["mode"])
    Ah = _interp_matrix(a["size"][1], x.shape[3], a["mode"])
    return np.einsum("iw,bcwh,jh->bcij", Aw, x, Ah)


def _bwd_resize(a, g, y, x):
    Aw = _interp_matrix(a["size"][0], x.shape[2], a["mode"])
    Ah = _interp_matrix(a["size"][1], x.shape[3], a["mode"])
    return (np.einsum("iw,bcij,jh->bcwh", Aw, g, Ah),)


def _fwd_avgpool2(a, x):
    B, C, W, H = x.shape
    if W % 2 or H % 2:
        raise ValueError(f"avgpool2 needs even spatial size, got {x.shape}")
    return x.reshape(B, C, W // 2, 2, H // 2, 2).mean(axis=(3, 5))


def _bwd_avgpool2(a, g, y, x):
    return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)


FORWARD: dict[str, Callable] = {
    "affine": _fwd_affine,
    "channel_mix": _fwd_channel_mix,
    "relu": _fwd_relu,
    "softmax": _fwd_softmax,
    "log": _fwd_log,
    "mul": _fwd_mul,
    "add": _fwd_add,
    "scale": _fwd_scale,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "dot_const": _fwd_dot_const,
    "resize": _fwd_resize,
    "avgpool2": _fwd_avgpool2,
}

BACKWARD: dict[str, Callable] = {
    "affine": _bwd_affine,
    "channel_mix": _bwd_channel_mix,
    "relu": _bwd_relu,
    "softmax": _bwd_softmax,
    "log": _bwd_log,
    "mul": _bwd_mul,
    "add": _bwd_add,
    "scale": _bwd_scale,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "dot_const": _bwd_dot_const,
    "resize": _bwd_resize,
    "avgpool2": _bwd_avgpool2,
}


# --------------------------------------------------------------------------
# Graph
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple
    attrs: dict = field(default_factory=dict, hash=False, compare=False)
    name: str | None = None


class Graph:
    """Explicitly wired computation graph.

    Leaves are ``param`` (bound from a ParamSet at forward time) and
    ``input`` (bound from a dict).  Node records are appended in topological
    order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_tags: dict[str, tuple] = {}
        self._param_nodes: dict[str, Node] = {}
        self._input_nodes: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self.values: dict[int, np.ndarray] | None = None

    # construction --------------------------------------------------------
    def _add(self, op, inputs=(), name=None, **attrs) -> Node:
        for n in inputs:
            if not isinstance(n, Node) or n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise ConfigurationError(f"{op}: input is not a node of this graph")
        node = Node(len(self.nodes), op, tuple(n.id for n in inputs), attrs, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, kind: str = MODEL, tap: int | None = None) -> Node:
        if name in self._param_nodes:
            return self._param_nodes[name]
        node = self._add("param", name=name)
        self._param_nodes[name] = node
        self.param_tags[name] = (kind, tap)
        return node

    def input(self, name: str) -> Node:
        if name in self._input_nodes:
            return self._input_nodes[name]
        node = self._add("input", name=name)
        self._input_nodes[name] = node
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def affine(self, x, W, b, name=None):
        return self._add("affine", (x, W, b), name)

    def channel_mix(self, x, W, b, name=None):
        return self._add("channel_mix", (x, W, b), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def softmax(self, x, axis=-1, name=None):
        return self._add("softmax", (x,), name, axis=axis)

    def log(self, x, floor=PROB_FLOOR, name=None):
        return self._add("log", (x,), name, floor=floor)

    def mul(self, x, z, name=None):
        return self._add("mul", (x, z), name)

    def add(self, *xs, name=None):
        return self._add("add", xs, name)

    def scale(self, x, c, name=None):
        return self._add("scale", (x,), name, c=float(c))

    def sum(self, x, axis=None, name=None):
        return self._add("sum", (x,), name, axis=axis)

    def mean(self, x, axis=None, name=None):
        return self._add("mean", (x,), name, axis=axis)

    def dot_const(self, x, c, name=None):
        return self._add("dot_const", (x, c), name)

    def upsample(self, x, size, mode="bilinear", name=None):
        if mode not in ("bilinear", "nearest"):
            raise ConfigurationError(f"unknown upsample mode {mode!r}")
        return self._add("resize", (x,), name, size=tuple(int(s) for s in size), mode=mode)

    def avgpool2(self, x, name=None):
        return self._add("avgpool2", (x,), name)

    @property
    def param_names(self) -> list[str]:
        return list(self._param_nodes)

    @property
    def input_names(self) -> list[str]:
        return list(self._input_nodes)

    # execution -----------------------------------------------------------
    def _needed(self, targets) -> set:
        need, stack = set(), [t.id for t in targets]
        while stack:
            i = stack.pop()
            if i not in need:
                need.add(i)
                stack.extend(self.nodes[i].inputs)
        return need

    def forward(self, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray],
                targets=None) -> dict:
        """Evaluate the graph; with ``targets`` only their ancestors run."""
        values: dict[int, np.ndarray] = {}
        need = None if targets is None else self._needed(targets)
        for node in self.nodes:
            if need is not None and node.id not in need:
                continue
            if node.op == "param":
                if node.name not in params:
                    raise ConfigurationError(f"parameter {node.name!r} not bound")
                values[node.id] = np.asarray(params[node.name], dtype=np.float64)
            elif node.op == "input":
                if node.name not in inputs:
                    raise ConfigurationError(f"input {node.name!r} not bound")
                values[node.id] = np.asarray(inputs[node.name], dtype=np.float64)
            else:
                args = [values[i] for i in node.inputs]
                try:
                    values[node.id] = FORWARD[node.op](node.attrs, *args)
                except ValueError as exc:
                    label = node.name or f"#{node.id}"
                    raise ConfigurationError(f"node {label} ({node.op}): {exc}") from None
        self.values = values
        return {k: values[n.id] for k, n in self.outputs.items() if n.id in values}

    def value(self, node: Node) -> np.ndarray:
        if self.values is None:
            raise ContractViolation("forward has not run")
        return self.values[node.id]

    def backward(self, loss: Node) -> ParamSet:
        """Gradients of scalar node ``loss`` w.r.t. every parameter leaf."""
        if self.values is None:
            raise ContractViolation("forward has not run")
        out = self.values[loss.id]
        if out.size != 1:
            raise ContractViolation(f"loss node must be scalar, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(out)}
        for node in reversed(self.nodes[:loss.id + 1]):
            if node.op in ("param", "input"):
                continue
            g = grads.pop(node.id, None)
            if g is None:
                continue
            args = [self.values[i] for i in node.inputs]
            in_grads = BACKWARD[node.op](node.attrs, g, self.values[node.id], *args)
            for i, gi in zip(node.inputs, in_grads):
                grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for name, node in self._param_nodes.items():
            g = grads.get(node.id)
            result[name] = np.zeros_like(self.values[node.id]) if g is None else np.asarray(g).reshape(self.values[node.id].shape)
        return ParamSet(result, self.param_tags)


def forward(graph: Graph, params, inputs) -> dict:
    return graph.forward(params, inputs)


def backward(graph: Graph, loss: Node) -> ParamSet:
    return graph.backward(loss)


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_param: dict
    max_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_error:.3e} over {self.n_checked} coords (tol {self.tolerance:g})"


def relative_error(a, n, floor=1e-8):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(graph: Graph, params: ParamSet, inputs, loss: Node, tolerance=1e-4,
               step=2.0 ** -20, max_coords=None, seed=0) -> GradCheckReport:
    """Compare backward() against central finite differences.

    ``max_coords`` caps the number of coordinates probed per parameter
    (chosen at random with ``seed``); None probes all of them.
    """
    graph.forward(params, inputs)
    analytic = graph.backward(loss)
    rng = np.random.default_rng(seed)
    per_param, worst, count = {}, 0.0, 0
    for name in graph.param_names:
        base = np.asarray(params[name], dtype=np.float64)
        idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        errs = []
        for i in idx:
            vals = []
            for sgn in (1.0, -1.0):
                bumped = base.copy().ravel()
                bumped[i] += sgn * step
                p = dict(params.items())
                p[name] = bumped.reshape(base.shape)
                graph.forward(p, inputs)
                vals.append(float(graph.value(loss)))
            numeric = (vals[0] - vals[1]) / (2 * step)
            errs.append(float(relative_error(analytic[name].ravel()[i], numeric)))
        err = max(errs, default=0.0)
        per_param[name] = err
        worst = max(worst, err)
        count += len(idx)
    graph.forward(params, inputs)
    return GradCheckReport(per_param, worst, tolerance, count)
