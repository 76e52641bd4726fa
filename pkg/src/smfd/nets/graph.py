"""Layer graphs and their forward / backward evaluation.

A :class:`NetworkGraph` is a topologically ordered list of :class:`LayerNode`
objects. Parameters live outside the graph in a name -> array store; nodes
refer to them by name, which is how CBAM's shared channel MLP reuses weights.

Every node also declares the shape it produces, as a channel count and a
resolution level (output extent = input extent / 2**level), so shapes can be
checked against what evaluation actually produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .. import tensor as T

NODE_KINDS = (
    "input", "conv", "bn", "act", "pool", "nearest_up", "pixel_up", "transpose_up",
    "concat", "add", "mul", "reduce", "postprocess", "clamp",
)


class GraphError(ValueError):
    """Malformed graph or bad inputs to it."""


class WeightError(GraphError):
    """A weight is missing or has the wrong shape; the message names the node."""


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)
    channels: int = 0
    level: int | None = 0  # None: collapsed to 1x1

    def weight_names(self) -> list[str]:
        return [self.params[k] for k in ("w", "b", "gamma", "beta", "mean", "var")
                if k in self.params]


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    trainable: bool = True
    init: str = "glorot"  # glorot | zeros | ones
    fan: tuple[int, int] = (1, 1)


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[LayerNode, ...]
    inputs: Mapping[str, int]  # input node id -> channel count
    output: str
    params: Mapping[str, ParamSpec]
    name: str = "net"
    stages: Mapping[str, str] = field(default_factory=dict)  # label -> node id

    def __post_init__(self):
        seen = set()
        for node in self.nodes:
            if node.kind not in NODE_KINDS:
                raise GraphError(f"node {node.id}: unknown kind {node.kind!r}")
            if node.id in seen:
                raise GraphError(f"duplicate node id {node.id}")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.id} consumes {src}, which is not an earlier node")
            for w in node.weight_names():
                if w not in self.params:
                    raise GraphError(f"node {node.id} references unknown parameter {w}")
            seen.add(node.id)
        if self.output not in seen:
            raise GraphError(f"output {self.output} is not a node")

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def declared_shape(self, node_id: str, batch: int, size: int) -> tuple[int, int, int, int]:
        n = self.node(node_id)
        if n.level is None:
            return batch, 1, 1, n.channels
        s = size >> n.level if n.level >= 0 else size << -n.level
        return batch, s, s, n.channels


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Tape:
    """Values and caches recorded by :func:`run` for :func:`backward`."""

    values: dict[str, np.ndarray]
    caches: dict[str, Any]
    running: dict[str, np.ndarray]  # updated BN statistics (training only)
    training: bool
    output_id: str

    @property
    def output(self) -> np.ndarray:
        return self.values[self.output_id]


def _weight(node, weights, key, dtype):
    name = node.params[key]
    try:
        arr = weights[name]
    except KeyError:
        raise WeightError(f"node {node.id}: missing weight {name!r}") from None
    return np.asarray(arr, dtype=dtype)


def _check_weights(graph: NetworkGraph, weights: Mapping[str, np.ndarray]) -> None:
    for node in graph.nodes:
        for name in node.weight_names():
            if name not in weights:
                raise WeightError(f"node {node.id}: missing weight {name!r}")
            want = graph.params[name].shape
            got = np.shape(weights[name])
            if tuple(got) != tuple(want):
                raise WeightError(f"node {node.id}: weight {name!r} has shape {tuple(got)}, "
                                  f"expected {tuple(want)}")


def _forward_node(node, xs, weights, training, dtype, gates_off):
    p = node.params
    k = node.kind
    if k == "conv":
        w = _weight(node, weights, "w", dtype)
        b = _weight(node, weights, "b", dtype) if "b" in p else None
        return T.conv2d(xs[0], w, b, p.get("stride", 1), p.get("padding", "same")), None
    if k == "transpose_up":
        w = _weight(node, weights, "w", dtype)
        b = _weight(node, weights, "b", dtype) if "b" in p else None
        return T.conv_transpose2d(xs[0], w, b, p.get("stride", 2)), None
    if k == "bn":
        gamma = _weight(node, weights, "gamma", dtype)
        beta = _weight(node, weights, "beta", dtype)
        running = (_weight(node, weights, "mean", dtype), _weight(node, weights, "var", dtype))
        mode = "train" if training else "infer"
        y, stats = T.batchnorm(xs[0], gamma, beta, mode, p.get("eps", 1e-5), running,
                               p.get("momentum", 0.9))
        return y, (mode, running, stats)
    if k == "act":
        if gates_off and p.get("role") == "gate":
            return np.ones_like(xs[0]), "off"
        return T.activate(xs[0], p["fn"]), None
    if k == "pool":
        y, sw = T.pool2d(xs[0], p.get("window", 2), p.get("stride", 2), p.get("mode", "max"))
        return y, sw
    if k == "nearest_up":
        return T.nearest_upsample(xs[0], p.get("factor", 2)), None
    if k == "pixel_up":
        return T.depth_to_space(xs[0], p.get("factor", 2)), None
    if k == "concat":
        return np.concatenate(xs, axis=-1), None
    if k == "add":
        return xs[0] + xs[1], None
    if k == "mul":
        return xs[0] * xs[1], None
    if k == "reduce":
        axes = (1, 2) if p["over"] == "spatial" else (3,)
        if p["op"] == "mean":
            return xs[0].mean(axis=axes, keepdims=True), None
        return xs[0].max(axis=axes, keepdims=True), None
    if k == "postprocess":
        mu = xs[0].mean(axis=(1, 2, 3), keepdims=True)
        return (xs[0] - mu) * p.get("contrast", 2.0) + mu + p.get("brightness", 0.1), None
    if k == "clamp":
        return np.clip(xs[0], p.get("lo", 0.0), p.get("hi", 1.0)), None
    raise GraphError(f"node {node.id}: cannot evaluate kind {k!r}")


def run(graph: NetworkGraph, weights: Mapping[str, np.ndarray],
        inputs: Mapping[str, np.ndarray], training: bool = False,
        gates_off: bool = False, dtype=np.float32) -> Tape:
    """Evaluate every node and keep what :func:`backward` needs.

    With ``training`` set, batch norm uses batch statistics and the updated
    running statistics are returned in ``tape.running``. ``gates_off``
    replaces every attention gate with ones.
    """
    _check_weights(graph, weights)
    values: dict[str, np.ndarray] = {}
    caches: dict[str, Any] = {}
    running: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.kind == "input":
            if node.id not in inputs:
                raise GraphError(f"missing input {node.id!r}")
            x = np.asarray(inputs[node.id], dtype=dtype)
            if x.ndim != 4 or x.shape[3] != node.channels:
                raise GraphError(f"input {node.id!r} must be (N, H, W, {node.channels}), "
                                 f"got {x.shape}")
            values[node.id] = x
            continue
        xs = [values[s] for s in node.inputs]
        try:
            y, cache = _forward_node(node, xs, weights, training, dtype, gates_off)
        except T.ShapeError as exc:
            raise GraphError(f"node {node.id}: {exc}") from exc
        values[node.id] = y
        caches[node.id] = cache
        if node.kind == "bn" and training:
            _, _, (mean, var) = cache
            running[node.params["mean"]] = mean
            running[node.params["var"]] = var
    return Tape(values, caches, running, training, graph.output)


def forward(graph: NetworkGraph, weights: Mapping[str, np.ndarray],
            inputs: Mapping[str, np.ndarray], gates_off: bool = False,
            dtype=np.float32) -> np.ndarray:
    """Inference-mode evaluation; returns the terminal node's value."""
    return run(graph, weights, inputs, training=False, gates_off=gates_off, dtype=dtype).output


def _accumulate(store, key, val):
    if key in store:
        store[key] = store[key] + val
    else:
        store[key] = val


def _reduce_to(grad, shape):
    # undo broadcasting
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def _backward_node(node, dy, xs, y, cache, weights, dtype):
    """Return (list of input grads, dict of param grads)."""
    p = node.params
    k = node.kind
    if k == "conv":
        w = _weight(node, weights, "w", dtype)
        dx, dw, db = T.conv2d_vjp(dy, xs[0], w, p.get("stride", 1), p.get("padding", "same"))
        g = {p["w"]: dw}
        if "b" in p:
            g[p["b"]] = db
        return [dx], g
    if k == "transpose_up":
        w = _weight(node, weights, "w", dtype)
        dx, dw, db = T.conv_transpose2d_vjp(dy, xs[0], w, p.get("stride", 2))
        g = {p["w"]: dw}
        if "b" in p:
            g[p["b"]] = db
        return [dx], g
    if k == "bn":
        mode, running, _ = cache
        gamma = _weight(node, weights, "gamma", dtype)
        dx, dg, db = T.batchnorm_vjp(dy, xs[0], gamma, mode, p.get("eps", 1e-5), running)
        return [dx], {p["gamma"]: dg, p["beta"]: db}
    if k == "act":
        if cache == "off":
            return [np.zeros_like(xs[0])], {}
        return [T.activate_vjp(dy, xs[0], p["fn"], y)], {}
    if k == "pool":
        return [T.pool2d_vjp(dy, xs[0].shape, p.get("window", 2), p.get("stride", 2),
                             p.get("mode", "max"), cache)], {}
    if k == "nearest_up":
        return [T.nearest_upsample_vjp(dy, p.get("factor", 2))], {}
    if k == "pixel_up":
        return [T.space_to_depth(dy, p.get("factor", 2))], {}
    if k == "concat":
        splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return list(np.split(dy, splits, axis=-1)), {}
    if k == "add":
        return [_reduce_to(dy, xs[0].shape), _reduce_to(dy, xs[1].shape)], {}
    if k == "mul":
        return [_reduce_to(dy * xs[1], xs[0].shape), _reduce_to(dy * xs[0], xs[1].shape)], {}
    if k == "reduce":
        x = xs[0]
        if p["op"] == "mean":
            axes = (1, 2) if p["over"] == "spatial" else (3,)
            count = np.prod([x.shape[a] for a in axes])
            return [np.broadcast_to(dy / count, x.shape).copy()], {}
        # max: route to the first maximal entry
        if p["over"] == "spatial":
            n, h, w, c = x.shape
            flat = x.reshape(n, h * w, c)
            idx = flat.argmax(axis=1)
            dx = np.zeros_like(flat)
            np.put_along_axis(dx, idx[:, None, :], dy.reshape(n, 1, c), axis=1)
            return [dx.reshape(x.shape)], {}
        idx = x.argmax(axis=3)[..., None]
        dx = np.zeros_like(x)
        np.put_along_axis(dx, idx, dy, axis=3)
        return [dx], {}
    if k == "postprocess":
        c = p.get("contrast", 2.0)
        return [c * dy + (1 - c) * dy.mean(axis=(1, 2, 3), keepdims=True)], {}
    if k == "clamp":
        x = xs[0]
        return [dy * ((x >= p.get("lo", 0.0)) & (x <= p.get("hi", 1.0)))], {}
    raise GraphError(f"node {node.id}: no adjoint for kind {k!r}")


def backward(graph: NetworkGraph, weights: Mapping[str, np.ndarray], tape: Tape,
             dout: np.ndarray, dtype=np.float32) -> tuple[dict, dict]:
    """Reverse pass. Returns (parameter grads by name, input grads by input id)."""
    grads: dict[str, np.ndarray] = {graph.output: np.asarray(dout, dtype=dtype)}
    pgrads: dict[str, np.ndarray] = {}
    input_grads: dict[str, np.ndarray] = {}
    for node in reversed(graph.nodes):
        dy = grads.pop(node.id, None)
        if dy is None:
            continue
        if node.kind == "input":
            input_grads[node.id] = dy
            continue
        xs = [tape.values[s] for s in node.inputs]
        dxs, dps = _backward_node(node, dy, xs, tape.values[node.id], tape.caches[node.id],
                                  weights, dtype)
        for src, dx in zip(node.inputs, dxs):
            _accumulate(grads, src, dx)
        for name, g in dps.items():
            _accumulate(pgrads, name, g)
    return pgrads, input_grads
