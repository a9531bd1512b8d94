"""Tape-based reverse-mode differentiation over a static graph of primitive ops.

A :class:`Graph` is built once (inputs, parameters, op nodes in topological
order) and then evaluated any number of times.  Each :meth:`Graph.forward`
returns a fresh :class:`Tape` holding the cached per-node values; a single
:meth:`Graph.backward` over that tape fills in the gradient of the scalar
output with respect to every node.

Activation nodes read the tape's ``rule`` (if one is set) instead of their
own, which is how a ProxyGrad run swaps the backward slope of every
activation without rebuilding the graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .tensor_core import DTYPE, NumericalError


class Op:
    """Base class for graph primitives.

    ``forward`` gets a per-node :class:`Context` to stash whatever ``backward``
    needs and returns the node value.  ``backward`` returns one gradient per
    input, ``None`` for inputs that are not differentiable (integer labels).
    """

    name = "op"

    def forward(self, ctx: "Context", *inputs):
        raise NotImplementedError

    def backward(self, ctx: "Context", grad):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Context:
    __slots__ = ("saved", "training", "rule")

    def __init__(self, training: bool, rule):
        self.saved: dict[str, Any] = {}
        self.training = training
        self.rule = rule


@dataclass
class Node:
    id: int
    kind: str  # "input" | "param" | "op"
    name: str | None = None
    op: Op | None = None
    inputs: tuple[int, ...] = ()
    shape: tuple[int, ...] | None = None


@dataclass
class Tape:
    graph: "Graph"
    values: list
    contexts: list
    rule: Any = None
    training: bool = False
    grads: list | None = None
    completed: bool = False
    output: float = float("nan")

    def value(self, key) -> np.ndarray:
        return self.values[self.graph.node_id(key)]

    def grad(self, key) -> np.ndarray:
        if self.grads is None:
            raise RuntimeError("backward has not been run on this tape")
        g = self.grads[self.graph.node_id(key)]
        if g is None:
            return np.zeros_like(np.asarray(self.value(key), dtype=DTYPE))
        return g


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    names: dict[str, int] = field(default_factory=dict)
    output: int | None = None

    def _register(self, name, node_id):
        if name is None:
            return
        if name in self.names:
            raise ValueError(f"duplicate node name {name!r}")
        self.names[name] = node_id

    def input(self, name: str, shape=None) -> int:
        node = Node(len(self.nodes), "input", name=name,
                    shape=None if shape is None else tuple(shape))
        self._register(name, node.id)
        self.nodes.append(node)
        return node.id

    def param(self, name: str, value) -> int:
        node = Node(len(self.nodes), "param", name=name)
        self._register(name, node.id)
        self.params[name] = np.array(value, dtype=DTYPE)
        self.nodes.append(node)
        return node.id

    def apply(self, op: Op, *inputs: int, label: str | None = None) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} does not exist yet")
        node = Node(len(self.nodes), "op", name=label, op=op, inputs=tuple(inputs))
        self._register(label, node.id)
        self.nodes.append(node)
        return node.id

    def set_output(self, node_id: int) -> None:
        self.output = node_id

    def node_id(self, key) -> int:
        if isinstance(key, (int, np.integer)):
            return int(key)
        try:
            return self.names[key]
        except KeyError:
            raise KeyError(f"no node named {key!r}") from None

    def ops(self, kind: type | None = None):
        return [n.op for n in self.nodes
                if n.op is not None and (kind is None or isinstance(n.op, kind))]

    @property
    def input_names(self) -> list[str]:
        return [n.name for n in self.nodes if n.kind == "input"]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, bindings: Mapping[str, Any], rule=None,
                training: bool = False) -> tuple[float, Tape]:
        if self.output is None:
            raise ValueError("graph has no output node")
        values: list = [None] * len(self.nodes)
        contexts: list = [None] * len(self.nodes)
        for node in self.nodes:
            if node.kind == "input":
                if node.name not in bindings:
                    raise KeyError(f"unbound input {node.name!r}")
                v = np.asarray(bindings[node.name])
                if v.dtype.kind == "f":
                    v = v.astype(DTYPE, copy=False)
                if node.shape is not None and v.shape != node.shape:
                    raise ValueError(f"input {node.name!r} expects shape "
                                     f"{node.shape}, got {v.shape}")
                values[node.id] = v
            elif node.kind == "param":
                values[node.id] = self.params[node.name]
            else:
                ctx = Context(training, rule)
                values[node.id] = node.op.forward(ctx, *(values[i] for i in node.inputs))
                contexts[node.id] = ctx
        out = np.asarray(values[self.output])
        if out.size != 1:
            raise ValueError(f"output node must be scalar, has shape {out.shape}")
        out = float(out.reshape(()))
        if not np.isfinite(out):
            raise NumericalError("non-finite graph output")
        tape = Tape(self, values, contexts, rule=rule, training=training,
                    completed=True, output=out)
        return out, tape

    def backward(self, tape: Tape, rule=None, seed: float = 1.0, wrt=None):
        """Reverse sweep over ``tape``; returns ``{name: gradient}``.

        ``rule`` overrides the rule recorded at forward time (only the
        backward slope matters here).  ``wrt`` restricts the returned dict;
        by default every float input and every parameter is reported.  The
        full per-node gradients stay available through ``tape.grad``.
        """
        if tape.graph is not self or not tape.completed:
            raise RuntimeError("backward requires a completed forward on this graph")
        sweep_rule = tape.rule if rule is None else rule
        grads: list = [None] * len(self.nodes)
        grads[self.output] = np.full(np.shape(tape.values[self.output]), seed, dtype=DTYPE)
        for node in reversed(self.nodes):
            g = grads[node.id]
            if g is None or node.op is None:
                continue
            ctx = tape.contexts[node.id]
            ctx.rule = sweep_rule
            try:
                in_grads = node.op.backward(ctx, g)
            finally:
                ctx.rule = tape.rule
            for i, gi in zip(node.inputs, in_grads):
                if gi is None:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
        tape.grads = grads
        if wrt is None:
            wrt = [n.name for n in self.nodes
                   if n.kind == "param"
                   or (n.kind == "input" and tape.values[n.id].dtype.kind == "f")]
        elif isinstance(wrt, str):
            wrt = [wrt]
        result = {name: tape.grad(name) for name in wrt}
        for name, g in result.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name!r}")
        return result


def forward(graph: Graph, bindings, rule=None, training=False):
    return graph.forward(bindings, rule=rule, training=training)


def backward(graph: Graph, tape: Tape, rule=None, seed=1.0, wrt=None):
    return graph.backward(tape, rule=rule, seed=seed, wrt=wrt)


def finite_difference_grad(graph: Graph, bindings, target: str, eps: float,
                           rule=None, training: bool = False) -> np.ndarray:
    """Central differences of the graph output w.r.t. an input or parameter.

    Uses forward passes only, so it is independent of every ``Op.backward``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    bindings = dict(bindings)
    if target in graph.params:
        base = graph.params[target]
        def evaluate(arr):
            graph.params[target] = arr
            try:
                return graph.forward(bindings, rule=rule, training=training)[0]
            finally:
                graph.params[target] = base
    elif target in bindings:
        base = np.asarray(bindings[target], dtype=DTYPE)
        def evaluate(arr):
            bindings[target] = arr
            return graph.forward(bindings, rule=rule, training=training)[0]
    else:
        raise KeyError(f"{target!r} is neither a parameter nor a bound input")

    grad = np.zeros(base.shape, dtype=DTYPE)
    flat = grad.reshape(-1)
    for k in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[k] += eps
        minus = base.copy()
        minus.reshape(-1)[k] -= eps
        flat[k] = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
    return grad
