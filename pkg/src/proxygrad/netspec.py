"""Build AM target graphs from a JSON list of layer records.

The first record declares the input image; every later record is
``{"type": ..., "params": {...}, "label": optional}``.  Example::

    [
      {"type": "input", "params": {"shape": [1, 16, 16]}},
      {"type": "conv2d", "params": {"out_channels": 4, "kernel_size": 3, "padding": "same"}},
      {"type": "batchnorm"},
      {"type": "activation", "label": "act1"},
      {"type": "maxpool2d", "params": {"kernel": 2}},
      {"type": "global_avg_pool"},
      {"type": "dense", "params": {"out_features": 10}},
      {"type": "select", "params": {"index": 3}}
    ]

Weights not given explicitly (``"weight"``, ``"bias_value"``) are drawn with
Kaiming-normal scaling from the ``seed`` passed to :func:`build_network`.
Batch norm always runs in inference mode on these graphs.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import layers as L
from .autograd import Context, Graph
from .tensor_core import DTYPE, make_rng


class NetSpecError(ValueError):
    pass


def load_network_spec(path) -> list[dict]:
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetSpecError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(spec, list) or not spec:
        raise NetSpecError(f"{path}: expected a non-empty JSON list of layer records")
    return spec


def build_network(records: list[dict], rule: L.ActivationRule | None = None,
                  seed: int = 0) -> Graph:
    """Compile layer records into a graph with input ``"x"`` of shape (C, H, W)."""
    rng = make_rng(seed, "init")
    if not records or records[0].get("type") != "input":
        raise NetSpecError("layer 0: first record must have type 'input'")
    try:
        shape = tuple(int(d) for d in records[0]["params"]["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetSpecError("layer 0 (input): params.shape must be a list of ints") from exc
    if len(shape) != 3 or min(shape) < 1:
        raise NetSpecError(f"layer 0 (input): shape must be (C, H, W), got {shape}")

    g = Graph()
    x = g.input("x", shape)
    cur = g.apply(L.Reshape((1, *shape)), x)
    value = np.zeros((1, *shape))
    for i, rec in enumerate(records[1:], start=1):
        kind = rec.get("type")
        params = rec.get("params", {}) or {}
        label = rec.get("label")
        where = f"layer {i} ({kind})"
        try:
            op, extra = _make_layer(g, kind, params, value, rng, rule, f"l{i}")
            args = [value] + [g.params[g.nodes[e].name] for e in extra]
            value = op.forward(Context(False, None), *args)
        except NetSpecError as exc:
            raise NetSpecError(f"{where}: {exc}") from None
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise NetSpecError(f"{where}: {exc}") from exc
        cur = g.apply(op, cur, *extra, label=label)
    if np.size(value) != 1:
        raise NetSpecError(f"network output has shape {np.shape(value)}; "
                           "end with a 'select' or 'sum' layer")
    g.set_output(cur)
    return g


def _param(g, name, value):
    return g.param(name, np.asarray(value, dtype=DTYPE))


def _make_layer(g, kind, params, value, rng, rule, prefix):
    if kind == "conv2d":
        cin = value.shape[1]
        cout = int(params["out_channels"])
        k = int(params.get("kernel_size", 3))
        w = params.get("weight")
        w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k)) \
            if w is None else np.asarray(w, dtype=DTYPE)
        if w.shape != (cout, cin, k, k):
            raise NetSpecError(f"weight shape {w.shape} != {(cout, cin, k, k)}")
        extra = [_param(g, f"{prefix}.w", w)]
        if params.get("bias", True):
            extra.append(_param(g, f"{prefix}.b", params.get("bias_value", np.zeros(cout))))
        op = L.Conv2d(int(params.get("stride", 1)), params.get("padding", "valid"))
        return op, extra
    if kind == "batchnorm":
        ch = value.shape[1]
        op = L.BatchNorm(ch, eps=float(params.get("eps", L.BN_EPS)))
        if "running_mean" in params:
            op.state.running_mean = np.asarray(params["running_mean"], dtype=DTYPE)
        if "running_var" in params:
            op.state.running_var = np.asarray(params["running_var"], dtype=DTYPE)
        extra = [_param(g, f"{prefix}.gamma", params.get("gamma", np.ones(ch))),
                 _param(g, f"{prefix}.beta", params.get("beta", np.zeros(ch)))]
        return op, extra
    if kind == "activation":
        return L.Activation(rule), []
    if kind == "maxpool2d":
        return L.MaxPool2d(int(params.get("kernel", 2)), params.get("stride")), []
    if kind == "global_avg_pool":
        return L.GlobalAvgPool(), []
    if kind == "dense":
        din = int(np.prod(value.shape[1:]))
        dout = int(params["out_features"])
        w = params.get("weight")
        w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / din) \
            if w is None else np.asarray(w, dtype=DTYPE)
        if w.shape != (din, dout):
            raise NetSpecError(f"weight shape {w.shape} != {(din, dout)}")
        extra = [_param(g, f"{prefix}.w", w)]
        if params.get("bias", True):
            extra.append(_param(g, f"{prefix}.b", params.get("bias_value", np.zeros(dout))))
        return L.Dense(), extra
    if kind == "select":
        return L.Select(int(params["index"])), []
    if kind == "sum":
        return L.Sum(), []
    raise NetSpecError(f"unknown layer type {kind!r}")
