"""Random conv/BN/pool/dense micro-networks for gradient checks.

``sample_micrograph`` builds a graph plus a plain description of its layers;
``manual_sweep`` re-runs the same network with the layer primitives called
directly and walks the reverse pass by hand, applying the activation slope
rule itself instead of going through ``Activation``/``Graph.backward``.
"""
import numpy as np

from proxygrad import layers as L
from proxygrad.autograd import Graph


def sample_micrograph(rng, rule):
    n = int(rng.integers(2, 5))
    cin = int(rng.integers(1, 3))
    size = int(rng.choice([4, 5, 6]))
    c1 = int(rng.integers(2, 4))
    c2 = int(rng.integers(2, 4))
    classes = int(rng.integers(2, 5))
    pool = size % 2 == 0 and bool(rng.integers(0, 2))

    params = {
        "w1": rng.standard_normal((c1, cin, 3, 3)) * 0.5,
        "b1": rng.standard_normal(c1) * 0.1,
        "gamma": 1.0 + 0.2 * rng.standard_normal(c1),
        "beta": 0.2 * rng.standard_normal(c1),
        "w2": rng.standard_normal((c2, c1, 3, 3)) * 0.5,
        "wd": rng.standard_normal((c2, classes)),
        "bd": rng.standard_normal(classes) * 0.1,
    }
    g = Graph()
    x = g.input("x", (n, cin, size, size))
    y = g.input("labels")
    p = {k: g.param(k, v) for k, v in params.items()}
    h = g.apply(L.Conv2d(1, 1), x, p["w1"], p["b1"], label="conv1")
    h = g.apply(L.BatchNorm(c1), h, p["gamma"], p["beta"], label="bn")
    h = g.apply(L.Activation(rule), h, label="act1")
    if pool:
        h = g.apply(L.MaxPool2d(2), h, label="pool")
    h = g.apply(L.Conv2d(1, 1), h, p["w2"], label="conv2")
    h = g.apply(L.Activation(rule), h, label="act2")
    h = g.apply(L.GlobalAvgPool(), h, label="gap")
    h = g.apply(L.Dense(), h, p["wd"], p["bd"], label="logits")
    g.set_output(g.apply(L.SoftmaxCrossEntropy(), h, y, label="loss"))

    bindings = {"x": rng.standard_normal((n, cin, size, size)),
                "labels": rng.integers(0, classes, size=n)}
    return g, bindings, pool


def kink_distance(graph, tape, pool):
    """Smallest margin to a non-differentiable point along the forward pass."""
    margin = min(np.abs(tape.value("bn")).min(), np.abs(tape.value("conv2")).min())
    if pool:
        a = tape.value("act1")
        n, c, h, w = a.shape
        win = a.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        top2 = np.sort(win, axis=-1)[..., -2:]
        # windows that are entirely dead under ReLU carry no gradient either way
        live = top2[..., 1] != 0
        if live.any():
            margin = min(margin, (top2[..., 1] - top2[..., 0])[live].min())
    return float(margin)


def _slope_mask(x, slope):
    # factor `slope` strictly below zero, 1 at and above zero
    return np.where(x < 0, slope, 1.0)


def manual_sweep(graph, bindings, pool, backward_slope, forward_slope=0.0):
    """Gradients of the loss w.r.t. x and every parameter, by hand."""
    P = graph.params
    x, y = bindings["x"], bindings["labels"]
    state = L.BatchNormSpec.identity(P["gamma"].shape[0])

    z1, c1 = L.conv2d_forward(x, P["w1"], P["b1"], 1, 1)
    u, cbn = L.batchnorm_forward(z1, P["gamma"], P["beta"], state, training=True)
    a1 = np.maximum(u, forward_slope * u)
    if pool:
        h, cp = L.maxpool2d_forward(a1, 2)
    else:
        h = a1
    z2, c2 = L.conv2d_forward(h, P["w2"], None, 1, 1)
    a2 = np.maximum(z2, forward_slope * z2)
    gap = a2.mean(axis=(2, 3))
    logits, cd = L.dense_forward(gap, P["wd"], P["bd"])
    _, probs = L.softmax_cross_entropy(logits, y)

    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), y] -= 1.0
    dlogits = d * (1.0 / n)
    dgap, dwd, dbd = L.dense_backward(dlogits, cd)
    hh, ww = a2.shape[2:]
    da2 = np.broadcast_to(dgap[:, :, None, None] / (hh * ww), a2.shape).copy()
    dz2 = da2 * _slope_mask(z2, backward_slope)
    dh, dw2, _ = L.conv2d_backward(dz2, c2)
    da1 = L.maxpool2d_backward(dh, cp) if pool else dh
    du = da1 * _slope_mask(u, backward_slope)
    dz1, dgamma, dbeta = L.batchnorm_backward(du, cbn)
    dx, dw1, db1 = L.conv2d_backward(dz1, c1)
    return {"x": dx, "w1": dw1, "b1": db1, "gamma": dgamma, "beta": dbeta,
            "w2": dw2, "wd": dwd, "bd": dbd}
