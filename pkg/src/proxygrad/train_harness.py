"""Tiny residual networks and a minimal supervised training loop.

The network is a scaled-down ResNet: a conv-BN-activation stem, stages of
basic residual blocks (identity or strided 1x1 projection skips), global
average pooling and a dense classifier.  The graph's output is the mean
cross-entropy; the logits are reachable as the ``"logits"`` node.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .autograd import Graph
from .datasets import Dataset
from .layers import ActivationRule
from .tensor_core import DTYPE, NumericalError, make_rng

log = logging.getLogger(__name__)


@dataclass
class TinyResNetSpec:
    widths: tuple[int, ...] = (8, 16)
    blocks: tuple[int, ...] = (1, 1)
    rule: ActivationRule = field(default_factory=ActivationRule.relu)
    batchnorm: bool = True
    classes: int = 5
    input_shape: tuple[int, int, int] = (1, 12, 12)
    bias: bool = True

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.blocks = tuple(self.blocks)
        if len(self.widths) != len(self.blocks) or not self.widths:
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if min(self.widths) < 1 or min(self.blocks) < 1 or self.classes < 2:
            raise ValueError("widths, blocks must be >= 1 and classes >= 2")


def _kaiming(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class _Builder:
    def __init__(self, spec: TinyResNetSpec, rng):
        self.spec = spec
        self.rng = rng
        self.g = Graph()
        self.bn_inputs: list[str] = []

    def conv(self, x, name, cin, cout, k, stride):
        g, spec = self.g, self.spec
        w = g.param(f"{name}.w", _kaiming(self.rng, (cout, cin, k, k), cin * k * k))
        args = [x, w]
        if spec.bias and not spec.batchnorm:
            args.append(g.param(f"{name}.b", np.zeros(cout)))
        return g.apply(L.Conv2d(stride, (k - 1) // 2), *args, label=name)

    def norm(self, x, name, ch):
        if not self.spec.batchnorm:
            return x
        g = self.g
        self.bn_inputs.append(g.nodes[x].name)
        gamma = g.param(f"{name}.gamma", np.ones(ch))
        beta = g.param(f"{name}.beta", np.zeros(ch))
        return g.apply(L.BatchNorm(ch), x, gamma, beta, label=name)

    def act(self, x, name):
        return self.g.apply(L.Activation(self.spec.rule), x, label=name)


def build_tiny_resnet(spec: TinyResNetSpec, seed: int = 0) -> Graph:
    """Graph with inputs ``"x"`` (N, C, H, W) and ``"labels"`` (N,).

    Weights use Kaiming-normal fan-in scaling with the ReLU gain; BN scales
    start at 1 and shifts at 0.  ``graph.bn_inputs`` lists the labels of the
    nodes feeding each BatchNorm, ``graph.probe`` the first conv of the
    first residual block.
    """
    b = _Builder(spec, make_rng(seed, "init"))
    g = b.g
    cin = spec.input_shape[0]
    x = g.input("x")
    labels = g.input("labels")
    h = b.act(b.norm(b.conv(x, "stem.conv", cin, spec.widths[0], 3, 1), "stem.bn",
                     spec.widths[0]), "stem.act")
    cin = spec.widths[0]
    for si, (width, nblocks) in enumerate(zip(spec.widths, spec.blocks)):
        for bi in range(nblocks):
            p = f"s{si}.b{bi}"
            stride = 2 if si > 0 and bi == 0 else 1
            y = b.act(b.norm(b.conv(h, f"{p}.conv1", cin, width, 3, stride),
                             f"{p}.bn1", width), f"{p}.act1")
            y = b.norm(b.conv(y, f"{p}.conv2", width, width, 3, 1), f"{p}.bn2", width)
            if stride != 1 or cin != width:
                skip = b.norm(b.conv(h, f"{p}.down", cin, width, 1, stride), f"{p}.down_bn", width)
            else:
                skip = h
            h = b.act(g.apply(L.Add(), y, skip, label=f"{p}.sum"), f"{p}.act2")
            cin = width
    pooled = g.apply(L.GlobalAvgPool(), h, label="pool")
    w = g.param("fc.w", _kaiming(b.rng, (cin, spec.classes), cin))
    args = [pooled, w] + ([g.param("fc.b", np.zeros(spec.classes))] if spec.bias else [])
    logits = g.apply(L.Dense(), *args, label="logits")
    g.set_output(g.apply(L.SoftmaxCrossEntropy(), logits, labels, label="loss"))
    g.bn_inputs = b.bn_inputs
    g.probe = "s0.b0.conv1"
    g.spec = spec
    return g


def set_rule(graph: Graph, rule: ActivationRule) -> None:
    for op in graph.ops(L.Activation):
        op.rule = rule


def count_parameters(graph: Graph) -> int:
    return graph.num_parameters()


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (20,)
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd-momentum"
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.optimizer not in ("sgd-momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** sum(epoch >= m for m in self.milestones)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class History:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)

    def rows(self):
        return list(zip(self.epoch, self.loss, self.train_acc, self.test_acc))


class _Sgd:
    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        for k, w in params.items():
            g = grads[k] + self.cfg.weight_decay * w if self.cfg.weight_decay else grads[k]
            v = self.velocity[k]
            v *= self.cfg.momentum
            v += g
            w -= lr * v


class _Adam:
    b1, b2, eps = 0.9, 0.999, 1e-8

    def __init__(self, params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads, lr):
        self.t += 1
        for k, w in params.items():
            g = grads[k] + self.cfg.weight_decay * w if self.cfg.weight_decay else grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            w -= lr * mhat / (np.sqrt(vhat) + self.eps)


def augment_batch(images, rng: np.random.Generator, pad: int = 2):
    """Random crop after zero padding, then random horizontal flip."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-1.0)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def train(graph: Graph, dataset: Dataset, config: TrainConfig,
          test: Dataset | None = None) -> History:
    """Minimize the graph's cross-entropy with minibatch gradient steps.

    Every activation uses its own rule for both passes, so a ProxyGrad
    network's weight gradients come from the proxy backward.  Raises
    :class:`NumericalError` if the loss stops being finite.
    """
    # batch norm cannot normalize a single sample, so such batches are skipped
    min_batch = 2 if graph.ops(L.BatchNorm) else 1
    if len(dataset) < min_batch:
        raise ValueError(f"training needs at least {min_batch} samples")
    opt = (_Sgd if config.optimizer == "sgd-momentum" else _Adam)(graph.params, config)
    order_rng = make_rng(config.seed, "data-order")
    aug_rng = make_rng(config.seed, "augment")
    hist = History()
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = order_rng.permutation(n)
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < min_batch:
                continue
            xb = dataset.images[idx]
            if config.augment:
                xb = augment_batch(xb, aug_rng)
            yb = dataset.labels[idx]
            try:
                loss, tape = graph.forward({"x": xb, "labels": yb}, training=True)
                grads = graph.backward(tape, wrt=list(graph.params))
            except NumericalError as exc:
                raise NumericalError(f"training diverged at epoch {epoch}, "
                                     f"batch starting {start}: {exc}") from exc
            if lr:
                opt.step(graph.params, grads, lr)
            total_loss += loss * len(idx)
            correct += int((tape.value("logits").argmax(axis=1) == yb).sum())
            seen += len(idx)
        hist.epoch.append(epoch + 1)
        hist.loss.append(total_loss / seen)
        hist.train_acc.append(correct / seen)
        hist.test_acc.append(evaluate(graph, test) if test is not None and len(test) else float("nan"))
        log.debug("epoch %d loss %.4f train %.3f test %.3f", epoch + 1,
                  hist.loss[-1], hist.train_acc[-1], hist.test_acc[-1])
    return hist


def predict(graph: Graph, images, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        _, tape = graph.forward({"x": xb, "labels": np.zeros(len(xb), dtype=np.int64)},
                                training=False)
        out.append(tape.value("logits").argmax(axis=1))
    return np.concatenate(out)


def evaluate(graph: Graph, dataset: Dataset) -> float:
    """Fraction of argmax predictions matching the labels (BN in inference mode)."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(graph, dataset.images) == dataset.labels))
