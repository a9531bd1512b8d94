"""White image problems: toy objectives whose global optimum is the all-ones image.

Four kinds, all on a single-channel image ``x`` of shape ``(1, H, W)`` with
values in ``[-1, 1]``:

* ``F1``   -- ``sum(relu(x))``
* ``F2``   -- ``sum(lrelu_s(x))``
* ``F3``   -- ``sum(lrelu_s(x)) + sum(lrelu_s(-p * x))``
* ``CONV`` -- ``sum(lrelu_s(x (*) k))`` with the row kernel ``k = [1, 0, -p]``

Each problem can be evaluated in closed form, differentiated in closed form,
and compiled into a :class:`~proxygrad.autograd.Graph` for the AM engine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .autograd import Graph
from .tensor_core import DTYPE

KINDS = ("F1", "F2", "F3", "CONV")
DEFAULT_SHAPE = (32, 32)


class KinkError(ValueError):
    """Some pixel sits exactly on an activation kink; ``indices`` lists them."""

    def __init__(self, indices):
        self.indices = np.asarray(indices)
        super().__init__(f"{self.indices.size} pixel(s) at an activation kink")


@dataclass(frozen=True)
class WhiteImageProblem:
    kind: str
    slope: float = 0.1
    p: float = 0.2
    shape: tuple[int, int] = DEFAULT_SHAPE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        h, w = self.shape
        if h < 1 or w < 1:
            raise ValueError("image extents must be positive")
        if self.kind == "F1":
            object.__setattr__(self, "slope", 0.0)
        elif self.kind == "F2":
            if not 0.0 < self.slope < 1.0:
                raise ValueError("F2 needs 0 < s < 1")
        else:
            if not 1.0 > self.p > self.slope > 0.0:
                raise ValueError(f"{self.kind} needs 1 > p > s > 0, got p={self.p}, s={self.slope}")
            if self.kind == "CONV" and w < 3:
                raise ValueError("CONV needs width >= 3")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (1, *self.shape)

    @property
    def kernel(self) -> np.ndarray:
        """Row kernel as (out, in, kH, kW); the zero rows of the 3x3 form are dropped."""
        return np.array([[[[1.0, 0.0, -self.p]]]], dtype=DTYPE)


def _lrelu(x, s):
    return np.maximum(x, s * x)


def _slope(x, s):
    return np.where(x < 0, s, 1.0)


def _conv_rows(x, p):
    # valid row correlation with [1, 0, -p]: y[i, j] = x[i, j] - p * x[i, j + 2]
    return x[..., :-2] - p * x[..., 2:]


def _check_image(problem, x):
    x = np.asarray(x, dtype=DTYPE)
    if x.shape != problem.image_shape:
        raise ValueError(f"expected image of shape {problem.image_shape}, got {x.shape}")
    if np.any(np.abs(x) > 1.0):
        raise ValueError("image values must lie in [-1, 1]")
    return x


def evaluate(problem: WhiteImageProblem, x) -> float:
    x = _check_image(problem, x)
    s, p = problem.slope, problem.p
    if problem.kind in ("F1", "F2"):
        return float(_lrelu(x, s).sum())
    if problem.kind == "F3":
        return float(_lrelu(x, s).sum() + _lrelu(-p * x, s).sum())
    return float(_lrelu(_conv_rows(x, p), s).sum())


def analytic_grad(problem: WhiteImageProblem, x) -> np.ndarray:
    """Exact per-pixel derivative; raises :class:`KinkError` at kinks."""
    x = _check_image(problem, x)
    s, p = problem.slope, problem.p
    if problem.kind == "CONV":
        y = _conv_rows(x, p)
        if np.any(y == 0):
            raise KinkError(np.flatnonzero(y == 0))
        d = _slope(y, s)
        g = np.zeros_like(x)
        g[..., :-2] += d
        g[..., 2:] -= p * d
        return g
    if np.any(x == 0):
        raise KinkError(np.flatnonzero(x == 0))
    if problem.kind in ("F1", "F2"):
        return _slope(x, s)
    return _slope(x, s) - p * _slope(-p * x, s)


def optimum(problem: WhiteImageProblem) -> tuple[np.ndarray, float]:
    x_star = np.ones(problem.image_shape, dtype=DTYPE)
    return x_star, evaluate(problem, x_star)


def build_graph(problem: WhiteImageProblem, rule: L.ActivationRule | None = None) -> Graph:
    """Graph with input ``"x"`` of shape ``(1, H, W)`` and scalar output.

    ``rule`` defaults to the problem's own activation ``(s, s)``; a ProxyGrad
    rule must keep the problem's forward slope so the graph still computes
    :func:`evaluate`.
    """
    if rule is None:
        rule = L.ActivationRule(problem.slope, problem.slope)
    if rule.forward_slope != problem.slope:
        raise ValueError(f"{problem.kind} has forward slope {problem.slope}, "
                         f"rule has {rule.forward_slope}")
    g = Graph()
    x = g.input("x", problem.image_shape)
    if problem.kind in ("F1", "F2"):
        out = g.apply(L.Sum(), g.apply(L.Activation(rule), x, label="act"))
    elif problem.kind == "F3":
        a = g.apply(L.Activation(rule), x, label="act")
        b = g.apply(L.Activation(rule), g.apply(L.Scale(-problem.p), x), label="act_neg")
        out = g.apply(L.Add(), g.apply(L.Sum(), a), g.apply(L.Sum(), b))
    else:
        xb = g.apply(L.Reshape((1, *problem.image_shape)), x)
        k = g.param("kernel", problem.kernel)
        y = g.apply(L.Conv2d(stride=1, padding="valid"), xb, k, label="conv")
        out = g.apply(L.Sum(), g.apply(L.Activation(rule), y, label="act"))
    g.set_output(out)
    return g
