"""Activation maximization by projected gradient ascent on the input image.

Each iteration runs one forward pass of the original network (which also
scores the current image), one backward pass under the chosen
:class:`~proxygrad.layers.ActivationRule`, and :func:`ascend_step`:
an optionally normalized step of size ``learning_rate``, then the
regularizers in order, then clamping to the intensity range.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autograd import Graph
from .layers import ActivationRule
from .tensor_core import DTYPE, make_rng, tensor_gaussian
from .toy_problems import WhiteImageProblem, build_graph

ZERO_GRAD_NORM = 1e-12


@dataclass(frozen=True)
class Blur:
    sigma: float = 0.5
    kernel_size: int = 3


@dataclass(frozen=True)
class Rotate:
    max_degrees: float = 2.0


@dataclass(frozen=True)
class InitSpec:
    background: float = 0.0
    noise_std: float = 0.1
    seed: int = 0


@dataclass
class AmConfig:
    learning_rate: float = 1.0
    iterations: int = 200
    normalize_gradient: bool = True
    clamp: tuple[float, float] = (-1.0, 1.0)
    regularizers: tuple = ()
    init: InitSpec = field(default_factory=InitSpec)
    snapshot_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        lo, hi = self.clamp
        if lo > hi:
            raise ValueError("clamp bounds out of order")
        for reg in self.regularizers:
            if isinstance(reg, Blur) and reg.sigma < 0:
                raise ValueError("blur sigma must be >= 0")


@dataclass
class AmTrajectory:
    objective: np.ndarray
    grad_norm: np.ndarray
    zero_grad: np.ndarray
    min_pixel: np.ndarray
    mean_pixel: np.ndarray
    final_image: np.ndarray
    initial_image: np.ndarray
    best_iteration: int
    snapshots: dict = field(default_factory=dict)
    images: list | None = None

    @property
    def best_objective(self) -> float:
        return float(self.objective[self.best_iteration])

    def rows(self):
        for t in range(len(self.objective)):
            yield (t, self.objective[t], self.grad_norm[t], bool(self.zero_grad[t]),
                   self.min_pixel[t], self.mean_pixel[t])


TRAJECTORY_HEADER = ("iteration", "objective", "grad_norm", "zero_grad", "min_pixel", "mean_pixel")


def crossing_iteration(values, level: float = 0.0) -> int | None:
    """First index at which ``values`` reaches ``level``, or None."""
    hits = np.flatnonzero(np.asarray(values) >= level)
    return int(hits[0]) if hits.size else None


def init_image(shape, init: InitSpec, rng=None, clamp=(-1.0, 1.0)) -> np.ndarray:
    """Gaussian noise around a constant background, clamped to the valid range."""
    if rng is None:
        rng = make_rng(init.seed, "init")
    x = tensor_gaussian(shape, init.background, init.noise_std, rng)
    return np.clip(x, *clamp)


def regularize_blur(x, sigma: float, kernel_size: int = 3) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, zero-padded borders."""
    if kernel_size % 2 == 0:
        raise ValueError("blur kernel size must be odd")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0 or kernel_size == 1:
        return np.array(x, dtype=DTYPE)
    r = kernel_size // 2
    taps = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    taps /= taps.sum()
    out = ndimage.correlate1d(np.asarray(x, dtype=DTYPE), taps, axis=-1, mode="constant")
    return ndimage.correlate1d(out, taps, axis=-2, mode="constant")


def regularize_rotate(x, max_degrees: float, rng: np.random.Generator,
                      angle: float | None = None) -> np.ndarray:
    """Bilinear rotation about the image center by a uniform random angle.

    Pixels sampled from outside the image read the gray background 0.
    """
    if angle is None:
        angle = rng.uniform(-max_degrees, max_degrees)
    return ndimage.rotate(np.asarray(x, dtype=DTYPE), angle, axes=(-1, -2),
                          reshape=False, order=1, mode="constant", cval=0.0)


def ascend_step(x, grad, config: AmConfig, rng: np.random.Generator | None = None):
    """One projected ascent step; returns ``(new_x, was_zero_gradient)``."""
    x = np.asarray(x, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if x.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match image {x.shape}")
    norm = float(np.sqrt(np.sum(grad * grad)))
    zero = norm <= ZERO_GRAD_NORM
    if zero:
        new = x.copy()
    elif config.normalize_gradient:
        new = x + config.learning_rate * (grad / norm)
    else:
        new = x + config.learning_rate * grad
    for reg in config.regularizers:
        if isinstance(reg, Blur):
            new = regularize_blur(new, reg.sigma, reg.kernel_size)
        elif isinstance(reg, Rotate):
            if rng is None:
                raise ValueError("rotation needs an rng")
            new = regularize_rotate(new, reg.max_degrees, rng)
        else:
            raise TypeError(f"unknown regularizer {reg!r}")
    return np.clip(new, *config.clamp), zero


def run_am(target, rule: ActivationRule, config: AmConfig, x0=None,
           input_name: str = "x", keep_images: bool = False) -> AmTrajectory:
    """Run activation maximization on a graph or a white image problem.

    The objective is always read from the forward pass, i.e. the network with
    ``rule.forward_slope``; the backward slope only steers the search.
    """
    if isinstance(target, WhiteImageProblem):
        graph = build_graph(target, rule)
        shape = target.image_shape
    elif isinstance(target, Graph):
        graph = target
        node = graph.nodes[graph.node_id(input_name)]
        if node.shape is None:
            raise ValueError(f"graph input {input_name!r} needs a declared shape")
        shape = node.shape
    else:
        raise TypeError("target must be a Graph or a WhiteImageProblem")

    x = init_image(shape, config.init, clamp=config.clamp) if x0 is None \
        else np.clip(np.array(x0, dtype=DTYPE), *config.clamp)
    if x.shape != tuple(shape):
        raise ValueError(f"initial image has shape {x.shape}, expected {tuple(shape)}")
    rot_rng = make_rng(config.init.seed, "rotation")

    n = config.iterations
    objective = np.empty(n + 1)
    grad_norm = np.empty(n + 1)
    zero_grad = np.zeros(n + 1, dtype=bool)
    min_pixel = np.empty(n + 1)
    mean_pixel = np.empty(n + 1)
    snapshots = {}
    images = [] if keep_images else None
    x_init = x.copy()
    for t in range(n + 1):
        value, tape = graph.forward({input_name: x}, rule=rule)
        grad = graph.backward(tape, wrt=input_name)[input_name]
        objective[t] = value
        grad_norm[t] = float(np.sqrt(np.sum(grad * grad)))
        zero_grad[t] = grad_norm[t] <= ZERO_GRAD_NORM
        min_pixel[t] = x.min()
        mean_pixel[t] = x.mean()
        if keep_images:
            images.append(x.copy())
        if config.snapshot_every and t % config.snapshot_every == 0:
            snapshots[t] = x.copy()
        if t == n:
            break
        x, _ = ascend_step(x, grad, config, rot_rng)
    return AmTrajectory(objective=objective, grad_norm=grad_norm, zero_grad=zero_grad,
                        min_pixel=min_pixel, mean_pixel=mean_pixel, final_image=x, initial_image=x_init,
                        best_iteration=int(np.argmax(objective)),
                        snapshots=snapshots, images=images)


def slope_sweep(target, slopes, mode: str, config: AmConfig, x0=None,
                forward_slope: float = 0.0) -> list[tuple[float, float]]:
    """Final objective of the original network for each backward slope.

    ``mode="proxygrad"`` keeps ``forward_slope`` and varies the backward
    slope; ``mode="leaky"`` varies both, which changes the network itself.
    """
    if mode not in ("proxygrad", "leaky"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "leaky" and not isinstance(target, Graph):
        raise ValueError("leaky sweeps change the network; pass a Graph")
    original = ActivationRule(forward_slope, forward_slope)
    results = []
    for s in slopes:
        rule = ActivationRule(forward_slope, s) if mode == "proxygrad" else ActivationRule(s, s)
        traj = run_am(target, rule, config, x0=x0)
        if isinstance(target, Graph):
            score = target.forward({"x": traj.final_image}, rule=original)[0]
        else:
            score = traj.objective[-1]
        results.append((float(s), float(score)))
    return results
