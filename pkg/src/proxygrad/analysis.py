"""Rectified-Gaussian moments and gradient / activation statistics of tiny ResNets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datasets import synthetic_shapes
from .layers import ActivationRule
from .tensor_core import make_rng
from .train_harness import TinyResNetSpec, build_tiny_resnet


@dataclass(frozen=True)
class MomentPair:
    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be non-negative")


def _check_slope(s):
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"slope must lie in [0, 1], got {s}")


def rectified_gaussian_mean(s: float) -> float:
    """Mean of max(z, s*z) for z ~ N(0, 1)."""
    _check_slope(s)
    return (1.0 - s) / math.sqrt(2.0 * math.pi)


def rectified_gaussian_var(s: float) -> float:
    """Variance of max(z, s*z) for z ~ N(0, 1)."""
    _check_slope(s)
    return (s * s + 1.0) / 2.0 - (1.0 - s) ** 2 / (2.0 * math.pi)


def rectified_gaussian_moments(s: float) -> MomentPair:
    return MomentPair(rectified_gaussian_mean(s), rectified_gaussian_var(s))


def monte_carlo_moments(s: float, n: int, rng: np.random.Generator) -> MomentPair:
    if n < 2:
        raise ValueError("need at least 2 samples")
    z = rng.standard_normal(n)
    y = np.maximum(z, s * z)
    return MomentPair(float(y.mean()), float(y.var(ddof=1)))


def moment_standard_errors(s: float, n: int) -> tuple[float, float]:
    """Sampling standard errors of the sample mean and sample variance.

    Uses the closed-form second and fourth moments of the rectified Gaussian:
    E[y^2] = (1 + s^2)/2 and E[y^4] = 3 (1 + s^4)/2 about zero.
    """
    mu = rectified_gaussian_mean(s)
    var = rectified_gaussian_var(s)
    m2 = (1 + s ** 2) / 2
    m3 = (1 - s ** 3) * 2 / math.sqrt(2 * math.pi)
    m4 = 3 * (1 + s ** 4) / 2
    central4 = m4 - 4 * mu * m3 + 6 * mu ** 2 * m2 - 3 * mu ** 4
    return math.sqrt(var / n), math.sqrt(max(central4 - var ** 2, 0.0) / n)


def moments_table(slopes, n: int, seed: int) -> list[dict]:
    """Closed form vs Monte-Carlo rows with a 4-standard-error tolerance."""
    rows = []
    for k, s in enumerate(slopes):
        mc = monte_carlo_moments(s, n, make_rng(seed, f"moments-{k}"))
        cf = rectified_gaussian_moments(s)
        se_mean, se_var = moment_standard_errors(s, n)
        rows.append({
            "slope": float(s),
            "mean_closed": cf.mean, "mean_mc": mc.mean, "mean_tol": 4 * se_mean,
            "var_closed": cf.variance, "var_mc": mc.variance, "var_tol": 4 * se_var,
            "agree": abs(cf.mean - mc.mean) <= 4 * se_mean
                     and abs(cf.variance - mc.variance) <= 4 * se_var,
        })
    return rows


# --------------------------------------------------------------------------
# Network profiles


@dataclass
class GradientProfile:
    mode: str
    slope: float
    batchnorm: bool
    layers: list[str]
    per_seed: np.ndarray  # (seeds, layers) mean |grad|
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.per_seed.std(axis=0)

    @property
    def n_seeds(self) -> int:
        return len(self.per_seed)


def rule_for(mode: str, slope: float) -> ActivationRule:
    if mode == "leaky":
        return ActivationRule.leaky(slope)
    if mode == "proxygrad":
        return ActivationRule.proxygrad(slope)
    raise ValueError(f"mode must be 'leaky' or 'proxygrad', got {mode!r}")


def _random_batch(spec: TinyResNetSpec, batch_size: int, seed: int):
    per_class = -(-batch_size // spec.classes)
    ds = synthetic_shapes(per_class, spec.classes, spec.input_shape[-1],
                          make_rng(seed, "batch"))
    idx = make_rng(seed, "batch-pick").permutation(len(ds))[:batch_size]
    return ds.images[idx], ds.labels[idx]


def layer_gradient_magnitude(spec: TinyResNetSpec, rule: ActivationRule, seeds,
                             probes=None, batch_size: int = 32,
                             mode: str = "") -> GradientProfile:
    """Mean |dLoss/d(node output)| at each probe, one row per seed.

    For every seed the network is freshly initialized and fed a fresh random
    batch; batch norm runs in training mode as it would during learning.
    """
    spec = replace(spec, rule=rule)
    rows = []
    labels_out = None
    for seed in seeds:
        g = build_tiny_resnet(spec, seed)
        probe_labels = [g.probe] if probes is None else list(probes)
        for p in probe_labels:
            g.node_id(p)
        xb, yb = _random_batch(spec, batch_size, seed)
        _, tape = g.forward({"x": xb, "labels": yb}, training=True)
        g.backward(tape, wrt=[])
        rows.append([float(np.mean(np.abs(tape.grad(p)))) for p in probe_labels])
        labels_out = probe_labels
    return GradientProfile(mode, rule.backward_slope, spec.batchnorm, labels_out,
                           np.array(rows), list(seeds))


def bn_input_std_profile(spec: TinyResNetSpec, rule: ActivationRule, seeds,
                         layers=None, batch_size: int = 32) -> dict[str, np.ndarray]:
    """Per-seed standard deviation of the input to each BatchNorm layer.

    The std is taken per channel over (N, H, W), the statistic batch norm
    divides by, and averaged over channels.  Returns
    ``{layer_label: array of per-seed values}``.  By default every BN
    layer that sits downstream of an activation is probed; the stem BN sees
    only the raw image through one conv and does not depend on the slope.
    """
    spec = replace(spec, rule=rule, batchnorm=True)
    out: dict[str, list] = {}
    for seed in seeds:
        g = build_tiny_resnet(spec, seed)
        names = [n for n in g.bn_inputs if not n.startswith("stem.")] if layers is None else layers
        xb, yb = _random_batch(spec, batch_size, seed)
        _, tape = g.forward({"x": xb, "labels": yb}, training=True)
        for name in names:
            v = tape.value(name)
            out.setdefault(name, []).append(float(v.std(axis=(0, 2, 3)).mean()))
    return {k: np.array(v) for k, v in out.items()}


def sweep_gradient_magnitude(spec: TinyResNetSpec, slopes, modes=("leaky", "proxygrad"),
                             seeds=range(20), batchnorm=(True, False),
                             batch_size: int = 32) -> list[GradientProfile]:
    profiles = []
    for bn in batchnorm:
        for mode in modes:
            for s in slopes:
                p = layer_gradient_magnitude(replace(spec, batchnorm=bn), rule_for(mode, s),
                                             seeds, batch_size=batch_size, mode=mode)
                profiles.append(p)
    return profiles
