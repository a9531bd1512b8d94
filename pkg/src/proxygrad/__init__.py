"""ProxyGrad laboratory: asymmetric-slope activations in a small autodiff engine."""

__version__ = "0.1.0"

from .layers import ActivationRule  # noqa: E402

__all__ = ["ActivationRule", "__version__"]
