"""Two-stage unsupervised domain adaptation for VO2max regression from
wearable time series, with coarse (binary) and fine-grained (Gaussian)
adversarial domain discriminators."""

from udama.errors import ConfigError, ContractViolation, DimensionError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractViolation", "DimensionError", "__version__"]
