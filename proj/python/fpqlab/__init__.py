"""Feature-perturbed quantization-aware training on small networks."""

from ._core import (
    Config,
    ConfigError,
    DivergenceError,
    Error,
    Model,
    NonFiniteError,
    ParseError,
    ShapeError,
    VersionError,
    __version__,
    accumulated_bias,
    calibrate,
    csd_loss,
    evaluate,
    fake_quantize,
    standardize,
    train,
    uniform_delta,
)

__all__ = [
    "Config",
    "ConfigError",
    "DivergenceError",
    "Error",
    "Model",
    "NonFiniteError",
    "ParseError",
    "ShapeError",
    "VersionError",
    "__version__",
    "accumulated_bias",
    "calibrate",
    "csd_loss",
    "evaluate",
    "fake_quantize",
    "standardize",
    "train",
    "uniform_delta",
]
