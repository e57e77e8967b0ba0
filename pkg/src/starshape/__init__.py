"""Generative-modeling lab for two-channel cell images.

Builds plain, channel-separated, multi-channel and star-shaped generators,
trains them under GAN / WGAN / WGAN-GP objectives, and evaluates them with
classifier two-sample tests and latent-space reconstruction.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    MiningError,
    NumericError,
    ProtocolError,
    ShapeError,
    SpecError,
    SplitError,
    StarshapeError,
)

__all__ = [
    "__version__",
    "StarshapeError",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "MiningError",
    "NumericError",
    "ProtocolError",
    "ShapeError",
    "SpecError",
    "SplitError",
]
