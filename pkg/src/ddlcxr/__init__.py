"""Conditional latent diffusion for updating stale images in asynchronous multimodal clinical prediction."""

from .config import RunConfig, load_config
from .errors import ConfigError, DataError, DdlCxrError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DdlCxrError", "NumericalError", "RunConfig", "load_config", "__version__"]
