"""Slender-object detector: deformable C5 + spatial/channel attention feeding a deformable transformer."""

from .config import RunConfig, full_config, load_config, toy_config
from .transformer import DFAMDETR, build_model

__all__ = ["DFAMDETR", "RunConfig", "build_model", "full_config", "load_config", "toy_config"]
__version__ = "0.1.0"
