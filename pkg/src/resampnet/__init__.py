"""Dual-stream CNN for detecting resampling in JPEG-recompressed images, in numpy."""

__version__ = "0.1.0"

from .network import NetworkConfig, NetworkGraph, build_network  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402

__all__ = ["NetworkConfig", "NetworkGraph", "build_network", "load_checkpoint", "save_checkpoint", "__version__"]
