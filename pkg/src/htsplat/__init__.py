"""CPU tile-based differentiable renderer for 3D Gaussian splats with
perspective-correct ray evaluation and hybrid transparency blending."""
from .core_math import (BakedSplat, BlendMode, Camera, ConfigError, InvalidSplatError, RawSplat,
                        RenderConfig, bake)
from .raster import Framebuffer, render

__version__ = "0.1.0"

__all__ = ["BakedSplat", "BlendMode", "Camera", "ConfigError", "Framebuffer", "InvalidSplatError",
           "RawSplat", "RenderConfig", "bake", "render"]
