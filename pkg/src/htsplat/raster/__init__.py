from .pixel import PixelState, finalize_pixel, insert_fragment, shade_pixel
from .renderer import (Framebuffer, RenderContext, depth_complexity, prepare, preprocess, render,
                       render_points, set_threads)
from .tiling import TileList, build_tiles

__all__ = [
    "Framebuffer", "PixelState", "RenderContext", "TileList", "build_tiles", "depth_complexity",
    "finalize_pixel", "insert_fragment", "prepare", "preprocess", "render", "render_points",
    "set_threads", "shade_pixel",
]
