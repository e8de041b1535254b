"""Distractor-robust CPU Gaussian splatting: training, masking, and benchmarks."""

__version__ = "0.1.0"

from .core import Camera, Splat, SplatCloud, covariance_from_params, eval_sh, project_splat
from .rasterizer import GradientSet, RenderAux, render, render_backward

__all__ = [
    "Camera", "Splat", "SplatCloud", "covariance_from_params", "eval_sh",
    "project_splat", "GradientSet", "RenderAux", "render", "render_backward",
]
