"""Differentiable Gaussian splatting with a learned homogeneous scattering medium."""
from .fog import FogParams
from .losses import LossWeights, psnr, ssim
from .optim import TrainConfig, TrainState, evaluate, train
from .raster import render, render_backward, set_backend
from .scene import Camera, GaussianCloud
from .synth import analytic_dehaze, synthesize_fog

__version__ = "0.1.0"

__all__ = ["FogParams", "LossWeights", "psnr", "ssim", "TrainConfig", "TrainState", "evaluate", "train",
           "render", "render_backward", "set_backend", "Camera", "GaussianCloud",
           "analytic_dehaze", "synthesize_fog", "__version__"]
