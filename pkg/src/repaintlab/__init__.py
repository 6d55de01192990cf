"""Diffusion-based inpainting of cytoarchitecture-like image patches.

Subpackages/modules:
  ndcore      numeric substrate: arrays, autodiff tape, Adam, NDT1 tensor files
  denoiser    residual U-Net predicting noise mean and a variance coefficient
  diffusion   cosine schedule, forward/reverse processes, training loop, EMA
  repaint     inpainting by per-step compositing with jump/resampling plans
  synthlab    procedural cytoarchitecture-like textures with exact ground truth
  metrics     embedding classifier, Gaussian moments, Frechet distance battery
  evalharness cell-statistics and classification-consistency validation
  cli         command-line entry point wiring everything together
"""

__version__ = "0.1.0"
