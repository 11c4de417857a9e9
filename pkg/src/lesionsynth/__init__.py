"""Controllable ultrasound lesion synthesis toolkit.

Subpackages cover the full pipeline: differentiable boundary-curvature
measures (`curvature`), procedural phantom data (`data`), a latent VAE
(`vae`), clinical prompt templates and a compact text encoder (`text`),
mask-and-text conditioned latent diffusion (`diffusion`), the
curvature-regularized mask GAN (`scmg`), generation-quality metrics
(`metrics`), and the downstream augmentation harness (`downstream`).
"""

__version__ = "0.1.0"
