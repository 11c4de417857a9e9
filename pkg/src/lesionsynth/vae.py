"""Convolutional variational autoencoder for the diffusion latent space.

The encoder maps a [0,1] grayscale image to a diagonal-Gaussian latent
(mu, log_var) at 1/8 spatial resolution with 4 channels; the decoder maps a
latent back to image space through a final sigmoid.  After its own training
the VAE is frozen and reused by the diffusion stage; frozen models run all
forward passes under no_grad so no gradient can ever reach their weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 20.0


class ShapeError(Exception):
    pass


class NonFiniteLoss(Exception):
    pass


class FrozenVAE(Exception):
    """Raised on any attempt to train a frozen VAE."""


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    log_var: torch.Tensor


@dataclass
class VAEConfig:
    resolution: int = 64
    latent_channels: int = 4
    downsample_factor: int = 8
    base_channels: int = 32
    kl_weight: float = 1e-4  # 1.0 recovers the plain recon+KL sum
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def _to_batch(x, resolution: int | None = None) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    elif x.ndim != 4:
        raise ShapeError(f"expected HxW, BxHxW or Bx1xHxW, got {tuple(x.shape)}")
    if resolution is not None and x.shape[-2:] != (resolution, resolution):
        raise ShapeError(f"expected {resolution}x{resolution} input, got {tuple(x.shape[-2:])}")
    return x.float()


class ConvVAE(nn.Module):
    def __init__(self, config: VAEConfig | None = None):
        super().__init__()
        self.config = config or VAEConfig()
        c = self.config.base_channels
        cz = self.config.latent_channels
        if self.config.downsample_factor != 8:
            raise ValueError("only downsample_factor 8 is wired up")
        if self.config.resolution % 8 != 0:
            raise ShapeError("resolution must be divisible by 8")
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
        )
        # single head producing mu and log_var, so zero-init forces both to 0
        self.latent_head = nn.Conv2d(2 * c, 2 * cz, 3, padding=1)
        self.decoder = nn.Sequential(
            nn.Conv2d(cz, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * c, c, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c, c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(c, 1, 3, padding=1),
        )
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self._frozen = True

    def trainable_parameters(self):
        if self._frozen:
            raise FrozenVAE("VAE is frozen; refusing to expose trainable parameters")
        return self.parameters()

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        r = self.config.resolution // self.config.downsample_factor
        return (self.config.latent_channels, r, r)

    def encode(self, x) -> LatentDistribution:
        x = _to_batch(x, self.config.resolution)
        with torch.set_grad_enabled(not self._frozen and torch.is_grad_enabled()):
            h = self.latent_head(self.encoder(x))
        mu, log_var = h.chunk(2, dim=1)
        return LatentDistribution(mu=mu, log_var=log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim == 3:
            z = z[None]
        if z.shape[1:] != self.latent_shape:
            raise ShapeError(f"expected latent shape {self.latent_shape}, got {tuple(z.shape[1:])}")
        with torch.set_grad_enabled(not self._frozen and torch.is_grad_enabled()):
            return torch.sigmoid(self.decoder(z))

    def forward(self, x, noise: torch.Tensor | None = None):
        d = self.encode(x)
        if noise is None:
            noise = torch.randn_like(d.mu)
        z = reparameterize(d, noise)
        return self.decode(z), d


def reparameterize(d: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(log_var / 2) * noise."""
    return d.mu + torch.exp(d.log_var / 2.0) * noise


def kl_loss(d: LatentDistribution) -> torch.Tensor:
    """KL(q || N(0,I)): 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1), batch-averaged."""
    per_sample = 0.5 * (d.mu**2 + torch.exp(d.log_var) - d.log_var - 1.0)
    return per_sample.reshape(per_sample.shape[0], -1).sum(dim=1).mean()


def recon_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Pixelwise mean squared error."""
    x = _to_batch(x)
    x_hat = _to_batch(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x)


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images."""
    mse = float(recon_loss(torch.as_tensor(np.asarray(x), dtype=torch.float32),
                           torch.as_tensor(np.asarray(x_hat), dtype=torch.float32)))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def train_vae(images: np.ndarray, config: VAEConfig) -> tuple[ConvVAE, list[dict]]:
    """Train on an N×H×W stack, then freeze.  Returns (frozen model, history).

    The recorded total each epoch is recon + kl_weight * KL; a non-finite
    loss aborts with the offending values in the exception message.
    """
    torch.manual_seed(config.seed)
    model = ConvVAE(config)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.lr)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(config.epochs, 1), eta_min=config.lr * 0.1
    )
    data = torch.as_tensor(np.asarray(images), dtype=torch.float32)[:, None]
    n = data.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        ep_recon = ep_kl = ep_total = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            d = model.encode(batch)
            noise = torch.randn(d.mu.shape, generator=gen)
            x_hat = model.decode(reparameterize(d, noise))
            l_recon = recon_loss(batch, x_hat)
            l_kl = kl_loss(d)
            total = l_recon + config.kl_weight * l_kl
            if not torch.isfinite(total):
                raise NonFiniteLoss(
                    f"epoch {epoch}: recon={float(l_recon)} kl={float(l_kl)}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            ep_recon += l_recon.detach().item()
            ep_kl += l_kl.detach().item()
            ep_total += total.detach().item()
            n_batches += 1
        scheduler.step()
        history.append(
            {
                "epoch": epoch,
                "recon": ep_recon / n_batches,
                "kl": ep_kl / n_batches,
                "total": ep_total / n_batches,
            }
        )
        log.debug("vae epoch %d: %s", epoch, history[-1])
    model.freeze()
    return model, history
