"""Curvature-regularized conditional mask generator.

The generator maps (latent vector, tumor class, bounding-rectangle map) to a
soft lesion mask through a hierarchical upsampling stack whose blocks are
spatially modulated by the rectangle via SPADE normalization.  A dual-branch
discriminator judges masks both in the spatial domain and through their
Fourier magnitude spectra, and carries a second head that predicts tumor
type.  Training alternates one discriminator step (adversarial + type
classification) with one generator step (adversarial + boundary-curvature
regularization toward class-specific targets).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .curvature import curvature_loss, curvature_stats
from .data import DatasetRecord, TumorClass, bounding_rectangle
from .vae import NonFiniteLoss

log = logging.getLogger(__name__)

PROB_EPS = 1e-7  # sigmoid outputs are clamped to [PROB_EPS, 1-PROB_EPS] before logs


class AllSamplesEmpty(Exception):
    pass


@dataclass
class SCMGConfig:
    resolution: int = 64
    z_dim: int = 128
    f0_channels: int = 256
    f0_size: int = 4
    class_emb_dim: int = 64
    spade_hidden: int = 16
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 64
    epochs: int = 30
    enable_curvature: bool = True
    curvature_sigma: float = 2.0
    # which masks feed the discriminator's type head: real | generated | both
    cls_target: str = "real"
    seed: int = 0
    kappa_targets: dict | None = None  # class -> target; None = fit from data

    @property
    def n_blocks(self) -> int:
        n = int(np.log2(self.resolution // self.f0_size))
        if self.f0_size * 2**n != self.resolution:
            raise ValueError("resolution must be f0_size * 2^N")
        return n


class SpadeNorm(nn.Module):
    """gamma(s) * IN(F) + beta(s), with gamma/beta from a 2-layer conv net."""

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.instance_norm = nn.InstanceNorm2d(channels, affine=False, eps=1e-5)
        self.shared = nn.Sequential(nn.Conv2d(1, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, feats: torch.Tensor, rect_map: torch.Tensor) -> torch.Tensor:
        if rect_map.shape[-2:] != feats.shape[-2:]:
            raise ValueError(
                f"rectangle map {tuple(rect_map.shape[-2:])} does not match features "
                f"{tuple(feats.shape[-2:])}"
            )
        h = self.shared(rect_map)
        return self.gamma(h) * self.instance_norm(feats) + self.beta(h)


class _UpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, spade_hidden: int):
        super().__init__()
        self.spade = SpadeNorm(cin, spade_hidden)
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x, rect_map):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        s = F.interpolate(rect_map, size=x.shape[-2:], mode="nearest")
        return self.conv(F.relu(self.spade(x, s)))


class MaskGenerator(nn.Module):
    def __init__(self, config: SCMGConfig | None = None):
        super().__init__()
        self.config = config or SCMGConfig()
        cfg = self.config
        self.project = nn.Linear(cfg.z_dim, cfg.f0_channels * cfg.f0_size**2)
        self.class_embedding = nn.Embedding(2, cfg.class_emb_dim)
        # channel ladder quarters the width after the (wide) initial map, then
        # halves per block with a floor of 16; keeps later high-res convs cheap
        channels = [cfg.f0_channels + cfg.class_emb_dim]
        for i in range(cfg.n_blocks):
            channels.append(max(16, cfg.f0_channels // 4 // 2**i))
        self.blocks = nn.ModuleList(
            _UpBlock(channels[i], channels[i + 1], cfg.spade_hidden)
            for i in range(cfg.n_blocks)
        )
        # one head filter bank per class: boundary texture is a fine-scale
        # property, and sharing the final convolution starves the class signal
        # injected at F0 of any direct control over it
        self.head = nn.Conv2d(channels[-1], 2, 3, padding=1)

    def forward(self, z: torch.Tensor, k: torch.Tensor, rect_map: torch.Tensor) -> torch.Tensor:
        """(B,z_dim), (B,) class ids, (B,H,W) rectangle maps -> (B,H,W) soft masks."""
        cfg = self.config
        if rect_map.ndim == 3:
            rect_map = rect_map[:, None]
        rect_map = rect_map.float()
        f = self.project(z).reshape(-1, cfg.f0_channels, cfg.f0_size, cfg.f0_size)
        emb = self.class_embedding(k)[:, :, None, None].expand(-1, -1, cfg.f0_size, cfg.f0_size)
        x = torch.cat([f, emb], dim=1)
        for block in self.blocks:
            x = block(x, rect_map)
        logits = self.head(x)
        per_class = logits.gather(1, k.view(-1, 1, 1, 1).expand(-1, 1, *logits.shape[-2:]))
        return torch.sigmoid(per_class)[:, 0]


@dataclass
class DiscriminatorOutput:
    d_adv: torch.Tensor  # realness probability in (0,1)
    d_cls: torch.Tensor  # malignancy probability in (0,1)


class MaskDiscriminator(nn.Module):
    """Parallel spatial and frequency branches with realness and type heads."""

    def __init__(self, resolution: int = 64):
        super().__init__()
        self.resolution = resolution

        def down(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout, affine=True),
                nn.LeakyReLU(0.2),
            )

        self.spatial = nn.Sequential(down(1, 16), down(16, 32), down(32, 64))
        self.frequency = nn.Sequential(down(1, 16), down(16, 32))
        self.adv_head = nn.Linear(64 + 32, 1)
        self.cls_head = nn.Linear(64 + 32, 1)

    @staticmethod
    def frequency_input(masks: torch.Tensor) -> torch.Tensor:
        """Centered log(1 + |DFT|) spectrum; invariant to circular shifts."""
        spec = torch.fft.fftshift(torch.abs(torch.fft.fft2(masks)), dim=(-2, -1))
        return torch.log1p(spec)

    def forward(self, masks: torch.Tensor) -> DiscriminatorOutput:
        if masks.ndim == 2:
            masks = masks[None]
        x = masks[:, None].float()
        sp = self.spatial(x).mean(dim=(-2, -1))
        fr = self.frequency(self.frequency_input(x)).mean(dim=(-2, -1))
        h = torch.cat([sp, fr], dim=1)
        d_adv = torch.sigmoid(self.adv_head(h))[:, 0].clamp(PROB_EPS, 1 - PROB_EPS)
        d_cls = torch.sigmoid(self.cls_head(h))[:, 0].clamp(PROB_EPS, 1 - PROB_EPS)
        return DiscriminatorOutput(d_adv=d_adv, d_cls=d_cls)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS))


def loss_adv_d(d_real, d_fake) -> torch.Tensor:
    """0.5 * [-log D(real) - log(1 - D(fake))], averaged over the batch."""
    d_real = torch.as_tensor(d_real)
    d_fake = torch.as_tensor(d_fake)
    return 0.5 * (-_clamped_log(d_real) - _clamped_log(1.0 - d_fake)).mean()


def loss_adv_g(d_fake) -> torch.Tensor:
    """-log D(fake), averaged over the batch."""
    return (-_clamped_log(torch.as_tensor(d_fake))).mean()


def loss_cls(k, d_cls) -> torch.Tensor:
    """Binary cross-entropy of the type head: -[k log p + (1-k) log(1-p)]."""
    k = torch.as_tensor(k, dtype=torch.get_default_dtype())
    d_cls = torch.as_tensor(d_cls)
    return (-(k * _clamped_log(d_cls) + (1.0 - k) * _clamped_log(1.0 - d_cls))).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    generator: MaskGenerator
    discriminator: MaskDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    kappa_targets: dict
    step: int = 0


def fit_kappa_targets(records: list[DatasetRecord], sigma: float = 2.0) -> dict:
    """Class-mean boundary curvature of the training masks, per class."""
    targets = {}
    for k in TumorClass:
        masks = [r.mask for r in records if r.tumor_class == k]
        if masks:
            targets[k] = curvature_stats(masks, smoothing_sigma=sigma).mean
    return targets


def init_train_state(config: SCMGConfig, records: list[DatasetRecord]) -> TrainState:
    torch.manual_seed(config.seed)
    g = MaskGenerator(config)
    d = MaskDiscriminator(config.resolution)
    if config.kappa_targets is not None:
        targets = {TumorClass(int(k)): float(v) for k, v in config.kappa_targets.items()}
    else:
        targets = fit_kappa_targets(records, config.curvature_sigma)
    return TrainState(
        generator=g,
        discriminator=d,
        opt_g=torch.optim.Adam(g.parameters(), lr=config.lr_g, betas=config.adam_betas),
        opt_d=torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.adam_betas),
        kappa_targets=targets,
    )


def _batch_curvature_loss(
    fake: torch.Tensor, ks: torch.Tensor, targets: dict, sigma: float
) -> torch.Tensor:
    """Count-weighted mean of per-class |batch-mean curvature - target|."""
    total = torch.zeros((), dtype=fake.dtype)
    n = 0
    for k in TumorClass:
        sel = ks == int(k)
        if sel.any() and k in targets:
            m = int(sel.sum())
            total = total + m * curvature_loss(fake[sel], targets[k], smoothing_sigma=sigma)
            n += m
    return total / max(n, 1)


def train_step(
    state: TrainState,
    real_masks: torch.Tensor,
    classes: torch.Tensor,
    rect_maps: torch.Tensor,
    config: SCMGConfig,
    generator: torch.Generator,
) -> dict:
    """One discriminator update then one generator update on a real batch."""
    g, d = state.generator, state.discriminator
    b = real_masks.shape[0]
    z = torch.randn(b, config.z_dim, generator=generator)
    fake = g(z, classes, rect_maps)

    # --- discriminator ---
    out_real = d(real_masks.float())
    out_fake = d(fake.detach())
    l_adv_d = loss_adv_d(out_real.d_adv, out_fake.d_adv)
    if config.cls_target == "real":
        l_cls = loss_cls(classes, out_real.d_cls)
    elif config.cls_target == "generated":
        l_cls = loss_cls(classes, out_fake.d_cls)
    elif config.cls_target == "both":
        l_cls = 0.5 * (loss_cls(classes, out_real.d_cls) + loss_cls(classes, out_fake.d_cls))
    else:
        raise ValueError(f"unknown cls_target {config.cls_target!r}")
    l_d = l_adv_d + l_cls
    state.opt_d.zero_grad()
    l_d.backward()
    state.opt_d.step()

    # --- generator ---
    out_fake_g = d(fake)
    l_adv_g = loss_adv_g(out_fake_g.d_adv)
    if config.enable_curvature:
        l_cur = _batch_curvature_loss(
            fake, classes, state.kappa_targets, config.curvature_sigma
        )
    else:
        l_cur = torch.zeros(())
    l_g = l_adv_g + l_cur
    state.opt_g.zero_grad()
    l_g.backward()
    state.opt_g.step()
    state.step += 1

    record = {
        "step": state.step,
        "loss_d": l_d.detach().item(),
        "loss_adv_d": l_adv_d.detach().item(),
        "loss_cls": l_cls.detach().item(),
        "loss_g": l_g.detach().item(),
        "loss_adv_g": l_adv_g.detach().item(),
        "loss_cur": l_cur.detach().item(),
    }
    if not all(np.isfinite(v) for v in record.values()):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {record}")
    return record


def train_scmg(
    records: list[DatasetRecord], config: SCMGConfig
) -> tuple[TrainState, list[dict]]:
    """Alternating adversarial training on real masks and their bounding boxes."""
    from .data import rectangle_map

    state = init_train_state(config, records)
    gen = torch.Generator().manual_seed(config.seed)
    masks = torch.as_tensor(
        np.stack([r.mask for r in records]).astype(np.float32)
    )
    classes = torch.as_tensor([int(r.tumor_class) for r in records])
    rects = torch.as_tensor(
        np.stack(
            [
                rectangle_map(r.mask.shape, _safe_bbox(r.mask))
                for r in records
            ]
        ).astype(np.float32)
    )
    n = len(records)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_records = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            epoch_records.append(
                train_step(state, masks[idx], classes[idx], rects[idx], config, gen)
            )
        if not epoch_records:
            raise ValueError("dataset too small for a single batch")
        means = {
            key: float(np.mean([r[key] for r in epoch_records]))
            for key in epoch_records[0]
            if key != "step"
        }
        history.append({"epoch": epoch, **means})
        log.debug("scmg epoch %d: %s", epoch, history[-1])
    return state, history


def _safe_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Bounding box nudged to satisfy the 2-pixel margin and 16-pixel area."""
    r, c, h, w = bounding_rectangle(mask)
    n_r, n_c = mask.shape
    r = min(max(r, 2), n_r - 2 - h) if h <= n_r - 4 else 2
    c = min(max(c, 2), n_c - 2 - w) if w <= n_c - 4 else 2
    h = min(h, n_r - 2 - r)
    w = min(w, n_c - 2 - c)
    if h * w < 16:
        h = max(h, 4)
        w = max(w, 4)
        r = min(r, n_r - 2 - h)
        c = min(c, n_c - 2 - w)
    return r, c, h, w


@torch.no_grad()
def sample_masks(
    g: MaskGenerator,
    n: int,
    k: TumorClass,
    rect_maps,
    threshold: float = 0.5,
    max_retries: int = 5,
    seed: int = 0,
) -> list[np.ndarray]:
    """n thresholded masks for class k; empty outputs are resampled then rejected."""
    if n == 0:
        return []
    gen = torch.Generator().manual_seed(seed)
    rects = torch.as_tensor(np.asarray(rect_maps), dtype=torch.float32)
    if rects.ndim == 2:
        rects = rects[None]
    out: list[np.ndarray] = []
    ks = torch.full((1,), int(k), dtype=torch.long)
    for i in range(n):
        rect = rects[i % rects.shape[0]][None]
        mask = None
        for _ in range(max_retries):
            z = torch.randn(1, g.config.z_dim, generator=gen)
            soft = g(z, ks, rect)[0]
            hard = (soft >= threshold).numpy().astype(np.uint8)
            if hard.sum() > 0:
                mask = hard
                break
        if mask is None:
            log.warning("sample_masks: sample %d empty after %d retries", i, max_retries)
            continue
        out.append(mask)
    if not out:
        raise AllSamplesEmpty(f"all {n} samples empty after {max_retries} retries each")
    return out
