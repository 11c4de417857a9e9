"""Latent diffusion with mask and text conditioning.

Forward noising uses the closed form z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps.
The denoiser is a small UNet with text cross-attention at the bottleneck plus
a control branch: a copy of the UNet encoder that consumes the noisy latent
concatenated with the downsampled lesion mask and injects multi-scale
residuals into the decoder through zero-initialized 1x1 projections, so the
conditioned and unconditioned models coincide exactly at initialization.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import text as text_mod
from .data import TumorClass
from .text import PromptText, TextEncoder, build_prompt, token_ids
from .vae import ConvVAE, NonFiniteLoss, ShapeError

log = logging.getLogger(__name__)


class UnfrozenVAE(Exception):
    pass


class AllSamplesEmpty(Exception):
    pass


@dataclass
class NoiseSchedule:
    """Linear beta schedule with its cumulative alpha-bar products."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1:
            raise ValueError("T must be >= 1")
        beta = np.linspace(beta_start, beta_end, T)
        sched = cls(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
        sched.validate()
        return sched

    def validate(self) -> None:
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta values must lie in (0,1)")
        if self.T > 1 and np.any(np.diff(self.beta) <= 0):
            raise ValueError("beta must be strictly increasing")
        if np.any(np.diff(self.alpha_bar) >= 0) and self.T > 1:
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(self.alpha_bar <= 0) or np.any(self.alpha_bar >= 1):
            raise ValueError("alpha_bar must lie in (0,1)")


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising to timestep t."""
    t_arr = np.atleast_1d(np.asarray(t))
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T})")
    abar = torch.as_tensor(sched.alpha_bar[t_arr], dtype=z0.dtype)
    if z0.ndim == 4:
        abar = abar.view(-1, 1, 1, 1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# Denoiser network
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Single-head attention from spatial features to the text embedding."""

    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(text_dim, dim, bias=False)
        self.to_v = nn.Linear(text_dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.scale = dim**-0.5

    def forward(self, x, context):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = self.to_k(context)
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.proj(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class _ZeroConv(nn.Conv2d):
    def __init__(self, channels: int):
        super().__init__(channels, channels, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class _Encoder(nn.Module):
    """Shared encoder topology for the base UNet and the control branch."""

    def __init__(self, in_channels: int, base: int, temb_dim: int, text_dim: int):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, base, 3, padding=1)
        self.block1 = _ResBlock(base, base, temb_dim)
        self.down = nn.Conv2d(base, 2 * base, 3, stride=2, padding=1)
        self.block2 = _ResBlock(2 * base, 2 * base, temb_dim)
        self.mid1 = _ResBlock(2 * base, 2 * base, temb_dim)
        self.attn = _CrossAttention(2 * base, text_dim)
        self.mid2 = _ResBlock(2 * base, 2 * base, temb_dim)

    def forward(self, x, temb, context):
        s1 = self.block1(self.conv_in(x), temb)
        s2 = self.block2(self.down(s1), temb)
        mid = self.mid2(self.attn(self.mid1(s2, temb), context), temb)
        return s1, s2, mid


@dataclass
class DenoiserConfig:
    resolution: int = 64
    latent_channels: int = 4
    downsample_factor: int = 8
    base_channels: int = 64
    temb_dim: int = 128
    text_dim: int = text_mod.EMBED_DIM


class Denoiser(nn.Module):
    """Conditioned noise predictor: base UNet + text encoder + control branch."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        c = self.config.base_channels
        td = self.config.temb_dim
        xd = self.config.text_dim
        cz = self.config.latent_channels
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.text_encoder = TextEncoder(embed_dim=xd)
        self.encoder = _Encoder(cz, c, td, xd)
        # control branch: encoder copy taking the latent + downsampled mask
        self.control = _Encoder(cz + 1, c, td, xd)
        self.zero_mid = _ZeroConv(2 * c)
        self.zero_s2 = _ZeroConv(2 * c)
        self.zero_s1 = _ZeroConv(c)
        self.dec2 = _ResBlock(2 * c, 2 * c, td)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.fuse = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec1 = _ResBlock(c, c, td)
        self.head = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(), nn.Conv2d(c, cz, 3, padding=1))

    @property
    def latent_size(self) -> int:
        return self.config.resolution // self.config.downsample_factor

    def control_parameters(self):
        for m in (self.control, self.zero_mid, self.zero_s2, self.zero_s1):
            yield from m.parameters()

    def base_parameters(self):
        control_ids = {id(p) for p in self.control_parameters()}
        for p in self.parameters():
            if id(p) not in control_ids:
                yield p

    def forward(self, z_t, t, context, mask_lowres, use_control: bool = True):
        temb = self.time_mlp(timestep_embedding(t, self.config.temb_dim))
        s1, s2, mid = self.encoder(z_t, temb, context)
        if use_control:
            c1, c2, cmid = self.control(torch.cat([z_t, mask_lowres], dim=1), temb, context)
            mid = mid + self.zero_mid(cmid)
            s2_in = mid + self.zero_s2(c2)
        else:
            s2_in = mid
        d2 = self.dec2(s2_in, temb)
        u = self.up(F.interpolate(d2, scale_factor=2, mode="nearest"))
        u = self.fuse(torch.cat([u, s1], dim=1))
        if use_control:
            u = u + self.zero_s1(c1)
        d1 = self.dec1(u, temb)
        return self.head(d1)


def _prompts_to_context(state: Denoiser, prompts: list[PromptText]) -> torch.Tensor:
    ids = torch.stack([token_ids(p, state.text_encoder.seq_len) for p in prompts])
    return state.text_encoder(ids)


def _mask_to_lowres(state: Denoiser, masks) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    if m.ndim == 2:
        m = m[None]
    if m.shape[-2:] != (state.config.resolution, state.config.resolution):
        raise ShapeError(
            f"mask must be {state.config.resolution}x{state.config.resolution}, got {tuple(m.shape[-2:])}"
        )
    return F.avg_pool2d(m[:, None], state.config.downsample_factor)


def denoise_predict(
    state: Denoiser,
    z_t: torch.Tensor,
    t,
    prompt,
    mask,
    use_control: bool = True,
) -> torch.Tensor:
    """Predict the noise in z_t under text and mask conditioning."""
    batched = z_t.ndim == 4
    if not batched:
        z_t = z_t[None]
    prompts = prompt if isinstance(prompt, (list, tuple)) else [prompt]
    if len(prompts) == 1 and z_t.shape[0] > 1:
        prompts = list(prompts) * z_t.shape[0]
    t_tensor = torch.as_tensor(np.atleast_1d(np.asarray(t)), dtype=torch.long)
    if t_tensor.numel() == 1 and z_t.shape[0] > 1:
        t_tensor = t_tensor.expand(z_t.shape[0])
    context = _prompts_to_context(state, list(prompts))
    mask_lr = _mask_to_lowres(state, mask)
    if mask_lr.shape[0] == 1 and z_t.shape[0] > 1:
        mask_lr = mask_lr.expand(z_t.shape[0], -1, -1, -1)
    out = state(z_t, t_tensor, context, mask_lr, use_control=use_control)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    epochs: int = 10
    batch_size: int = 32
    accum_steps: int = 4  # effective batch = batch_size * accum_steps
    lr: float = 1e-4
    lock_base: bool = False
    seed: int = 0


def diffusion_loss(
    state: Denoiser,
    images: torch.Tensor,
    masks,
    classes,
    vae: ConvVAE,
    sched: NoiseSchedule,
    generator: torch.Generator,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-element MSE between true and predicted noise (the training objective).

    `t` and `eps` default to fresh draws; passing them pins the timesteps and
    target noise (used by the oracle tests).
    """
    if not vae.frozen:
        raise UnfrozenVAE("diffusion training requires a frozen VAE")
    d = vae.encode(images)
    z0 = d.mu + torch.exp(d.log_var / 2.0) * torch.randn(d.mu.shape, generator=generator)
    b = z0.shape[0]
    if t is None:
        t = torch.randint(0, sched.T, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator)
    z_t = forward_diffuse(z0, t.numpy(), eps, sched)
    prompts = [build_prompt(TumorClass(int(k))) for k in classes]
    pred = denoise_predict(state, z_t, t, prompts, masks)
    return F.mse_loss(pred, eps)


def train_diffusion(
    records, vae: ConvVAE, config: DiffusionTrainConfig
) -> tuple[Denoiser, NoiseSchedule, list[dict]]:
    """Joint training of the UNet, control branch, and text encoder."""
    if not vae.frozen:
        raise UnfrozenVAE("freeze the VAE before diffusion training")
    torch.manual_seed(config.seed)
    state = Denoiser(DenoiserConfig(resolution=vae.config.resolution))
    sched = NoiseSchedule.linear(config.timesteps, config.beta_start, config.beta_end)
    params = (
        list(state.control_parameters()) + list(state.text_encoder.parameters())
        if config.lock_base
        else list(state.parameters())
    )
    opt = torch.optim.AdamW(params, lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)

    images = torch.as_tensor(np.stack([r.image for r in records]), dtype=torch.float32)
    masks = np.stack([r.mask for r in records]).astype(np.float32)
    classes = np.array([int(r.tumor_class) for r in records])
    n = len(records)
    vae_checksum = parameter_checksum(vae)

    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen).numpy()
        losses = []
        opt.zero_grad()
        pending = False
        for i, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            loss = diffusion_loss(
                state, images[idx], masks[idx], classes[idx], vae, sched, gen
            )
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch} batch {i}: loss={loss.detach().item()}")
            (loss / config.accum_steps).backward()
            pending = True
            if (i + 1) % config.accum_steps == 0:
                opt.step()
                opt.zero_grad()
                pending = False
            losses.append(loss.detach().item())
        if pending:  # flush a partial accumulation group
            opt.step()
            opt.zero_grad()
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        log.debug("diffusion epoch %d: %s", epoch, history[-1])
    if parameter_checksum(vae) != vae_checksum:
        raise RuntimeError("frozen VAE parameters changed during diffusion training")
    return state, sched, history


def parameter_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


@torch.no_grad()
def sample_ddpm(
    state: Denoiser,
    vae: ConvVAE,
    mask,
    prompt: PromptText,
    sched: NoiseSchedule,
    seed: int = 0,
) -> np.ndarray:
    """Ancestral sampling with the posterior mean/variance, then VAE decode."""
    gen = torch.Generator().manual_seed(seed)
    shape = (1, *vae.latent_shape)
    z = torch.randn(shape, generator=gen)
    abar = sched.alpha_bar
    for t in range(sched.T - 1, -1, -1):
        eps_hat = denoise_predict(state, z, t, prompt, mask)
        beta_t = sched.beta[t]
        alpha_t = 1.0 - beta_t
        mean = (z - beta_t / math.sqrt(1.0 - abar[t]) * eps_hat) / math.sqrt(alpha_t)
        if t > 0:
            var = beta_t * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            z = mean + math.sqrt(var) * torch.randn(shape, generator=gen)
        else:
            z = mean
    image = vae.decode(z)[0, 0]
    return image.numpy()


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided sub-sequence of timesteps, always ending at T-1."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must lie in [1, {T}]")
    taus = np.round(np.linspace(T - 1, 0, steps)).astype(int)[::-1]
    return np.unique(taus)


@torch.no_grad()
def sample_ddim(
    state: Denoiser,
    vae: ConvVAE,
    mask,
    prompt: PromptText,
    sched: NoiseSchedule,
    steps: int = 50,
    eta: float = 0.0,
    seed: int = 0,
    init_latent: torch.Tensor | None = None,
) -> np.ndarray:
    """DDIM sampling over a strided timestep subset; eta = 0 is deterministic.

    With eta = 0 the seed is consumed only for the initial latent, so runs
    with a pinned `init_latent` are bitwise identical whatever the seed.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    gen = torch.Generator().manual_seed(seed)
    shape = (1, *vae.latent_shape)
    if init_latent is not None:
        z = init_latent.clone()
        if z.ndim == 3:
            z = z[None]
    else:
        z = torch.randn(shape, generator=gen)
    taus = ddim_timesteps(sched.T, steps)
    abar = sched.alpha_bar
    for idx in range(len(taus) - 1, -1, -1):
        t = int(taus[idx])
        abar_t = abar[t]
        abar_prev = abar[int(taus[idx - 1])] if idx > 0 else 1.0
        eps_hat = denoise_predict(state, z, t, prompt, mask)
        x0_hat = (z - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
        sigma = eta * math.sqrt(
            max((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev), 0.0)
        )
        direction = math.sqrt(max(1.0 - abar_prev - sigma**2, 0.0)) * eps_hat
        z = math.sqrt(abar_prev) * x0_hat + direction
        if sigma > 0:
            z = z + sigma * torch.randn(shape, generator=gen)
    image = vae.decode(z)[0, 0]
    return image.numpy()


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ["image_path", "mask_path", "class", "prompt", "seed"]


def draw_sample_spec(seed: int, index: int, class_mix: float, n_rects: int):
    """Per-sample draw of (class, rectangle index, child seed).

    The stream derives from (seed, index) alone, so samples are independent
    of generation order and safe to produce in parallel.
    """
    child = int(np.random.SeedSequence((seed, index)).generate_state(1)[0])
    rng = np.random.default_rng(child)
    k = TumorClass.MALIGNANT if rng.random() < class_mix else TumorClass.BENIGN
    rect_idx = int(rng.integers(0, n_rects))
    return k, rect_idx, child


def generate_dataset(
    state: Denoiser,
    vae: ConvVAE,
    scmg_generator,
    sched: NoiseSchedule,
    n: int,
    class_mix: float,
    rectangles: list[tuple[int, int, int, int]],
    out_dir,
    steps: int = 50,
    eta: float = 0.0,
    seed: int = 0,
) -> Path:
    """Write n synthetic (image, mask, label) triplets plus a manifest.

    `class_mix` is the malignant probability; rectangles are drawn uniformly
    from the provided (empirical) list.  Per-sample RNG streams derive from
    (seed, index), so generation order does not matter.
    """
    from .scmg import sample_masks
    from .data import rectangle_map

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    label_rows = []
    for i in range(n):
        k, rect_idx, child = draw_sample_spec(seed, i, class_mix, len(rectangles))
        rect = rectangles[rect_idx]
        rect_map = rectangle_map((state.config.resolution, state.config.resolution), rect)
        mask = sample_masks(scmg_generator, 1, k, [rect_map], seed=child)[0]
        prompt = build_prompt(k)
        image = sample_ddim(state, vae, mask.astype(np.float32), prompt, sched,
                            steps=steps, eta=eta, seed=child)
        img_path = out / "images" / f"{i:06d}.png"
        mask_path = out / "masks" / f"{i:06d}.png"
        _save_gray(image, img_path)
        _save_gray(mask.astype(np.float64), mask_path)
        rows.append([str(img_path), str(mask_path), k.name.lower(), prompt.text(), str(child)])
        label_rows.append((f"{i:06d}", k.name.lower()))
    manifest = out / "manifest.tsv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "class"])
        writer.writerows(label_rows)
    return manifest


def _save_gray(arr: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)).save(path)
