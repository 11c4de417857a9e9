"""Session fixtures: the phantom corpus and desk-scale trained checkpoints.

Training fixtures are expensive (minutes, not seconds), so they are
session-scoped and instantiated lazily; running only the unit-test modules
never triggers them.  Setting LESIONSYNTH_TEST_CACHE to a directory persists
trained states across sessions (development convenience; cache keys include
the training configuration, so stale hits cannot occur silently).
"""

import hashlib
import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

from lesionsynth.data import PhantomParams, generate_phantom_set
from lesionsynth.diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionTrainConfig,
    NoiseSchedule,
    train_diffusion,
)
from lesionsynth.scmg import (
    MaskDiscriminator,
    MaskGenerator,
    SCMGConfig,
    TrainState,
    train_scmg,
)
from lesionsynth.vae import ConvVAE, VAEConfig, train_vae

# Desk-scale budgets: sized for the acceptance-criterion runtime bounds on a
# small CPU box while still training far past the smoke-test regime.
PHANTOM_COUNT = 2000
SCMG_EPOCHS = 11
VAE_EPOCHS = 20
DIFFUSION_EPOCHS = 4
DESK_TIMESTEPS = 200


def _cache_dir():
    path = os.environ.get("LESIONSYNTH_TEST_CACHE")
    return Path(path) if path else None


def _cache_key(tag: str, config) -> str:
    payload = json.dumps({"tag": tag, "config": asdict(config)}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _cache_load(tag, config):
    root = _cache_dir()
    if root is None:
        return None
    path = root / f"{tag}-{_cache_key(tag, config)}.pt"
    if path.is_file():
        return torch.load(path, weights_only=False)
    return None


def _cache_store(tag, config, payload):
    root = _cache_dir()
    if root is None:
        return
    root.mkdir(parents=True, exist_ok=True)
    torch.save(payload, root / f"{tag}-{_cache_key(tag, config)}.pt")


@pytest.fixture(scope="session")
def phantom_corpus():
    return generate_phantom_set(PhantomParams(), PHANTOM_COUNT, 0)


def _train_scmg_arm(records, enable_curvature: bool):
    config = SCMGConfig(epochs=SCMG_EPOCHS, seed=0, enable_curvature=enable_curvature)
    tag = "scmg-cur" if enable_curvature else "scmg-nocur"
    cached = _cache_load(tag, config)
    if cached is not None:
        g = MaskGenerator(config)
        g.load_state_dict(cached["generator"])
        d = MaskDiscriminator(config.resolution)
        d.load_state_dict(cached["discriminator"])
        state = TrainState(
            generator=g, discriminator=d,
            opt_g=torch.optim.Adam(g.parameters()), opt_d=torch.optim.Adam(d.parameters()),
            kappa_targets=cached["kappa_targets"], step=cached["step"],
        )
        return state, cached["history"], cached["train_seconds"]
    t0 = time.time()
    state, history = train_scmg(records, config)
    seconds = time.time() - t0
    _cache_store(tag, config, {
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "kappa_targets": state.kappa_targets,
        "step": state.step,
        "history": history,
        "train_seconds": seconds,
    })
    return state, history, seconds


@pytest.fixture(scope="session")
def trained_scmg(phantom_corpus):
    return _train_scmg_arm(phantom_corpus, enable_curvature=True)


@pytest.fixture(scope="session")
def trained_scmg_nocur(phantom_corpus):
    return _train_scmg_arm(phantom_corpus, enable_curvature=False)


@pytest.fixture(scope="session")
def trained_vae(phantom_corpus):
    config = VAEConfig(epochs=VAE_EPOCHS, batch_size=32, seed=0)
    cached = _cache_load("vae", config)
    if cached is not None:
        model = ConvVAE(config)
        model.load_state_dict(cached["vae"])
        model.freeze()
        return model, cached["history"]
    images = np.stack([r.image for r in phantom_corpus])
    model, history = train_vae(images, config)
    _cache_store("vae", config, {"vae": model.state_dict(), "history": history})
    return model, history


@pytest.fixture(scope="session")
def trained_diffusion(phantom_corpus, trained_vae):
    vae, _ = trained_vae
    config = DiffusionTrainConfig(
        timesteps=DESK_TIMESTEPS, epochs=DIFFUSION_EPOCHS, batch_size=32,
        accum_steps=1, seed=0,
    )
    cached = _cache_load("diffusion", config)
    if cached is not None:
        state = Denoiser(DenoiserConfig(resolution=vae.config.resolution))
        state.load_state_dict(cached["denoiser"])
        beta = np.asarray(cached["beta"])
        sched = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
        return state, vae, sched, cached["history"]
    state, sched, history = train_diffusion(phantom_corpus[:512], vae, config)
    _cache_store("diffusion", config, {
        "denoiser": state.state_dict(), "beta": sched.beta.tolist(), "history": history,
    })
    return state, vae, sched, history
