"""Self-describing checkpoint containers.

Every checkpoint records what produced it: a format tag, the stage kind,
a config echo, the training step count, RNG state, and the vocabulary
checksum where text conditioning is involved.  Loading verifies the tag and
kind so a VAE file can never be fed where a mask-generator file is expected.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .text import vocabulary_checksum

FORMAT_TAG = "lesionsynth-ckpt-v1"


class CheckpointError(Exception):
    pass


def save_checkpoint(
    path,
    kind: str,
    state_dicts: dict,
    config: dict,
    step: int = 0,
    frozen: bool = False,
    extra: dict | None = None,
) -> Path:
    payload = {
        "format": FORMAT_TAG,
        "kind": kind,
        "config": config,
        "step": step,
        "frozen": frozen,
        "rng_state": torch.get_rng_state(),
        "vocab_sha256": vocabulary_checksum(),
        "state": state_dicts,
    }
    if extra:
        payload["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    try:
        payload = torch.load(path, weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} container")
    if expected_kind is not None and payload.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path} holds a {payload.get('kind')!r} checkpoint, expected {expected_kind!r}"
        )
    return payload
