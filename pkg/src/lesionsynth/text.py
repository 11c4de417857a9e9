"""Clinical prompt templates and a compact trainable text encoder.

Prompts describe tumor type, border clarity, and internal echogenicity;
shape words are deliberately excluded because shape is controlled by the
mask pathway, and conflicting guidance between the two would hurt both.
The encoder is a small two-block transformer over a closed vocabulary; it
is trained jointly with the diffusion model and is pluggable, so a larger
pretrained encoder can be swapped in behind the same (L, d) interface.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .data import TumorClass

PAD_TOKEN = "<pad>"
SEQ_LEN = 16
EMBED_DIM = 128

# shape descriptors must never appear in prompts; shape is mask-controlled
BLOCKED_SHAPE_LEXICON = frozenset({"round", "oval", "lobulated", "spiculated"})

BENIGN_TEMPLATE = (
    "benign tumor with well-defined borders and homogeneous internal echogenicity"
)
MALIGNANT_TEMPLATE = (
    "malignant tumor with irregular borders and heterogeneous internal echogenicity"
)

# Closed clinical vocabulary (32 symbols).  The first entries cover the two
# templates; the rest are margin/echogenicity attributes kept for future
# prompt variants.  Order defines token ids and must stay stable.
VOCABULARY = [
    PAD_TOKEN,
    "benign",
    "malignant",
    "tumor",
    "with",
    "well-defined",
    "irregular",
    "borders",
    "and",
    "homogeneous",
    "heterogeneous",
    "internal",
    "echogenicity",
    "mass",
    "margins",
    "indistinct",
    "circumscribed",
    "hypoechoic",
    "hyperechoic",
    "isoechoic",
    "anechoic",
    "posterior",
    "acoustic",
    "shadowing",
    "enhancement",
    "texture",
    "uniform",
    "mixed",
    "echo",
    "pattern",
    "solid",
    "cystic",
]

_TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCABULARY)}


class UnknownToken(Exception):
    pass


@dataclass
class PromptText:
    tokens: list[str]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("prompt must contain at least one token")
        for tok in self.tokens:
            if tok not in _TOKEN_TO_ID:
                raise UnknownToken(tok)

    def text(self) -> str:
        return detokenize(self.tokens)


def tokenize(text: str) -> list[str]:
    tokens = text.split()
    for tok in tokens:
        if tok not in _TOKEN_TO_ID:
            raise UnknownToken(tok)
    return tokens


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def build_prompt(k: TumorClass) -> PromptText:
    """The fixed clinical template for a tumor class."""
    template = BENIGN_TEMPLATE if k == TumorClass.BENIGN else MALIGNANT_TEMPLATE
    return PromptText(tokens=tokenize(template))


def token_ids(prompt: PromptText, seq_len: int = SEQ_LEN) -> torch.Tensor:
    """Pad/validate a prompt into a fixed-length id tensor."""
    if len(prompt.tokens) > seq_len:
        raise ValueError(f"prompt longer than {seq_len} tokens")
    ids = [_TOKEN_TO_ID[t] for t in prompt.tokens]
    ids += [_TOKEN_TO_ID[PAD_TOKEN]] * (seq_len - len(ids))
    return torch.tensor(ids, dtype=torch.long)


def write_vocabulary(path) -> str:
    """Write the vocabulary file (one token per line); returns its sha256."""
    text = "\n".join(VOCABULARY) + "\n"
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def vocabulary_checksum() -> str:
    text = "\n".join(VOCABULARY) + "\n"
    return hashlib.sha256(text.encode()).hexdigest()


class _SelfAttentionBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        attn, _ = self.attn(h, h, h, need_weights=False)
        x = x + attn
        return x + self.mlp(self.norm2(x))


class TextEncoder(nn.Module):
    """Token embedding + learned positions + 2 self-attention blocks.

    Output rows at padding positions are zeroed, so pads contribute the same
    (null) row to every prompt's embedding.
    """

    def __init__(self, embed_dim: int = EMBED_DIM, seq_len: int = SEQ_LEN):
        super().__init__()
        self.seq_len = seq_len
        self.embed_dim = embed_dim
        self.token_embedding = nn.Embedding(len(VOCABULARY), embed_dim)
        self.position_embedding = nn.Parameter(torch.zeros(seq_len, embed_dim))
        nn.init.normal_(self.position_embedding, std=0.02)
        self.blocks = nn.ModuleList([_SelfAttentionBlock(embed_dim) for _ in range(2)])

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != self.seq_len:
            raise ValueError(f"expected sequence length {self.seq_len}, got {ids.shape[1]}")
        x = self.token_embedding(ids) + self.position_embedding
        for block in self.blocks:
            x = block(x)
        pad_id = _TOKEN_TO_ID[PAD_TOKEN]
        keep = (ids != pad_id).float()[..., None]
        return x * keep


def encode_text(prompt: PromptText, encoder: TextEncoder) -> torch.Tensor:
    """L×d embedding of a prompt; deterministic given the encoder's weights."""
    encoder.eval()
    with torch.no_grad():
        return encoder(token_ids(prompt, encoder.seq_len))[0]
