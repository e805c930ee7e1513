"""Conditioning signals: text embedding stub, time embedding, granularity
encoding and their additive fusion."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

TEXT_LEN = 77
TEXT_DIM = 1024

# Granularity integration strategies; "encoding" is the default.
STRATEGIES = ("encoding", "time_step", "text_prompt")

GRANULARITY_PROMPT = (
    "Edge granularity denotes different levels of detail, please extract "
    "the edges with the granularity of {g}."
)


@dataclass
class TextEmbedding:
    data: np.ndarray          # (L, D)
    caption: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError(f"text embedding must be 2-D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("text embedding contains non-finite values")


def _caption_seed(caption: str) -> int:
    digest = hashlib.sha256(caption.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def embed_caption(caption: str, length=TEXT_LEN, dim=TEXT_DIM) -> TextEmbedding:
    """Deterministic pseudo-random embedding keyed by the caption text.

    Identical captions give identical arrays; rows are standardized to unit
    variance. The empty caption maps to a fixed null embedding. The output
    is frozen data: it never carries gradients.
    """
    key = caption if caption else "\x00<null caption>\x00"
    rng = np.random.default_rng(_caption_seed(key))
    data = rng.standard_normal((length, dim))
    data -= data.mean(axis=1, keepdims=True)
    data /= data.std(axis=1, keepdims=True)
    return TextEmbedding(data, caption)


def null_caption_embedding(length=TEXT_LEN, dim=TEXT_DIM) -> TextEmbedding:
    return embed_caption("", length=length, dim=dim)


def sinusoidal_time_embedding(t, dim: int) -> torch.Tensor:
    """Standard sinusoidal positional embedding; t may be a scalar or a
    1-D tensor of non-negative steps. Returns (N, dim)."""
    if dim % 2:
        raise ValidationError("embedding dim must be even")
    steps = torch.as_tensor(t)
    if steps.ndim == 0:
        steps = steps[None]
    if (steps < 0).any():
        raise ValidationError("time step must be >= 0")
    steps = steps.double()
    half = dim // 2
    freqs = torch.exp(
        -np.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    args = steps[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    """Two-layer projection applied to the raw sinusoidal embedding; its
    parameters belong to the denoiser."""

    def __init__(self, base_dim: int, out_dim: int):
        super().__init__()
        self.base_dim = base_dim
        self.lin1 = nn.Linear(base_dim, out_dim)
        self.lin2 = nn.Linear(out_dim, out_dim)

    def forward(self, t) -> torch.Tensor:
        dtype = self.lin1.weight.dtype
        raw = sinusoidal_time_embedding(t, self.base_dim).to(dtype)
        return self.lin2(torch.nn.functional.silu(self.lin1(raw)))


class GranularityEncoder(nn.Module):
    """Two affine layers with a SiLU between, scalar in, out_dim out.

    The disabled sentinel (g=None) maps to an exact zero vector so that the
    fused embedding equals the time embedding.
    """

    def __init__(self, out_dim: int):
        super().__init__()
        self.out_dim = out_dim
        self.lin1 = nn.Linear(1, out_dim)
        self.lin2 = nn.Linear(out_dim, out_dim)

    def forward(self, g, batch: int = 1) -> torch.Tensor:
        dtype = self.lin1.weight.dtype
        if g is None:
            return torch.zeros(batch, self.out_dim, dtype=dtype)
        gt = torch.as_tensor(g, dtype=dtype)
        if gt.ndim == 0:
            gt = gt[None]
        if gt.ndim != 1:
            raise ValidationError(f"granularity must be scalar or 1-D, got {gt.shape}")
        if ((gt < 0) | (gt > 1)).any():
            raise ValidationError("granularity outside [0, 1]")
        return self.lin2(torch.nn.functional.silu(self.lin1(gt[:, None])))


def fuse(f_t: torch.Tensor, f_g: torch.Tensor) -> torch.Tensor:
    """Elementwise sum; no normalization afterwards."""
    if f_t.shape != f_g.shape:
        raise ValidationError(f"dimension mismatch {f_t.shape} vs {f_g.shape}")
    return f_t + f_g


def granularity_to_timestep(g: float) -> int:
    """Map g in [0, 1] to an integer step in [0, 1000] for the time-step
    integration strategy."""
    if not 0.0 <= g <= 1.0:
        raise ValidationError(f"granularity {g} outside [0, 1]")
    return int(round(g * 1000))


def caption_with_granularity(caption: str, g: float) -> str:
    """Append the granularity sentence for the text-prompt strategy."""
    sentence = GRANULARITY_PROMPT.format(g=g)
    return f"{caption} {sentence}".strip()


def apply_strategy(strategy: str, caption: str, g):
    """Resolve the (timestep, caption, mlp-granularity) triple for one sample.

    Returns (t, caption, g_for_encoder); only the default "encoding"
    strategy feeds g through the granularity FC layers.
    """
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown granularity strategy {strategy!r}")
    if strategy == "encoding" or g is None:
        return 1, caption, g
    if strategy == "time_step":
        return granularity_to_timestep(g), caption, None
    return 1, caption_with_granularity(caption, g), None
