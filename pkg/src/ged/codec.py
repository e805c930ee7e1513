"""Frozen pixel <-> latent codec.

The analytic codec maps each 8x8 block of a 3-channel signal (rescaled to
[-1, 1]) onto four coefficients: block-mean luminance plus horizontal,
vertical and diagonal first-moment responses. The four per-block filters are
mutually orthonormal, so decoding with the (scale-aware) transpose is the
exact adjoint and the round trip is an orthogonal projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

BLOCK = 8
LATENT_CHANNELS = 4


def _build_filter_bank():
    """Orthonormal (4, 3, 8, 8) filter bank and per-channel scale constants.

    Scales are chosen so that a constant signal of value c encodes to
    channel-0 value c, and a unit-amplitude ramp/saddle encodes to value 1
    on its channel.
    """
    ramp = np.arange(BLOCK, dtype=np.float64) - (BLOCK - 1) / 2.0
    p0 = np.ones((BLOCK, BLOCK))
    p1 = np.tile(ramp, (BLOCK, 1))      # varies along x: horizontal response
    p2 = p1.T                           # varies along y: vertical response
    p3 = np.outer(ramp, ramp)           # saddle: diagonal response
    chan = np.ones(3) / np.sqrt(3.0)

    patterns = [p0, p1, p2, p3]
    filters = np.stack(
        [np.einsum("c,ij->cij", chan, p / np.linalg.norm(p)) for p in patterns]
    )
    amp = ramp.max()
    scales = np.array(
        [
            np.sqrt(3.0 * BLOCK * BLOCK),
            np.sqrt(3.0) * np.linalg.norm(p1) / amp,
            np.sqrt(3.0) * np.linalg.norm(p2) / amp,
            np.sqrt(3.0) * np.linalg.norm(p3) / (amp * amp),
        ]
    )
    filters.setflags(write=False)
    scales.setflags(write=False)
    return filters, scales


FILTERS, SCALES = _build_filter_bank()
# Encode kernel divides by the scale, decode multiplies it back.
ENCODE_KERNEL = FILTERS / SCALES[:, None, None, None]
DECODE_KERNEL = FILTERS * SCALES[:, None, None, None]
ENCODE_KERNEL.setflags(write=False)
DECODE_KERNEL.setflags(write=False)


@dataclass
class LatentMap:
    """4-channel grid at 1/8 of the source resolution, channel-last."""

    data: np.ndarray                 # (H/8, W/8, 4)
    source_shape: tuple[int, int]    # (H, W) before any padding

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != LATENT_CHANNELS:
            raise ValidationError(f"latent must be (h, w, 4), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("latent contains non-finite values")


@dataclass(frozen=True)
class CodecConfig:
    kind: str = "analytic"           # analytic | tiny_trainable
    channels: int = LATENT_CHANNELS
    downsample: int = BLOCK

    def __post_init__(self):
        if self.kind not in ("analytic", "tiny_trainable"):
            raise ValidationError(f"unknown codec kind {self.kind!r}")
        if self.channels != LATENT_CHANNELS or self.downsample != BLOCK:
            raise ValidationError("codec is fixed to 4 channels at 1/8 resolution")


def pad_reflect(image, multiple=BLOCK):
    """Reflect-pad trailing rows/cols so H and W divide `multiple`.

    Returns the padded array and the original (H, W).
    """
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, (h, w)
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect"), (h, w)


def _check_divisible(arr):
    h, w = arr.shape[:2]
    if h % BLOCK or w % BLOCK:
        raise ValidationError(
            f"spatial dims must divide {BLOCK}, got {h}x{w}; pad_reflect() first"
        )


class AnalyticCodec:
    """Deterministic linear codec; parameters are fixed at import time."""

    kind = "analytic"

    def __init__(self, config: CodecConfig | None = None):
        if config is not None and config.kind != "analytic":
            raise ValidationError("AnalyticCodec requires kind='analytic'")
        self.config = config or CodecConfig()

    @property
    def encode_kernel(self):
        return ENCODE_KERNEL

    @property
    def decode_kernel(self):
        return DECODE_KERNEL

    def constants(self):
        """Codec constants for checkpoint serialization."""
        return {"filters": np.asarray(FILTERS), "scales": np.asarray(SCALES)}

    def encode_image(self, image, source_shape=None):
        """(H, W, 3) values in [0, 1] -> LatentMap of shape (H/8, W/8, 4)."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {arr.shape}")
        _check_divisible(arr)
        h, w = arr.shape[:2]
        signal = 2.0 * arr - 1.0
        blocks = signal.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK, 3)
        z = np.einsum("hiwjc,kcij->hwk", blocks, ENCODE_KERNEL)
        return LatentMap(z, source_shape or (h, w))

    def encode_edge(self, edge_map, source_shape=None):
        """Binary (H, W) map -> LatentMap; replicated to 3 channels and
        rescaled to [-1, 1] before encoding."""
        arr = np.asarray(edge_map, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"edge map must be (H, W), got {arr.shape}")
        return self.encode_image(np.repeat(arr[:, :, None], 3, axis=2),
                                 source_shape=source_shape)

    def decode_to_edge(self, latent: LatentMap):
        """LatentMap -> (H, W) map in [0, 1], cropped to source_shape."""
        z = latent.data
        h, w = z.shape[:2]
        blocks = np.einsum("hwk,kcij->hiwjc", z, DECODE_KERNEL)
        signal = blocks.reshape(h * BLOCK, w * BLOCK, 3)
        out = (signal.mean(axis=2) + 1.0) / 2.0
        np.clip(out, 0.0, 1.0, out=out)
        sh, sw = latent.source_shape
        return out[:sh, :sw]


class TinyTrainableCodec:
    """Small conv autoencoder behind the same interface; trained once on a
    corpus, then frozen. The analytic codec remains the acceptance path."""

    kind = "tiny_trainable"

    def __init__(self, seed=0):
        import torch
        from torch import nn

        torch.manual_seed(seed)
        act = nn.SiLU()
        self._enc = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), act,
            nn.Conv2d(16, 32, 3, stride=2, padding=1), act,
            nn.Conv2d(32, LATENT_CHANNELS, 3, stride=2, padding=1),
        ).double()
        self._dec = nn.Sequential(
            nn.ConvTranspose2d(LATENT_CHANNELS, 32, 4, stride=2, padding=1), act,
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1), act,
            nn.ConvTranspose2d(16, 3, 4, stride=2, padding=1),
        ).double()
        self._frozen = False
        self.config = CodecConfig(kind="tiny_trainable")

    def fit(self, images, steps=200, lr=1e-3, seed=0):
        """Train reconstruction on (N, H, W, 3) images in [0, 1], then freeze."""
        import torch

        if self._frozen:
            raise ValidationError("codec already frozen")
        x = torch.from_numpy(np.asarray(images, dtype=np.float64))
        x = x.permute(0, 3, 1, 2) * 2.0 - 1.0
        params = list(self._enc.parameters()) + list(self._dec.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(steps):
            idx = torch.randint(0, x.shape[0], (min(4, x.shape[0]),), generator=gen)
            batch = x[idx]
            recon = self._dec(self._enc(batch))
            loss = torch.mean((recon - batch) ** 2)
            opt.zero_grad()
            loss.backward()
            opt.step()
        self.freeze()

    def freeze(self):
        for p in self._enc.parameters():
            p.requires_grad_(False)
        for p in self._dec.parameters():
            p.requires_grad_(False)
        self._frozen = True

    def constants(self):
        state = {}
        for tag, mod in (("enc", self._enc), ("dec", self._dec)):
            for name, p in mod.state_dict().items():
                state[f"{tag}.{name}"] = p.detach().numpy()
        return state

    def encode_image(self, image, source_shape=None):
        import torch

        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {arr.shape}")
        _check_divisible(arr)
        with torch.no_grad():
            x = torch.from_numpy(arr).permute(2, 0, 1)[None] * 2.0 - 1.0
            z = self._enc(x)[0].permute(1, 2, 0).numpy()
        return LatentMap(z, source_shape or arr.shape[:2])

    def encode_edge(self, edge_map, source_shape=None):
        arr = np.asarray(edge_map, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"edge map must be (H, W), got {arr.shape}")
        return self.encode_image(np.repeat(arr[:, :, None], 3, axis=2),
                                 source_shape=source_shape)

    def decode_to_edge(self, latent: LatentMap):
        import torch

        with torch.no_grad():
            z = torch.from_numpy(latent.data).permute(2, 0, 1)[None]
            signal = self._dec(z)[0].numpy()
        out = (signal.mean(axis=0) + 1.0) / 2.0
        np.clip(out, 0.0, 1.0, out=out)
        sh, sw = latent.source_shape
        return out[:sh, :sw]


def build_codec(config: CodecConfig):
    if config.kind == "analytic":
        return AnalyticCodec(config)
    return TinyTrainableCodec()


# --- torch mirror of the analytic codec (training path) ---------------------


class TorchAnalyticCodec:
    """Differentiable view of the analytic codec for the training loss path.

    Numerically identical to AnalyticCodec (same constants, same einsum).
    """

    def __init__(self, device="cpu"):
        import torch

        self._enc = torch.from_numpy(np.array(ENCODE_KERNEL)).to(device)
        self._dec = torch.from_numpy(np.array(DECODE_KERNEL)).to(device)

    def encode(self, images):
        """(N, 3, H, W) in [0, 1] -> (N, 4, H/8, W/8)."""
        import torch

        n, c, h, w = images.shape
        if c != 3 or h % BLOCK or w % BLOCK:
            raise ValidationError(f"bad image batch shape {tuple(images.shape)}")
        signal = 2.0 * images - 1.0
        blocks = signal.reshape(n, 3, h // BLOCK, BLOCK, w // BLOCK, BLOCK)
        kernel = self._enc.to(images.dtype)
        return torch.einsum("nchiwj,kcij->nkhw", blocks, kernel)

    def encode_edges(self, edges):
        """(N, 1, H, W) binary -> (N, 4, H/8, W/8); replicate to 3 channels."""
        return self.encode(edges.expand(-1, 3, -1, -1))

    def decode01(self, latents):
        """(N, 4, h, w) -> (N, 1, 8h, 8w) channel-mean map clamped to [0, 1]."""
        import torch

        n, k, h, w = latents.shape
        if k != LATENT_CHANNELS:
            raise ValidationError(f"bad latent batch shape {tuple(latents.shape)}")
        kernel = self._dec.to(latents.dtype)
        blocks = torch.einsum("nkhw,kcij->nchiwj", latents, kernel)
        signal = blocks.reshape(n, 3, h * BLOCK, w * BLOCK)
        out = (signal.mean(dim=1, keepdim=True) + 1.0) / 2.0
        return out.clamp(0.0, 1.0)


def latent_to_torch(latent: LatentMap, dtype=None):
    import torch

    t = torch.from_numpy(latent.data).permute(2, 0, 1)
    return t.to(dtype) if dtype is not None else t


def latent_from_torch(tensor, source_shape):
    arr = tensor.detach().cpu().numpy().transpose(1, 2, 0)
    return LatentMap(np.ascontiguousarray(arr, dtype=np.float64), source_shape)
