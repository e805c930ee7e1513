"""Conditional U-Net predicting latent edge maps in a single forward pass.

The network takes the clean image latent only; there is no noisy-latent
input channel and no sampling loop anywhere. A module-level counter tracks
forward passes so the single-step contract is testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .conditioning import GranularityEncoder, TimeEmbedding, fuse
from .errors import ValidationError

FORWARD_CALLS = 0


def forward_call_count() -> int:
    return FORWARD_CALLS


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    stage_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_stages: tuple[int, ...] = (2,)
    in_channels: int = 4
    out_channels: int = 4
    text_dim: int = 1024
    time_dim: int = 0              # 0 -> 4 * base_channels
    norm_groups: int = 8

    def __post_init__(self):
        if self.in_channels != 4 or self.out_channels != 4:
            raise ValidationError("latent codec fixes in/out channels to 4")
        if len(self.stage_multipliers) < 2:
            raise ValidationError("need at least 2 stages")
        bad = [s for s in self.attention_stages
               if not 0 <= s < len(self.stage_multipliers)]
        if bad:
            raise ValidationError(f"attention stage out of range: {bad}")
        if self.time_dim == 0:
            object.__setattr__(self, "time_dim", 4 * self.base_channels)

    def to_dict(self):
        return {
            "base_channels": self.base_channels,
            "stage_multipliers": list(self.stage_multipliers),
            "attention_stages": list(self.attention_stages),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "text_dim": self.text_dim,
            "time_dim": self.time_dim,
            "norm_groups": self.norm_groups,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        doc["stage_multipliers"] = tuple(doc["stage_multipliers"])
        doc["attention_stages"] = tuple(doc["attention_stages"])
        return cls(**doc)


def _norm(groups, channels):
    return nn.GroupNorm(min(groups, channels), channels)


class ResidualBlock(nn.Module):
    """DDPM-style residual block with the fused embedding added per block."""

    def __init__(self, in_ch, out_ch, emb_dim, groups=8):
        super().__init__()
        self.norm1 = _norm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention over the text context."""

    def __init__(self, channels, context_dim, groups=8):
        super().__init__()
        self.norm = _norm(groups, channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(context_dim, channels)
        self.to_v = nn.Linear(context_dim, channels)
        self.proj = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.proj(attn @ v).transpose(1, 2).reshape(n, c, h, w)
        return x + out


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class EncoderStage(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, ctx_dim, attend, down, groups):
        super().__init__()
        self.res = ResidualBlock(in_ch, out_ch, emb_dim, groups)
        self.attn = CrossAttentionBlock(out_ch, ctx_dim, groups) if attend else None
        self.down = Downsample(out_ch) if down else None

    def forward(self, x, emb, ctx):
        x = self.res(x, emb)
        if self.attn is not None:
            x = self.attn(x, ctx)
        skip = x
        if self.down is not None:
            x = self.down(x)
        return x, skip


class MiddleStage(nn.Module):
    def __init__(self, channels, emb_dim, ctx_dim, groups):
        super().__init__()
        self.res1 = ResidualBlock(channels, channels, emb_dim, groups)
        self.attn = CrossAttentionBlock(channels, ctx_dim, groups)
        self.res2 = ResidualBlock(channels, channels, emb_dim, groups)

    def forward(self, x, emb, ctx):
        return self.res2(self.attn(self.res1(x, emb), ctx), emb)


class DecoderStage(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, emb_dim, ctx_dim, attend, up, groups):
        super().__init__()
        self.res = ResidualBlock(in_ch + skip_ch, out_ch, emb_dim, groups)
        self.attn = CrossAttentionBlock(out_ch, ctx_dim, groups) if attend else None
        self.up = Upsample(out_ch) if up else None

    def forward(self, x, skip, emb, ctx):
        # upsampling rounds odd sizes up; crop back to the skip's grid
        if x.shape[-2:] != skip.shape[-2:]:
            x = x[..., :skip.shape[-2], :skip.shape[-1]]
        x = self.res(torch.cat([x, skip], dim=1), emb)
        if self.attn is not None:
            x = self.attn(x, ctx)
        if self.up is not None:
            x = self.up(x)
        return x


class Head(nn.Module):
    """Output projection; the final conv is zero-initialized."""

    def __init__(self, channels, out_channels, groups):
        super().__init__()
        self.norm = _norm(groups, channels)
        self.conv = nn.Conv2d(channels, out_channels, 3, padding=1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        return self.conv(F.silu(self.norm(x)))


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cfg = config
        chans = [cfg.base_channels * m for m in cfg.stage_multipliers]
        n_stages = len(chans)
        emb_dim = cfg.time_dim
        g = cfg.norm_groups

        self.time_mlp = TimeEmbedding(cfg.base_channels, emb_dim)
        self.gran_mlp = GranularityEncoder(emb_dim)
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        enc = []
        in_ch = chans[0]
        for s in range(n_stages):
            enc.append(EncoderStage(
                in_ch, chans[s], emb_dim, cfg.text_dim,
                attend=s in cfg.attention_stages,
                down=s < n_stages - 1, groups=g,
            ))
            in_ch = chans[s]
        self.enc = nn.ModuleList(enc)

        self.mid = MiddleStage(chans[-1], emb_dim, cfg.text_dim, g)

        dec = []
        in_ch = chans[-1]
        for i, s in enumerate(reversed(range(n_stages))):
            dec.append(DecoderStage(
                in_ch, chans[s], chans[s], emb_dim, cfg.text_dim,
                attend=s in cfg.attention_stages,
                up=s > 0, groups=g,
            ))
            in_ch = chans[s]
        self.dec = nn.ModuleList(dec)

        self.head = Head(chans[0], cfg.out_channels, g)

    # groups double as the vocabulary of the finetune mask
    def group_names(self):
        names = ["time_mlp", "gran_mlp", "conv_in"]
        names += [f"enc{i}" for i in range(len(self.enc))]
        names += ["mid"]
        names += [f"dec{i}" for i in range(len(self.dec))]
        names += ["head"]
        return names

    def group_of(self, param_name: str) -> str:
        top, _, rest = param_name.partition(".")
        if top in ("enc", "dec"):
            idx, _, _ = rest.partition(".")
            return f"{top}{idx}"
        return top

    def parameters_by_group(self):
        out = {name: [] for name in self.group_names()}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append((name, p))
        return out

    def forward(self, z, t, text, g=None):
        """One network evaluation: (N, 4, h, w) latent -> same-shape latent."""
        global FORWARD_CALLS
        FORWARD_CALLS += 1

        if z.ndim != 4 or z.shape[1] != self.config.in_channels:
            raise ValidationError(f"bad latent shape {tuple(z.shape)}")
        n = z.shape[0]
        dtype = self.conv_in.weight.dtype

        t_vec = torch.as_tensor(t)
        if t_vec.ndim == 0:
            t_vec = t_vec.expand(n)
        if t_vec.shape != (n,):
            raise ValidationError(f"time steps shape {tuple(t_vec.shape)} != ({n},)")

        ctx = torch.as_tensor(text, dtype=dtype)
        if ctx.ndim == 2:
            ctx = ctx[None].expand(n, -1, -1)
        if ctx.ndim != 3 or ctx.shape[0] != n or ctx.shape[2] != self.config.text_dim:
            raise ValidationError(f"bad text context shape {tuple(ctx.shape)}")

        emb = fuse(self.time_mlp(t_vec), self.gran_mlp(g, batch=n).to(dtype))

        h = self.conv_in(z)
        skips = []
        for stage in self.enc:
            h, skip = stage(h, emb, ctx)
            skips.append(skip)
        h = self.mid(h, emb, ctx)
        for stage in self.dec:
            h = stage(h, skips.pop(), emb, ctx)
        return self.head(h)


# Trainable by default: the last two decoder stages (with the output head
# that finishes the final stage), the time-embedding projection, and the
# granularity FC layers.
def default_trainable_groups(model: UNet):
    n = len(model.dec)
    last_two = [f"dec{i}" for i in range(max(0, n - 2), n)]
    return frozenset(last_two + ["head", "time_mlp", "gran_mlp"])


@dataclass(frozen=True)
class FinetuneMask:
    trainable: frozenset[str]
    frozen: frozenset[str]

    def to_dict(self):
        return {"trainable": sorted(self.trainable), "frozen": sorted(self.frozen)}

    @classmethod
    def from_dict(cls, doc):
        return cls(frozenset(doc["trainable"]), frozenset(doc["frozen"]))


def build_finetune_mask(model: UNet, mode: str, trainable_groups=None) -> FinetuneMask:
    all_groups = frozenset(model.group_names())
    if mode not in ("partial", "full"):
        raise ValidationError(f"unknown finetune mode {mode!r}")
    if mode == "full":
        chosen = all_groups
    elif trainable_groups is not None:
        chosen = frozenset(trainable_groups)
    else:
        chosen = default_trainable_groups(model)
    unknown = chosen - all_groups
    if unknown:
        raise ValidationError(f"unknown parameter groups: {sorted(unknown)}")
    return FinetuneMask(trainable=chosen, frozen=all_groups - chosen)


def apply_finetune_mask(model: UNet, mask: FinetuneMask):
    for name, p in model.named_parameters():
        p.requires_grad_(model.group_of(name) in mask.trainable)


def trainable_parameters(model: UNet, mask: FinetuneMask):
    return [
        p for name, p in model.named_parameters()
        if model.group_of(name) in mask.trainable
    ]


def build_unet(config: UNetConfig, seed=None) -> UNet:
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(config)
