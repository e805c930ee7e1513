"""Losses, the predicted-granularity readout, and the optimization loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import conditioning, dataset
from .codec import TorchAnalyticCodec
from .denoiser import UNet, apply_finetune_mask, trainable_parameters
from .errors import DegenerateGranularityError, NumericError, ValidationError


@dataclass
class LossBreakdown:
    mse: float
    ord_pairwise: float
    ord_gran: float
    total: float

    @classmethod
    def from_parts(cls, mse, ord_pairwise, ord_gran):
        # total is the exact float64 sum of the parts, in this one order
        return cls(mse, ord_pairwise, ord_gran, mse + ord_pairwise + ord_gran)


@dataclass(frozen=True)
class OptimConfig:
    lr_start: float = 5e-5
    lr_end: float = 5e-6
    total_steps: int = 5000
    micro_batch: int = 4
    accumulation: int = 4
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def lr_at(self, step: int) -> float:
        """Linear decay from lr_start to lr_end over total_steps."""
        if self.total_steps <= 1:
            return self.lr_start
        frac = min(max(step, 0), self.total_steps - 1) / (self.total_steps - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * frac


def loss_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean of squared elementwise differences."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def pairwise_distances(latents) -> torch.Tensor:
    """L2 distances over flattened latents for each unordered pair (i < j),
    in lexicographic pair order."""
    if isinstance(latents, (list, tuple)):
        latents = torch.stack(list(latents))
    if latents.shape[0] < 2:
        raise ValidationError("need at least 2 latents for pairwise distances")
    flat = latents.reshape(latents.shape[0], -1)
    out = []
    for i in range(flat.shape[0]):
        for j in range(i + 1, flat.shape[0]):
            out.append(torch.linalg.vector_norm(flat[i] - flat[j]))
    return torch.stack(out)


def predicted_granularity(z_hat: torch.Tensor, codec: TorchAnalyticCodec, bounds):
    """Decode to the [0, 1] pixel map, sum, and min-max normalize with the
    dataset-wide edge-count bounds. Not clamped: the value may leave [0, 1]
    and the decode stays on the gradient path."""
    lo, hi = bounds
    if lo == hi:
        raise DegenerateGranularityError(f"degenerate granularity bounds ({lo}, {hi})")
    decoded = codec.decode01(z_hat)
    sums = decoded.sum(dim=(1, 2, 3))
    return (sums - lo) / (hi - lo)


def loss_ord(z_hat, z, g_hat, g):
    """(ord_pairwise, ord_gran): mean over unordered pairs of squared
    pairwise-distance error, and mean squared granularity error."""
    if z_hat.shape != z.shape:
        raise ValidationError("prediction/target latent stacks misaligned")
    if g_hat.shape != g.shape or g.shape[0] != z.shape[0]:
        raise ValidationError("granularity lists misaligned with latents")
    d_pred = pairwise_distances(z_hat)
    d_gt = pairwise_distances(z)
    ord_pairwise = torch.mean((d_pred - d_gt) ** 2)
    ord_gran = torch.mean((g_hat - g) ** 2)
    return ord_pairwise, ord_gran


def total_loss(z_hat, z_e, g, codec, bounds, detach_gran_decode=False):
    """Total objective with unit weights; returns (tensor, LossBreakdown).

    g is a (N,) tensor, or None when granularity conditioning is disabled,
    in which case both ordinal terms are skipped (exactly zero).
    """
    mse = loss_mse(z_hat, z_e)
    if g is None:
        zero = torch.zeros((), dtype=z_hat.dtype)
        breakdown = LossBreakdown.from_parts(float(mse.detach()), 0.0, 0.0)
        return mse + zero + zero, breakdown
    gran_input = z_hat.detach() if detach_gran_decode else z_hat
    g_hat = predicted_granularity(gran_input, codec, bounds)
    ord_pairwise, ord_gran = loss_ord(z_hat, z_e, g_hat, g.to(z_hat.dtype))
    total = mse + ord_pairwise + ord_gran
    breakdown = LossBreakdown.from_parts(
        float(mse.detach()), float(ord_pairwise.detach()), float(ord_gran.detach())
    )
    return total, breakdown


class Trainer:
    """Owns one model and one optimizer; micro-batches of 4 samples with
    gradient accumulation to an effective batch of 16."""

    def __init__(self, model: UNet, mask, optim: OptimConfig, bounds,
                 strategy="encoding", detach_gran_decode=False):
        apply_finetune_mask(model, mask)
        self.model = model
        self.mask = mask
        self.optim_config = optim
        self.bounds = tuple(int(b) for b in bounds)
        self.strategy = strategy
        self.detach_gran_decode = detach_gran_decode
        self.codec = TorchAnalyticCodec()
        self._trainable = trainable_parameters(model, mask)
        self.optimizer = torch.optim.AdamW(
            self._trainable, lr=optim.lr_start, weight_decay=optim.weight_decay
        )
        self.step_index = 0
        self._caption_cache = {}

    def _context(self, caption: str) -> torch.Tensor:
        if caption not in self._caption_cache:
            emb = conditioning.embed_caption(
                caption, dim=self.model.config.text_dim
            ).data
            self._caption_cache[caption] = torch.from_numpy(emb).float()
        return self._caption_cache[caption]

    def _conditioning(self, samples, caption):
        """Per Algorithm-1 layout: one caption, four granularities."""
        grans = [s.granularity for s in samples]
        disabled = any(g is None for g in grans)
        if disabled and not all(g is None for g in grans):
            raise ValidationError("mixed enabled/disabled granularities in batch")
        if disabled:
            return torch.ones(len(samples), dtype=torch.long), self._context(caption), None

        steps, contexts, g_enc = [], [], []
        for g in grans:
            t, cap, g_mlp = conditioning.apply_strategy(self.strategy, caption, g)
            steps.append(t)
            contexts.append(self._context(cap))
            g_enc.append(g_mlp)
        t_vec = torch.as_tensor(steps, dtype=torch.long)
        ctx = torch.stack(contexts)
        g_for_mlp = None
        if all(v is not None for v in g_enc):
            g_for_mlp = torch.as_tensor(g_enc, dtype=torch.float32)
        g_tensor = torch.as_tensor(grans, dtype=torch.float32)
        return t_vec, ctx, (g_for_mlp, g_tensor)

    def train_step(self, image, samples, caption="") -> LossBreakdown:
        """Forward the micro-batch, accumulate gradients, and apply the
        optimizer update on every `accumulation`-th call."""
        model = self.model
        model.train()
        n = len(samples)

        img = torch.from_numpy(np.ascontiguousarray(image)).float()
        img = img.permute(2, 0, 1)[None]
        edges = torch.from_numpy(
            np.stack([s.edge_map for s in samples]).astype(np.float32)
        )[:, None]
        with torch.no_grad():
            z_i = self.codec.encode(img).repeat(n, 1, 1, 1)
            z_e = self.codec.encode_edges(edges)

        t_vec, ctx, g_pack = self._conditioning(samples, caption)
        if g_pack is None:
            g_for_mlp, g_tensor = None, None
        else:
            g_for_mlp, g_tensor = g_pack

        z_hat = model(z_i, t_vec, ctx, g_for_mlp)
        loss, breakdown = total_loss(
            z_hat, z_e, g_tensor, self.codec, self.bounds,
            detach_gran_decode=self.detach_gran_decode,
        )
        if not math.isfinite(breakdown.total):
            raise NumericError(
                f"non-finite loss at step {self.step_index}",
                step=self.step_index,
                diagnostics=vars(breakdown),
            )

        (loss / self.optim_config.accumulation).backward()

        lr = self.optim_config.lr_at(self.step_index)
        self.step_index += 1
        if self.step_index % self.optim_config.accumulation == 0:
            for group in self.optimizer.param_groups:
                group["lr"] = lr
            if self.optim_config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    self._trainable, self.optim_config.grad_clip
                )
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
        return breakdown


def train_loop(
    manifest: dataset.DatasetManifest,
    model: UNet,
    mask,
    optim: OptimConfig,
    augment: dataset.AugmentConfig,
    steps: int,
    seed: int,
    strategy="encoding",
    detach_gran_decode=False,
    captions=None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_every=0,
):
    """Run `steps` micro-batch steps over the manifest; returns the list of
    LossBreakdown records (one per step)."""
    from .checkpoint import save_checkpoint

    captions = captions or {}
    items = []
    for entry in manifest.entries:
        annotated = dataset.load_annotated_image(manifest, entry)
        items.append((annotated, dataset.build_label_pool(annotated), entry.id))
    if not items:
        raise ValidationError("manifest has no entries")

    trainer = Trainer(
        model, mask, optim, manifest.granularity_bounds,
        strategy=strategy, detach_gran_decode=detach_gran_decode,
    )
    rng = np.random.default_rng(seed)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    history = []
    try:
        for step in range(steps):
            annotated, pool, image_id = items[int(rng.integers(0, len(items)))]
            image, samples = dataset.train_batch(annotated, rng, augment, pool=pool)
            lr = optim.lr_at(trainer.step_index)
            breakdown = trainer.train_step(image, samples, captions.get(image_id, ""))
            history.append(breakdown)
            if log_file:
                log_file.write(json.dumps({
                    "step": step,
                    "lr": lr,
                    "mse": breakdown.mse,
                    "ord_pairwise": breakdown.ord_pairwise,
                    "ord_gran": breakdown.ord_gran,
                    "total": breakdown.total,
                }) + "\n")
            if (checkpoint_path and checkpoint_every
                    and (step + 1) % checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model, mask,
                                bounds=manifest.granularity_bounds,
                                extra={"strategy": strategy, "step": step + 1})
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model, mask,
                            bounds=manifest.granularity_bounds,
                            extra={"strategy": strategy, "step": steps})
    finally:
        if log_file:
            log_file.close()
    return history
