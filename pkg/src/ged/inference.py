"""Single-pass edge prediction and the multi-granularity sweep."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import conditioning
from .codec import AnalyticCodec, latent_from_torch, latent_to_torch, pad_reflect
from .errors import ValidationError


@dataclass
class EdgePrediction:
    prob_map: np.ndarray          # (H, W) in [0, 1]
    granularity: float | None
    image_id: str

    def __post_init__(self):
        arr = np.asarray(self.prob_map, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"prob map must be 2-D, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("prob map values outside [0, 1]")
        self.prob_map = arr


class Predictor:
    """Read-only view over a trained checkpoint; encode -> one U-Net
    forward at t=1 -> decode, with no sampling anywhere."""

    def __init__(self, model, codec: AnalyticCodec, config: dict):
        model.eval()
        self.model = model
        self.codec = codec
        self.config = config
        self.strategy = (config.get("extra") or {}).get("strategy", "encoding")
        self._caption_cache = {}

    @classmethod
    def from_checkpoint(cls, path):
        from .checkpoint import load_checkpoint

        model, _mask, codec, config = load_checkpoint(path)
        return cls(model, codec, config)

    def _context(self, caption: str) -> torch.Tensor:
        if caption not in self._caption_cache:
            emb = conditioning.embed_caption(
                caption, dim=self.model.config.text_dim
            ).data
            self._caption_cache[caption] = torch.from_numpy(emb).float()[None]
        return self._caption_cache[caption]

    def predict(self, image, g, image_id="", caption="") -> EdgePrediction:
        if g is not None and not 0.0 <= g <= 1.0:
            raise ValidationError(f"granularity {g} outside [0, 1]")
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {arr.shape}")
        padded, source_shape = pad_reflect(arr)
        latent = self.codec.encode_image(padded, source_shape=source_shape)

        t, cap, g_mlp = conditioning.apply_strategy(self.strategy, caption, g)
        ctx = self._context(cap)
        z = latent_to_torch(latent, dtype=torch.float32)[None]
        g_in = None if g_mlp is None else torch.tensor([float(g_mlp)])
        with torch.no_grad():
            z_hat = self.model(z, torch.tensor([t]), ctx, g_in)
        out = latent_from_torch(z_hat[0], source_shape)
        return EdgePrediction(self.codec.decode_to_edge(out), g, image_id)

    def sweep(self, image, m=11, image_id="", caption=""):
        """M predictions on the uniform granularity grid k/(M-1)."""
        if m < 2:
            raise ValidationError(f"sweep needs M >= 2, got {m}")
        return [
            self.predict(image, k / (m - 1), image_id=image_id, caption=caption)
            for k in range(m)
        ]


def prediction_filename(image_id: str, g) -> str:
    if g is None:
        return f"{image_id}_goff.png"
    return f"{image_id}_g{round(g * 100):03d}.png"


def save_prediction_png(pred: EdgePrediction, out_dir) -> Path:
    """16-bit grayscale PNG of round(prob * 65535)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / prediction_filename(pred.image_id, pred.granularity)
    arr = np.round(pred.prob_map * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path)
    return path


def load_prediction_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr / 65535.0
