"""Checkpoint archive: one zip holding config JSON, codec constants, all
named parameter arrays as 32-bit little-endian floats, and the finetune
mask. Writes are atomic (temp file + rename)."""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .codec import FILTERS, SCALES, AnalyticCodec
from .denoiser import FinetuneMask, UNet, UNetConfig, apply_finetune_mask
from .errors import ValidationError

FORMAT_VERSION = 1


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr))
    return buf.getvalue()


def _write_entry(zf, name, payload):
    # fixed timestamp keeps checkpoint bytes deterministic across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path, model: UNet, mask: FinetuneMask, bounds=None, extra=None):
    path = Path(path)
    config = {
        "format_version": FORMAT_VERSION,
        "unet": model.config.to_dict(),
        "finetune_mask": mask.to_dict(),
        "codec": {"kind": "analytic", "channels": 4, "downsample": 8},
        "granularity_bounds": list(bounds) if bounds is not None else None,
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            with zipfile.ZipFile(fh, "w", zipfile.ZIP_DEFLATED) as zf:
                _write_entry(zf, "config.json", json.dumps(config, indent=2))
                _write_entry(zf, "codec/filters.npy",
                             _npy_bytes(FILTERS.astype("<f8")))
                _write_entry(zf, "codec/scales.npy",
                             _npy_bytes(SCALES.astype("<f8")))
                for name, p in model.state_dict().items():
                    arr = p.detach().cpu().numpy().astype("<f4")
                    _write_entry(zf, f"params/{name}.npy", _npy_bytes(arr))
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def load_checkpoint(path):
    """Returns (model, mask, codec, config_dict); the model carries the
    checkpointed parameters and the mask is applied."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            config = json.loads(zf.read("config.json"))
            if config.get("format_version") != FORMAT_VERSION:
                raise ValidationError(
                    f"unsupported checkpoint format {config.get('format_version')}"
                )
            filters = np.load(io.BytesIO(zf.read("codec/filters.npy")))
            scales = np.load(io.BytesIO(zf.read("codec/scales.npy")))
            params = {}
            for info in zf.infolist():
                if info.filename.startswith("params/"):
                    name = info.filename[len("params/"):-len(".npy")]
                    params[name] = np.load(io.BytesIO(zf.read(info.filename)))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise ValidationError(f"malformed checkpoint {path}: {exc}") from exc

    if not np.allclose(filters, FILTERS) or not np.allclose(scales, SCALES):
        raise ValidationError("checkpoint codec constants do not match this build")

    model = UNet(UNetConfig.from_dict(config["unet"]))
    state = {name: torch.from_numpy(arr.astype(np.float32)) for name, arr in params.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint/config mismatch: {exc}") from exc
    mask = FinetuneMask.from_dict(config["finetune_mask"])
    apply_finetune_mask(model, mask)
    model.eval()
    return model, mask, AnalyticCodec(), config
