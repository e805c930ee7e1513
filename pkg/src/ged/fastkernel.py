"""ctypes client for the optional native match kernel.

The kernel is a separately built cdylib exposing versioned C symbols; the
reference path in `evaluation` never needs it. The kernel consumes the
post-NMS probability map: NMS is threshold-independent and applied once on
the Python side.
"""

from __future__ import annotations

import ctypes
import os
from pathlib import Path

import numpy as np

from .errors import ValidationError

_LIB = None
_SEARCHED = []


class _CorrespondResult(ctypes.Structure):
    _fields_ = [
        ("status", ctypes.c_int32),
        ("tp", ctypes.c_int64),
        ("matched_gt", ctypes.c_int64),
    ]


def _candidate_paths():
    env = os.environ.get("GED_MATCHKERNEL_LIB")
    if env:
        yield Path(env)
    root = Path(__file__).resolve().parents[2]
    for base in (root, Path.cwd()):
        for name in ("libmatchkernel.so", "libmatchkernel.dylib", "matchkernel.dll"):
            yield base / "matchkernel" / "target" / "release" / name


def _load():
    global _LIB
    if _LIB is not None:
        return _LIB
    _SEARCHED.clear()
    for path in _candidate_paths():
        _SEARCHED.append(str(path))
        if path.is_file():
            lib = ctypes.CDLL(str(path))
            lib.matchkernel_correspond_v1.restype = _CorrespondResult
            lib.matchkernel_correspond_v1.argtypes = [
                ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
                ctypes.c_size_t, ctypes.c_size_t, ctypes.c_double,
                ctypes.POINTER(ctypes.c_uint8), ctypes.POINTER(ctypes.c_uint8),
            ]
            lib.matchkernel_sweep_v1.restype = ctypes.c_int32
            lib.matchkernel_sweep_v1.argtypes = [
                ctypes.POINTER(ctypes.c_double), ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_uint8), ctypes.c_size_t,
                ctypes.c_size_t, ctypes.c_size_t,
                ctypes.POINTER(ctypes.c_double), ctypes.c_size_t,
                ctypes.c_double, ctypes.POINTER(ctypes.c_int64),
            ]
            _LIB = lib
            return lib
    return None


def available() -> bool:
    return _load() is not None


def require():
    lib = _load()
    if lib is None:
        raise ValidationError(
            "native match kernel not found; build matchkernel/ with "
            f"`cargo build --release` (searched: {_SEARCHED})"
        )
    return lib


def _as_u8(arr):
    return np.ascontiguousarray(np.asarray(arr).astype(bool), dtype=np.uint8)


def correspond_fast(pred_bin, gt_bin, max_dist_px):
    """Drop-in for correspond_pixels_ref; identical matched sets."""
    lib = require()
    pred = _as_u8(pred_bin)
    gt = _as_u8(gt_bin)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    h, w = pred.shape
    out_pred = np.zeros(h * w, dtype=np.uint8)
    out_gt = np.zeros(h * w, dtype=np.uint8)
    res = lib.matchkernel_correspond_v1(
        pred.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), pred.size,
        gt.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), gt.size,
        h, w, float(max_dist_px),
        out_pred.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
        out_gt.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)),
    )
    if res.status != 0:
        raise ValidationError(f"match kernel correspond failed (status {res.status})")
    return (
        out_pred.astype(bool).reshape(h, w),
        out_gt.astype(bool).reshape(h, w),
    )


def sweep_fast(prob_map, gt_maps, thresholds, max_dist_px):
    """Per-threshold (tp, fp, fn_total, pred_count); the prob map must
    already be NMS-processed if NMS is wanted."""
    lib = require()
    prob = np.ascontiguousarray(np.asarray(prob_map, dtype=np.float64))
    if prob.ndim != 2:
        raise ValidationError(f"prob map must be 2-D, got {prob.shape}")
    h, w = prob.shape
    gts = [_as_u8(g) for g in gt_maps]
    if not gts:
        raise ValidationError("need at least one annotator map")
    for g in gts:
        if g.shape != prob.shape:
            raise ValidationError(f"gt shape {g.shape} != prediction {prob.shape}")
    ths = np.ascontiguousarray(np.asarray(thresholds, dtype=np.float64))
    if ths.size and not np.all(np.diff(ths) > 0):
        raise ValidationError("thresholds must be strictly increasing")
    gt_blob = np.concatenate([g.ravel() for g in gts])
    out = np.zeros(ths.size * 4, dtype=np.int64)
    status = lib.matchkernel_sweep_v1(
        prob.ctypes.data_as(ctypes.POINTER(ctypes.c_double)), prob.size,
        gt_blob.ctypes.data_as(ctypes.POINTER(ctypes.c_uint8)), len(gts),
        h, w,
        ths.ctypes.data_as(ctypes.POINTER(ctypes.c_double)), ths.size,
        float(max_dist_px),
        out.ctypes.data_as(ctypes.POINTER(ctypes.c_int64)),
    )
    if status != 0:
        raise ValidationError(f"match kernel sweep failed (status {status})")
    rows = out.reshape(-1, 4)
    return [tuple(int(v) for v in row) for row in rows]
