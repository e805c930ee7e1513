"""Boundary-benchmark metrics: NMS thinning, tolerance-based pixel
correspondence against multiple annotators, PR curves, ODS/OIS/AP, and the
multi-prediction best-ODS/OIS protocol.

This module holds the reference (slow, obviously-correct) matcher; the
optional native kernel is an exact drop-in for the counting loop.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import thin as _morph_thin

from .errors import ValidationError


@dataclass(frozen=True)
class MatchConfig:
    max_dist_frac: float = 0.0075     # fraction of the image diagonal
    n_thresholds: int = 99
    apply_nms: bool = True

    def __post_init__(self):
        if not 0.0 < self.max_dist_frac < 0.1:
            raise ValidationError(f"max_dist_frac {self.max_dist_frac} outside (0, 0.1)")
        if self.n_thresholds < 1:
            raise ValidationError("n_thresholds must be >= 1")

    def thresholds(self):
        n = self.n_thresholds
        return [(i + 1) / (n + 1) for i in range(n)]

    def max_dist_px(self, shape) -> float:
        h, w = shape[:2]
        return self.max_dist_frac * float(np.hypot(h, w))


@dataclass
class PRPoint:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f_measure: float


@dataclass
class ImageBest:
    image_id: str
    threshold: float
    f_measure: float
    tp: int
    fp: int
    fn: int
    choice: int = 0      # prediction index for multi-prediction runs


@dataclass
class EvalResult:
    ods: float
    ois: float
    ap: float
    per_image: list
    curve: list


def _precision(tp, fp):
    return 1.0 if tp + fp == 0 else tp / (tp + fp)


def _recall(tp, fn):
    return 1.0 if tp + fn == 0 else tp / (tp + fn)


def _fmeasure(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _counts_f(tp, fp, fn):
    return _fmeasure(_precision(tp, fp), _recall(tp, fn))


# --- NMS / thinning -----------------------------------------------------------


def nms_thin(prob_map, smooth_sigma=2.0, tie_tol=1.01):
    """Suppress non-maxima along the local gradient direction (bilinear
    neighbor comparison on the raw map, orientation from the smoothed map),
    then morphologically thin the surviving support. Retained pixels keep
    their original values; everything else becomes 0."""
    arr = np.asarray(prob_map, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"prob map must be 2-D, got {arr.shape}")
    if arr.size == 0 or arr.max() <= 0.0:
        return np.zeros_like(arr)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError("prob map values outside [0, 1]")

    smoothed = ndimage.gaussian_filter(arr, smooth_sigma, mode="nearest")
    gy, gx = np.gradient(smoothed)
    norm = np.hypot(gx, gy)
    ux = np.divide(gx, norm, out=np.zeros_like(gx), where=norm > 0)
    uy = np.divide(gy, norm, out=np.zeros_like(gy), where=norm > 0)

    yy, xx = np.mgrid[0:arr.shape[0], 0:arr.shape[1]].astype(np.float64)
    ahead = ndimage.map_coordinates(arr, [yy + uy, xx + ux], order=1, mode="constant")
    behind = ndimage.map_coordinates(arr, [yy - uy, xx - ux], order=1, mode="constant")
    keep = (arr * tie_tol >= ahead) & (arr * tie_tol >= behind) & (arr > 0)

    support = _morph_thin(keep)
    return np.where(support, arr, 0.0)


# --- pixel correspondence ------------------------------------------------------


def candidate_pairs(pred_bin, gt_bin, max_dist_px):
    """(d2, pred_flat, gt_flat) arrays for all pixel pairs within the match
    tolerance, sorted by (d2, pred index, gt index). Distances are squared
    integer pixel offsets; the inclusion test is d2 <= max_dist_px**2."""
    pred = np.asarray(pred_bin).astype(bool)
    gt = np.asarray(gt_bin).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    h, w = pred.shape
    limit = float(max_dist_px) * float(max_dist_px)
    reach = int(np.floor(float(max_dist_px)))

    ys, xs = np.nonzero(pred)
    d2s, pidx, gidx = [], [], []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            d2 = dy * dy + dx * dx
            if float(d2) > limit:
                continue
            gy = ys + dy
            gx = xs + dx
            ok = (gy >= 0) & (gy < h) & (gx >= 0) & (gx < w)
            if not ok.any():
                continue
            sy, sx, sgy, sgx = ys[ok], xs[ok], gy[ok], gx[ok]
            hit = gt[sgy, sgx]
            if not hit.any():
                continue
            d2s.append(np.full(int(hit.sum()), d2, dtype=np.int64))
            pidx.append((sy[hit] * w + sx[hit]).astype(np.int64))
            gidx.append((sgy[hit] * w + sgx[hit]).astype(np.int64))
    if not d2s:
        return (np.empty(0, np.int64),) * 3
    d2s = np.concatenate(d2s)
    pidx = np.concatenate(pidx)
    gidx = np.concatenate(gidx)
    order = np.lexsort((gidx, pidx, d2s))
    return d2s[order], pidx[order], gidx[order]


def correspond_pixels_ref(pred_bin, gt_bin, max_dist_px):
    """One-to-one greedy matching by increasing distance, ties broken by
    row-major (pred pixel, gt pixel) order. Returns boolean masks of matched
    predicted and ground-truth pixels."""
    pred = np.asarray(pred_bin).astype(bool)
    gt = np.asarray(gt_bin).astype(bool)
    _, pidx, gidx = candidate_pairs(pred, gt, max_dist_px)
    pred_matched = np.zeros(pred.size, dtype=bool)
    gt_matched = np.zeros(gt.size, dtype=bool)
    for p, g in zip(pidx.tolist(), gidx.tolist()):
        if not pred_matched[p] and not gt_matched[g]:
            pred_matched[p] = True
            gt_matched[g] = True
    return pred_matched.reshape(pred.shape), gt_matched.reshape(gt.shape)


def threshold_counts(prob_map, gt_maps, thresholds, max_dist_px,
                     apply_nms=True, kernel="ref"):
    """Per-threshold (tp, fp, fn) for one prediction against all annotator
    maps. tp counts predicted pixels matched to at least one annotator; fn
    sums unmatched ground-truth pixels over annotators."""
    prob = np.asarray(prob_map, dtype=np.float64)
    gts = [np.asarray(g).astype(bool) for g in gt_maps]
    if not gts:
        raise ValidationError("need at least one annotator map")
    for g in gts:
        if g.shape != prob.shape:
            raise ValidationError(f"gt shape {g.shape} != prediction {prob.shape}")
    if apply_nms:
        prob = nms_thin(prob)

    if kernel == "fast":
        from . import fastkernel

        rows = fastkernel.sweep_fast(prob, gts, thresholds, max_dist_px)
        return [(tp, fp, fn) for tp, fp, fn, _ in rows]
    if kernel != "ref":
        raise ValidationError(f"unknown kernel {kernel!r}")

    total_gt = sum(int(g.sum()) for g in gts)
    counts = []
    for t in thresholds:
        pred = prob >= t
        n_pred = int(pred.sum())
        if n_pred == 0:
            counts.append((0, 0, total_gt))
            continue
        union = np.zeros(prob.shape, dtype=bool)
        fn = 0
        for g in gts:
            pm, gm = correspond_pixels_ref(pred, g, max_dist_px)
            union |= pm
            fn += int(g.sum()) - int(gm.sum())
        tp = int(union.sum())
        counts.append((tp, n_pred - tp, fn))
    return counts


def _counts_job(args):
    prob, gts, thresholds, max_dist, apply_nms, kernel = args
    return threshold_counts(prob, gts, thresholds, max_dist, apply_nms, kernel)


def _collect_counts(jobs):
    workers = int(os.environ.get("GED_NUM_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_counts_job, jobs))
    return [_counts_job(j) for j in jobs]


# --- aggregation ---------------------------------------------------------------


def average_precision(recalls, precisions) -> float:
    """Area under the PR curve after enforcing a monotonically nonincreasing
    precision envelope over recall, trapezoidal, anchored at recall 0."""
    r = np.asarray(recalls, dtype=np.float64)
    p = np.asarray(precisions, dtype=np.float64)
    order = np.argsort(r, kind="stable")
    r = r[order]
    p = p[order].copy()
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0] if len(p) else 1.0], p])
    return float(np.trapezoid(p, r))


def _curve_from_totals(totals, thresholds):
    curve = []
    for t, (tp, fp, fn) in zip(thresholds, totals):
        p = _precision(tp, fp)
        r = _recall(tp, fn)
        curve.append(PRPoint(t, tp, fp, fn, p, r, _fmeasure(p, r)))
    return curve


def _check_alignment(predictions, gts):
    missing = sorted(set(gts) - set(predictions))
    if missing:
        raise ValidationError(f"missing predictions for ids: {missing}")
    return sorted(gts)


def evaluate(predictions, gts, cfg: MatchConfig, kernel="ref") -> EvalResult:
    """Dataset metrics for one prediction per image.

    predictions: {image_id: prob map}; gts: {image_id: [annotator maps]}.
    """
    ids = _check_alignment(predictions, gts)
    thresholds = cfg.thresholds()
    jobs = [
        (predictions[i], gts[i], thresholds,
         cfg.max_dist_px(np.asarray(predictions[i]).shape), cfg.apply_nms, kernel)
        for i in ids
    ]
    by_image = dict(zip(ids, _collect_counts(jobs)))
    return _aggregate_single(by_image, thresholds, ids)


def _aggregate_single(by_image, thresholds, ids):
    n_t = len(thresholds)
    totals = []
    for ti in range(n_t):
        tp = sum(by_image[i][ti][0] for i in ids)
        fp = sum(by_image[i][ti][1] for i in ids)
        fn = sum(by_image[i][ti][2] for i in ids)
        totals.append((tp, fp, fn))
    curve = _curve_from_totals(totals, thresholds)
    ods = max((pt.f_measure for pt in curve), default=0.0)

    ois_tp = ois_fp = ois_fn = 0
    per_image = []
    for i in ids:
        best_ti = 0
        best_f = -1.0
        for ti in range(n_t):
            f = _counts_f(*by_image[i][ti])
            if f > best_f:
                best_f = f
                best_ti = ti
        tp, fp, fn = by_image[i][best_ti]
        ois_tp += tp
        ois_fp += fp
        ois_fn += fn
        per_image.append(ImageBest(i, thresholds[best_ti], best_f, tp, fp, fn))
    ois = _counts_f(ois_tp, ois_fp, ois_fn)

    ap = average_precision(
        [pt.recall for pt in curve], [pt.precision for pt in curve]
    )
    return EvalResult(ods, ois, ap, per_image, curve)


def _best_ratio_selection(options):
    """Exactly maximize sum(n)/sum(d) over one (n, d) choice per image.

    options: per image, a list of (n, d) integer pairs with d >= n >= 0.
    Dinkelbach iteration; terminates because the selection space is finite
    and the ratio strictly increases. Returns (choice indices, ratio)."""
    lam = 0.0
    best_sel = None
    for _ in range(1000):
        sel = []
        for opts in options:
            best_v = None
            best_j = 0
            for j, (n, d) in enumerate(opts):
                v = n - lam * d
                if best_v is None or v > best_v:
                    best_v = v
                    best_j = j
            sel.append(best_j)
        num = sum(opts[j][0] for opts, j in zip(options, sel))
        den = sum(opts[j][1] for opts, j in zip(options, sel))
        if den == 0:
            return sel, 1.0
        new_lam = num / den
        if best_sel is not None and new_lam <= lam:
            return best_sel, lam
        best_sel = sel
        lam = new_lam
    return best_sel, lam


def evaluate_multi(pred_sets, gts, cfg: MatchConfig, kernel="ref") -> EvalResult:
    """Best-ODS/OIS over M predictions per image.

    Per threshold, best-ODS takes the per-image prediction choice that
    maximizes the dataset-aggregated F; best-OIS lets every image pick its
    own best (prediction, threshold) pair.
    """
    ids = _check_alignment(pred_sets, gts)
    m_values = {len(pred_sets[i]) for i in ids}
    if len(m_values) != 1:
        raise ValidationError(f"ragged prediction counts across images: {sorted(m_values)}")
    m = m_values.pop()
    if m < 1:
        raise ValidationError("need at least one prediction per image")

    thresholds = cfg.thresholds()
    jobs = []
    for i in ids:
        for pm in pred_sets[i]:
            jobs.append((pm, gts[i], thresholds,
                         cfg.max_dist_px(np.asarray(pm).shape), cfg.apply_nms, kernel))
    flat = _collect_counts(jobs)
    counts = {
        i: flat[k * m:(k + 1) * m]
        for k, i in enumerate(ids)
    }

    n_t = len(thresholds)
    curve = []
    best_ods = 0.0
    for ti in range(n_t):
        options = []
        for i in ids:
            opts = []
            for mi in range(m):
                tp, fp, fn = counts[i][mi][ti]
                opts.append((2 * tp, 2 * tp + fp + fn))
            options.append(opts)
        sel, f = _best_ratio_selection(options)
        tp = sum(counts[i][sel[k]][ti][0] for k, i in enumerate(ids))
        fp = sum(counts[i][sel[k]][ti][1] for k, i in enumerate(ids))
        fn = sum(counts[i][sel[k]][ti][2] for k, i in enumerate(ids))
        p = _precision(tp, fp)
        r = _recall(tp, fn)
        curve.append(PRPoint(thresholds[ti], tp, fp, fn, p, r, _fmeasure(p, r)))
        best_ods = max(best_ods, curve[-1].f_measure)

    ois_tp = ois_fp = ois_fn = 0
    per_image = []
    for i in ids:
        best = (-1.0, 0, 0)
        for mi in range(m):
            for ti in range(n_t):
                f = _counts_f(*counts[i][mi][ti])
                if f > best[0]:
                    best = (f, mi, ti)
        f, mi, ti = best
        tp, fp, fn = counts[i][mi][ti]
        ois_tp += tp
        ois_fp += fp
        ois_fn += fn
        per_image.append(ImageBest(i, thresholds[ti], f, tp, fp, fn, choice=mi))
    ois = _counts_f(ois_tp, ois_fp, ois_fn)

    ap = average_precision(
        [pt.recall for pt in curve], [pt.precision for pt in curve]
    )
    return EvalResult(best_ods, ois, ap, per_image, curve)


def write_results_csv(result: EvalResult, path, flags=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in sorted((flags or {}).items()):
        lines.append(f"# {key}={value}")
    lines.append("threshold,precision,recall,f_measure")
    for pt in result.curve:
        lines.append(
            f"{pt.threshold:.6f},{pt.precision:.9f},{pt.recall:.9f},{pt.f_measure:.9f}"
        )
    lines.append(f"summary,{result.ods:.9f},{result.ois:.9f},{result.ap:.9f}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
