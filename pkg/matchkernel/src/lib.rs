//! Pixel correspondence matching and threshold sweeps for boundary metrics.
//!
//! The matcher is a one-to-one greedy assignment by increasing Euclidean
//! distance with ties broken by row-major (pred pixel, gt pixel) order.
//! Candidate pairs come from a disk-offset table precomputed for the match
//! tolerance; distances are exact squared integer pixel offsets, and the
//! inclusion test is `d2 as f64 <= max_dist * max_dist`, so results are
//! bit-stable and identical to any implementation of the same rule.

use rayon::prelude::*;

/// Disk offsets (dy, dx, d2) for `max_dist`, in scan order.
fn offset_table(max_dist: f64) -> Vec<(i64, i64, i64)> {
    let limit = max_dist * max_dist;
    let reach = max_dist.floor() as i64;
    let mut out = Vec::new();
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d2 = dy * dy + dx * dx;
            if (d2 as f64) <= limit {
                out.push((dy, dx, d2));
            }
        }
    }
    out
}

/// Candidate (d2, pred_index, gt_index) pairs sorted by exactly that key.
fn candidate_pairs(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    offsets: &[(i64, i64, i64)],
) -> Vec<(i64, i64, i64)> {
    let mut pairs = Vec::new();
    for gy in 0..h as i64 {
        for gx in 0..w as i64 {
            let g_idx = gy * w as i64 + gx;
            if gt[g_idx as usize] == 0 {
                continue;
            }
            for &(dy, dx, d2) in offsets {
                let py = gy + dy;
                let px = gx + dx;
                if py < 0 || py >= h as i64 || px < 0 || px >= w as i64 {
                    continue;
                }
                let p_idx = py * w as i64 + px;
                if pred[p_idx as usize] != 0 {
                    pairs.push((d2, p_idx, g_idx));
                }
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Greedy one-to-one matching; returns (pred mask, gt mask, tp, matched_gt).
pub fn greedy_match(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    max_dist: f64,
) -> (Vec<u8>, Vec<u8>, i64, i64) {
    let offsets = offset_table(max_dist);
    greedy_match_with(pred, gt, h, w, &offsets)
}

fn greedy_match_with(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    offsets: &[(i64, i64, i64)],
) -> (Vec<u8>, Vec<u8>, i64, i64) {
    let mut pred_mask = vec![0u8; h * w];
    let mut gt_mask = vec![0u8; h * w];
    let mut tp = 0i64;
    for (_, p, g) in candidate_pairs(pred, gt, h, w, offsets) {
        let (pi, gi) = (p as usize, g as usize);
        if pred_mask[pi] == 0 && gt_mask[gi] == 0 {
            pred_mask[pi] = 1;
            gt_mask[gi] = 1;
            tp += 1;
        }
    }
    (pred_mask, gt_mask, tp, tp)
}

/// Per-threshold (tp, fp, fn_total, pred_count) against all annotator maps.
/// tp counts predicted pixels matched in at least one annotator matching;
/// fn_total sums unmatched ground-truth pixels over annotators.
pub fn sweep(
    prob: &[f64],
    gts: &[&[u8]],
    h: usize,
    w: usize,
    thresholds: &[f64],
    max_dist: f64,
) -> Vec<[i64; 4]> {
    let offsets = offset_table(max_dist);
    let gt_counts: Vec<i64> = gts
        .iter()
        .map(|g| g.iter().filter(|&&v| v != 0).count() as i64)
        .collect();
    let total_gt: i64 = gt_counts.iter().sum();

    thresholds
        .par_iter()
        .map(|&t| {
            let pred: Vec<u8> = prob.iter().map(|&v| (v >= t) as u8).collect();
            let pred_count = pred.iter().filter(|&&v| v != 0).count() as i64;
            if pred_count == 0 {
                return [0, 0, total_gt, 0];
            }
            let mut union = vec![0u8; h * w];
            let mut fn_total = 0i64;
            for (g, &g_count) in gts.iter().zip(&gt_counts) {
                let (pm, _, _, matched_gt) = greedy_match_with(&pred, g, h, w, &offsets);
                for (u, m) in union.iter_mut().zip(&pm) {
                    *u |= m;
                }
                fn_total += g_count - matched_gt;
            }
            let tp = union.iter().filter(|&&v| v != 0).count() as i64;
            [tp, pred_count - tp, fn_total, pred_count]
        })
        .collect()
}

// --- C ABI -------------------------------------------------------------------

pub const ABI_VERSION: i32 = 1;

#[repr(C)]
pub struct CorrespondResult {
    pub status: i32,
    pub tp: i64,
    pub matched_gt: i64,
}

#[no_mangle]
pub extern "C" fn matchkernel_abi_version_v1() -> i32 {
    ABI_VERSION
}

/// # Safety
/// All pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn matchkernel_correspond_v1(
    pred: *const u8,
    pred_len: usize,
    gt: *const u8,
    gt_len: usize,
    h: usize,
    w: usize,
    max_dist: f64,
    out_pred_mask: *mut u8,
    out_gt_mask: *mut u8,
) -> CorrespondResult {
    let fail = |status| CorrespondResult { status, tp: 0, matched_gt: 0 };
    if pred.is_null() || gt.is_null() || out_pred_mask.is_null() || out_gt_mask.is_null() {
        return fail(1);
    }
    if pred_len != h * w || gt_len != h * w || h == 0 || w == 0 {
        return fail(2);
    }
    if !max_dist.is_finite() || max_dist < 0.0 {
        return fail(3);
    }
    let pred = std::slice::from_raw_parts(pred, pred_len);
    let gt = std::slice::from_raw_parts(gt, gt_len);
    let (pm, gm, tp, matched_gt) = greedy_match(pred, gt, h, w, max_dist);
    std::slice::from_raw_parts_mut(out_pred_mask, h * w).copy_from_slice(&pm);
    std::slice::from_raw_parts_mut(out_gt_mask, h * w).copy_from_slice(&gm);
    CorrespondResult { status: 0, tp, matched_gt }
}

/// # Safety
/// `gts` must hold `gt_count` concatenated h*w maps; `out_counts` must have
/// room for `n_thresholds * 4` values.
#[no_mangle]
pub unsafe extern "C" fn matchkernel_sweep_v1(
    prob: *const f64,
    prob_len: usize,
    gts: *const u8,
    gt_count: usize,
    h: usize,
    w: usize,
    thresholds: *const f64,
    n_thresholds: usize,
    max_dist: f64,
    out_counts: *mut i64,
) -> i32 {
    if prob.is_null() || gts.is_null() || thresholds.is_null() || out_counts.is_null() {
        return 1;
    }
    if prob_len != h * w || h == 0 || w == 0 || gt_count == 0 {
        return 2;
    }
    if !max_dist.is_finite() || max_dist < 0.0 {
        return 3;
    }
    let prob = std::slice::from_raw_parts(prob, prob_len);
    let ths = std::slice::from_raw_parts(thresholds, n_thresholds);
    if ths.windows(2).any(|p| p[1] <= p[0]) {
        return 4;
    }
    let blob = std::slice::from_raw_parts(gts, gt_count * h * w);
    let gt_slices: Vec<&[u8]> = (0..gt_count)
        .map(|k| &blob[k * h * w..(k + 1) * h * w])
        .collect();
    let rows = sweep(prob, &gt_slices, h, w, ths, max_dist);
    let out = std::slice::from_raw_parts_mut(out_counts, n_thresholds * 4);
    for (row, chunk) in rows.iter().zip(out.chunks_exact_mut(4)) {
        chunk.copy_from_slice(row);
    }
    0
}

// --- tests ---------------------------------------------------------------------
