"""Classification and segmentation metrics.

Threshold sweeps run at distinct score values only, so the results agree
exactly with brute-force oracles on small inputs.  Region overlap uses
8-connectivity in 2D and 26-connectivity in 3D; the overlap curve is
integrated up to a false-positive-rate cap and normalized by it.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from batchad.errors import DataError

PATCH_NORMAL = 0
PATCH_CONSISTENT = 1
PATCH_INCONSISTENT = 2

CONSISTENT_SCORE_PERCENTILE = 80.0


def _split_classes(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    pos = scores[labels]
    neg = scores[~labels]
    return pos, neg


def auroc(scores, labels):
    """Probability a random positive outranks a random negative (ties half)."""
    pos, neg = _split_classes(scores, labels)
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUROC needs both classes present")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    ties = np.searchsorted(neg_sorted, pos, side="right") - below
    wins = below.sum() + 0.5 * ties.sum()
    return float(wins) / (pos.size * neg.size)


def average_precision(scores, labels):
    """Step integration of precision over recall at positive thresholds."""
    pos, neg = _split_classes(scores, labels)
    if pos.size == 0:
        raise DataError("average precision needs at least one positive")
    scores = np.concatenate([pos, neg])
    truth = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, truth = scores[order], truth[order]
    tp = np.cumsum(truth)
    n_pred = np.arange(1, len(scores) + 1)
    # last index of each distinct-threshold block
    block_end = np.flatnonzero(np.diff(scores) != 0)
    block_end = np.append(block_end, len(scores) - 1)
    ap = 0.0
    prev_recall = 0.0
    for idx in block_end:
        recall = tp[idx] / pos.size
        precision = tp[idx] / n_pred[idx]
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def f1_max(scores, labels):
    """Best F1 over distinct thresholds; returns (f1, smallest threshold)."""
    pos, neg = _split_classes(scores, labels)
    if pos.size == 0:
        raise DataError("F1 needs at least one positive")
    scores = np.concatenate([pos, neg])
    truth = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, truth = scores[order], truth[order]
    tp = np.cumsum(truth)
    n_pred = np.arange(1, len(scores) + 1)
    block_end = np.flatnonzero(np.diff(scores) != 0)
    block_end = np.append(block_end, len(scores) - 1)
    best_f1, best_thr = -1.0, None
    for idx in block_end:
        precision = tp[idx] / n_pred[idx]
        recall = tp[idx] / pos.size
        denom = precision + recall
        f1 = 0.0 if denom == 0 else 2 * precision * recall / denom
        thr = scores[idx]
        if f1 > best_f1 or (f1 == best_f1 and thr < best_thr):
            best_f1, best_thr = f1, thr
    return float(best_f1), float(best_thr)


def _label_regions(mask):
    structure = np.ones((3,) * mask.ndim, dtype=int)
    labeled, count = ndimage.label(mask, structure=structure)
    return labeled, count


def aupro(maps, masks, fpr_cap=0.3):
    """Area under the per-region overlap curve, normalized by the FPR cap.

    ``maps``/``masks`` are aligned lists of score maps and binary masks
    (single arrays accepted).  Every connected ground-truth region counts
    equally; false positives pool over all pixels.
    """
    if isinstance(maps, np.ndarray):
        maps, masks = [maps], [masks]
    if not 0.0 < fpr_cap <= 1.0:
        raise DataError(f"fpr cap must be in (0, 1], got {fpr_cap}")

    region_ids = []          # per pixel: global region id, 0 = none
    region_sizes = [0]       # index 0 unused
    scores = []
    negatives = 0
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise DataError("map and mask shapes differ")
        labeled, count = _label_regions(mask.astype(bool))
        offset = len(region_sizes) - 1
        ids = np.where(labeled > 0, labeled + offset, 0)
        for r in range(1, count + 1):
            region_sizes.append(int((labeled == r).sum()))
        region_ids.append(ids.ravel())
        scores.append(amap.ravel())
        negatives += int((mask == 0).sum())
    n_regions = len(region_sizes) - 1
    if n_regions == 0:
        raise DataError("no anomalous region in the ground truth")
    if negatives == 0:
        raise DataError("no negative pixels; FPR undefined")

    scores = np.concatenate(scores)
    region_ids = np.concatenate(region_ids)
    region_sizes = np.asarray(region_sizes, dtype=np.float64)

    order = np.argsort(-scores, kind="stable")
    scores, region_ids = scores[order], region_ids[order]

    hit = np.zeros(n_regions + 1, dtype=np.int64)
    fp = 0
    covered = 0.0            # running sum of per-region overlap fractions
    points = [(0.0, 0.0)]    # (fpr, mean overlap) at threshold above max
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            rid = region_ids[j]
            if rid == 0:
                fp += 1
            else:
                hit[rid] += 1
                covered += 1.0 / region_sizes[rid]
            j += 1
        points.append((fp / negatives, covered / n_regions))
        i = j

    area = 0.0
    prev_fpr, prev_pro = points[0]
    for fpr, pro in points[1:]:
        if fpr >= fpr_cap:
            # interpolate the overlap value exactly at the cap
            if fpr > prev_fpr:
                w = (fpr_cap - prev_fpr) / (fpr - prev_fpr)
                pro_cap = prev_pro + w * (pro - prev_pro)
            else:
                pro_cap = pro
            area += (fpr_cap - prev_fpr) * (prev_pro + pro_cap) / 2.0
            prev_fpr, prev_pro = fpr_cap, pro_cap
            break
        area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0
        prev_fpr, prev_pro = fpr, pro
    if prev_fpr < fpr_cap:
        # curve ended early: extend horizontally at the last overlap value
        area += (fpr_cap - prev_fpr) * prev_pro
    return float(area / fpr_cap)


def dice(pred, gt):
    """Overlap coefficient 2|P&G|/(|P|+|G|); both-empty counts as one."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pred & gt).sum()) / denom


def downsample_mask_maxpool(mask, p):
    """Block max-pool: a cell is set iff any voxel in its p-cube is set.

    Dimensions not divisible by p are zero-padded at the far end.
    """
    mask = np.asarray(mask).astype(bool)
    if p < 1:
        raise DataError(f"pool size must be >= 1, got {p}")
    pad = [(0, (-s) % p) for s in mask.shape]
    padded = np.pad(mask, pad, constant_values=False)
    out = padded
    for axis in range(mask.ndim):
        shape = list(out.shape)
        shape[axis] //= p
        shape.insert(axis + 1, p)
        out = out.reshape(shape).any(axis=axis + 1)
    return out


def label_patch_types(scores, gt_labels):
    """Split anomalous patches into consistent vs inconsistent (analysis).

    Anomalous patches scoring below the 80th percentile of normal-patch
    scores found deceptive matches and are labeled consistent.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_labels).ravel().astype(bool)
    if scores.shape != gt.shape:
        raise DataError("scores and labels differ in length")
    if not (~gt).any():
        raise DataError("no normal patches to calibrate against")
    cut = np.percentile(scores[~gt], CONSISTENT_SCORE_PERCENTILE)
    out = np.full(scores.shape, PATCH_NORMAL, dtype=np.int64)
    out[gt & (scores < cut)] = PATCH_CONSISTENT
    out[gt & (scores >= cut)] = PATCH_INCONSISTENT
    return out
