"""Multi-scale neighborhood pooling and final anomaly scoring.

Tokens are mean-pooled over odd receptive fields (replicate borders) to
capture anomalies at several sizes; each (layer, receptive field) pair is
scored independently against the refined base set and the per-element
scores are averaged.  Token-grid maps are upsampled to the original
resolution with align-corners=false linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from batchad.data import FeatureTensor
from batchad.errors import DataError
from batchad.scoring import (
    apply_exclusions,
    compute_layer_records,
    topk_scores,
)


def pool_grid(grid_tokens, r):
    """Mean over the r x r (x r) neighborhood of each grid position.

    Borders replicate the edge value; r must be odd, r=1 is the identity.
    ``grid_tokens`` has spatial dims followed by the feature dim.
    """
    if r < 1 or r % 2 == 0:
        raise DataError(f"receptive field must be odd and >= 1, got {r}")
    arr = np.asarray(grid_tokens, dtype=np.float64)
    if r == 1:
        return arr.copy()
    size = (r,) * (arr.ndim - 1) + (1,)
    return uniform_filter(arr, size=size, mode="nearest")


def lnamd_pool(tensor, r):
    """Neighborhood-pooled copy of a FeatureTensor."""
    grid = tensor.tokens.reshape(*tensor.grid_shape, -1)
    pooled = pool_grid(grid, r)
    return FeatureTensor(
        collection_id=tensor.collection_id,
        layer_id=tensor.layer_id,
        tokens=pooled.reshape(-1, pooled.shape[-1]),
        grid_shape=tensor.grid_shape,
        zero_rows=tensor.zero_rows.copy(),
    )


def compute_multiscale_records(grids_by_layer, receptive_fields=(1, 3, 5),
                               screens=None):
    """Mutual records for every (layer, receptive field) pair.

    ``grids_by_layer`` maps layer id -> list of per-collection grid arrays
    (spatial dims + feature dim).  Returns ``{(layer, r): records}`` keyed
    by layer id and receptive field.
    """
    out = {}
    for layer_id, grids in sorted(grids_by_layer.items()):
        for r in receptive_fields:
            pooled = [pool_grid(g, r).reshape(-1, g.shape[-1]) for g in grids]
            out[(layer_id, r)] = compute_layer_records(
                pooled, layer_id=layer_id, receptive_field=r, screens=screens
            )
    return out


def scores_from_records(records_map, k_fraction, exclusions=None):
    """Mean over (layer, receptive field) of top-K scores. [B, N]

    With exclusions, comparisons whose stored nearest token was excluded
    are dropped before scoring; with none (or an empty set) the plain
    mutual-scoring result is returned unchanged.
    """
    if not records_map:
        raise DataError("no records to score")
    total = None
    for records in records_map.values():
        if exclusions is not None and len(exclusions) > 0:
            records = apply_exclusions(records, exclusions)
        s = topk_scores(records, k_fraction)
        total = s if total is None else total + s
    return total / len(records_map)


def upsample_map(token_scores, target_shape):
    """Linear (bi/trilinear) upsampling, align-corners=false convention.

    Output coordinate o on an axis of input size n and output size m reads
    input position (o + 0.5) * n / m - 0.5, clamped to the valid range, so
    values stay within [min, max] of the input.
    """
    arr = np.asarray(token_scores, dtype=np.float64)
    if arr.ndim != len(target_shape):
        raise DataError(
            f"rank mismatch: grid {arr.shape} vs target {tuple(target_shape)}"
        )
    for axis, m in enumerate(target_shape):
        n = arr.shape[axis]
        if n == m:
            continue
        x = (np.arange(m) + 0.5) * (n / m) - 0.5
        x = np.clip(x, 0.0, n - 1.0)
        i0 = np.floor(x).astype(np.int64)
        i1 = np.minimum(i0 + 1, n - 1)
        w = x - i0
        a0 = np.take(arr, i0, axis=axis)
        a1 = np.take(arr, i1, axis=axis)
        shape = [1] * arr.ndim
        shape[axis] = m
        w = w.reshape(shape)
        arr = a0 * (1.0 - w) + a1 * w
    return arr


def collection_score(token_scores):
    """Collection-level score: max over the token grid."""
    arr = np.asarray(token_scores)
    if arr.size == 0:
        raise DataError("empty anomaly map")
    return float(arr.max())


@dataclass
class AnomalyMap:
    """Per-position scores at token and original resolution."""

    collection_id: int
    token_scores: np.ndarray
    upsampled: np.ndarray
    collection_score: float


def build_anomaly_map(collection_id, token_scores_grid, original_shape):
    grid = np.asarray(token_scores_grid, dtype=np.float64)
    return AnomalyMap(
        collection_id=collection_id,
        token_scores=grid,
        upsampled=upsample_map(grid, original_shape),
        collection_score=collection_score(grid),
    )
