"""Mutual scoring of a batch against itself.

Every element (patch token) of a collection is compared with its nearest
counterpart in each other collection of the batch.  The sorted distances
form the element's mutual similarity record, from which the top-K anomaly
score, growth rates, and endurance ratios are derived.

Distances are squared Euclidean on row-normalized tokens.  Element-level
operations mirror the batch engine one element at a time; the engine
(`compute_layer_records` and friends) vectorizes the same arithmetic and
keeps the argmin token indices so that later base-set refinement can
invalidate and repair stored comparisons instead of recomputing the full
pairwise search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from batchad.errors import CollectionExhausted, DataError

# Floor applied to distances before logs, ratios, and layer averaging;
# exact duplicates would otherwise make growth rates undefined.
DISTANCE_FLOOR = 1e-9

# Rows per matmul block when computing pairwise distances.
_CHUNK_ROWS = 4096


def round_half_up(x):
    return int(np.floor(x + 0.5))


def topk_count(length, k_fraction):
    """Number of leading distances aggregated by the top-K score."""
    if not 0.0 < k_fraction <= 1.0:
        raise DataError(f"k_fraction must be in (0, 1], got {k_fraction}")
    return max(1, round_half_up(k_fraction * length))


def omega_index(length, omega_fraction):
    """Reference rank for endurance ratios (1-based, clamped to [2, length-1])."""
    if length < 2:
        raise DataError(f"record too short for a reference rank: {length}")
    if length == 2:
        return 2
    return min(max(2, round_half_up(omega_fraction * length)), length - 1)


def pairwise_sqdist(queries, targets):
    """Squared Euclidean distances [n_q, n_t], clamped at zero."""
    q = np.asarray(queries, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    qq = np.einsum("ij,ij->i", q, q)
    tt = np.einsum("ij,ij->i", t, t)
    d = qq[:, None] + tt[None, :] - 2.0 * (q @ t.T)
    np.maximum(d, 0.0, out=d)
    return d


def _min_over_collection(queries, targets, keep_mask=None):
    """Min squared distance (and argmin token) from each query to a collection."""
    if keep_mask is not None:
        if not keep_mask.any():
            raise CollectionExhausted
        idx = np.flatnonzero(keep_mask)
        targets = targets[idx]
    else:
        idx = None
    n_q = queries.shape[0]
    best = np.empty(n_q, dtype=np.float64)
    arg = np.empty(n_q, dtype=np.int64)
    for lo in range(0, n_q, _CHUNK_ROWS):
        hi = min(lo + _CHUNK_ROWS, n_q)
        d = pairwise_sqdist(queries[lo:hi], targets)
        a = np.argmin(d, axis=1)
        best[lo:hi] = d[np.arange(hi - lo), a]
        arg[lo:hi] = a
    if idx is not None:
        arg = idx[arg]
    return best, arg


# ---------------------------------------------------------------------------
# element-level operations


def distance_to_collection(z, collection, exclusions=None):
    """Smallest squared distance from token ``z`` to a collection's tokens.

    Excluded positions of the collection are skipped; raises
    ``CollectionExhausted`` when nothing is left to compare against.
    """
    tokens = collection.tokens
    keep = None
    if exclusions is not None:
        keep = ~exclusions.mask(collection.collection_id, tokens.shape[0])
    d, _ = _min_over_collection(np.asarray(z, dtype=np.float64)[None, :], tokens, keep)
    return float(d[0])


@dataclass
class MutualSimilarityRecord:
    """Sorted distances from one element to every other (screened) collection."""

    element: tuple            # (collection_id, position, layer_id, receptive_field)
    distances: np.ndarray     # ascending
    sources: np.ndarray       # collection ids aligned with distances

    def __len__(self):
        return len(self.distances)


def mutual_similarity_vector(base, collection_id, position, *, layer_id=-1,
                             receptive_field=1, exclusions=None, screen=None):
    """Mutual similarity record of one element against a base of tensors.

    ``base`` is a sequence of FeatureTensor (same layer, same pooling); with
    ``screen`` only the listed collections are compared.  Ties are broken by
    source collection id.
    """
    z = base[collection_id].tokens[position]
    targets = sorted(screen) if screen is not None else [
        c.collection_id for c in base if c.collection_id != collection_id
    ]
    dists, sources = [], []
    for j in targets:
        if j == collection_id:
            continue
        try:
            d = distance_to_collection(z, base[j], exclusions)
        except CollectionExhausted:
            continue
        dists.append(d)
        sources.append(j)
    if not dists:
        raise DataError(
            f"element ({collection_id}, {position}) has no comparable collection"
        )
    dists = np.asarray(dists)
    sources = np.asarray(sources, dtype=np.int64)
    order = np.argsort(dists, kind="stable")     # targets already in id order
    return MutualSimilarityRecord(
        element=(collection_id, position, layer_id, receptive_field),
        distances=dists[order],
        sources=sources[order],
    )


def topk_score(record, k_fraction):
    """Mean of the K smallest distances; low means normal."""
    d = np.asarray(getattr(record, "distances", record), dtype=np.float64)
    if len(d) == 0:
        raise DataError("empty record")
    k = topk_count(len(d), k_fraction)
    return float(np.mean(d[:k]))


def growth_rates(record):
    """Log growth rates ln(d_(i+1)/d_(i)) of a sorted record, floored."""
    d = np.asarray(getattr(record, "distances", record), dtype=np.float64)
    d = np.maximum(d, DISTANCE_FLOOR)
    if np.any(d <= 0):
        raise DataError("non-positive distance after flooring")
    return np.log(d[1:] / d[:-1])


def endurance_ratio(record, i, omega_fraction):
    """d_(i) / d_(omega) for 1 <= i < omega (1-based order statistics)."""
    d = np.asarray(getattr(record, "distances", record), dtype=np.float64)
    omega = omega_index(len(d), omega_fraction)
    if not 1 <= i < omega:
        raise DataError(f"rank {i} outside [1, {omega})")
    return float(max(d[i - 1], DISTANCE_FLOOR) / max(d[omega - 1], DISTANCE_FLOOR))


def weighted_endurance_ratio(record, i, omega_fraction, alpha):
    """d_(i)^(1-alpha) / d_(omega); alpha > 0 favors large-distance links."""
    if alpha < 0:
        raise DataError(f"alpha must be >= 0, got {alpha}")
    d = np.asarray(getattr(record, "distances", record), dtype=np.float64)
    omega = omega_index(len(d), omega_fraction)
    if not 1 <= i < omega:
        raise DataError(f"rank {i} outside [1, {omega})")
    di = max(d[i - 1], DISTANCE_FLOOR)
    dw = max(d[omega - 1], DISTANCE_FLOOR)
    return float(di ** (1.0 - alpha) / dw)


def aggregate_layer_distances(records):
    """Average one element's records across layers, per source collection.

    Distances are floored before averaging; the merged record is re-sorted,
    so one of its ranks maps back to one comparison per layer.
    """
    if not records:
        raise DataError("no records to aggregate")
    first = records[0]
    key = (first.element[0], first.element[1], first.element[3])
    srcs = tuple(np.sort(first.sources))
    for rec in records[1:]:
        if (rec.element[0], rec.element[1], rec.element[3]) != key:
            raise DataError("records describe different elements")
        if tuple(np.sort(rec.sources)) != srcs:
            raise DataError("layer records disagree on source collections")
    acc = {}
    for rec in records:
        for d, s in zip(np.maximum(rec.distances, DISTANCE_FLOOR), rec.sources):
            acc.setdefault(int(s), []).append(d)
    sources = np.array(sorted(acc), dtype=np.int64)
    dists = np.array([np.mean(acc[s]) for s in sources])
    order = np.argsort(dists, kind="stable")
    return MutualSimilarityRecord(
        element=(key[0], key[1], -1, key[2]),
        distances=dists[order],
        sources=sources[order],
    )


def cls_screen(cls_tokens, collection_id, eta):
    """Ids of the ceil(eta*B) collections most cosine-similar to a query.

    The query's own collection never appears; the result is clamped to
    [1, B-1] neighbors.  ``cls_tokens`` is a [B, D] matrix of unit rows.
    """
    if not 0.0 < eta <= 1.0:
        raise DataError(f"eta must be in (0, 1], got {eta}")
    cls_tokens = np.asarray(cls_tokens, dtype=np.float64)
    b = cls_tokens.shape[0]
    if b < 2:
        raise DataError("screening needs at least two collections")
    sims = cls_tokens @ cls_tokens[collection_id]
    ids = np.array([j for j in range(b) if j != collection_id], dtype=np.int64)
    count = min(max(1, int(np.ceil(eta * b))), b - 1)
    order = np.lexsort((ids, -sims[ids]))
    return np.sort(ids[order[:count]])


def epsilon_neighbor_count(record, epsilon):
    """Number of collections closer than ``epsilon`` to the element."""
    if epsilon <= 0:
        raise DataError(f"epsilon must be positive, got {epsilon}")
    return int(np.count_nonzero(record.distances < epsilon))


# ---------------------------------------------------------------------------
# batch engine


@dataclass
class LayerRecords:
    """All mutual comparisons of one (layer, receptive field) pass.

    ``dists[i, h, c]`` is the min squared distance from element h of
    collection i to collection ``sources[i, c]``; ``argmins`` holds the
    token index realizing each min and ``valid`` flags usable comparisons.
    Columns are in ascending source-id order, so a stable sort on distance
    breaks ties by source id.
    """

    dists: np.ndarray         # [B, N, m]
    argmins: np.ndarray       # [B, N, m]
    sources: np.ndarray       # [B, m]
    valid: np.ndarray         # [B, N, m]
    layer_id: int = -1
    receptive_field: int = 1

    @property
    def n_collections(self):
        return self.dists.shape[0]

    @property
    def n_tokens(self):
        return self.dists.shape[1]

    def copy(self):
        return LayerRecords(
            dists=self.dists.copy(),
            argmins=self.argmins.copy(),
            sources=self.sources.copy(),
            valid=self.valid.copy(),
            layer_id=self.layer_id,
            receptive_field=self.receptive_field,
        )

    def record(self, collection_id, position):
        """Element view as a sorted MutualSimilarityRecord."""
        ok = self.valid[collection_id, position]
        d = self.dists[collection_id, position][ok]
        s = self.sources[collection_id][ok]
        order = np.argsort(d, kind="stable")
        return MutualSimilarityRecord(
            element=(collection_id, position, self.layer_id, self.receptive_field),
            distances=d[order],
            sources=s[order],
        )


def compute_layer_records(tokens_list, *, layer_id=-1, receptive_field=1,
                          screens=None):
    """Mutual comparisons of every element against every other collection.

    ``tokens_list`` holds one [N, D] array per collection (pooled upstream
    when receptive_field > 1).  ``screens`` optionally maps each query
    collection to the ids it is compared against.
    """
    b = len(tokens_list)
    if b < 2:
        raise DataError("base set needs at least two collections")
    n = tokens_list[0].shape[0]
    for t in tokens_list:
        if t.shape[0] != n:
            raise DataError("collections disagree on token count")

    if screens is None:
        m = b - 1
        sources = np.array(
            [[j for j in range(b) if j != i] for i in range(b)], dtype=np.int64
        )
    else:
        widths = {len(screens[i]) for i in range(b)}
        if len(widths) != 1:
            raise DataError("screen sets must share one size")
        m = widths.pop()
        sources = np.array([np.sort(screens[i]) for i in range(b)], dtype=np.int64)
        for i in range(b):
            if i in sources[i]:
                raise DataError(f"screen set of collection {i} contains itself")

    dists = np.full((b, n, m), np.inf)
    argmins = np.full((b, n, m), -1, dtype=np.int64)
    valid = np.zeros((b, n, m), dtype=bool)
    for i in range(b):
        q = tokens_list[i]
        for c, j in enumerate(sources[i]):
            d, a = _min_over_collection(q, tokens_list[j])
            dists[i, :, c] = d
            argmins[i, :, c] = a
            valid[i, :, c] = True
    return LayerRecords(
        dists=dists, argmins=argmins, sources=sources, valid=valid,
        layer_id=layer_id, receptive_field=receptive_field,
    )


def apply_exclusions(records, exclusions):
    """Invalidate stored comparisons that lead into excluded positions.

    A comparison whose stored nearest token is excluded is dropped from the
    record (no re-search happens); scoring then runs on the surviving
    comparisons.  Because nothing is recomputed, the result is bit-identical
    to masking freshly computed records the same way.
    """
    out = records.copy()
    b = records.n_collections
    n = records.n_tokens
    for j in range(b):
        excluded = exclusions.positions(j, n)
        if excluded.size == 0:
            continue
        for i in range(b):
            cols = np.flatnonzero(records.sources[i] == j)
            if cols.size == 0:
                continue
            c = cols[0]
            stale = np.isin(out.argmins[i, :, c], excluded)
            out.valid[i, stale, c] = False
    return out


def drop_collections(records, drop_ids):
    """Invalidate all comparisons against the given collections."""
    out = records.copy()
    drop = np.isin(out.sources, np.asarray(sorted(drop_ids), dtype=np.int64))
    out.valid &= ~drop[:, None, :]
    return out


def aggregate_layer_records(layer_records):
    """Per-source mean of floored distances across layers.

    A comparison stays valid only if valid at every layer.  Argmin indices
    are not meaningful on the averaged records; token-level repair operates
    on the per-layer records and re-aggregates.
    """
    first = layer_records[0]
    for rec in layer_records[1:]:
        if not np.array_equal(rec.sources, first.sources):
            raise DataError("layer records disagree on source collections")
    dists = np.mean(
        [np.maximum(rec.dists, DISTANCE_FLOOR) for rec in layer_records], axis=0
    )
    valid = np.logical_and.reduce([rec.valid for rec in layer_records])
    return LayerRecords(
        dists=dists,
        argmins=np.full_like(first.argmins, -1),
        sources=first.sources.copy(),
        valid=valid,
        layer_id=-1,
        receptive_field=first.receptive_field,
    )


def sort_records(records):
    """Sorted distances and aligned sources, invalid entries pushed last.

    Returns ``(sorted_dists, sorted_sources, n_valid)`` where invalid slots
    hold +inf / -1.
    """
    d = np.where(records.valid, records.dists, np.inf)
    order = np.argsort(d, axis=-1, kind="stable")
    sd = np.take_along_axis(d, order, axis=-1)
    src = np.broadcast_to(
        records.sources[:, None, :], records.dists.shape
    )
    ss = np.take_along_axis(np.where(records.valid, src, -1), order, axis=-1)
    n_valid = records.valid.sum(axis=-1)
    return sd, ss, n_valid


def topk_scores(records, k_fraction):
    """Top-K mean score for every element, honoring validity. [B, N]"""
    sd, _, n_valid = sort_records(records)
    if np.any(n_valid == 0):
        raise DataError("some element has no comparable collection")
    k = np.maximum(1, np.floor(k_fraction * n_valid + 0.5).astype(np.int64))
    csum = np.cumsum(np.where(np.isfinite(sd), sd, 0.0), axis=-1)
    picked = np.take_along_axis(csum, (k - 1)[..., None], axis=-1)[..., 0]
    return picked / k


def mean_growth_curve(records):
    """tau_i averaged over all valid elements; for scaling diagnostics."""
    sd, _, n_valid = sort_records(records)
    full = n_valid == n_valid.max()
    d = np.maximum(sd[full][:, : n_valid.max()], DISTANCE_FLOOR)
    taus = np.log(d[:, 1:] / d[:, :-1])
    return taus.mean(axis=0)
