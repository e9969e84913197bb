"""Community detection and targeted base-set refinement.

The anomaly similarity graph is partitioned with a native Leiden
implementation under the constant Potts objective; communities that are
extremely dense by Tukey's IQR rule mark groups of collections sharing
repeated anomalies.  Elements inside those communities whose scores
collapse when the community is removed from the base set are excluded.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from batchad.data import ExclusionSet
from batchad.errors import DataError
from batchad.graph import AnomalySimilarityGraph
from batchad.scoring import DISTANCE_FLOOR, drop_collections, topk_scores

LEIDEN_MAX_ITERATIONS = 50
_GAIN_TOL = 1e-12


@dataclass
class Partition:
    """Dense community labels over the graph's nodes."""

    community_of: np.ndarray

    @property
    def n_nodes(self):
        return len(self.community_of)

    @property
    def n_communities(self):
        return int(self.community_of.max()) + 1 if self.n_nodes else 0

    @property
    def communities(self):
        out = [[] for _ in range(self.n_communities)]
        for node, c in enumerate(self.community_of):
            out[c].append(node)
        return out


@dataclass
class OutlierReport:
    densities: dict            # community index -> internal density
    q1: float
    q3: float
    k_iqr: float
    threshold: float
    flagged: list              # community indices, ascending
    warnings: list = field(default_factory=list)


def _weights_of(graph):
    if isinstance(graph, AnomalySimilarityGraph):
        return graph.weights
    return np.asarray(graph)


def cpm_quality(graph, partition, gamma):
    """Constant Potts objective over ordered same-community pairs."""
    w = _weights_of(graph).astype(np.float64)
    labels = partition.community_of if isinstance(partition, Partition) else np.asarray(partition)
    if len(labels) != w.shape[0]:
        raise DataError("partition length does not match graph size")
    q = 0.0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = len(idx)
        q += w[np.ix_(idx, idx)].sum() - gamma * n * (n - 1)
    return float(q)


def gamma_from_percentile(graph, pct=25):
    """Resolution set from the positive edge-weight distribution."""
    w = _weights_of(graph)
    pos = w[np.triu_indices(w.shape[0], 1)]
    pos = pos[pos > 0]
    if pos.size == 0:
        raise DataError("graph has no edges; resolution undefined")
    return float(np.percentile(pos, pct))


def _renumber(labels):
    uniq, dense = np.unique(labels, return_inverse=True)
    return dense.astype(np.int64)


def _neighbor_lists(w):
    return [np.flatnonzero(w[v] > 0) for v in range(w.shape[0])]


def _local_move(w, sizes, labels, gamma, rng):
    """Queue-based single-node moves; returns (labels, any_moved)."""
    n = w.shape[0]
    labels = labels.copy()
    neighbors = _neighbor_lists(w)
    comm_size = {}
    for v in range(n):
        comm_size[labels[v]] = comm_size.get(labels[v], 0) + sizes[v]
    next_label = int(labels.max()) + 1 if n else 0

    order = rng.permutation(n)
    queue = deque(order)
    queued = np.ones(n, dtype=bool)
    moved_any = False
    while queue:
        v = queue.popleft()
        queued[v] = False
        cur = labels[v]
        k_to = {}
        for j in neighbors[v]:
            k_to[labels[j]] = k_to.get(labels[j], 0.0) + w[v, j]
        k_cur = k_to.get(cur, 0.0)
        size_cur = comm_size[cur] - sizes[v]

        best_gain, best_comm = 0.0, cur
        candidates = sorted(k_to)
        if size_cur > 0:
            candidates.append(next_label)       # splitting off is a candidate
        for cand in candidates:
            if cand == cur:
                continue
            k_t = k_to.get(cand, 0.0)
            n_t = comm_size.get(cand, 0)
            gain = 2.0 * (k_t - k_cur) - 2.0 * gamma * sizes[v] * (n_t - size_cur)
            if gain > best_gain + _GAIN_TOL:
                best_gain, best_comm = gain, cand
        if best_comm != cur:
            comm_size[cur] -= sizes[v]
            if comm_size[cur] == 0:
                del comm_size[cur]
            comm_size[best_comm] = comm_size.get(best_comm, 0) + sizes[v]
            labels[v] = best_comm
            if best_comm == next_label:
                next_label += 1
            moved_any = True
            for j in neighbors[v]:
                if labels[j] != best_comm and not queued[j]:
                    queue.append(j)
                    queued[j] = True
    return labels, moved_any


def _refine(w, sizes, labels, gamma, rng):
    """Merge well-connected singletons inside each community."""
    n = w.shape[0]
    refined = np.arange(n, dtype=np.int64)
    ref_size = sizes.astype(np.int64).copy()
    singleton = np.ones(n, dtype=bool)

    for c in np.unique(labels):
        nodes = np.flatnonzero(labels == c)
        if len(nodes) < 2:
            continue
        n_s = int(sizes[nodes].sum())
        inside = np.zeros(n, dtype=bool)
        inside[nodes] = True
        # connectivity of each node / refined community to the rest of c
        k_rest = {int(v): float(w[v, nodes].sum()) for v in nodes}
        comm_rest = dict(k_rest)               # keyed by refined label (== node id)
        for v in rng.permutation(nodes):
            v = int(v)
            if not singleton[v]:
                continue
            if k_rest[v] < gamma * sizes[v] * (n_s - sizes[v]):
                continue
            k_to = {}
            for j in nodes:
                if j != v and w[v, j] > 0:
                    r = refined[j]
                    k_to[r] = k_to.get(r, 0.0) + w[v, j]
            best_gain, best_ref = 0.0, refined[v]
            for r in sorted(k_to):
                n_r = ref_size[r]
                if comm_rest.get(r, 0.0) < gamma * n_r * (n_s - n_r):
                    continue
                gain = 2.0 * k_to[r] - 2.0 * gamma * sizes[v] * n_r
                if gain > best_gain + _GAIN_TOL:
                    best_gain, best_ref = gain, r
            if best_ref != refined[v]:
                old = refined[v]
                comm_rest[best_ref] = (
                    comm_rest.get(best_ref, 0.0) + k_rest[v] - 2.0 * k_to[best_ref]
                )
                comm_rest.pop(old, None)
                ref_size[best_ref] += sizes[v]
                ref_size[old] -= sizes[v]
                refined[v] = best_ref
                singleton[v] = False
                singleton[best_ref] = False
    return refined


def leiden_cpm(graph, gamma, seed=0, max_iterations=LEIDEN_MAX_ITERATIONS):
    """Leiden partition under the constant Potts objective.

    Deterministic for a given seed; iterates local moves, refinement, and
    aggregation until stable or the iteration cap.  The result is a local
    optimum of ``cpm_quality`` under single-node moves.
    """
    w0 = _weights_of(graph).astype(np.float64)
    n0 = w0.shape[0]
    if n0 == 0:
        return Partition(community_of=np.empty(0, dtype=np.int64))
    if w0.shape != (n0, n0):
        raise DataError(f"adjacency must be square, got {w0.shape}")
    rng = np.random.Generator(np.random.Philox(seed))

    w = w0.copy()
    np.fill_diagonal(w, 0.0)
    sizes = np.ones(n0, dtype=np.int64)
    members = [np.array([i]) for i in range(n0)]
    labels = np.arange(n0, dtype=np.int64)

    for _ in range(max_iterations):
        labels, moved = _local_move(w, sizes, labels, gamma, rng)
        labels = _renumber(labels)
        n_nodes = w.shape[0]
        if labels.max() + 1 == n_nodes:
            break                                   # all singletons: stable
        refined = _renumber(_refine(w, sizes, labels, gamma, rng))
        n_ref = int(refined.max()) + 1
        if n_ref == n_nodes and not moved:
            break
        # aggregate by refined communities; keep phase-one communities as start
        new_w = np.zeros((n_ref, n_ref))
        for a in range(n_nodes):
            for b in np.flatnonzero(w[a] > 0):
                if refined[a] != refined[b]:
                    new_w[refined[a], refined[b]] += w[a, b]
        new_sizes = np.zeros(n_ref, dtype=np.int64)
        new_members = [[] for _ in range(n_ref)]
        new_labels = np.zeros(n_ref, dtype=np.int64)
        for a in range(n_nodes):
            r = refined[a]
            new_sizes[r] += sizes[a]
            new_members[r].append(members[a])
            new_labels[r] = labels[a]
        w = new_w
        sizes = new_sizes
        members = [np.concatenate(m) for m in new_members]
        labels = new_labels
        if w.shape[0] == n_nodes:
            break

    flat = np.empty(n0, dtype=np.int64)
    for a, lab in enumerate(labels):
        flat[members[a]] = lab
    # polish guarantees a single-node local optimum on the original graph
    flat, _ = _local_move(w0, np.ones(n0, dtype=np.int64), flat, gamma, rng)
    return Partition(community_of=_renumber(flat))


def community_density(graph, members):
    """Mean internal pairwise weight of a community (|M| >= 2)."""
    members = np.asarray(sorted(members), dtype=np.int64)
    m = len(members)
    if m < 2:
        raise DataError("density undefined for communities of size < 2")
    w = _weights_of(graph)
    total = w[np.ix_(members, members)].sum()
    return float(total) / (m * (m - 1))


def flag_outliers(densities, k_iqr):
    """Tukey IQR rule over community densities.

    ``densities`` maps community index -> density; flags those strictly
    above Q3 + k_iqr * IQR.
    """
    if not densities:
        raise DataError("no community densities to analyze")
    keys = sorted(densities)
    values = np.array([densities[k] for k in keys], dtype=np.float64)
    q1, q3 = np.percentile(values, [25, 75])
    threshold = q3 + k_iqr * (q3 - q1)
    flagged = [k for k, v in zip(keys, values) if v > threshold]
    return OutlierReport(
        densities=dict(zip(keys, values.tolist())),
        q1=float(q1), q3=float(q3), k_iqr=float(k_iqr),
        threshold=float(threshold), flagged=flagged,
    )


def detect_outlier_communities(graph, partition, k_iqr):
    """Densities + IQR flags for all size>=2 communities of a partition.

    Adds a warning when a flagged community spans more than half the base
    set: dominant "anomalies" may actually be a normal variant.
    """
    comms = partition.communities
    densities = {
        idx: community_density(graph, members)
        for idx, members in enumerate(comms) if len(members) >= 2
    }
    if not densities:
        return OutlierReport(densities={}, q1=0.0, q3=0.0, k_iqr=k_iqr,
                             threshold=0.0, flagged=[])
    report = flag_outliers(densities, k_iqr)
    b = partition.n_nodes
    for idx in report.flagged:
        if len(comms[idx]) > 0.5 * b:
            report.warnings.append(
                f"flagged community {idx} spans {len(comms[idx])}/{b} collections; "
                "repeated pattern may be a dominant normal variant"
            )
    return report


def dependency_ratios(agg_records, members, k_fraction):
    """Score inflation of every element when ``members`` leave the base.

    Ratios are a_without / a_with, denominator floored; raises when fewer
    than two collections would remain.
    """
    b = agg_records.n_collections
    members = sorted(set(int(m) for m in members))
    if b - len(members) < 2:
        raise DataError(
            f"removing {len(members)} of {b} collections leaves no usable base"
        )
    base = topk_scores(agg_records, k_fraction)
    reduced = topk_scores(drop_collections(agg_records, members), k_fraction)
    return reduced / np.maximum(base, DISTANCE_FLOOR)


def targeted_filtering(agg_records, outlier_communities, *, percentile=99.0,
                       k_fraction=0.1):
    """Exclude elements of outlier communities with extreme dependency.

    For each community, the cutoff is the given percentile of dependency
    ratios among elements outside it; community elements above the cutoff
    are excluded, keyed by (collection, position).
    """
    exclusions = ExclusionSet()
    b = agg_records.n_collections
    for members in outlier_communities:
        members = sorted(set(int(m) for m in members))
        ratios = dependency_ratios(agg_records, members, k_fraction)
        outside = np.ones(b, dtype=bool)
        outside[members] = False
        theta = np.percentile(ratios[outside].ravel(), percentile)
        for c in members:
            for h in np.flatnonzero(ratios[c] > theta):
                exclusions.add(c, int(h))
    return exclusions
