"""Suspicious-link mining and the anomaly similarity graph.

Elements that find unusually close matches in a handful of collections,
relative to their reference-rank distance, produce links with small
weighted endurance ratios.  Links are consumed in ascending-ratio batches
until the collection-level graph covers the requested fraction of nodes;
edge weights count the links between each pair of collections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from batchad.errors import DataError
from batchad.scoring import DISTANCE_FLOOR, omega_index, sort_records


class SuspiciousLink(NamedTuple):
    collection: int
    position: int
    target: int
    zeta: float


@dataclass
class CandidateLinks:
    """Links sorted ascending by weighted endurance ratio (stable)."""

    collections: np.ndarray
    positions: np.ndarray
    targets: np.ndarray
    zetas: np.ndarray

    def __len__(self):
        return len(self.zetas)

    def __iter__(self):
        for c, p, t, z in zip(self.collections, self.positions,
                              self.targets, self.zetas):
            yield SuspiciousLink(int(c), int(p), int(t), float(z))

    def __getitem__(self, index):
        if isinstance(index, slice):
            return CandidateLinks(
                self.collections[index], self.positions[index],
                self.targets[index], self.zetas[index],
            )
        return SuspiciousLink(
            int(self.collections[index]), int(self.positions[index]),
            int(self.targets[index]), float(self.zetas[index]),
        )


@dataclass
class AnomalySimilarityGraph:
    """Weighted symmetric adjacency over collection indices."""

    weights: np.ndarray                   # [B, B] int64, zero diagonal
    eligible: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.eligible is None:
            self.eligible = np.ones(self.weights.shape[0], dtype=bool)

    @property
    def n_nodes(self):
        return self.weights.shape[0]

    def degrees(self):
        return (self.weights > 0).sum(axis=1)

    def coverage(self):
        touched = self.degrees() > 0
        denom = int(self.eligible.sum())
        if denom == 0:
            return 0.0
        return float(np.count_nonzero(touched & self.eligible)) / denom

    def edge_list(self):
        """(i, j, w) triples with i < j and w > 0."""
        ii, jj = np.nonzero(np.triu(self.weights, 1))
        return [(int(i), int(j), int(self.weights[i, j])) for i, j in zip(ii, jj)]

    def positive_weights(self):
        w = self.weights[np.triu_indices(self.n_nodes, 1)]
        return w[w > 0]


def candidate_links(agg_records, omega_fraction, alpha, query_keep=None):
    """All (element, rank) links below the reference rank, sorted by ratio.

    ``agg_records`` are layer-averaged LayerRecords.  ``query_keep`` can
    blank out elements (e.g. void-dominated volume patches) so they emit
    no links; they remain usable as targets.
    """
    if agg_records.n_collections < 3:
        raise DataError("link mining needs at least three collections")
    if alpha < 0:
        raise DataError(f"alpha must be >= 0, got {alpha}")
    sd, ss, n_valid = sort_records(agg_records)
    b, n, _ = sd.shape

    cols, poss, targs, zetas = [], [], [], []
    lengths = np.unique(n_valid)
    for length in lengths:
        if length < 2:
            continue
        omega = omega_index(int(length), omega_fraction)
        sel = n_valid == length
        if query_keep is not None:
            sel &= query_keep
        if not sel.any():
            continue
        ci, hi = np.nonzero(sel)
        d = np.maximum(sd[ci, hi], DISTANCE_FLOOR)
        ref = d[:, omega - 1]
        for i in range(1, omega):
            zet = d[:, i - 1] ** (1.0 - alpha) / ref
            cols.append(ci)
            poss.append(hi)
            targs.append(ss[ci, hi, i - 1])
            zetas.append(zet)
    if not zetas:
        empty = np.empty(0, dtype=np.int64)
        return CandidateLinks(empty, empty.copy(), empty.copy(), np.empty(0))
    cols = np.concatenate(cols)
    poss = np.concatenate(poss)
    targs = np.concatenate(targs)
    zetas = np.concatenate(zetas)
    # deterministic ties: equal ratios ordered by (collection, position, target)
    order = np.lexsort((targs, poss, cols, zetas))
    return CandidateLinks(cols[order], poss[order], targs[order], zetas[order])


def build_graph(links, n_collections, multiplicity=1, eligible=None):
    """Count links per unordered collection pair into a weighted graph.

    ``multiplicity`` scales each link's contribution (layer-resolved edges
    count one connection per averaged layer).
    """
    w = np.zeros((n_collections, n_collections), dtype=np.int64)
    if isinstance(links, CandidateLinks):
        src, dst = links.collections, links.targets
    else:
        pairs = [(l.collection, l.target) for l in links]
        src = np.array([p[0] for p in pairs], dtype=np.int64)
        dst = np.array([p[1] for p in pairs], dtype=np.int64)
    if src.size:
        if np.any(src == dst):
            raise DataError("link targets its own collection")
        np.add.at(w, (src, dst), multiplicity)
        w = w + w.T
    return AnomalySimilarityGraph(weights=w, eligible=eligible)


def select_by_coverage(candidates, target_coverage, n_collections,
                       multiplicity=1, eligible=None):
    """Consume sorted candidates in whole batches until coverage is met.

    Batch size is n(n-1)/2 links.  Returns ``(links, graph)`` where the
    graph reports the achieved coverage (it may fall short of the target
    when candidates run out).
    """
    if not 0.0 <= target_coverage <= 1.0:
        raise DataError(f"coverage target must be in [0, 1], got {target_coverage}")
    batch = max(1, n_collections * (n_collections - 1) // 2)
    used = 0
    graph = build_graph(candidates[:0], n_collections, multiplicity, eligible)
    while graph.coverage() < target_coverage and used < len(candidates):
        used = min(used + batch, len(candidates))
        graph = build_graph(candidates[:used], n_collections, multiplicity, eligible)
    return candidates[:used], graph
