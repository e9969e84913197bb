import numpy as np
import pytest

from batchad import DataError
from batchad.graph import (
    CandidateLinks,
    SuspiciousLink,
    build_graph,
    candidate_links,
    select_by_coverage,
)
from batchad.scoring import compute_layer_records, omega_index, sort_records


def records_for(tokens):
    return compute_layer_records([np.asarray(t, dtype=np.float64) for t in tokens])


def brute_force_candidates(records, omega_fraction, alpha):
    """Per-element enumeration of (rank < omega) links, sorted by ratio."""
    out = []
    sd, ss, n_valid = sort_records(records)
    b, n, _ = sd.shape
    for i in range(b):
        for h in range(n):
            length = int(n_valid[i, h])
            if length < 2:
                continue
            omega = omega_index(length, omega_fraction)
            d = np.maximum(sd[i, h, :length], 1e-9)
            for rank in range(1, omega):
                zeta = d[rank - 1] ** (1 - alpha) / d[omega - 1]
                out.append(SuspiciousLink(i, h, int(ss[i, h, rank - 1]), zeta))
    out.sort(key=lambda l: (l.zeta, l.collection, l.position, l.target))
    return out


def test_candidates_match_bruteforce_enumeration():
    rng = np.random.default_rng(0)
    toks = [rng.normal(size=(4, 3)) for _ in range(6)]
    records = records_for(toks)
    got = list(candidate_links(records, 0.3, 0.2))
    want = brute_force_candidates(records, 0.3, 0.2)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert (g.collection, g.position, g.target) == (w.collection, w.position, w.target)
        assert g.zeta == pytest.approx(w.zeta)


def test_candidates_small_base_one_rank_each():
    rng = np.random.default_rng(1)
    toks = [rng.normal(size=(1, 3)) for _ in range(3)]
    records = records_for(toks)
    links = candidate_links(records, 0.3, 0.2)
    assert len(links) <= 3
    ranks_per_element = {}
    for l in links:
        ranks_per_element[(l.collection, l.position)] = \
            ranks_per_element.get((l.collection, l.position), 0) + 1
    assert all(v == 1 for v in ranks_per_element.values())


def test_candidates_identical_collections_stable():
    tok = np.eye(3)
    toks = [tok.copy() for _ in range(4)]
    records = records_for(toks)
    links = candidate_links(records, 0.5, 0.2)
    zetas = np.array([l.zeta for l in links])
    assert np.allclose(zetas, zetas[0])
    keys = [(l.collection, l.position, l.target) for l in links]
    assert keys == sorted(keys)


def test_candidates_query_mask_omits_elements():
    rng = np.random.default_rng(2)
    toks = [rng.normal(size=(4, 3)) for _ in range(5)]
    records = records_for(toks)
    keep = np.ones((5, 4), dtype=bool)
    keep[2, :] = False          # collection 2 emits no links
    links = candidate_links(records, 0.4, 0.2, query_keep=keep)
    assert all(l.collection != 2 for l in links)
    # it may still be a target of other elements' links
    assert any(l.target == 2 for l in links)


def test_build_graph_counts_both_directions():
    links = [SuspiciousLink(0, 0, 1, 0.1), SuspiciousLink(0, 1, 1, 0.2)]
    g = build_graph(links, 3)
    assert g.weights[0, 1] == 2 and g.weights[1, 0] == 2

    links = [SuspiciousLink(0, 0, 1, 0.1), SuspiciousLink(1, 0, 0, 0.2)]
    g = build_graph(links, 3)
    assert g.weights[0, 1] == 2 and g.weights[1, 0] == 2


def test_build_graph_empty():
    g = build_graph([], 4)
    assert np.all(g.weights == 0)
    assert g.coverage() == 0.0


def test_graph_symmetric_and_total_weight_counts_links():
    rng = np.random.default_rng(3)
    toks = [rng.normal(size=(5, 3)) for _ in range(6)]
    links = candidate_links(records_for(toks), 0.4, 0.2)
    g = build_graph(links, 6)
    assert np.array_equal(g.weights, g.weights.T)
    assert np.all(np.diag(g.weights) == 0)
    assert g.weights.sum() // 2 == len(links)


def test_layer_multiplicity_raises_four_connections():
    links = [SuspiciousLink(0, 0, 1, 0.1)]
    g = build_graph(links, 3, multiplicity=4)
    assert g.weights[0, 1] == 4


def test_coverage_star_first_batch():
    # one batch of B(B-1)/2 = 6 links covers all 4 nodes
    links = CandidateLinks(
        collections=np.array([0, 0, 0, 1, 2, 3]),
        positions=np.zeros(6, dtype=np.int64),
        targets=np.array([1, 2, 3, 0, 0, 0]),
        zetas=np.linspace(0.01, 0.06, 6),
    )
    selected, graph = select_by_coverage(links, 1.0, 4)
    assert len(selected) == 6
    assert graph.coverage() == 1.0


def test_coverage_zero_target_selects_nothing():
    links = CandidateLinks(
        collections=np.array([0]), positions=np.array([0]),
        targets=np.array([1]), zetas=np.array([0.5]),
    )
    selected, graph = select_by_coverage(links, 0.0, 3)
    assert len(selected) == 0
    assert np.all(graph.weights == 0)


def test_coverage_exhausts_when_node_never_touched():
    # node 3 of 4 never appears; all candidates get used, coverage < 1
    links = CandidateLinks(
        collections=np.array([0, 1, 2, 0, 1, 2, 0]),
        positions=np.zeros(7, dtype=np.int64),
        targets=np.array([1, 2, 0, 2, 0, 1, 1]),
        zetas=np.linspace(0.01, 0.07, 7),
    )
    selected, graph = select_by_coverage(links, 1.0, 4)
    assert len(selected) == len(links)
    assert graph.coverage() == pytest.approx(0.75)


def test_coverage_monotone_in_batches():
    rng = np.random.default_rng(4)
    toks = [rng.normal(size=(3, 3)) for _ in range(8)]
    candidates = candidate_links(records_for(toks), 0.4, 0.2)
    batch = 8 * 7 // 2
    prev = -1.0
    for used in range(0, len(candidates) + batch, batch):
        g = build_graph(candidates[:min(used, len(candidates))], 8)
        cov = g.coverage()
        assert cov >= prev
        prev = cov


def test_minimal_batches_selected():
    rng = np.random.default_rng(5)
    toks = [rng.normal(size=(4, 3)) for _ in range(7)]
    candidates = candidate_links(records_for(toks), 0.4, 0.2)
    selected, graph = select_by_coverage(candidates, 0.9, 7)
    batch = 7 * 6 // 2
    n_batches = (len(selected) + batch - 1) // batch
    assert graph.coverage() >= 0.9
    if n_batches > 1:
        g_prev = build_graph(candidates[:batch * (n_batches - 1)], 7)
        assert g_prev.coverage() < 0.9


def test_eligible_nodes_change_denominator():
    links = CandidateLinks(
        collections=np.array([0]), positions=np.array([0]),
        targets=np.array([1]), zetas=np.array([0.1]),
    )
    eligible = np.array([True, True, False])
    g = build_graph(links, 3, eligible=eligible)
    assert g.coverage() == 1.0


def test_candidate_links_needs_three_collections():
    rng = np.random.default_rng(6)
    toks = [rng.normal(size=(2, 3)) for _ in range(2)]
    with pytest.raises(DataError):
        candidate_links(records_for(toks), 0.3, 0.2)
