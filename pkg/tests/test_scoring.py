import numpy as np
import pytest

from batchad import CollectionExhausted, DataError
from batchad.data import ExclusionSet, FeatureTensor, l2_normalize
from batchad.scoring import (
    DISTANCE_FLOOR,
    aggregate_layer_distances,
    apply_exclusions,
    cls_screen,
    compute_layer_records,
    distance_to_collection,
    drop_collections,
    endurance_ratio,
    epsilon_neighbor_count,
    growth_rates,
    mutual_similarity_vector,
    omega_index,
    sort_records,
    topk_score,
    topk_scores,
    weighted_endurance_ratio,
)


def tensor(cid, rows, grid=None):
    rows = np.asarray(rows, dtype=np.float64)
    return FeatureTensor(collection_id=cid, layer_id=0, tokens=rows,
                         grid_shape=grid or (len(rows),))


class Record:
    def __init__(self, distances, sources=None):
        self.distances = np.asarray(distances, dtype=np.float64)
        self.sources = (np.arange(len(distances)) if sources is None
                        else np.asarray(sources))


def test_distance_identity_match():
    c = tensor(1, [[1, 0], [0, 1]])
    assert distance_to_collection([1, 0], c) == 0.0


def test_distance_hand_value():
    c = tensor(1, [[0, 1]])
    assert distance_to_collection([1, 0], c) == pytest.approx(2.0)


def test_distance_exhausted_collection():
    c = tensor(1, [[0, 1]])
    ex = ExclusionSet([(1, 0)])
    with pytest.raises(CollectionExhausted):
        distance_to_collection([1, 0], c, ex)


def test_msv_sorted_with_sources():
    base = [
        tensor(0, [[1.0, 0.0]]),
        tensor(1, [[0.8, 0.6]]),     # squared distance 0.48 + ... compute below
        tensor(2, [[0.99, np.sqrt(1 - 0.99**2)]]),
    ]
    rec = mutual_similarity_vector(base, 0, 0)
    assert np.all(np.diff(rec.distances) >= 0)
    assert rec.sources.tolist() == [2, 1]


def test_msv_tie_broken_by_source_id():
    base = [
        tensor(0, [[1.0, 0.0]]),
        tensor(1, [[0.0, 1.0]]),
        tensor(2, [[0.0, 1.0]]),
    ]
    rec = mutual_similarity_vector(base, 0, 0)
    assert rec.sources.tolist() == [1, 2]


def test_msv_screen_restricts_comparisons():
    base = [tensor(i, [[np.cos(0.1 * i), np.sin(0.1 * i)]]) for i in range(5)]
    rec = mutual_similarity_vector(base, 0, 0, screen=[2, 3])
    assert set(rec.sources.tolist()) == {2, 3}


def test_topk_mean_of_smallest():
    assert topk_score(Record([0.1, 0.2, 0.4]), 0.5) == pytest.approx(0.15)


def test_topk_single_distance_any_fraction():
    assert topk_score(Record([0.3]), 0.05) == pytest.approx(0.3)


def test_topk_constant():
    assert topk_score(Record([0.7] * 20), 0.1) == pytest.approx(0.7)


def test_topk_permutation_invariant():
    rng = np.random.default_rng(0)
    base = [tensor(i, rng.normal(size=(6, 4))) for i in range(6)]
    rec = mutual_similarity_vector(base, 0, 2)
    shuffled = [base[0]] + [base[i] for i in (3, 5, 1, 4, 2)]
    # re-tag ids so the shuffled base is a legal batch with the same content
    relabel = {3: 1, 5: 2, 1: 3, 4: 4, 2: 5}
    shuffled = [tensor(0, base[0].tokens)] + [
        tensor(relabel[i], base[i].tokens) for i in (3, 5, 1, 4, 2)
    ]
    rec2 = mutual_similarity_vector(shuffled, 0, 2)
    assert topk_score(rec, 0.3) == pytest.approx(topk_score(rec2, 0.3))


def test_growth_rates_geometric():
    taus = growth_rates(Record([1.0, 2.0, 4.0]))
    assert np.allclose(taus, [np.log(2), np.log(2)])


def test_growth_rates_constant():
    taus = growth_rates(Record([0.3, 0.3, 0.3]))
    assert np.allclose(taus, 0.0)


def test_growth_rates_floor():
    taus = growth_rates(Record([1e-12, 1e-6]))
    assert taus[0] == pytest.approx(np.log(1e-6 / DISTANCE_FLOOR))


def test_growth_rates_nonnegative_property():
    rng = np.random.default_rng(1)
    for _ in range(20):
        d = np.sort(rng.random(15))
        assert np.all(growth_rates(Record(d)) >= 0)


def test_endurance_ratio_values():
    d = np.linspace(0.1, 0.5, 9)           # length 9, omega = round(2.7) -> 3
    rec = Record(d)
    omega = omega_index(len(d), 0.3)
    assert endurance_ratio(rec, 1, 0.3) == pytest.approx(d[0] / d[omega - 1])


def test_endurance_ratio_boundary_one():
    rec = Record([0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5])
    assert endurance_ratio(rec, 1, 0.3) == pytest.approx(1.0)


def test_endurance_ratio_hand():
    # omega lands on the third entry (round(0.3 * 10) = 3)
    d = [0.1, 0.3, 0.5] + [0.6] * 7
    assert endurance_ratio(Record(d), 1, 0.3) == pytest.approx(0.2)


def test_omega_rounding_rule():
    assert omega_index(99, 0.3) == 30
    assert omega_index(2, 0.3) == 2
    assert omega_index(3, 0.3) == 2
    assert omega_index(10, 0.95) == 9       # clamped to len - 1


def test_endurance_rank_domain():
    rec = Record(np.linspace(0.1, 1.0, 10))
    with pytest.raises(DataError):
        endurance_ratio(rec, 5, 0.3)        # omega = 3, i must be < 3


def test_weighted_endurance_hand_value():
    d = [0.1, 0.3, 0.5] + [0.6] * 7
    got = weighted_endurance_ratio(Record(d), 1, 0.3, 0.2)
    assert got == pytest.approx(0.1**0.8 / 0.5, rel=1e-12)


def test_weighted_endurance_alpha_zero_reduces():
    d = np.sort(np.random.default_rng(2).random(20))
    rec = Record(d)
    assert weighted_endurance_ratio(rec, 2, 0.3, 0.0) == pytest.approx(
        endurance_ratio(rec, 2, 0.3))


def test_weighted_endurance_unit_base():
    d = [1.0] + list(np.linspace(1.1, 2.0, 9))
    rec = Record(d)
    omega = omega_index(10, 0.3)
    for alpha in (0.0, 0.2, 0.7):
        assert weighted_endurance_ratio(rec, 1, 0.3, alpha) == pytest.approx(
            1.0 / d[omega - 1])


def test_aggregate_mean_of_two_layers():
    r1 = type("R", (), {"element": (0, 0, 6, 1), "distances": np.array([0.2]),
                        "sources": np.array([1])})
    r2 = type("R", (), {"element": (0, 0, 12, 1), "distances": np.array([0.4]),
                        "sources": np.array([1])})
    agg = aggregate_layer_distances([r1, r2])
    assert agg.distances[0] == pytest.approx(0.3)


def test_aggregate_identical_layers_idempotent():
    rng = np.random.default_rng(3)
    base = [tensor(i, rng.normal(size=(4, 3))) for i in range(5)]
    rec = mutual_similarity_vector(base, 1, 0, layer_id=6)
    agg = aggregate_layer_distances([rec, rec])
    assert np.allclose(agg.distances, np.maximum(rec.distances, DISTANCE_FLOOR))
    assert agg.sources.tolist() == rec.sources.tolist()


def test_aggregate_matches_bruteforce_mean_then_sort():
    rng = np.random.default_rng(4)
    base_layers = {
        layer: [tensor(i, rng.normal(size=(5, 4))) for i in range(6)]
        for layer in (6, 12, 18, 24)
    }
    recs = [mutual_similarity_vector(base_layers[l], 2, 1, layer_id=l)
            for l in (6, 12, 18, 24)]
    agg = aggregate_layer_distances(recs)

    by_source = {}
    for rec in recs:
        for dd, ss in zip(np.maximum(rec.distances, DISTANCE_FLOOR), rec.sources):
            by_source.setdefault(int(ss), []).append(dd)
    expect = sorted((np.mean(v), s) for s, v in by_source.items())
    assert np.allclose(agg.distances, [e[0] for e in expect])
    assert agg.sources.tolist() == [e[1] for e in expect]


def test_aggregate_layer_mismatch_errors():
    r1 = type("R", (), {"element": (0, 0, 6, 1), "distances": np.array([0.2]),
                        "sources": np.array([1])})
    r2 = type("R", (), {"element": (0, 0, 12, 1), "distances": np.array([0.4]),
                        "sources": np.array([2])})
    with pytest.raises(DataError):
        aggregate_layer_distances([r1, r2])


def cls_matrix(rows):
    return l2_normalize(np.asarray(rows, dtype=np.float64))[0]


def test_cls_screen_eta_one_keeps_all_others():
    rng = np.random.default_rng(5)
    cls = cls_matrix(rng.normal(size=(10, 8)))
    ids = cls_screen(cls, 3, 1.0)
    assert ids.tolist() == [j for j in range(10) if j != 3]


def test_cls_screen_finds_planted_duplicates():
    rng = np.random.default_rng(6)
    cls = rng.normal(size=(10, 16))
    cls[4] = cls[0] + rng.normal(scale=1e-3, size=16)
    cls[7] = cls[0] + rng.normal(scale=1e-3, size=16)
    ids = cls_screen(cls_matrix(cls), 0, 0.2)
    assert set(ids.tolist()) == {4, 7}


def test_cls_screen_clamps_to_one():
    rng = np.random.default_rng(7)
    cls = cls_matrix(rng.normal(size=(5, 4)))
    assert len(cls_screen(cls, 0, 0.01)) == 1


def test_cls_screen_record_length_rule():
    rng = np.random.default_rng(8)
    cls = cls_matrix(rng.normal(size=(10, 6)))
    assert len(cls_screen(cls, 2, 0.6)) == 6


def test_epsilon_neighbor_counts():
    rec = Record([0.05, 0.1, 0.4, 0.9])
    assert epsilon_neighbor_count(rec, 0.01) == 0
    assert epsilon_neighbor_count(rec, 1.0) == 4
    planted = Record([0.0] * 5 + [0.5] * 8)
    assert epsilon_neighbor_count(planted, 1e-3) == 5


# ---------------------------------------------------------------------------
# batch engine consistency


def random_base(rng, b=6, n=5, d=4):
    return [rng.normal(size=(n, d)) for _ in range(b)]


def test_engine_matches_elementwise():
    rng = np.random.default_rng(9)
    toks = random_base(rng)
    base = [tensor(i, t) for i, t in enumerate(toks)]
    records = compute_layer_records(toks)
    for i in range(len(toks)):
        for h in range(toks[0].shape[0]):
            rec = mutual_similarity_vector(base, i, h)
            got = records.record(i, h)
            assert np.allclose(got.distances, rec.distances)
            assert got.sources.tolist() == rec.sources.tolist()


def test_engine_screening_consistency_eta_one():
    rng = np.random.default_rng(10)
    toks = random_base(rng)
    cls = cls_matrix(rng.normal(size=(6, 4)))
    screens = {i: cls_screen(cls, i, 1.0) for i in range(6)}
    plain = compute_layer_records(toks)
    screened = compute_layer_records(toks, screens=screens)
    assert np.array_equal(plain.dists, screened.dists)
    assert np.array_equal(plain.sources, screened.sources)


def test_exclusion_monotonicity():
    rng = np.random.default_rng(11)
    toks = random_base(rng)
    base = [tensor(i, t) for i, t in enumerate(toks)]
    z = toks[0][0]
    ex1 = ExclusionSet([(1, 0)])
    ex2 = ExclusionSet([(1, 0), (1, 3), (2, 2)])
    for c in base[1:]:
        d0 = distance_to_collection(z, c)
        d1 = distance_to_collection(z, c, ex1)
        d2 = distance_to_collection(z, c, ex2)
        assert d0 <= d1 <= d2


def test_apply_exclusions_equals_masking_fresh_records():
    rng = np.random.default_rng(12)
    toks = random_base(rng, b=7, n=6)
    records = compute_layer_records(toks)
    ex = ExclusionSet([(1, 0), (1, 1), (3, 4), (5, 2), (5, 3), (5, 5)])
    masked = apply_exclusions(records, ex)
    fresh = apply_exclusions(compute_layer_records(toks), ex)
    assert np.array_equal(masked.valid, fresh.valid)
    assert np.array_equal(masked.dists, fresh.dists)
    # invalidated exactly where the stored nearest token was excluded
    for i in range(7):
        for c, j in enumerate(records.sources[i]):
            stale = np.isin(records.argmins[i, :, c],
                            ex.positions(int(j), 6))
            assert np.array_equal(masked.valid[i, :, c], ~stale)


def test_apply_exclusions_exhausts_collection():
    rng = np.random.default_rng(13)
    toks = random_base(rng, b=4, n=3)
    records = compute_layer_records(toks)
    ex = ExclusionSet([(2, p) for p in range(3)])
    masked = apply_exclusions(records, ex)
    for i in (0, 1, 3):
        col = np.flatnonzero(records.sources[i] == 2)[0]
        assert not masked.valid[i, :, col].any()


def test_drop_collections_matches_smaller_base():
    rng = np.random.default_rng(14)
    toks = random_base(rng, b=6, n=4)
    records = compute_layer_records(toks)
    reduced = drop_collections(records, [2, 4])
    scores = topk_scores(reduced, 0.3)

    keep = [0, 1, 3, 5]
    toks_small = [toks[i] for i in keep]
    small = compute_layer_records(toks_small)
    small_scores = topk_scores(small, 0.3)
    for new_i, old_i in enumerate(keep):
        assert np.allclose(scores[old_i], small_scores[new_i])


def test_sort_records_pushes_invalid_last():
    rng = np.random.default_rng(15)
    toks = random_base(rng, b=5, n=3)
    records = compute_layer_records(toks)
    records.valid[0, 0, 1] = False
    sd, ss, n_valid = sort_records(records)
    assert n_valid[0, 0] == 3
    assert np.isinf(sd[0, 0, -1])
    assert ss[0, 0, -1] == -1
