import numpy as np
import pytest

from conftest import make_feature_set, unit_rows
from featboost import matcher, oracles
from featboost.booster import DescriptorVector, FeatureSet, KeypointGeometry
from featboost.errors import CalibrationError, ConfigError, ContractError


def copy_with_descriptors(fs, rows, kind="real"):
    if kind == "real":
        descs = [DescriptorVector("real", r) for r in rows]
    else:
        descs = [DescriptorVector("binary", r) for r in rows]
    return FeatureSet(fs.image_id + "'", fs.width, fs.height,
                      list(fs.keypoints)[:len(descs)], descs)


# ---------------------------------------------------------------------------
# nn_match


def test_nn_match_exact_copies_match_identity(rng):
    a = make_feature_set(rng, 6, 8)
    b = copy_with_descriptors(a, a.descriptor_matrix())
    ms = matcher.nn_match(a, b, "euclidean")
    assert np.array_equal(ms.idx_a, np.arange(6))
    assert np.array_equal(ms.idx_b, np.arange(6))
    assert np.abs(ms.distance).max() <= 1e-12


def test_nn_match_single_target_has_no_ratio(rng):
    a = make_feature_set(rng, 4, 8)
    b = make_feature_set(rng, 1, 8)
    ms = matcher.nn_match(a, b, "euclidean")
    assert np.array_equal(ms.idx_b, np.zeros(4, dtype=np.int64))
    assert ms.ratio is None


def test_nn_match_empty_target(rng):
    a = make_feature_set(rng, 3, 8)
    b = make_feature_set(rng, 0, 8)
    assert len(matcher.nn_match(a, b, "euclidean")) == 0


def test_nn_match_matches_exhaustive_oracle_with_ties(rng):
    for s in range(40):
        r = np.random.default_rng(s)
        n, m = int(r.integers(1, 64)), int(r.integers(2, 64))
        a = make_feature_set(r, n, 6)
        b = make_feature_set(r, m, 6)
        ms = matcher.nn_match(a, b, "euclidean")
        dist = matcher.euclidean_matrix(a.descriptor_matrix(), b.descriptor_matrix())
        best_idx, best_d, second_d = oracles.nn_exhaustive(dist)
        assert list(ms.idx_b) == best_idx
        assert np.abs(ms.distance - best_d).max() <= 1e-12
        assert np.abs(ms.ratio - np.array(best_d) / np.array(second_d)).max() <= 1e-12


def test_nn_match_tie_breaks_to_smallest_index():
    kp = KeypointGeometry(0.5, 0.5, 0.5, 0.0, 1.0)
    a = FeatureSet("a", 10, 10, [kp], [DescriptorVector("binary", [1, 0, 1, 0])])
    rows = [[1, 0, 1, 1], [1, 0, 0, 0], [1, 0, 1, 0]]  # distances 1, 1, 0
    b = FeatureSet("b", 10, 10, [kp] * 3,
                   [DescriptorVector("binary", r) for r in rows])
    ms = matcher.nn_match(a, b, "hamming")
    assert ms.idx_b[0] == 2
    b2 = FeatureSet("b", 10, 10, [kp] * 2,
                    [DescriptorVector("binary", r) for r in rows[:2]])
    ms2 = matcher.nn_match(a, b2, "hamming")
    assert ms2.idx_b[0] == 0  # both at distance 1; smallest index wins


def test_nn_match_metric_kind_mismatch(rng):
    a = make_feature_set(rng, 3, 8, kind="binary")
    b = make_feature_set(rng, 3, 8, kind="binary")
    with pytest.raises(ConfigError):
        matcher.nn_match(a, b, "euclidean")
    with pytest.raises(ConfigError):
        matcher.nn_match(make_feature_set(rng, 3, 8), make_feature_set(rng, 3, 8),
                         "hamming")


def test_hamming_ranking_equals_euclidean_on_sign_view(rng):
    a = make_feature_set(rng, 12, 32, kind="binary")
    b = make_feature_set(rng, 20, 32, kind="binary")
    ham = matcher.nn_match(a, b, "hamming")
    # float-space euclidean ranking of the +/-1 view must pick identical
    # neighbors (squared euclidean = 4 x hamming)
    d = matcher.euclidean_matrix(a.descriptor_matrix(), b.descriptor_matrix())
    order = np.argsort(d, axis=1, kind="stable")
    assert np.array_equal(ham.idx_b, order[:, 0])
    assert np.abs(ham.distance - (d[np.arange(12), order[:, 0]] ** 2) / 4.0).max() <= 1e-9


# ---------------------------------------------------------------------------
# mutual check / filtering


def test_mutual_check_identity(rng):
    a = make_feature_set(rng, 5, 8)
    b = copy_with_descriptors(a, a.descriptor_matrix())
    fwd = matcher.nn_match(a, b, "euclidean")
    bwd = matcher.nn_match(b, a, "euclidean")
    ms = matcher.mutual_check(fwd, bwd)
    assert len(ms) == 5


def test_mutual_check_rejects_asymmetric():
    fwd = matcher.MatchSet([0], [1], [0.5])
    bwd = matcher.MatchSet([1], [2], [0.5])
    assert len(matcher.mutual_check(fwd, bwd)) == 0


def test_mutual_check_matches_set_intersection_oracle(rng):
    for s in range(20):
        r = np.random.default_rng(s)
        a = make_feature_set(r, int(r.integers(2, 20)), 6)
        b = make_feature_set(r, int(r.integers(2, 20)), 6)
        fwd = matcher.nn_match(a, b, "euclidean")
        bwd = matcher.nn_match(b, a, "euclidean")
        ms = matcher.mutual_check(fwd, bwd)
        want = {(int(i), int(j)) for i, j in zip(fwd.idx_a, fwd.idx_b)} \
            & {(int(i), int(j)) for j, i in zip(bwd.idx_a, bwd.idx_b)}
        assert {(int(i), int(j)) for i, j in zip(ms.idx_a, ms.idx_b)} == want


def test_mutual_check_idempotent_and_symmetric(rng):
    a = make_feature_set(rng, 15, 8)
    b = make_feature_set(rng, 18, 8)
    fwd = matcher.nn_match(a, b, "euclidean")
    bwd = matcher.nn_match(b, a, "euclidean")
    once = matcher.mutual_check(fwd, bwd)
    twice = matcher.mutual_check(once, bwd)
    assert np.array_equal(once.idx_a, twice.idx_a)
    assert np.array_equal(once.idx_b, twice.idx_b)
    swapped = matcher.mutual_check(bwd, fwd)
    assert {(int(j), int(i)) for i, j in zip(swapped.idx_a, swapped.idx_b)} \
        == {(int(i), int(j)) for i, j in zip(once.idx_a, once.idx_b)}


def test_filter_matches_ratio_and_distance(rng):
    ms = matcher.MatchSet([0, 1, 2], [3, 4, 5], [1.0, 2.0, 3.0],
                          ratio=[0.5, 0.9, 0.7])
    assert len(matcher.filter_matches(ms, "ratio", 1.0)) == 3
    assert len(matcher.filter_matches(ms, "ratio", 0.75)) == 2
    assert len(matcher.filter_matches(ms, "distance", 0.0)) == 0
    shrink = [len(matcher.filter_matches(ms, "distance", t)) for t in (3.0, 2.0, 1.0, 0.5)]
    assert shrink == sorted(shrink, reverse=True)
    assert len(matcher.filter_matches(ms, "distance", np.inf)) == 3


def test_filter_ratio_requires_ratio_field():
    ms = matcher.MatchSet([0], [0], [1.0])
    with pytest.raises(ContractError):
        matcher.filter_matches(ms, "ratio", 0.8)


def test_sift_family_default_ratio_threshold():
    # the conventional first/second distance ratio cut-off for this family
    assert matcher.filter_matches(
        matcher.MatchSet([0], [0], [1.0], ratio=[0.8]), "ratio", 0.8).idx_a.size == 1
    assert matcher.filter_matches(
        matcher.MatchSet([0], [0], [1.0], ratio=[0.81]), "ratio", 0.8).idx_a.size == 0


# ---------------------------------------------------------------------------
# warp + mma


def test_warp_normalization_and_inverse():
    h = np.array([[2.0, 0.0, 4.0], [0.0, 2.0, 6.0], [0.0, 0.0, 2.0]])
    warp = matcher.PlanarWarp(h)
    assert warp.matrix[2, 2] == 1.0
    pts = np.array([[1.0, 1.0], [3.0, -2.0]])
    back = warp.inverse().apply(warp.apply(pts))
    assert np.abs(back - pts).max() <= 1e-12


def test_warp_rejects_singular():
    with pytest.raises(ContractError):
        matcher.PlanarWarp(np.zeros((3, 3)))


def test_mma_perfect_and_hopeless(rng):
    a = make_feature_set(rng, 8, 4)
    b = FeatureSet("b", a.width, a.height, list(a.keypoints), list(a.descriptors))
    ms = matcher.MatchSet(np.arange(8), np.arange(8), np.zeros(8))
    identity = matcher.PlanarWarp(np.eye(3))
    assert np.array_equal(matcher.mma(ms, identity, a, b), np.ones(10))
    shifted = matcher.PlanarWarp(np.array([[1, 0, 500.0], [0, 1, 0], [0, 0, 1]]))
    assert np.array_equal(matcher.mma(ms, shifted, a, b), np.zeros(10))


def test_mma_empty_matchset_is_zero(rng):
    a = make_feature_set(rng, 3, 4)
    ms = matcher.MatchSet([], [], [])
    assert np.array_equal(matcher.mma(ms, matcher.PlanarWarp(np.eye(3)), a, a),
                          np.zeros(10))


def test_mma_mixed_instance_matches_counting_oracle(rng):
    width = height = 100
    kp = lambda x, y: KeypointGeometry(x / 100.0, y / 100.0, 0.5, 0.0, 1.0)
    desc = [DescriptorVector("real", np.ones(2))] * 4
    a = FeatureSet("a", width, height, [kp(10, 10), kp(20, 20), kp(30, 30), kp(40, 40)], desc)
    # offsets of 0.5, 2.5, 6.0, 20 px from the identity warp
    b = FeatureSet("b", width, height,
                   [kp(10.5, 10), kp(20, 22.5), kp(36, 30), kp(60, 40)], desc)
    ms = matcher.MatchSet(np.arange(4), np.arange(4), np.zeros(4))
    curve = matcher.mma(ms, matcher.PlanarWarp(np.eye(3)), a, b)
    errors = [0.5, 2.5, 6.0, 20.0]
    want = [np.mean([e <= t for e in errors]) for t in range(1, 11)]
    assert np.allclose(curve, want)
    assert all(curve[i] <= curve[i + 1] for i in range(9))


def test_mma_monotone_nondecreasing(rng):
    for s in range(10):
        r = np.random.default_rng(s)
        a = make_feature_set(r, 12, 4)
        b = make_feature_set(r, 12, 4)
        ms = matcher.MatchSet(np.arange(12), r.permutation(12), np.zeros(12))
        curve = matcher.mma(ms, matcher.PlanarWarp(np.eye(3)), a, b)
        assert all(curve[i] <= curve[i + 1] for i in range(9))


# ---------------------------------------------------------------------------
# calibration


def test_calibration_perfectly_separated(rng):
    correct = rng.uniform(0.1, 0.4, 300)
    incorrect = rng.uniform(0.6, 0.9, 300)
    res = matcher.calibrate_threshold(correct, incorrect, "ratio")
    assert res.separable
    assert correct.max() <= res.tau <= incorrect.min()
    assert res.retained_correct == 1.0
    assert res.rejected_incorrect == 1.0


def test_calibration_identical_distributions_not_separable(rng):
    samples = rng.normal(0.5, 0.1, 500)
    res = matcher.calibrate_threshold(samples, samples.copy(), "distance")
    assert not res.separable


def test_calibration_matches_sweep_oracle(rng):
    correct = rng.normal(0.45, 0.12, 400)
    incorrect = rng.normal(0.75, 0.12, 400)
    res = matcher.calibrate_threshold(correct, incorrect, "ratio")
    best = oracles.calibration_sweep(correct, incorrect, res.bin_edges, 0.9)
    assert res.tau == pytest.approx(best[0])
    assert res.retained_correct == pytest.approx(best[1])
    assert res.rejected_incorrect >= 0.9


def test_calibration_needs_enough_samples(rng):
    with pytest.raises(CalibrationError):
        matcher.calibrate_threshold(rng.normal(size=99), rng.normal(size=500))


def test_calibration_pdf_tables(rng):
    correct = rng.normal(0.4, 0.1, 400)
    incorrect = rng.normal(0.8, 0.1, 400)
    res = matcher.calibrate_threshold(correct, incorrect)
    assert len(res.bin_edges) == 65
    assert res.pdf_correct.shape == (64,)
    widths = np.diff(res.bin_edges)
    assert (res.pdf_correct * widths).sum() == pytest.approx(1.0)
    assert (res.pdf_incorrect * widths).sum() == pytest.approx(1.0)
