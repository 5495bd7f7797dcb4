import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import geometry_rows, unit_rows
from featboost import diffkernel as dk
from featboost import fastap as fa
from featboost import oracles
from featboost.booster import BoosterParams, boost_matrix
from featboost.errors import (ConfigError, ContractError, EmptyBatchError,
                              ShapeError, UndefinedAPError)


def labels_from(matrix):
    return fa.MatchLabels(np.asarray(matrix, dtype=np.int8))


# ---------------------------------------------------------------------------
# types


def test_match_labels_index_sets():
    lab = fa.MatchLabels.from_index_sets((2, 3), positives=[[0], [2]],
                                         negatives=[[1, 2], [0]])
    assert list(lab.positives(0)) == [0]
    assert list(lab.negatives(0)) == [1, 2]
    assert list(lab.positives(1)) == [2]
    with pytest.raises(ContractError):
        fa.MatchLabels.from_index_sets((1, 2), positives=[[0]], negatives=[[0]])


def test_quantization_grid_fenceposts():
    grid = fa.real_grid(10)
    assert grid.delta == 0.4
    assert len(grid.centers) == 11
    assert grid.centers[0] == 0.0 and grid.centers[-1] == 4.0
    gb = fa.binary_grid(16, bins=16)
    assert np.array_equal(gb.centers, np.arange(17.0))
    with pytest.raises(ConfigError):
        fa.QuantizationGrid(1, 0.0, 4.0)


# ---------------------------------------------------------------------------
# distances


def test_distances_real_analytic_cases():
    d = np.array([[1.0, 0.0]])
    others = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    z = fa.distances_real(d, others).data
    assert np.allclose(z, [[0.0, 2.0, 4.0]], atol=1e-12)


def test_distances_real_range_and_contract(rng):
    a = unit_rows(rng, 4, 8)
    b = unit_rows(rng, 9, 8)
    z = fa.distances_real(a, b).data
    assert z.min() >= 0.0 and z.max() <= 4.0
    with pytest.raises(ContractError):
        fa.distances_real(a * 1.5, b)


def test_distances_binary_identical_and_complement():
    d = np.array([[1.0, -1.0, 1.0, 1.0]])
    z = fa.distances_binary(d, np.vstack([d, -d])).data
    assert np.array_equal(z, [[0.0, 4.0]])


def test_distances_binary_counts_flips(rng):
    for _ in range(25):
        bits_a = rng.integers(0, 2, 32)
        k = int(rng.integers(0, 33))
        flip_idx = rng.choice(32, size=k, replace=False)
        bits_b = bits_a.copy()
        bits_b[flip_idx] ^= 1
        z = fa.distances_binary(dk.tensor(bits_a * 2.0 - 1.0),
                                dk.tensor(bits_b * 2.0 - 1.0)).item()
        assert z == oracles.hamming_bit_loop(bits_a, bits_b) == k


def test_distances_binary_rejects_non_sign_values():
    with pytest.raises(ContractError):
        fa.distances_binary(dk.tensor([[0.5, -1.0]]), dk.tensor([[1.0, -1.0]]))


# ---------------------------------------------------------------------------
# fastap


def test_fastap_perfect_ranking_is_one():
    grid = fa.real_grid(10)
    z = np.array([grid.centers[1]] + [grid.centers[10]] * 5)
    ap = fa.fastap(dk.tensor(z), [True] + [False] * 5, grid)
    assert ap.item() == pytest.approx(1.0, abs=1e-12)


def test_fastap_tied_pair_is_half():
    grid = fa.real_grid(10)
    ap = fa.fastap(dk.tensor([[2.0, 2.0]]), [True, False], grid)
    assert ap.item() == pytest.approx(0.5, abs=1e-12)


def test_fastap_requires_a_positive():
    with pytest.raises(UndefinedAPError):
        fa.fastap(dk.tensor([[1.0, 2.0]]), [False, False], fa.real_grid())


def test_fastap_matches_bruteforce_histogram(rng):
    grid = fa.real_grid(10)
    for _ in range(30):
        z = rng.uniform(0.0, 4.0, 20)
        pos = rng.random(20) < 0.35
        if not pos.any():
            pos[0] = True
        got = fa.fastap(dk.tensor(z), pos, grid).item()
        want = oracles.fastap_histogram_direct(z, pos, grid.centers, grid.delta)
        assert abs(got - want) <= 1e-10


def test_fastap_permutation_invariant(rng):
    grid = fa.real_grid(10)
    z = rng.uniform(0.0, 4.0, 15)
    pos = rng.random(15) < 0.4
    pos[3] = True
    perm = rng.permutation(15)
    a = fa.fastap(dk.tensor(z), pos, grid).item()
    b = fa.fastap(dk.tensor(z[perm]), pos[perm], grid).item()
    assert a == pytest.approx(b, abs=1e-14)


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=2, max_value=24), st.integers(min_value=0, max_value=2 ** 24))
def test_fastap_stays_in_unit_interval(m, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0.0, 4.0, m)
    pos = rng.random(m) < 0.4
    if not pos.any():
        pos[int(rng.integers(m))] = True
    ap = fa.fastap(dk.tensor(z), pos, fa.real_grid(10)).item()
    assert -1e-12 <= ap <= 1.0 + 1e-12


def test_fastap_one_iff_all_positive_mass_ahead(rng):
    grid = fa.real_grid(10)
    # positives strictly inside earlier bins than any negative: AP = 1
    z = np.array([0.1, 0.3, 3.7, 3.9])
    ap = fa.fastap(dk.tensor(z), [True, True, False, False], grid).item()
    assert ap == pytest.approx(1.0, abs=1e-12)
    # a negative sharing the positives' bin drags AP below 1
    z = np.array([0.1, 0.3, 0.2, 3.9])
    ap = fa.fastap(dk.tensor(z), [True, True, False, False], grid).item()
    assert ap < 1.0 - 1e-6


def test_fastap_gradient_away_from_kinks():
    from featboost.verify import FASTAP_TOL, generic_grad_check, make_fastap_case
    worst = max(generic_grad_check(make_fastap_case, s) for s in range(20))
    assert worst <= FASTAP_TOL, worst


def test_fastap_batch_matches_single_rows(rng):
    grid = fa.real_grid(10)
    z = rng.uniform(0.0, 4.0, (5, 12))
    pos = rng.random((5, 12)) < 0.3
    lab = pos | (rng.random((5, 12)) < 0.5)
    pos[2, :] = False  # one anchor with no positive
    ap, valid = fa.fastap_batch(dk.tensor(z), pos, lab, grid)
    assert not valid[2] and ap.data[2, 0] == 0.0
    for i in range(5):
        if not valid[i]:
            continue
        zi = z[i][lab[i]]
        ap_i = fa.fastap(dk.tensor(zi), pos[i][lab[i]], grid).item()
        assert ap.data[i, 0] == pytest.approx(ap_i, abs=1e-12)


# ---------------------------------------------------------------------------
# exact binary AP


def test_exact_ap_strictly_closer_positives():
    assert fa.exact_ap_binary([1, 2, 9, 11], [True, True, False, False]) == 1.0


def test_exact_ap_single_tie_group():
    assert fa.exact_ap_binary([5] * 6, [True, True, False, False, False, False]) \
        == pytest.approx(2 / 6)


def test_exact_ap_matches_rank_walk_and_classic(rng):
    for _ in range(120):
        m = int(rng.integers(2, 25))
        z = rng.integers(0, 17, m).astype(float)
        pos = rng.random(m) < 0.4
        if not pos.any():
            pos[int(rng.integers(m))] = True
        got = fa.exact_ap_binary(z, pos)
        assert got == pytest.approx(oracles.exact_ap_rank_walk(z, pos), abs=1e-12)
    # tie-free instances agree with the textbook ranking AP
    for _ in range(40):
        z = rng.permutation(20)[:12].astype(float)
        pos = rng.random(12) < 0.4
        if not pos.any():
            pos[0] = True
        assert fa.exact_ap_binary(z, pos) == pytest.approx(
            oracles.classic_ap_no_ties(z, pos), abs=1e-12)


def test_exact_ap_requires_positive():
    with pytest.raises(UndefinedAPError):
        fa.exact_ap_binary([1, 2], [False, False])


def test_fastap_with_dim_bins_equals_exact(rng):
    # the acceptance suite runs the full 500-seed sweep
    for s in range(60):
        r = np.random.default_rng(s)
        d = int(r.integers(2, 17))
        m = int(r.integers(2, 31))
        bits_a = r.integers(0, 2, d)
        bits_b = r.integers(0, 2, (m, d))
        z = ((bits_a ^ bits_b).sum(axis=1)).astype(float)
        pos = r.random(m) < 0.3
        if not pos.any():
            pos[int(r.integers(m))] = True
        got = fa.fastap(dk.tensor(z), pos, fa.binary_grid(d, bins=d)).item()
        assert got == pytest.approx(fa.exact_ap_binary(z, pos), abs=1e-9)


# ---------------------------------------------------------------------------
# pair loss


def _tiny_pair(rng, n=4, d=8):
    params = BoosterParams.init_random(d, 1, "real", seed=3, identity_residuals=False)
    da, db = unit_rows(rng, n, d), unit_rows(rng, n, d)
    ga, gb = geometry_rows(rng, n), geometry_rows(rng, n)
    lab = labels_from(np.where(np.eye(n), 1, -1))
    xa = boost_matrix(dk.tensor(da), dk.tensor(ga), params)
    xb = boost_matrix(dk.tensor(db), dk.tensor(gb), params)
    return xa, xb, da, db, lab


def test_pair_loss_zero_when_boosted_perfect(rng):
    n, d = 3, 4
    # boosted copies of one orthonormal basis rank perfectly
    basis = np.eye(d)[:n]
    lab = labels_from(np.where(np.eye(n), 1, -1))
    loss = fa.pair_loss(dk.tensor(basis), dk.tensor(basis),
                        dk.tensor(unit_rows(rng, n, d)), dk.tensor(unit_rows(rng, n, d)),
                        lab, lam=123.0, boosted_kind="real", raw_kind="real")
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_pair_loss_hinge_vanishes_when_boosted_equals_raw(rng):
    n, d = 4, 8
    da, db = unit_rows(rng, n, d), unit_rows(rng, n, d)
    lab = labels_from(np.where(np.eye(n), 1, -1))
    loss0 = fa.pair_loss(dk.tensor(da), dk.tensor(db), dk.tensor(da), dk.tensor(db),
                         lab, lam=0.0, boosted_kind="real")
    loss10 = fa.pair_loss(dk.tensor(da), dk.tensor(db), dk.tensor(da), dk.tensor(db),
                          lab, lam=10.0, boosted_kind="real")
    assert loss0.item() == pytest.approx(loss10.item(), abs=1e-12)
    ap, valid = fa.fastap_batch(fa.distances_real(dk.tensor(da), dk.tensor(db)),
                                lab.matrix == 1, lab.matrix != 0, fa.real_grid(10))
    ap_t, valid_t = fa.fastap_batch(fa.distances_real(dk.tensor(db), dk.tensor(da)),
                                    lab.matrix.T == 1, lab.matrix.T != 0, fa.real_grid(10))
    mean_ap = (ap.data[valid].sum() + ap_t.data[valid_t].sum()) / (valid.sum() + valid_t.sum())
    assert loss0.item() == pytest.approx(1.0 - mean_ap, abs=1e-12)


def test_pair_loss_matches_independent_recomputation(rng):
    xa, xb, da, db, lab = _tiny_pair(rng)
    got = fa.pair_loss(xa, xb, dk.tensor(da), dk.tensor(db), lab, lam=7.0,
                       boosted_kind="real", raw_kind="real").item()

    def side_aps(anchor, target, matrix):
        grid = fa.real_grid(10)
        out = []
        for i in range(matrix.shape[0]):
            pos = matrix[i] == 1
            labeled = matrix[i] != 0
            if not pos.any():
                out.append(None)
                continue
            z = fa.distances_real(dk.tensor(anchor[i:i + 1]), dk.tensor(target)).data[0]
            out.append(oracles.fastap_histogram_direct(
                z[labeled], pos[labeled], grid.centers, grid.delta))
        return out

    boosted = side_aps(xa.data, xb.data, lab.matrix) + side_aps(xb.data, xa.data, lab.matrix.T)
    raw = side_aps(da, db, lab.matrix) + side_aps(db, da, lab.matrix.T)
    pairs = [(b, r) for b, r in zip(boosted, raw) if b is not None]
    l_ap = 1.0 - sum(b for b, _ in pairs) / len(pairs)
    l_boost = sum(max(0.0, r / max(b, 1e-6) - 1.0) for b, r in pairs) / len(pairs)
    assert got == pytest.approx(l_ap + 7.0 * l_boost, abs=1e-9)


def test_pair_loss_nonnegative_property(rng):
    for s in range(10):
        r = np.random.default_rng(s)
        xa, xb, da, db, lab = _tiny_pair(r)
        val = fa.pair_loss(xa, xb, dk.tensor(da), dk.tensor(db), lab, lam=10.0,
                           boosted_kind="real", raw_kind="real").item()
        assert val >= -1e-12


def test_pair_loss_empty_batch(rng):
    n, d = 3, 4
    lab = labels_from(-np.ones((n, n)))
    with pytest.raises(EmptyBatchError):
        fa.pair_loss(dk.tensor(np.eye(d)[:n]), dk.tensor(np.eye(d)[:n]),
                     dk.tensor(np.eye(d)[:n]), dk.tensor(np.eye(d)[:n]),
                     lab, lam=1.0, boosted_kind="real")
