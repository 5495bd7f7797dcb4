"""Differentiable average-precision objective.

Pairwise descriptor distances are soft-binned into a histogram with a
triangular kernel; precision/recall then become cumulative-histogram
ratios and AP is their inner product. The final training loss combines
the AP term with a hinge on the raw-vs-boosted AP ratio so the model is
pushed to beat the descriptors it started from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor2
from .errors import (ConfigError, ContractError, EmptyBatchError, ShapeError,
                     UndefinedAPError)

HIST_EPS = 1e-12   # guard on the total-mass denominator
RATIO_EPS = 1e-6   # guard on the boosted AP in the hinge ratio
UNIT_NORM_TOL = 1e-6


@dataclass
class MatchLabels:
    """Ground-truth pair labels between two feature sets.

    `matrix[i, j]` is +1 when (i, j) is a matched pair, -1 when it is a
    confirmed non-match, and 0 when the pair is ignored.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int8)
        if m.ndim != 2:
            raise ShapeError("label matrix must be 2-D")
        if not np.isin(m, (-1, 0, 1)).all():
            raise ContractError("labels must be -1, 0, or +1")
        self.matrix = m

    @property
    def shape(self):
        return self.matrix.shape

    def positives(self, i):
        return np.flatnonzero(self.matrix[i] == 1)

    def negatives(self, i):
        return np.flatnonzero(self.matrix[i] == -1)

    def transposed(self):
        """The same pair labels anchored from the other image."""
        return MatchLabels(self.matrix.T.copy())

    @classmethod
    def from_index_sets(cls, shape, positives, negatives):
        m = np.zeros(shape, dtype=np.int8)
        for i, idxs in enumerate(positives):
            m[i, idxs] = 1
        for i, idxs in enumerate(negatives):
            if np.intersect1d(m[i].nonzero()[0], idxs).size:
                raise ContractError(f"anchor {i}: positive and negative sets overlap")
            m[i, idxs] = -1
        return cls(m)


@dataclass(frozen=True)
class QuantizationGrid:
    """Uniform distance quantization over [lo, hi] with `bins` intervals.

    The triangular kernel sits on the bins+1 fencepost centers
    linspace(lo, hi, bins+1); with bins = D over [0, D] the centers are
    exactly the integers a Hamming distance can take, which is what makes
    the quantized AP exact there.
    """

    bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("need at least two bins")
        if not self.hi > self.lo:
            raise ConfigError("empty quantization range")

    @property
    def delta(self):
        return (self.hi - self.lo) / self.bins

    @property
    def centers(self):
        return np.linspace(self.lo, self.hi, self.bins + 1)


def real_grid(bins=10):
    """Grid over the [0, 4] squared-distance range of unit vectors."""
    return QuantizationGrid(bins, 0.0, 4.0)


def binary_grid(dim, bins=10):
    """Grid over the [0, D] Hamming range."""
    return QuantizationGrid(bins, 0.0, float(dim))


def grid_for(kind, dim, bins=10):
    return real_grid(bins) if kind == "real" else binary_grid(dim, bins)


# ---------------------------------------------------------------------------
# distances


def distances_real(d, dprime):
    """Squared Euclidean distances between unit rows: 2 - 2 <d, d'>.

    Both operands must have unit-norm rows; results are clipped to the
    analytic [0, 4] range to absorb rounding.
    """
    d = d if isinstance(d, Tensor2) else dk.tensor(d)
    dprime = dprime if isinstance(dprime, Tensor2) else dk.tensor(dprime)
    for side, t in (("left", d), ("right", dprime)):
        norms = np.sqrt((t.data * t.data).sum(axis=1))
        if t.data.size and np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
            raise ContractError(f"{side} operand rows are not unit-norm")
    dots = dk.matmul(d, dk.transpose(dprime))
    return dk.clamp(dk.add_const(dk.scale(dots, -2.0), 2.0), 0.0, 4.0)


def distances_binary(d, dprime, strict=True):
    """Hamming distances of +/-1 rows via the inner product: (D - <d, d'>)/2.

    `strict=False` skips the +/-1 contract check so the same formula can
    score relaxed (tanh-valued) rows during finite-difference checks.
    """
    d = d if isinstance(d, Tensor2) else dk.tensor(d)
    dprime = dprime if isinstance(dprime, Tensor2) else dk.tensor(dprime)
    if strict:
        for t in (d, dprime):
            if t.data.size and not np.isin(t.data, (-1.0, 1.0)).all():
                raise ContractError("binary distance operands must be +/-1 valued")
    dim = d.cols
    dots = dk.matmul(d, dk.transpose(dprime))
    return dk.add_const(dk.scale(dots, -0.5), dim / 2.0)


def distances_for(kind, d, dprime, strict=True):
    if kind == "real":
        return distances_real(d, dprime)
    return distances_binary(d, dprime, strict=strict)


# ---------------------------------------------------------------------------
# soft histograms


def soft_bin_counts(z, pos_mask, lab_mask, grid):
    """Triangular-kernel histograms of a distance matrix, per anchor row.

    Returns (h_pos, h_lab), each (N, bins+1): per-center mass of the
    positive entries and of all labeled entries. Ignored entries carry
    zero mask weight and contribute nothing, in value or gradient.
    """
    centers = grid.centers
    delta = grid.delta
    zd = z.data
    pos = np.asarray(pos_mask, dtype=np.float64)
    lab = np.asarray(lab_mask, dtype=np.float64)
    if pos.shape != zd.shape or lab.shape != zd.shape:
        raise ShapeError("mask shapes must match the distance matrix")
    # pulse[k, n, m] = max(0, 1 - |z[n, m] - centers[k]| / delta)
    diff = zd[None, :, :] - centers[:, None, None]
    if dk.kink_probe_active():
        labeled = lab > 0.0
        if labeled.any():
            dk.report_kink_margin(np.abs(diff).min(axis=0)[labeled].min())
    pulse = 1.0 - np.abs(diff) / delta
    np.maximum(pulse, 0.0, out=pulse)
    h_pos = Tensor2(np.einsum("knm,nm->nk", pulse, pos))
    h_lab = Tensor2(np.einsum("knm,nm->nk", pulse, lab))
    t = dk.current_tape()
    if t is not None:
        slope = np.where(pulse > 0.0, -np.sign(diff) / delta, 0.0)
        def bwd():
            g_pos = h_pos.grad
            g_lab = h_lab.grad
            if g_pos is None and g_lab is None:
                return
            gz = np.zeros_like(zd)
            if g_pos is not None:
                gz += np.einsum("nk,knm->nm", g_pos, slope) * pos
            if g_lab is not None:
                gz += np.einsum("nk,knm->nm", g_lab, slope) * lab
            dk.accumulate_grad(z, gz)
        t.record(bwd)
    return h_pos, h_lab


def fastap_batch(z, pos_mask, lab_mask, grid):
    """Quantized AP for every anchor row of a distance matrix.

    Returns (ap, valid): `ap` is a (N, 1) tensor of AP values and `valid`
    a boolean (N,) array marking anchors that have at least one positive.
    Invalid rows have AP fixed at 0 with no gradient. Differentiable in z
    wherever the triangular kernel is.
    """
    pos = np.asarray(pos_mask, dtype=bool)
    lab = np.asarray(lab_mask, dtype=bool)
    if (pos & ~lab).any():
        raise ContractError("positive entries must be labeled")
    npos = pos.sum(axis=1).astype(np.float64)
    valid = npos > 0
    h_pos, h_lab = soft_bin_counts(z, pos, lab, grid)
    cum_pos = dk.cumsum_cols(h_pos)
    cum_all = dk.cumsum_cols(h_lab)
    terms = dk.div(dk.mul(h_pos, cum_pos), dk.maximum_const(cum_all, HIST_EPS))
    inv_npos = np.zeros((len(npos), 1))
    inv_npos[valid, 0] = 1.0 / npos[valid]
    ap = dk.mul(dk.sum_over_cols(terms), dk.tensor(inv_npos))
    return ap, valid


def fastap(z, is_positive, grid):
    """Quantized AP of one anchor; entries of z are the labeled distances.

    `is_positive` marks the positive entries; the rest are negatives
    (ignored entries must be excluded before the call). Raises
    UndefinedAPError when there is no positive.
    """
    z = z if isinstance(z, Tensor2) else dk.tensor(z)
    if z.rows != 1:
        raise ShapeError("fastap expects a single-row distance vector")
    pos = np.asarray(is_positive, dtype=bool).reshape(1, -1)
    if pos.shape[1] != z.cols:
        raise ShapeError("label vector length must match the distance vector")
    if not pos.any():
        raise UndefinedAPError("anchor has no positive match")
    ap, _ = fastap_batch(z, pos, np.ones_like(pos, dtype=bool), grid)
    return dk.sum_all(ap)


def ranking_ap(z, is_positive):
    """Exact AP of a distance ranking, ties interpolated.

    Within a tie group the positives are treated as uniformly interleaved,
    so every positive in the group scores the group-end precision
    (cumulative positives over cumulative total).
    """
    z = np.asarray(z, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    total_pos = int(pos.sum())
    if total_pos == 0:
        raise UndefinedAPError("anchor has no positive match")
    order = np.argsort(z, kind="stable")
    zs = z[order]
    ps = pos[order]
    ap = 0.0
    seen = 0.0
    seen_pos = 0.0
    start = 0
    n = len(zs)
    while start < n:
        end = start
        while end < n and zs[end] == zs[start]:
            end += 1
        group_pos = float(ps[start:end].sum())
        seen += end - start
        seen_pos += group_pos
        if group_pos:
            ap += group_pos * (seen_pos / seen)
        start = end
    return ap / total_pos


def exact_ap_binary(z, is_positive):
    """Exact AP of an integer Hamming-distance ranking (tie-interpolated).

    The closed form the quantized AP reproduces when the grid has one
    center per integer distance.
    """
    z = np.asarray(z)
    if z.size and not np.array_equal(z, np.round(z)):
        raise ContractError("exact binary AP is defined for integer distances")
    return ranking_ap(z, is_positive)


# ---------------------------------------------------------------------------
# pair loss


def _matrix_view(obj):
    """Accept a FeatureSet or an (N, D) array/Tensor2 and return a Tensor2."""
    if isinstance(obj, Tensor2):
        return obj
    if hasattr(obj, "descriptor_matrix"):
        return dk.tensor(obj.descriptor_matrix())
    return dk.tensor(obj)


def _direction_ap(boosted_anchor, boosted_target, kind, labels, grid, strict=True):
    lab = labels.matrix != 0
    pos = labels.matrix == 1
    z = distances_for(kind, boosted_anchor, boosted_target, strict=strict)
    return fastap_batch(z, pos, lab, grid)


def _raw_ap_column(raw_anchor, raw_target, kind, labels, grid):
    with dk.pause_tape():
        ap, valid = _direction_ap(raw_anchor, raw_target, kind, labels, grid)
    return ap.data.copy(), valid


def pair_loss(a_boosted, b_boosted, a_raw, b_raw, labels, lam,
              boosted_kind=None, raw_kind=None, bins=10, relaxed_binary=False):
    """Training loss for one labeled image pair.

    Anchors are taken from both images (A against B and B against A, the
    pair labels transposed for the reverse direction); anchors without a
    positive are skipped. The AP term is 1 minus the mean boosted AP. The
    hinge term penalizes anchors whose raw descriptors outrank the boosted
    ones: mean of max(0, raw_ap / boosted_ap - 1), with the raw AP held
    constant (the inputs are not trainable) and the denominator floored at
    1e-6. Total: ap_term + lam * hinge_term.

    Boosted inputs may be FeatureSets or (N, D) tensors; for tensors,
    `boosted_kind` (and `raw_kind`, when it differs) names the metric
    ("real" or "binary"). `relaxed_binary` lifts the +/-1 contract on the
    binary metric for finite-difference checking of the relaxed forward.
    """
    if boosted_kind is None:
        if not hasattr(a_boosted, "kind"):
            raise ConfigError("boosted_kind is required for tensor inputs")
        boosted_kind = a_boosted.kind
    if raw_kind is None:
        raw_kind = a_raw.kind if hasattr(a_raw, "kind") else boosted_kind
    ab = _matrix_view(a_boosted)
    bb = _matrix_view(b_boosted)
    araw = _matrix_view(a_raw)
    braw = _matrix_view(b_raw)

    boost_grid = grid_for(boosted_kind, ab.cols, bins)
    raw_grid = grid_for(raw_kind, araw.cols, bins)

    strict = not relaxed_binary
    labels_ba = labels.transposed()
    ap_a, valid_a = _direction_ap(ab, bb, boosted_kind, labels, boost_grid, strict=strict)
    ap_b, valid_b = _direction_ap(bb, ab, boosted_kind, labels_ba, boost_grid, strict=strict)
    raw_a, _ = _raw_ap_column(araw, braw, raw_kind, labels, raw_grid)
    raw_b, _ = _raw_ap_column(braw, araw, raw_kind, labels_ba, raw_grid)

    total_valid = int(valid_a.sum()) + int(valid_b.sum())
    if total_valid == 0:
        raise EmptyBatchError("no anchor in the pair has a positive match")

    def weights(valid):
        w = np.zeros((len(valid), 1))
        w[valid, 0] = 1.0 / total_valid
        return dk.tensor(w)

    w_a, w_b = weights(valid_a), weights(valid_b)
    mean_ap = dk.add(dk.sum_all(dk.mul(ap_a, w_a)), dk.sum_all(dk.mul(ap_b, w_b)))
    ap_term = dk.add_const(dk.scale(mean_ap, -1.0), 1.0)

    def hinge(ap, raw, w):
        ratio = dk.div(dk.tensor(raw), dk.maximum_const(ap, RATIO_EPS))
        return dk.sum_all(dk.mul(dk.relu(dk.add_const(ratio, -1.0)), w))

    hinge_term = dk.add(hinge(ap_a, raw_a, w_a), hinge(ap_b, raw_b, w_b))
    return dk.add(ap_term, dk.scale(hinge_term, lam))


def mean_average_precision(anchor_set, target_set, labels, bins=10,
                           method="ranking"):
    """Mean AP of `anchor_set` descriptors against `target_set` (no tape).

    `method` is "ranking" (the exact AP of each anchor's ranking, the
    reporting metric) or "quantized" (the b-bin training surrogate).
    Returns (mean_ap, anchor_count) over anchors that have a positive;
    (0.0, 0) when none do.
    """
    with dk.pause_tape():
        if method == "quantized":
            grid = grid_for(anchor_set.kind, anchor_set.dim, bins)
            ap, valid = _direction_ap(_matrix_view(anchor_set), _matrix_view(target_set),
                                      anchor_set.kind, labels, grid)
            count = int(valid.sum())
            if count == 0:
                return 0.0, 0
            return float(ap.data[valid].sum() / count), count
        if method != "ranking":
            raise ConfigError(f"unknown AP method: {method!r}")
        z = distances_for(anchor_set.kind, _matrix_view(anchor_set),
                          _matrix_view(target_set)).data
    total = 0.0
    count = 0
    for i in range(z.shape[0]):
        pos = labels.matrix[i] == 1
        labeled = labels.matrix[i] != 0
        if not pos.any():
            continue
        total += ranking_ap(z[i][labeled], pos[labeled])
        count += 1
    if count == 0:
        return 0.0, 0
    return total / count, count
