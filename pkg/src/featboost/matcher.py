"""Descriptor matching and evaluation.

Nearest-neighbor search under Euclidean or Hamming metrics, mutual check,
ratio/distance filtering, matching-accuracy curves against a known planar
warp, and threshold calibration from the distance statistics of correct
and incorrect matches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ConfigError, ContractError, ShapeError

MMA_THRESHOLDS = tuple(range(1, 11))
CALIBRATION_BINS = 64
CALIBRATION_MIN_SAMPLES = 100
DEFAULT_REJECT_TARGET = 0.9


@dataclass
class MatchSet:
    """Keypoint index pairs across two feature sets with match statistics.

    `ratio` (first-NN over second-NN distance) is None when the target set
    had fewer than two descriptors.
    """

    idx_a: np.ndarray
    idx_b: np.ndarray
    distance: np.ndarray
    ratio: np.ndarray | None = None

    def __post_init__(self):
        self.idx_a = np.asarray(self.idx_a, dtype=np.int64)
        self.idx_b = np.asarray(self.idx_b, dtype=np.int64)
        self.distance = np.asarray(self.distance, dtype=np.float64)
        if self.ratio is not None:
            self.ratio = np.asarray(self.ratio, dtype=np.float64)
        if len({self.idx_a.shape, self.idx_b.shape, self.distance.shape}) != 1:
            raise ShapeError("match arrays must have equal length")

    def __len__(self):
        return len(self.idx_a)

    def take(self, keep):
        return MatchSet(self.idx_a[keep], self.idx_b[keep], self.distance[keep],
                        None if self.ratio is None else self.ratio[keep])


@dataclass
class PlanarWarp:
    """3x3 homography mapping image-A pixel coordinates into image B."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ShapeError("homography must be 3x3")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ContractError("homography is not invertible")
        if m[2, 2] == 0.0:
            raise ContractError("homography has zero scale entry")
        self.matrix = m / m[2, 2]

    def apply(self, points):
        """Map (N, 2) pixel points through the homography."""
        pts = np.asarray(points, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        h = np.hstack([pts, ones]) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self):
        return PlanarWarp(np.linalg.inv(self.matrix))


def _popcount_rows(packed):
    return np.bitwise_count(packed).sum(axis=1)


def pack_bits(bits):
    """Pack (N, D) 0/1 bit rows little-endian: bit j goes to byte j//8, position j%8."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=1, bitorder="little")


def hamming_matrix(bits_a, bits_b):
    """Pairwise Hamming distances between two 0/1 bit matrices via popcount."""
    pa = pack_bits(bits_a)
    pb = pack_bits(bits_b)
    out = np.empty((pa.shape[0], pb.shape[0]), dtype=np.float64)
    for i in range(pa.shape[0]):
        out[i] = _popcount_rows(np.bitwise_xor(pa[i], pb))
    return out


def euclidean_matrix(xa, xb):
    """Pairwise Euclidean distances between real descriptor matrices."""
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    sq = (xa * xa).sum(axis=1)[:, None] + (xb * xb).sum(axis=1)[None, :] - 2.0 * (xa @ xb.T)
    return np.sqrt(np.maximum(sq, 0.0))


def distance_matrix(a, b, metric):
    if metric == "euclidean":
        if a.kind != "real" or b.kind != "real":
            raise ConfigError("euclidean metric requires real descriptors")
        return euclidean_matrix(a.descriptor_matrix(), b.descriptor_matrix())
    if metric == "hamming":
        if a.kind != "binary" or b.kind != "binary":
            raise ConfigError("hamming metric requires binary descriptors")
        bits_a = np.stack([d.values for d in a.descriptors])
        bits_b = np.stack([d.values for d in b.descriptors])
        return hamming_matrix(bits_a, bits_b)
    raise ConfigError(f"unknown metric: {metric!r}")


def nn_match(a, b, metric):
    """Nearest neighbor in `b` for every descriptor of `a`.

    Ties break toward the smallest index. The ratio field uses the
    second-nearest distance and is present only when |b| >= 2; a zero
    second-nearest distance (exact duplicates) yields ratio 1.
    """
    if len(b) == 0 or len(a) == 0:
        return MatchSet(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))
    dists = distance_matrix(a, b, metric)
    order = np.argsort(dists, axis=1, kind="stable")
    best = order[:, 0]
    rows = np.arange(len(a))
    d1 = dists[rows, best]
    if len(b) >= 2:
        d2 = dists[rows, order[:, 1]]
        ratio = np.where(d2 > 0.0, d1 / np.where(d2 > 0.0, d2, 1.0), 1.0)
    else:
        ratio = None
    return MatchSet(rows, best, d1, ratio)


def mutual_check(fwd, bwd):
    """Keep (i, j) from the forward pass iff the backward pass maps j to i."""
    back = {int(i): int(j) for i, j in zip(bwd.idx_a, bwd.idx_b)}
    keep = np.array([back.get(int(j), -1) == int(i)
                     for i, j in zip(fwd.idx_a, fwd.idx_b)], dtype=bool)
    return fwd.take(keep)


def filter_matches(ms, mode, tau):
    """Keep pairs whose match statistic is at most tau.

    `mode` is "ratio" (requires the ratio field) or "distance".
    """
    if mode == "ratio":
        if ms.ratio is None:
            raise ContractError("ratio filtering needs a MatchSet with ratios")
        return ms.take(ms.ratio <= tau)
    if mode == "distance":
        return ms.take(ms.distance <= tau)
    raise ConfigError(f"unknown filter mode: {mode!r}")


def reprojection_errors(ms, warp, a, b):
    """Pixel distance between warped A keypoints and their matched B keypoints."""
    if len(ms) == 0:
        return np.empty(0)
    pa = a.pixel_coords()[ms.idx_a]
    pb = b.pixel_coords()[ms.idx_b]
    return np.linalg.norm(warp.apply(pa) - pb, axis=1)


def mma(ms, warp, a, b, thresholds=MMA_THRESHOLDS):
    """Fraction of matches within each pixel threshold (zeros when empty)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(ms) == 0:
        return np.zeros(len(thresholds))
    err = reprojection_errors(ms, warp, a, b)
    return np.array([(err <= t).mean() for t in thresholds])


@dataclass
class CalibrationResult:
    """Recommended filter threshold plus the PDF tables behind it."""

    statistic: str
    tau: float
    retained_correct: float
    rejected_incorrect: float
    separable: bool
    bin_edges: np.ndarray
    pdf_correct: np.ndarray
    pdf_incorrect: np.ndarray


def calibrate_threshold(correct, incorrect, statistic="ratio",
                        reject_target=DEFAULT_REJECT_TARGET):
    """Pick a filter threshold from correct/incorrect match statistics.

    Estimates both PDFs on 64 uniform bins over the observed range, then
    sweeps the bin edges for the tau that keeps the most correct samples
    while rejecting at least `reject_target` of the incorrect ones. The
    result is flagged non-separable when the best feasible tau retains no
    more correct mass than random thinning would (within 5 points).
    """
    correct = np.asarray(correct, dtype=np.float64)
    incorrect = np.asarray(incorrect, dtype=np.float64)
    if len(correct) < CALIBRATION_MIN_SAMPLES or len(incorrect) < CALIBRATION_MIN_SAMPLES:
        raise CalibrationError(
            f"need at least {CALIBRATION_MIN_SAMPLES} samples per class, got "
            f"{len(correct)} correct / {len(incorrect)} incorrect")
    lo = min(correct.min(), incorrect.min())
    hi = max(correct.max(), incorrect.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, CALIBRATION_BINS + 1)
    pdf_correct, _ = np.histogram(correct, bins=edges, density=True)
    pdf_incorrect, _ = np.histogram(incorrect, bins=edges, density=True)

    best_tau, best_ret, best_rej = None, -1.0, 0.0
    for tau in edges:
        rejected = float((incorrect > tau).mean())
        if rejected < reject_target:
            continue
        retained = float((correct <= tau).mean())
        if retained > best_ret:
            best_tau, best_ret, best_rej = float(tau), retained, rejected
    if best_tau is None:
        # every edge fails the target; fall back to the strictest edge
        best_tau, best_ret = float(edges[0]), float((correct <= edges[0]).mean())
        best_rej = float((incorrect > edges[0]).mean())
    separable = best_rej >= reject_target and best_ret > (1.0 - reject_target) + 0.05
    return CalibrationResult(statistic, best_tau, best_ret, best_rej, separable,
                             edges, pdf_correct, pdf_incorrect)
