"""Synthetic homography scenes with ground-truth match labels.

Keypoints are sampled in one image and warped into the other by a random
homography (plus up to a pixel of detector jitter). Every keypoint owns an
ideal descriptor that gets corrupted independently per image, so the
corruption level alone controls matching difficulty while keypoint
positions stay warp-consistent. Pair labels follow the reprojection
distance: below 3 px is a match, above 15 px a non-match, in between
ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .booster import DescriptorVector, FeatureSet, KeypointGeometry, normalize_coord
from .errors import ConfigError, DataGenError, LabelMismatchError
from .fastap import MatchLabels
from .kvconfig import parse_kv_file, reject_unknown, take
from .matcher import PlanarWarp

POSITIVE_PX = 3.0   # reprojection distance below this is a match
NEGATIVE_PX = 15.0  # above this is a confirmed non-match
DETECTOR_JITTER_PX = 1.0
MAX_RESAMPLE_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene family.

    Warp ranges are symmetric around identity: rotation in radians, scale
    as a multiplicative range, translation in pixels, perspective as the
    magnitude of the two projective entries. `sigma` is the additive
    Gaussian level for real descriptors, `rho` the per-bit flip
    probability for binary ones. `dropout` is the probability that a
    keypoint is omitted from the second image (visible in only one image).
    """

    width: int = 640
    height: int = 480
    num_keypoints: int = 64
    kind: str = "real"
    dim: int = 32
    rot_max: float = 0.05
    scale_min: float = 0.95
    scale_max: float = 1.05
    trans_max: float = 8.0
    persp_max: float = 2e-6
    sigma: float = 0.3
    rho: float = 0.1
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("real", "binary"):
            raise ConfigError(f"unknown descriptor kind: {self.kind!r}")
        if self.num_keypoints < 8:
            raise ConfigError("need at least 8 keypoints")
        if self.sigma < 0.0:
            raise ConfigError("sigma must be nonnegative")
        if not (0.0 <= self.rho < 0.5):
            raise ConfigError("rho must be in [0, 0.5)")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.width < 2 or self.height < 2 or self.dim < 1:
            raise ConfigError("degenerate image or descriptor size")
        if not (0.0 < self.scale_min <= self.scale_max):
            raise ConfigError("bad scale range")

    @classmethod
    def from_file(cls, path):
        fields = parse_kv_file(path)
        kwargs = {}
        for name, conv in (("width", int), ("height", int), ("num_keypoints", int),
                           ("kind", str), ("dim", int), ("rot_max", float),
                           ("scale_min", float), ("scale_max", float),
                           ("trans_max", float), ("persp_max", float),
                           ("sigma", float), ("rho", float), ("dropout", float),
                           ("seed", int)):
            value = take(fields, name, conv)
            if value is not None:
                kwargs[name] = value
        reject_unknown(fields, "scene")
        return cls(**kwargs)


@dataclass
class LabeledPair:
    """Two feature sets related by a planar warp, with pair match labels."""

    a: FeatureSet
    b: FeatureSet
    warp: PlanarWarp
    labels: MatchLabels


def _sample_warp(spec, rng):
    """Random homography plus the (angle, scale) the detector model reuses."""
    angle = rng.uniform(-spec.rot_max, spec.rot_max)
    s = rng.uniform(spec.scale_min, spec.scale_max)
    tx, ty = rng.uniform(-spec.trans_max, spec.trans_max, size=2)
    p1, p2 = rng.uniform(-spec.persp_max, spec.persp_max, size=2)
    cx, cy = spec.width / 2.0, spec.height / 2.0
    ca, sa = math.cos(angle), math.sin(angle)
    # rotate+scale about the image center, then translate, then perspective
    sim = np.array([
        [s * ca, -s * sa, cx + tx - s * (ca * cx - sa * cy)],
        [s * sa, s * ca, cy + ty - s * (sa * cx + ca * cy)],
        [0.0, 0.0, 1.0],
    ])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [p1, p2, 1.0]])
    return sim @ persp, angle, s


def _jitter_disc(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


SCORE_NOISE = 0.05
ORIENT_NOISE = 0.05
SCALE_LOG_NOISE = 0.05


def _base_attributes(rng, n):
    return (rng.uniform(0.0, 1.0, size=n),          # detector score
            rng.uniform(-math.pi, math.pi, size=n),  # orientation
            rng.uniform(1.0, 4.0, size=n))           # extractor scale


def _warped_attributes(rng, attrs, angle, warp_scale):
    """Detector attributes as re-observed in the second image.

    Orientation follows the warp rotation and scale follows the warp
    scale (what a covariant detector reports), each with small noise;
    scores are re-measured with noise. Everything is clipped back to its
    valid range.
    """
    scores, orients, scales = attrs
    n = len(scores)
    new_scores = np.clip(scores + SCORE_NOISE * rng.normal(size=n), 0.0, 1.0)
    new_orients = orients + angle + ORIENT_NOISE * rng.normal(size=n)
    new_orients = (new_orients + math.pi) % (2.0 * math.pi) - math.pi
    new_scales = np.clip(scales * warp_scale
                         * np.exp(SCALE_LOG_NOISE * rng.normal(size=n)), 1.0, 4.0)
    return new_scores, new_orients, new_scales


def _geometry_list(xy_px, attrs, spec):
    scores, orients, scales = attrs
    norm = normalize_coord(xy_px, spec.width, spec.height)
    return [KeypointGeometry(norm[i, 0], norm[i, 1], scores[i], orients[i], scales[i])
            for i in range(len(scores))]


def _ideal_descriptors(rng, n, spec):
    if spec.kind == "real":
        d = rng.normal(size=(n, spec.dim))
        return d / np.linalg.norm(d, axis=1, keepdims=True)
    return rng.integers(0, 2, size=(n, spec.dim)).astype(np.uint8)


def _corrupt(rng, ideal, spec):
    if spec.kind == "real":
        noisy = ideal + spec.sigma * rng.normal(size=ideal.shape)
        return noisy / np.linalg.norm(noisy, axis=1, keepdims=True)
    flips = rng.random(size=ideal.shape) < spec.rho
    return np.bitwise_xor(ideal, flips.astype(np.uint8))


def _descriptor_list(mat, kind):
    return [DescriptorVector(kind, row) for row in mat]


def compute_labels(a, b, warp):
    """Pair labels from reprojection distances in image-B pixels."""
    warped = warp.apply(a.pixel_coords())
    pb = b.pixel_coords()
    diff = warped[:, None, :] - pb[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    m = np.zeros(dist.shape, dtype=np.int8)
    m[dist < POSITIVE_PX] = 1
    m[dist > NEGATIVE_PX] = -1
    return MatchLabels(m)


def generate_pair(spec):
    """Deterministically generate one labeled pair from the scene spec.

    Degenerate draws (warp not invertible, or one image left without
    keypoints) are resampled internally, up to 100 attempts.
    """
    rng = np.random.default_rng(spec.seed)
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        pair = _try_generate(spec, rng)
        if pair is not None:
            return pair
    raise DataGenError(f"no valid pair after {MAX_RESAMPLE_ATTEMPTS} attempts (seed {spec.seed})")


def _try_generate(spec, rng):
    n = spec.num_keypoints
    matrix, angle, warp_scale = _sample_warp(spec, rng)
    try:
        warp = PlanarWarp(matrix)
    except (np.linalg.LinAlgError, ValueError):
        return None

    base = np.column_stack([rng.uniform(0.0, spec.width, size=n),
                            rng.uniform(0.0, spec.height, size=n)])
    warped = warp.apply(base) + _jitter_disc(rng, n, DETECTOR_JITTER_PX)

    dropped = rng.random(size=n) < spec.dropout
    in_frame = ((warped[:, 0] >= 0.0) & (warped[:, 0] <= spec.width)
                & (warped[:, 1] >= 0.0) & (warped[:, 1] <= spec.height))
    keep_b = ~dropped & in_frame
    if not keep_b.any():
        return None

    ideal = _ideal_descriptors(rng, n, spec)
    desc_a = _corrupt(rng, ideal, spec)
    desc_b_full = _corrupt(rng, ideal, spec)

    attrs_a = _base_attributes(rng, n)
    attrs_b_full = _warped_attributes(rng, attrs_a, angle, warp_scale)
    kp_a = _geometry_list(base, attrs_a, spec)
    kp_b = _geometry_list(warped[keep_b], tuple(a[keep_b] for a in attrs_b_full), spec)

    a = FeatureSet("synthetic/a", spec.width, spec.height, kp_a,
                   _descriptor_list(desc_a, spec.kind))
    b = FeatureSet("synthetic/b", spec.width, spec.height, kp_b,
                   _descriptor_list(desc_b_full[keep_b], spec.kind))
    return LabeledPair(a, b, warp, compute_labels(a, b, warp))


def find_label_mismatches(pair):
    """(i, j, stored, recomputed) tuples where labels disagree with the warp."""
    fresh = compute_labels(pair.a, pair.b, pair.warp)
    diff = np.argwhere(fresh.matrix != pair.labels.matrix)
    return [(int(i), int(j), int(pair.labels.matrix[i, j]), int(fresh.matrix[i, j]))
            for i, j in diff]


def verify_labels(pair, raise_on_mismatch=False):
    """Recompute labels from the warp and check exact agreement."""
    mismatches = find_label_mismatches(pair)
    if mismatches and raise_on_mismatch:
        raise LabelMismatchError(mismatches)
    return not mismatches


def pair_stream(spec, base_seed, start_index=0):
    """Infinite deterministic stream of pairs: index k uses a seed derived
    from (base_seed, start_index + k)."""
    k = start_index
    while True:
        yield generate_pair(replace(spec, seed=derive_seed(base_seed, k)))
        k += 1


def training_pool(spec, base_seed, count):
    """A fixed pool of training pairs, revisited across epochs.

    Keypoint layouts repeat while every held-out pair stays unseen; the
    repeated exposure is what lets the cross-image geometry alignment
    bootstrap from randomly initialized embeddings.
    """
    return [generate_pair(replace(spec, seed=derive_seed(base_seed, k)))
            for k in range(count)]


def heldout_pairs(spec, base_seed, count):
    """A fixed evaluation set drawn from a seed range the stream never uses."""
    return [generate_pair(replace(spec, seed=derive_seed(base_seed, 10 ** 9 + k)))
            for k in range(count)]


def derive_seed(base, index):
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])
