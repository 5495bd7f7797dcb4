"""Descriptor booster model.

Two stages: per-keypoint self-boosting (a descriptor MLP with identity
shortcut plus an additive geometry embedding) and cross-boosting over all
keypoints of one image (a stack of encoder layers whose attention is the
linear-cost sigmoid-gated global pooling variant). The output head emits
either unit-norm real vectors or sign bits trained straight-through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor2
from .errors import ConfigError, ContractError, ShapeError

GEOMETRY_FIELDS = ("x", "y", "score", "orientation", "scale")

# hidden widths of the geometry encoder; the last two stages are dim-sized
GEO_HIDDEN = (32, 64, 128)

# (dim, layers) presets for common descriptor families
FAMILY_PRESETS = {
    "sift": (128, 4),
    "orb": (256, 4),
    "superpoint": (256, 9),
    "alike": (64, 9),
    "synthetic": (32, 2),
}


@dataclass
class KeypointGeometry:
    """Geometric attributes of one keypoint.

    Coordinates are normalized by the largest image dimension; orientation
    is in radians; scale is 0 when the extractor provides none.
    """

    x: float
    y: float
    score: float
    orientation: float
    scale: float

    def validate(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ContractError(f"normalized position out of range: ({self.x}, {self.y})")
        if not (0.0 <= self.score <= 1.0):
            raise ContractError(f"score out of range: {self.score}")
        if not (-math.pi <= self.orientation <= math.pi):
            raise ContractError(f"orientation out of range: {self.orientation}")
        if self.scale < 0.0:
            raise ContractError(f"negative scale: {self.scale}")

    def as_array(self):
        return np.array([self.x, self.y, self.score, self.orientation, self.scale])


@dataclass
class DescriptorVector:
    """A real D-dim or binary D-bit descriptor.

    Real payloads are float64 values; binary payloads are uint8 bits (0/1)
    whose arithmetic view maps bit 1 to +1.0 and bit 0 to -1.0.
    """

    kind: str  # "real" | "binary"
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("real", "binary"):
            raise ConfigError(f"unknown descriptor kind: {self.kind!r}")
        if self.kind == "real":
            self.values = np.asarray(self.values, dtype=np.float64)
        else:
            bits = np.asarray(self.values)
            if not np.isin(bits, (0, 1)).all():
                raise ContractError("binary payload must contain only 0/1 bits")
            self.values = bits.astype(np.uint8)
        if self.values.ndim != 1:
            raise ShapeError("descriptor payload must be 1-D")

    @property
    def dim(self):
        return self.values.shape[0]

    def as_floats(self):
        """Arithmetic view: real values as-is, binary bits mapped to +/-1."""
        if self.kind == "real":
            return self.values.astype(np.float64)
        return self.values.astype(np.float64) * 2.0 - 1.0


@dataclass
class FeatureSet:
    """All keypoints of one image: geometry, descriptors, image size."""

    image_id: str
    width: int
    height: int
    keypoints: list
    descriptors: list

    def __post_init__(self):
        if len(self.keypoints) != len(self.descriptors):
            raise ShapeError(
                f"{len(self.keypoints)} keypoints vs {len(self.descriptors)} descriptors"
            )
        kinds = {d.kind for d in self.descriptors}
        dims = {d.dim for d in self.descriptors}
        if len(kinds) > 1 or len(dims) > 1:
            raise ContractError("descriptors must share one kind and dimension")

    def __len__(self):
        return len(self.keypoints)

    @property
    def kind(self):
        return self.descriptors[0].kind if self.descriptors else None

    @property
    def dim(self):
        return self.descriptors[0].dim if self.descriptors else None

    def geometry_matrix(self):
        """(N, 5) matrix of (x, y, score, orientation, scale)."""
        if not self.keypoints:
            return np.zeros((0, len(GEOMETRY_FIELDS)))
        return np.stack([k.as_array() for k in self.keypoints])

    def descriptor_matrix(self):
        """(N, D) float matrix; binary descriptors appear as +/-1 rows."""
        if not self.descriptors:
            return np.zeros((0, 0))
        return np.stack([d.as_floats() for d in self.descriptors])

    def pixel_coords(self):
        """(N, 2) keypoint positions in pixels (denormalized)."""
        scale = float(max(self.width, self.height))
        geo = self.geometry_matrix()
        return geo[:, :2] * scale


def normalize_coord(pixels, width, height):
    return np.asarray(pixels, dtype=np.float64) / float(max(width, height))


# ---------------------------------------------------------------------------
# parameters


class BoosterParams:
    """All trainable weights, keyed by name in a fixed canonical order."""

    def __init__(self, dim, layers, head, tensors, norm_placement="post"):
        if layers < 1:
            raise ConfigError("need at least one encoder layer")
        if head not in ("real", "binary"):
            raise ConfigError(f"unknown head kind: {head!r}")
        if norm_placement not in ("post", "pre"):
            raise ConfigError(f"unknown norm placement: {norm_placement!r}")
        self.dim = dim
        self.layers = layers
        self.head = head
        self.norm_placement = norm_placement
        self.tensors = tensors
        expected = dict(parameter_shapes(dim, layers))
        got = {name: t.shape for name, t in tensors.items()}
        if got != expected:
            raise ConfigError("parameter tensors do not match the (dim, layers) layout")

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def parameter_count(self):
        return sum(t.data.size for t in self.tensors.values())

    def copy(self):
        tensors = {name: Tensor2(t.data.copy()) for name, t in self.tensors.items()}
        return BoosterParams(self.dim, self.layers, self.head, tensors, self.norm_placement)

    def allclose(self, other, tol=0.0):
        if self.names() != other.names():
            return False
        return all(
            np.allclose(self.tensors[n].data, other.tensors[n].data, rtol=0.0, atol=tol)
            for n in self.names()
        )

    # output-side weight of every residual branch; zeroing these makes the
    # untrained network an (approximate) identity on descriptors
    RESIDUAL_OUTPUTS = ("desc.w2", "geo.w5", ".wv", "ffn.w2")

    @classmethod
    def init_random(cls, dim, layers, head, seed=0, norm_placement="post",
                    identity_residuals=True):
        """Seeded uniform fan-in (Kaiming-style) weights, zero biases, unit gains.

        With `identity_residuals` (the default) the output-side weight of
        each residual branch starts at zero, so the fresh network neither
        helps nor hurts the input descriptors; training grows the branches
        from there. Disable it to get fully random weights (useful for
        gradient checking at a non-degenerate point).
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(dim, layers):
            if name.endswith((".b", "_bias")):
                data = np.zeros(shape)
            elif name.endswith("_gain"):
                data = np.ones(shape)
            else:
                bound = math.sqrt(6.0 / shape[0])
                data = rng.uniform(-bound, bound, size=shape)
                if identity_residuals and name.endswith(cls.RESIDUAL_OUTPUTS):
                    data[:] = 0.0
            tensors[name] = Tensor2(data)
        return cls(dim, layers, head, tensors, norm_placement)


def parameter_shapes(dim, layers):
    """Canonical (name, shape) list; a pure function of (dim, layers)."""
    d = dim
    shapes = [
        ("desc.w1", (d, 2 * d)), ("desc.w1.b", (1, 2 * d)),
        ("desc.w2", (2 * d, d)), ("desc.w2.b", (1, d)),
    ]
    geo_dims = (len(GEOMETRY_FIELDS),) + GEO_HIDDEN + (d, d)
    for i in range(5):
        shapes.append((f"geo.w{i + 1}", (geo_dims[i], geo_dims[i + 1])))
        shapes.append((f"geo.w{i + 1}.b", (1, geo_dims[i + 1])))
    for l in range(layers):
        shapes += [
            (f"enc{l}.wq", (d, d)),
            (f"enc{l}.wk", (d, d)),
            (f"enc{l}.wv", (d, d)),
            (f"enc{l}.ffn.w1", (d, 2 * d)), (f"enc{l}.ffn.w1.b", (1, 2 * d)),
            (f"enc{l}.ffn.w2", (2 * d, d)), (f"enc{l}.ffn.w2.b", (1, d)),
            (f"enc{l}.ln1_gain", (1, d)), (f"enc{l}.ln1_bias", (1, d)),
            (f"enc{l}.ln2_gain", (1, d)), (f"enc{l}.ln2_bias", (1, d)),
        ]
    return shapes


# ---------------------------------------------------------------------------
# model ops


def _as_tensor_rows(x):
    if isinstance(x, Tensor2):
        return x
    if isinstance(x, DescriptorVector):
        return dk.tensor(x.as_floats())
    return dk.tensor(x)


def project_descriptor(d, params):
    """Non-linear projection of raw descriptors with an identity shortcut.

    Accepts a DescriptorVector, an (N, D) array, or a Tensor2. Binary input
    must already be in its +/-1 arithmetic view (DescriptorVector inputs
    are converted automatically).
    """
    x = _as_tensor_rows(d)
    if x.cols != params.dim:
        raise ConfigError(f"descriptor dim {x.cols} does not match model dim {params.dim}")
    h = dk.relu(dk.affine(x, params["desc.w1"], params["desc.w1.b"]))
    return dk.add(dk.affine(h, params["desc.w2"], params["desc.w2.b"]), x)


def encode_geometry(p, params):
    """Embed (x, y, score, orientation, scale) rows into descriptor space.

    Five affine stages; ReLU between them, none after the last (the
    embedding is added to a signed descriptor space).
    """
    if isinstance(p, KeypointGeometry):
        x = dk.tensor(p.as_array())
    else:
        x = _as_tensor_rows(p)
    if x.cols != len(GEOMETRY_FIELDS):
        raise ShapeError(f"geometry input must have {len(GEOMETRY_FIELDS)} columns")
    for i in range(1, 5):
        x = dk.relu(dk.affine(x, params[f"geo.w{i}"], params[f"geo.w{i}.b"]))
    return dk.affine(x, params["geo.w5"], params["geo.w5.b"])


def aft_simple(x, wq, wk, wv):
    """Attention-free context mixing, linear in the context size.

    Q, K, V are per-row projections of x. Every channel's context weights
    are a softmax over the rows of K; the weighted sum of V collapses to a
    single pooled row, gated per-row by sigmoid(Q). No N x N intermediate
    is ever materialized.
    """
    q = dk.matmul(x, wq)
    k = dk.matmul(x, wk)
    v = dk.matmul(x, wv)
    pooled = dk.sum_over_rows(dk.mul(dk.softmax_over_context(k), v))
    return dk.mul(dk.sigmoid(q), pooled)


def mha_reference(x, heads, wq, wk, wv, scale_mode="dk"):
    """Quadratic-cost multi-head attention baseline (forward only, numpy).

    Kept solely for efficiency comparisons against `aft_simple`; it
    materializes the full N x N score matrix per head by construction.
    `scale_mode` selects the score divisor: "dk" (head width, the default)
    or "sqrt" (square root of the head width).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    if d % heads != 0:
        raise ConfigError(f"dim {d} not divisible by {heads} heads")
    if scale_mode not in ("dk", "sqrt"):
        raise ConfigError(f"unknown scale mode: {scale_mode!r}")
    dk_head = d // heads
    divisor = float(dk_head) if scale_mode == "dk" else math.sqrt(dk_head)
    out = np.empty_like(x)
    for h in range(heads):
        cols = slice(h * dk_head, (h + 1) * dk_head)
        q = x @ wq[:, cols]
        k = x @ wk[:, cols]
        v = x @ wv[:, cols]
        scores = (q @ k.T) / divisor
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=1, keepdims=True)
        out[:, cols] = attn @ v
    return out


def encoder_layer(x, params, layer_index):
    """One encoder layer: attention sublayer then position-wise feed-forward.

    Post-norm by default (add then normalize); the pre-norm variant is an
    ablation switch on the params.
    """
    l = layer_index
    wq, wk, wv = params[f"enc{l}.wq"], params[f"enc{l}.wk"], params[f"enc{l}.wv"]

    def ffn(h):
        hidden = dk.relu(dk.affine(h, params[f"enc{l}.ffn.w1"], params[f"enc{l}.ffn.w1.b"]))
        return dk.affine(hidden, params[f"enc{l}.ffn.w2"], params[f"enc{l}.ffn.w2.b"])

    def ln1(h):
        return dk.layer_norm(h, params[f"enc{l}.ln1_gain"], params[f"enc{l}.ln1_bias"])

    def ln2(h):
        return dk.layer_norm(h, params[f"enc{l}.ln2_gain"], params[f"enc{l}.ln2_bias"])

    if params.norm_placement == "post":
        x1 = ln1(dk.add(x, aft_simple(x, wq, wk, wv)))
        return ln2(dk.add(x1, ffn(x1)))
    x1 = dk.add(x, aft_simple(ln1(x), wq, wk, wv))
    return dk.add(x1, ffn(ln2(x1)))


def binarize_st(v, relaxed=False):
    """Sign quantizer with a straight-through backward (identity VJP).

    sign(0) is +1 so the output is deterministic. With `relaxed=True` the
    forward is the identity as well; finite-difference checks use that
    mode because central differences of a piecewise-constant forward are
    meaningless.
    """
    if relaxed:
        data = v.data.copy()
    else:
        data = np.where(v.data >= 0.0, 1.0, -1.0)
    out = Tensor2(data)
    t = dk.current_tape()
    if t is not None:
        def bwd():
            g = out.grad
            if g is None:
                return
            dk.accumulate_grad(v, g)
        t.record(bwd)
    return out


def boost_matrix(desc, geo, params, relaxed_binary=False):
    """Run the full booster on matrix inputs and return the output rows.

    `desc` is the (N, D) raw-descriptor float view (+/-1 for binary input),
    `geo` the (N, 5) geometry matrix. Differentiable when called under an
    active tape. The real head emits unit-norm rows; the binary head emits
    +/-1 rows (straight-through sign of a tanh squashing).
    """
    x = dk.add(project_descriptor(desc, params), encode_geometry(geo, params))
    for l in range(params.layers):
        x = encoder_layer(x, params, l)
    if params.head == "real":
        return dk.l2_normalize(x)
    return binarize_st(dk.tanh_act(x), relaxed=relaxed_binary)


def boost(fs, params):
    """Boost a FeatureSet; geometry is untouched, descriptors are replaced.

    The output descriptor kind follows the params head and may differ from
    the input kind (a real input can be compressed to binary bits).
    """
    if len(fs) == 0:
        return FeatureSet(fs.image_id, fs.width, fs.height, [], [])
    if fs.dim != params.dim:
        raise ConfigError(f"feature dim {fs.dim} does not match model dim {params.dim}")
    out = boost_matrix(dk.tensor(fs.descriptor_matrix()),
                       dk.tensor(fs.geometry_matrix()), params)
    if params.head == "real":
        descs = [DescriptorVector("real", row) for row in out.data]
    else:
        descs = [DescriptorVector("binary", (row > 0).astype(np.uint8)) for row in out.data]
    return FeatureSet(fs.image_id, fs.width, fs.height, list(fs.keypoints), descs)
