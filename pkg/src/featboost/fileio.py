"""Bit-exact binary serialization of feature sets and model checkpoints.

Feature file ("FBF1"):
    magic            4 bytes  b"FBF1"
    flags            u8       bit0: descriptor kind, 0 = real, 1 = binary
    width, height    u32 LE   image size in pixels
    N, D             u32 LE   keypoint count, descriptor dimension
    per keypoint:
        x_px, y_px, score, orientation_rad, scale   5 x f32 LE
        payload: D x f32 LE (real) or ceil(D/8) bytes with bit j stored in
        byte j//8 at bit position j % 8 (binary)

Coordinates are stored in pixels; loading normalizes them by the largest
image dimension, saving converts back. Descriptor values live on disk as
f32 (their native precision), model weights as f64.

Checkpoint file ("FBW1"):
    magic            4 bytes  b"FBW1"
    D, L             u32 LE
    head kind        u8       0 = real, 1 = binary
    activation id    u8       0 = relu
    then, per parameter in canonical order:
        name length  u16 LE, name bytes (utf-8)
        element count u64 LE, values f64 LE
"""

from __future__ import annotations

import struct

import numpy as np

from .booster import (BoosterParams, DescriptorVector, FeatureSet,
                      KeypointGeometry, parameter_shapes)
from .diffkernel import Tensor2
from .errors import ConfigError, FormatError

FEATURE_MAGIC = b"FBF1"
CHECKPOINT_MAGIC = b"FBW1"
ACTIVATION_RELU = 0

_HEAD_CODES = {"real": 0, "binary": 1}
_HEAD_NAMES = {v: k for k, v in _HEAD_CODES.items()}


class _Reader:
    """Byte cursor that reports the offset of any truncation or bad field."""

    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def read(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.read(struct.calcsize("<" + fmt), what))

    def expect_end(self):
        if self.pos != len(self.blob):
            raise FormatError(
                f"{len(self.blob) - self.pos} trailing bytes", offset=self.pos)


def _pack_descriptor(desc):
    if desc.kind == "real":
        return desc.values.astype("<f4").tobytes()
    return np.packbits(desc.values, bitorder="little").tobytes()


def save_features(path, fs):
    """Write a FeatureSet in the feature file format."""
    n = len(fs)
    dim = fs.dim if n else 0
    kind = fs.kind if n else "real"
    scale = float(max(fs.width, fs.height))
    parts = [FEATURE_MAGIC,
             struct.pack("<B", _HEAD_CODES[kind]),
             struct.pack("<IIII", fs.width, fs.height, n, dim)]
    for kp, desc in zip(fs.keypoints, fs.descriptors):
        parts.append(struct.pack("<5f", kp.x * scale, kp.y * scale, kp.score,
                                 kp.orientation, kp.scale))
        parts.append(_pack_descriptor(desc))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_features(path, image_id=None):
    """Read a feature file; coordinates come back normalized to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.read(4, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    (flags,) = r.unpack("B", "flags")
    if flags not in (0, 1):
        raise FormatError(f"unknown flags byte {flags:#x}", offset=4)
    kind = _HEAD_NAMES[flags]
    width, height, n, dim = r.unpack("IIII", "header")
    if width < 1 or height < 1:
        raise FormatError("zero image dimension", offset=5)
    payload_len = dim * 4 if kind == "real" else (dim + 7) // 8
    expected = r.pos + n * (20 + payload_len)
    if len(blob) != expected:
        raise FormatError(
            f"file length {len(blob)} does not match header-implied {expected}",
            offset=min(len(blob), expected))
    scale = float(max(width, height))
    keypoints, descriptors = [], []
    for _ in range(n):
        x_px, y_px, score, orient, kp_scale = r.unpack("5f", "keypoint")
        keypoints.append(KeypointGeometry(x_px / scale, y_px / scale,
                                          score, orient, kp_scale))
        raw = r.read(payload_len, "descriptor payload")
        if kind == "real":
            values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        else:
            values = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                                   count=dim, bitorder="little")
        descriptors.append(DescriptorVector(kind, values))
    r.expect_end()
    return FeatureSet(image_id or str(path), width, height, keypoints, descriptors)


def save_checkpoint(path, params):
    """Write BoosterParams in the checkpoint format (canonical block order)."""
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", params.dim, params.layers),
             struct.pack("<BB", _HEAD_CODES[params.head], ACTIVATION_RELU)]
    for name, t in params.tensors.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", t.data.size))
        parts.append(t.data.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, expect_dim=None, expect_layers=None, expect_head=None):
    """Read a checkpoint; optional expectations are validated before use."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.read(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    dim, layers = r.unpack("II", "model size")
    head_code, activation = r.unpack("BB", "model flags")
    if head_code not in _HEAD_NAMES:
        raise FormatError(f"unknown head code {head_code}", offset=12)
    if activation != ACTIVATION_RELU:
        raise FormatError(f"unknown activation id {activation}", offset=13)
    head = _HEAD_NAMES[head_code]
    if expect_dim is not None and dim != expect_dim:
        raise ConfigError(f"checkpoint dim {dim} does not match expected {expect_dim}")
    if expect_layers is not None and layers != expect_layers:
        raise ConfigError(f"checkpoint layers {layers} does not match expected {expect_layers}")
    if expect_head is not None and head != expect_head:
        raise ConfigError(f"checkpoint head {head!r} does not match expected {expect_head!r}")

    tensors = {}
    for name, shape in parameter_shapes(dim, layers):
        start = r.pos
        (name_len,) = r.unpack("H", "parameter name length")
        stored = r.read(name_len, "parameter name").decode("utf-8")
        if stored != name:
            raise FormatError(f"expected block {name!r}, found {stored!r}", offset=start)
        (count,) = r.unpack("Q", "element count")
        if count != shape[0] * shape[1]:
            raise FormatError(
                f"block {name!r} has {count} elements, expected {shape[0] * shape[1]}",
                offset=start)
        raw = r.read(count * 8, f"values of {name!r}")
        tensors[name] = Tensor2(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    r.expect_end()
    return BoosterParams(dim, layers, head, tensors)
