"""Bit-exact persistence for fields, codecs, feature images, label maps,
cameras, and embedding dictionaries.

Byte layouts are specified in ``formats.md`` at the repository root. All
binary formats are little-endian; all JSON numbers are read as 64-bit reals.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from .core import Camera, FeatureImage, GaussianField, MIN_SCALE, sh_basis_size
from .errors import FormatError

logger = logging.getLogger(__name__)

FIELD_MAGIC = b"GSEM"
CODEC_MAGIC = b"GMLP"
FMAP_MAGIC = b"FMAP"
LABEL_MAGIC = b"GLBL"
FORMAT_VERSION = 1

# magic, version, gaussian_count, feat_dim, sh_degree, flags, 4 reserved bytes
_FIELD_HEADER = struct.Struct("<4sIQIII4x")
assert _FIELD_HEADER.size == 32
# magic, version, n_layers, in_dim, out_dim, flags
_CODEC_HEADER = struct.Struct("<4sIIIII")
_CODEC_LAYER = struct.Struct("<II")
# magic, version, H, W, C, flags (bit 0: mask plane present)
_FMAP_HEADER = struct.Struct("<4sIIIII")
# magic, version, H, W
_LABEL_HEADER = struct.Struct("<4sIII")


def _read_exact(data: bytes, fmt: struct.Struct, offset: int, what: str):
    if len(data) < offset + fmt.size:
        raise FormatError(
            f"truncated {what}: expected {offset + fmt.size} bytes, got {len(data)}",
            offset=len(data),
        )
    return fmt.unpack_from(data, offset)


def _check_magic(magic: bytes, expected: bytes, version: int):
    if magic != expected:
        raise FormatError(f"bad magic {magic!r}, expected {expected!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)


def _take_floats(data: bytes, offset: int, count: int, what: str) -> tuple[np.ndarray, int]:
    nbytes = count * 4
    if len(data) < offset + nbytes:
        raise FormatError(
            f"truncated {what}: expected {offset + nbytes} bytes, got {len(data)}",
            offset=len(data),
        )
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr, offset + nbytes


def file_digest(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# GaussianField  (GSEM)
# ---------------------------------------------------------------------------

def field_record_floats(sh_degree: int, feat_dim: int) -> int:
    """Floats per Gaussian record: point, offset, rotation, scale, opacity,
    SH block, and both feature vectors."""
    return 14 + 3 * sh_basis_size(sh_degree) + 2 * feat_dim


def save_field(field: GaussianField, path) -> None:
    n = len(field)
    k = field.feat_dim
    header = _FIELD_HEADER.pack(FIELD_MAGIC, FORMAT_VERSION, n, k, field.sh_degree, 0)
    stride = field_record_floats(field.sh_degree, k)
    records = np.empty((n, stride), dtype="<f4")
    records[:, 0:3] = field.points
    records[:, 3:6] = field.offsets
    records[:, 6:10] = field.rotations
    records[:, 10:13] = field.scales
    records[:, 13] = field.opacities
    b = 3 * sh_basis_size(field.sh_degree)
    records[:, 14:14 + b] = field.sh.reshape(n, b)
    records[:, 14 + b:14 + b + k] = field.feat_region
    records[:, 14 + b + k:] = field.feat_context
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def load_field(path) -> GaussianField:
    data = Path(path).read_bytes()
    magic, version, n, k, sh_degree, _flags = _read_exact(data, _FIELD_HEADER, 0, "field header")
    _check_magic(magic, FIELD_MAGIC, version)
    if sh_degree > 3:
        raise FormatError(f"unsupported sh_degree {sh_degree}", offset=20)
    stride = field_record_floats(sh_degree, k)
    expected = _FIELD_HEADER.size + n * stride * 4
    if len(data) != expected:
        raise FormatError(
            f"field payload size mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
        )
    flat, _ = _take_floats(data, _FIELD_HEADER.size, n * stride, "field records")
    records = flat.reshape(n, stride)
    if not np.all(np.isfinite(records)):
        raise FormatError("field records contain non-finite values")
    b = 3 * sh_basis_size(sh_degree)
    scales = np.array(records[:, 10:13])
    degenerate = scales < MIN_SCALE
    if np.any(degenerate):
        logger.warning("load_field: clamped %d degenerate scale components to %g",
                       int(degenerate.sum()), MIN_SCALE)
        scales[degenerate] = MIN_SCALE
    return GaussianField(
        points=records[:, 0:3],
        offsets=records[:, 3:6],
        rotations=records[:, 6:10],
        scales=scales,
        opacities=np.clip(records[:, 13], 0.0, 1.0),
        sh=records[:, 14:14 + b].reshape(n, 3, sh_basis_size(sh_degree)),
        feat_region=records[:, 14 + b:14 + b + k],
        feat_context=records[:, 14 + b + k:],
        sh_degree=int(sh_degree),
    )


# ---------------------------------------------------------------------------
# MlpCodec  (GMLP)
# ---------------------------------------------------------------------------

def save_codec(codec, path) -> None:
    from .codec import MlpCodec  # local import to avoid a cycle

    assert isinstance(codec, MlpCodec)
    parts = [_CODEC_HEADER.pack(CODEC_MAGIC, FORMAT_VERSION, len(codec.weights),
                                codec.in_dim, codec.out_dim, 0)]
    for w, b in zip(codec.weights, codec.biases):
        parts.append(_CODEC_LAYER.pack(w.shape[0], w.shape[1]))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_codec(path):
    from .codec import MlpCodec

    data = Path(path).read_bytes()
    magic, version, n_layers, in_dim, out_dim, _flags = _read_exact(
        data, _CODEC_HEADER, 0, "codec header")
    _check_magic(magic, CODEC_MAGIC, version)
    if n_layers == 0 or n_layers > 64:
        raise FormatError(f"implausible layer count {n_layers}", offset=8)
    offset = _CODEC_HEADER.size
    weights, biases = [], []
    for i in range(n_layers):
        out_d, in_d = _read_exact(data, _CODEC_LAYER, offset, f"codec layer {i} header")
        offset += _CODEC_LAYER.size
        if out_d == 0 or in_d == 0 or out_d * in_d > 1 << 28:
            raise FormatError(f"implausible layer {i} dims {out_d}x{in_d}", offset=offset)
        w, offset = _take_floats(data, offset, out_d * in_d, f"codec layer {i} weights")
        b, offset = _take_floats(data, offset, out_d, f"codec layer {i} bias")
        weights.append(w.reshape(out_d, in_d))
        biases.append(np.array(b))
    if len(data) != offset:
        raise FormatError(
            f"codec payload size mismatch: expected {offset} bytes, got {len(data)}",
            offset=offset)
    codec = MlpCodec(weights=weights, biases=biases)
    if codec.in_dim != in_dim or codec.out_dim != out_dim:
        raise FormatError(
            f"codec header dims ({in_dim}->{out_dim}) disagree with layers "
            f"({codec.in_dim}->{codec.out_dim})", offset=8)
    return codec


# ---------------------------------------------------------------------------
# FeatureImage  (FMAP)
# ---------------------------------------------------------------------------

def save_feature_image(img: FeatureImage, path) -> None:
    flags = 1 if img.mask is not None else 0
    parts = [_FMAP_HEADER.pack(FMAP_MAGIC, FORMAT_VERSION, img.height, img.width,
                               img.channels, flags)]
    parts.append(np.ascontiguousarray(img.data, dtype="<f4").tobytes())
    if img.mask is not None:
        parts.append(img.mask.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_feature_image(path) -> FeatureImage:
    data = Path(path).read_bytes()
    magic, version, h, w, c, flags = _read_exact(data, _FMAP_HEADER, 0, "feature map header")
    _check_magic(magic, FMAP_MAGIC, version)
    if h * w * c > 1 << 30:
        raise FormatError(f"implausible feature map size {h}x{w}x{c}", offset=8)
    values, offset = _take_floats(data, _FMAP_HEADER.size, h * w * c, "feature map data")
    mask = None
    if flags & 1:
        if len(data) < offset + h * w:
            raise FormatError(
                f"truncated feature map mask: expected {offset + h * w} bytes, "
                f"got {len(data)}", offset=len(data))
        mask = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
        mask = mask.reshape(h, w).astype(bool)
        offset += h * w
    if len(data) != offset:
        raise FormatError(
            f"feature map size mismatch: expected {offset} bytes, got {len(data)}",
            offset=offset)
    return FeatureImage(data=values.reshape(h, w, c), mask=mask)


# ---------------------------------------------------------------------------
# LabelMap  (GLBL)
# ---------------------------------------------------------------------------

def save_label_map(labels: np.ndarray, path) -> None:
    labels = np.ascontiguousarray(labels)
    if labels.ndim != 2:
        raise FormatError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise FormatError("label values outside u16 range")
    h, w = labels.shape
    header = _LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, h, w)
    Path(path).write_bytes(header + labels.astype("<u2").tobytes())


def load_label_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, version, h, w = _read_exact(data, _LABEL_HEADER, 0, "label map header")
    _check_magic(magic, LABEL_MAGIC, version)
    if h * w > 1 << 30:
        raise FormatError(f"implausible label map size {h}x{w}", offset=8)
    expected = _LABEL_HEADER.size + h * w * 2
    if len(data) != expected:
        raise FormatError(
            f"label map size mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected))
    grid = np.frombuffer(data, dtype="<u2", count=h * w, offset=_LABEL_HEADER.size)
    return grid.reshape(h, w).astype(np.int32)


# ---------------------------------------------------------------------------
# Camera / EmbeddingDictionary  (JSON)
# ---------------------------------------------------------------------------

def save_camera(cam: Camera, path) -> None:
    payload = {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "near": cam.near, "far": cam.far,
        "world_to_camera": [float(v) for v in cam.world_to_camera.reshape(16)],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_camera(path) -> Camera:
    try:
        payload = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"camera JSON parse failure: {e}") from e
    try:
        w2c = np.array(payload["world_to_camera"], dtype=np.float64).reshape(4, 4)
        return Camera(
            fx=float(payload["fx"]), fy=float(payload["fy"]),
            cx=float(payload["cx"]), cy=float(payload["cy"]),
            width=int(payload["width"]), height=int(payload["height"]),
            world_to_camera=w2c,
            near=float(payload["near"]), far=float(payload["far"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"camera JSON missing or malformed field: {e}") from e


def save_dictionary(dictionary, path) -> None:
    payload = {
        "dim": dictionary.dim,
        "entries": {name: [float(v) for v in vec] for name, vec in dictionary.entries.items()},
        "canonical": [[float(v) for v in vec] for vec in dictionary.canonical],
    }
    Path(path).write_text(json.dumps(payload))


def load_dictionary(path):
    from .query import EmbeddingDictionary

    try:
        payload = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"dictionary JSON parse failure: {e}") from e
    try:
        dim = int(payload["dim"])
        entries = {str(k): np.array(v, dtype=np.float64) for k, v in payload["entries"].items()}
        canonical = np.array(payload["canonical"], dtype=np.float64).reshape(-1, dim)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"dictionary JSON missing or malformed field: {e}") from e
    for name, vec in entries.items():
        if vec.shape != (dim,):
            raise FormatError(f"dictionary entry {name!r} has wrong dimension")
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise FormatError(f"dictionary entry {name!r} is not unit-norm")
    for i, vec in enumerate(canonical):
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise FormatError(f"canonical vector {i} is not unit-norm")
    if len(canonical) == 0:
        raise FormatError("dictionary has no canonical vectors")
    return EmbeddingDictionary(entries=entries, canonical=canonical)
