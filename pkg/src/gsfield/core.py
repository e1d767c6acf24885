"""Domain types for semantic Gaussian fields and the closed-form geometry math.

Conventions, stated once and enforced everywhere:

* quaternions are scalar-first ``(w, x, y, z)`` and unit-norm,
* scales are per-axis standard deviations in meters (strictly positive),
* opacity is stored post-activation in ``[0, 1]``,
* ``world_to_camera`` is a row-major 4x4 rigid transform with +z forward,
* a Gaussian's center is ``point + offset``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPrimitiveError, ShapeError

QUAT_NORM_TOL = 1e-6
MIN_SCALE = 1e-8

# Real spherical harmonics constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


def _as_array(a, shape, name: str, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {arr.shape}")
    return arr


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z). Works on (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out[..., i, j] = rows[i][j]
    return out


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """3x3 covariance ``R(q) diag(scale^2) R(q)^T`` of one Gaussian.

    Symmetric positive-definite for unit ``rotation`` and positive ``scale``.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if rotation.shape != (4,) or scale.shape != (3,):
        raise ShapeError(
            f"build_covariance: rotation shape {rotation.shape}, scale shape {scale.shape}"
        )
    if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(scale))):
        raise InvalidPrimitiveError("build_covariance: non-finite rotation or scale")
    if np.any(scale <= 0):
        raise InvalidPrimitiveError(f"build_covariance: non-positive scale {scale}")
    r = quat_to_rotation(rotation)
    cov = (r * (scale**2)) @ r.T
    # Enforce exact symmetry against floating-point drift.
    return 0.5 * (cov + cov.T)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate an RGB spherical-harmonics expansion along a unit direction.

    ``sh`` is 3 x (degree+1)^2; the result is the plain basis contraction per
    channel (no offset, no clamping).
    """
    sh = np.asarray(sh, dtype=np.float64)
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise ShapeError(f"eval_sh: unsupported degree {degree}")
    if sh.shape != (3, sh_basis_size(degree)):
        raise ShapeError(
            f"eval_sh: expected sh shape (3, {sh_basis_size(degree)}), got {sh.shape}"
        )
    dirs = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    return eval_sh_batch(sh[None], dirs, degree)[0]


def eval_sh_batch(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Vectorized ``eval_sh``: sh (N, 3, B), dirs (N, 3) -> (N, 3)."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise ShapeError(f"eval_sh: unsupported degree {degree}")
    basis = sh_basis_size(degree)
    sh = np.asarray(sh, dtype=np.float64)
    if sh.ndim != 3 or sh.shape[1] != 3 or sh.shape[2] != basis:
        raise ShapeError(f"eval_sh: expected sh shape (N, 3, {basis}), got {sh.shape}")
    out = SH_C0 * sh[:, :, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        out = out - SH_C1 * y * sh[:, :, 1] + SH_C1 * z * sh[:, :, 2] - SH_C1 * x * sh[:, :, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out = (
            out
            + SH_C2[0] * xy * sh[:, :, 4]
            + SH_C2[1] * yz * sh[:, :, 5]
            + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, :, 6]
            + SH_C2[3] * xz * sh[:, :, 7]
            + SH_C2[4] * (xx - yy) * sh[:, :, 8]
        )
    if degree >= 3:
        out = (
            out
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, :, 9]
            + SH_C3[1] * xy * z * sh[:, :, 10]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, :, 11]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, :, 12]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, :, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, :, 14]
            + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, :, 15]
        )
    return out


@dataclass(frozen=True)
class SemanticGaussian:
    """One primitive: geometry, color, and the two low-dim semantic features."""

    point: np.ndarray  # (3,) world-frame location
    offset: np.ndarray  # (3,) center = point + offset
    rotation: np.ndarray  # (4,) unit quaternion, (w, x, y, z)
    scale: np.ndarray  # (3,) per-axis stddev, > 0
    opacity: float  # [0, 1]
    sh: np.ndarray  # (3, B) spherical-harmonic coefficients
    feat_region: np.ndarray  # (K,)
    feat_context: np.ndarray  # (K,)

    def center(self) -> np.ndarray:
        return self.point + self.offset


def center(g: SemanticGaussian) -> np.ndarray:
    """World-frame center of a Gaussian: ``point + offset``."""
    point = np.asarray(g.point, dtype=np.float64)
    offset = np.asarray(g.offset, dtype=np.float64)
    if not (np.all(np.isfinite(point)) and np.all(np.isfinite(offset))):
        raise InvalidPrimitiveError("center: non-finite point or offset")
    return point + offset


def _normalize_quats(rotations: np.ndarray) -> np.ndarray:
    """Renormalize quaternions whose norm drifted beyond the tolerance.

    Quaternions already unit within QUAT_NORM_TOL are left bit-for-bit
    untouched so that round-trips stay bitwise stable.
    """
    norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
    if np.any(norms < MIN_SCALE):
        raise InvalidPrimitiveError("rotation quaternion with (near-)zero norm")
    bad = np.abs(norms - 1.0) > QUAT_NORM_TOL
    if np.any(bad):
        rotations = rotations.copy()
        rotations[bad] = rotations[bad] / norms[bad, None].astype(rotations.dtype)
    return rotations


@dataclass
class GaussianField:
    """Ordered collection of semantic Gaussians with shared K and SH degree.

    Stored as struct-of-arrays (float32) for rendering throughput; arrays are
    made read-only after construction so a field can be shared across workers.
    """

    points: np.ndarray  # (N, 3)
    offsets: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, B)
    feat_region: np.ndarray  # (N, K)
    feat_context: np.ndarray  # (N, K)
    sh_degree: int = 0
    meta: dict = field(default_factory=dict)
    dtype: type = np.float32  # float64 for double-precision checker paths

    def __post_init__(self):
        n = len(np.asarray(self.points))
        basis = sh_basis_size(self.sh_degree)
        k = np.asarray(self.feat_region).shape[-1]
        dt = self.dtype
        self.points = _as_array(self.points, (n, 3), "points", dt)
        self.offsets = _as_array(self.offsets, (n, 3), "offsets", dt)
        self.rotations = _normalize_quats(_as_array(self.rotations, (n, 4), "rotations", dt))
        self.scales = _as_array(self.scales, (n, 3), "scales", dt)
        self.opacities = _as_array(self.opacities, (n,), "opacities", dt)
        self.sh = _as_array(self.sh, (n, 3, basis), "sh", dt)
        self.feat_region = _as_array(self.feat_region, (n, k), "feat_region", dt)
        self.feat_context = _as_array(self.feat_context, (n, k), "feat_context", dt)
        self.validate()
        for arr in (
            self.points,
            self.offsets,
            self.rotations,
            self.scales,
            self.opacities,
            self.sh,
            self.feat_region,
            self.feat_context,
        ):
            arr.setflags(write=False)

    @property
    def feat_dim(self) -> int:
        return self.feat_region.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> SemanticGaussian:
        return SemanticGaussian(
            point=self.points[i],
            offset=self.offsets[i],
            rotation=self.rotations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            sh=self.sh[i],
            feat_region=self.feat_region[i],
            feat_context=self.feat_context[i],
        )

    def centers(self) -> np.ndarray:
        return (self.points.astype(np.float64) + self.offsets.astype(np.float64))

    def validate(self) -> None:
        for name in ("points", "offsets", "rotations", "scales", "opacities", "sh",
                     "feat_region", "feat_context"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidPrimitiveError(f"field: non-finite values in {name}")
        if np.any(self.scales <= 0):
            raise InvalidPrimitiveError("field: non-positive scale")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise InvalidPrimitiveError("field: opacity outside [0, 1]")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if len(self) and np.max(np.abs(norms - 1.0), initial=0.0) > QUAT_NORM_TOL:
            raise InvalidPrimitiveError("field: non-unit quaternion after normalization")
        if self.feat_region.shape != self.feat_context.shape:
            raise ShapeError("field: feature blocks disagree in shape")

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int = 0, feat_dim: int | None = None,
                       meta: dict | None = None) -> "GaussianField":
        gaussians = list(gaussians)
        if not gaussians and feat_dim is None:
            raise ShapeError("from_gaussians: feat_dim required for an empty field")
        k = feat_dim if feat_dim is not None else len(gaussians[0].feat_region)
        basis = sh_basis_size(sh_degree)
        n = len(gaussians)
        if n == 0:
            return cls.empty(0, feat_dim=k, sh_degree=sh_degree)
        return cls(
            points=np.array([g.point for g in gaussians], dtype=np.float32).reshape(n, 3),
            offsets=np.array([g.offset for g in gaussians], dtype=np.float32).reshape(n, 3),
            rotations=np.array([g.rotation for g in gaussians], dtype=np.float32).reshape(n, 4),
            scales=np.array([g.scale for g in gaussians], dtype=np.float32).reshape(n, 3),
            opacities=np.array([g.opacity for g in gaussians], dtype=np.float32),
            sh=np.array([g.sh for g in gaussians], dtype=np.float32).reshape(n, 3, basis),
            feat_region=np.array([g.feat_region for g in gaussians], dtype=np.float32).reshape(n, k),
            feat_context=np.array([g.feat_context for g in gaussians], dtype=np.float32).reshape(n, k),
            sh_degree=sh_degree,
            meta=dict(meta or {}),
        )

    @classmethod
    def empty(cls, n: int = 0, feat_dim: int = 16, sh_degree: int = 0) -> "GaussianField":
        basis = sh_basis_size(sh_degree)
        return cls(
            points=np.zeros((n, 3), np.float32),
            offsets=np.zeros((n, 3), np.float32),
            rotations=np.tile(np.array([1, 0, 0, 0], np.float32), (n, 1)),
            scales=np.full((n, 3), 0.1, np.float32),
            opacities=np.zeros(n, np.float32),
            sh=np.zeros((n, 3, basis), np.float32),
            feat_region=np.zeros((n, feat_dim), np.float32),
            feat_context=np.zeros((n, feat_dim), np.float32),
            sh_degree=sh_degree,
        )

    def replace(self, **kwargs) -> "GaussianField":
        return dataclasses.replace(self, **kwargs)

    def astype(self, dtype) -> "GaussianField":
        """Copy of the field with all arrays in the requested precision."""
        return dataclasses.replace(self, dtype=dtype)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a row-major world-to-camera rigid transform (+z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (4, 4)
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        w2c = np.ascontiguousarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ShapeError(f"camera: world_to_camera shape {w2c.shape}")
        object.__setattr__(self, "world_to_camera", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidPrimitiveError("camera: fx, fy must be positive")
        if not (0 < self.near < self.far):
            raise InvalidPrimitiveError("camera: need 0 < near < far")
        r = w2c[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise InvalidPrimitiveError("camera: rotation block is not orthonormal")
        w2c.setflags(write=False)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fx=64.0, fy=None,
                width=64, height=64, near=0.01, far=1000.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            upv = np.array([0.0, 0.0, 1.0])
            right = np.cross(fwd, upv)
            nr = np.linalg.norm(right)
        right = right / nr
        down = np.cross(fwd, right)
        r = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = r
        w2c[:3, 3] = -r @ eye
        if fy is None:
            fy = fx
        return cls(fx=float(fx), fy=float(fy), cx=width / 2.0, cy=height / 2.0,
                   width=int(width), height=int(height), world_to_camera=w2c,
                   near=float(near), far=float(far))


@dataclass
class FeatureImage:
    """H x W x C real raster with an optional per-pixel validity mask."""

    data: np.ndarray  # (H, W, C) float32 (float64 on checker paths)
    mask: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        dtype = self.data.dtype if getattr(self.data, "dtype", None) == np.float64 \
            else np.float32
        self.data = np.ascontiguousarray(self.data, dtype=dtype)
        if self.data.ndim != 3:
            raise ShapeError(f"feature image: expected (H, W, C), got {self.data.shape}")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape[:2]:
                raise ShapeError(
                    f"feature image: mask shape {self.mask.shape} vs data {self.data.shape[:2]}"
                )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]
