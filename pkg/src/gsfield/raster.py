"""Tile-based forward rasterizer.

Projects Gaussians to a camera (EWA affine approximation), depth-sorts,
and alpha-composites RGB plus both K-channel semantic feature maps in a
single pass with identical weights. The accumulated-alpha map doubles as
the loss mask source.

Fixed constants (standard tile rasterization values, frozen for
reproducibility): 16x16 tiles, 3-sigma footprint radius, 0.3 px^2 conic
dilation, 1/255 per-pixel alpha skip, 1e-4 transmittance stop.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dfield

import numpy as np

from . import _kernels
from .core import Camera, FeatureImage, GaussianField, eval_sh_batch, quat_to_rotation
from .errors import ShapeError, UsageError

TILE_SIZE = _kernels.TILE
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_STOP = 1e-4
CONIC_DILATION = 0.3
RADIUS_SIGMAS = 3.0


@dataclass(frozen=True)
class Splat2D:
    """A Gaussian projected to one camera."""

    mean2d: np.ndarray  # (2,) pixels
    conic: np.ndarray  # (3,) inverse 2D covariance, (a, b, c) for [[a, b], [b, c]]
    depth: float  # meters, camera frame
    opacity: float
    color: np.ndarray  # (3,)
    feat_region: np.ndarray  # (K,)
    feat_context: np.ndarray  # (K,)
    radius: float  # pixels, footprint cutoff
    source_index: int


@dataclass
class ProjectionStats:
    n_input: int = 0
    n_visible: int = 0
    culled_near: int = 0
    culled_far: int = 0
    culled_offscreen: int = 0
    culled_singular: int = 0


@dataclass(frozen=True)
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    compute_cache: bool = False
    dtype: type = np.float32
    workers: int = 1


@dataclass
class RenderCache:
    """Per-pixel compositing record needed by the backward pass."""

    offsets: np.ndarray  # (H*W + 1,) int64, CSR over pixels
    splat: np.ndarray  # (E,) int32, compressed splat slot per entry
    gauss: np.ndarray  # (E,) Gaussian falloff value at the pixel
    trans: np.ndarray  # (E,) transmittance in front of the entry
    alphas: np.ndarray  # (M,) per visible splat
    channels: np.ndarray  # (M, C) composited channel values
    source_index: np.ndarray  # (M,) int32, visible slot -> field index
    n_gaussians: int
    feat_dim: int
    height: int
    width: int


@dataclass
class RenderOutput:
    rgb: FeatureImage
    feat_region: FeatureImage
    feat_context: FeatureImage
    alpha: np.ndarray  # (H, W) in [0, 1]
    per_pixel_count: np.ndarray  # (H, W) int32
    t_final: np.ndarray  # (H, W) remaining transmittance
    stats: ProjectionStats = dfield(default_factory=ProjectionStats)
    cache: RenderCache | None = None


@dataclass
class PreparedView:
    """Camera-dependent, feature-independent state reused across renders."""

    height: int
    width: int
    tiles_x: int
    n_tiles: int
    tile_offsets: np.ndarray  # (n_tiles + 1,) int64
    inst_splat: np.ndarray  # (I,) int32 sorted by (tile, depth, source)
    mean2d: np.ndarray  # (M, 2) float64
    conic: np.ndarray  # (M, 3) float64
    alphas: np.ndarray  # (M,) float64
    bbox: np.ndarray  # (M, 4) int32 pixel rect (x0, x1, y0, y1)
    depth: np.ndarray  # (M,)
    radius: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3) view-dependent RGB
    source_index: np.ndarray  # (M,) int32
    n_gaussians: int
    stats: ProjectionStats


def _project_arrays(centers, rotations, scales, opacities, sh, sh_degree, cam: Camera):
    """EWA projection of all Gaussians; returns per-visible arrays + stats."""
    stats = ProjectionStats(n_input=len(centers))
    r_wc = cam.rotation
    t_wc = cam.translation
    p_cam = centers @ r_wc.T + t_wc
    z = p_cam[:, 2]

    near_cull = z <= cam.near
    far_cull = z > cam.far
    alive = ~(near_cull | far_cull)
    stats.culled_near = int(near_cull.sum())
    stats.culled_far = int(far_cull.sum())
    idx = np.nonzero(alive)[0]
    if idx.size == 0:
        return None, stats

    p = p_cam[idx]
    x, y, zz = p[:, 0], p[:, 1], p[:, 2]
    mean2d = np.stack([cam.fx * x / zz + cam.cx, cam.fy * y / zz + cam.cy], axis=1)

    # Sigma' = J W Sigma W^T J^T with the affine perspective Jacobian J.
    rmats = quat_to_rotation(rotations[idx].astype(np.float64))
    s2 = (scales[idx].astype(np.float64)) ** 2
    sigma = np.einsum("nij,nj,nkj->nik", rmats, s2, rmats)
    m = np.einsum("ij,njk->nik", r_wc, sigma) @ r_wc.T
    inv_z = 1.0 / zz
    j00 = cam.fx * inv_z
    j02 = -cam.fx * x * inv_z * inv_z
    j11 = cam.fy * inv_z
    j12 = -cam.fy * y * inv_z * inv_z
    # Rows of J M J^T written out for the 2x2 result.
    a00 = m[:, 0, 0] * j00 + m[:, 2, 0] * j02
    a01 = m[:, 0, 1] * j00 + m[:, 2, 1] * j02
    a02 = m[:, 0, 2] * j00 + m[:, 2, 2] * j02
    a11 = m[:, 1, 1] * j11 + m[:, 2, 1] * j12
    a12 = m[:, 1, 2] * j11 + m[:, 2, 2] * j12
    c00 = a00 * j00 + a02 * j02 + CONIC_DILATION
    c01 = a01 * j11 + a02 * j12
    c11 = a11 * j11 + a12 * j12 + CONIC_DILATION

    det = c00 * c11 - c01 * c01
    singular = ~((det > 0) & np.isfinite(det) & (c00 > 0) & (c11 > 0))
    stats.culled_singular = int(singular.sum())

    safe_det = np.where(singular, 1.0, det)
    conic = np.stack([c11, -c01, c00], axis=1) / safe_det[:, None]

    mid = 0.5 * (c00 + c11)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMAS * np.sqrt(np.maximum(lam_max, 0.0))

    x0 = np.floor(mean2d[:, 0] - radius).astype(np.int64)
    x1 = np.ceil(mean2d[:, 0] + radius).astype(np.int64) + 1
    y0 = np.floor(mean2d[:, 1] - radius).astype(np.int64)
    y1 = np.ceil(mean2d[:, 1] + radius).astype(np.int64) + 1
    x0 = np.clip(x0, 0, cam.width)
    x1 = np.clip(x1, 0, cam.width)
    y0 = np.clip(y0, 0, cam.height)
    y1 = np.clip(y1, 0, cam.height)
    offscreen = (x1 <= x0) | (y1 <= y0) | (radius <= 0)
    offscreen &= ~singular
    stats.culled_offscreen = int(offscreen.sum())

    keep = ~(singular | offscreen)
    if not np.any(keep):
        return None, stats
    sel = np.nonzero(keep)[0]
    source = idx[sel].astype(np.int32)
    stats.n_visible = int(sel.size)

    view_dirs = centers[source] - cam.position()
    norms = np.linalg.norm(view_dirs, axis=1, keepdims=True)
    view_dirs = view_dirs / np.maximum(norms, 1e-12)
    colors = eval_sh_batch(sh[source].astype(np.float64), view_dirs, sh_degree)

    bbox = np.stack([x0[sel], x1[sel], y0[sel], y1[sel]], axis=1).astype(np.int32)
    return (
        dict(
            mean2d=np.ascontiguousarray(mean2d[sel]),
            conic=np.ascontiguousarray(conic[sel]),
            depth=np.ascontiguousarray(zz[sel]),
            radius=np.ascontiguousarray(radius[sel]),
            alphas=opacities[source].astype(np.float64),
            bbox=bbox,
            colors=colors,
            source_index=source,
        ),
        stats,
    )


def project_gaussian(g, cam: Camera) -> Splat2D | None:
    """Project a single Gaussian; returns None when culled."""
    arrays, _stats = _project_arrays(
        centers=np.asarray(g.point, np.float64)[None] + np.asarray(g.offset, np.float64)[None],
        rotations=np.asarray(g.rotation, np.float64)[None],
        scales=np.asarray(g.scale, np.float64)[None],
        opacities=np.asarray([g.opacity], np.float64),
        sh=np.asarray(g.sh, np.float64)[None],
        sh_degree={1: 0, 4: 1, 9: 2, 16: 3}[np.asarray(g.sh).shape[-1]],
        cam=cam,
    )
    if arrays is None:
        return None
    return Splat2D(
        mean2d=arrays["mean2d"][0],
        conic=arrays["conic"][0],
        depth=float(arrays["depth"][0]),
        opacity=float(g.opacity),
        color=arrays["colors"][0],
        feat_region=np.asarray(g.feat_region),
        feat_context=np.asarray(g.feat_context),
        radius=float(arrays["radius"][0]),
        source_index=0,
    )


def prepare_view(field: GaussianField, cam: Camera) -> PreparedView:
    """Project and tile-bin a field for one camera.

    The result depends only on geometry, opacity, SH, and the camera, so it
    can be reused across renders that differ only in per-Gaussian features.
    """
    tiles_x = (cam.width + TILE_SIZE - 1) // TILE_SIZE
    tiles_y = (cam.height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = tiles_x * tiles_y
    stats = ProjectionStats(n_input=len(field))
    empty = PreparedView(
        height=cam.height, width=cam.width, tiles_x=tiles_x, n_tiles=n_tiles,
        tile_offsets=np.zeros(n_tiles + 1, np.int64),
        inst_splat=np.zeros(0, np.int32),
        mean2d=np.zeros((0, 2)), conic=np.zeros((0, 3)), alphas=np.zeros(0),
        bbox=np.zeros((0, 4), np.int32), depth=np.zeros(0), radius=np.zeros(0),
        colors=np.zeros((0, 3)), source_index=np.zeros(0, np.int32),
        n_gaussians=len(field), stats=stats,
    )
    if len(field) == 0:
        return empty

    arrays, stats = _project_arrays(
        centers=field.centers(),
        rotations=field.rotations,
        scales=field.scales,
        opacities=field.opacities,
        sh=field.sh,
        sh_degree=field.sh_degree,
        cam=cam,
    )
    if arrays is None:
        empty.stats = stats
        return empty

    bbox = arrays["bbox"]
    tx0 = bbox[:, 0] // TILE_SIZE
    tx1 = (bbox[:, 1] - 1) // TILE_SIZE + 1
    ty0 = bbox[:, 2] // TILE_SIZE
    ty1 = (bbox[:, 3] - 1) // TILE_SIZE + 1
    counts = ((tx1 - tx0) * (ty1 - ty0)).astype(np.int64)
    offsets = np.zeros(len(counts) + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    inst_tile = np.empty(total, np.int32)
    inst_splat = np.empty(total, np.int32)
    _kernels.expand_tile_instances(offsets, tx0.astype(np.int32), tx1.astype(np.int32),
                                   ty0.astype(np.int32), ty1.astype(np.int32),
                                   tiles_x, inst_tile, inst_splat)

    # Sort instances by (tile, depth, source index); the index tiebreak makes
    # compositing order deterministic for coincident depths.
    order = np.lexsort((inst_splat, arrays["depth"][inst_splat], inst_tile))
    inst_tile = inst_tile[order]
    inst_splat = np.ascontiguousarray(inst_splat[order])
    tile_offsets = np.zeros(n_tiles + 1, np.int64)
    np.cumsum(np.bincount(inst_tile, minlength=n_tiles), out=tile_offsets[1:])

    return PreparedView(
        height=cam.height, width=cam.width, tiles_x=tiles_x, n_tiles=n_tiles,
        tile_offsets=tile_offsets, inst_splat=inst_splat,
        mean2d=arrays["mean2d"], conic=arrays["conic"], alphas=arrays["alphas"],
        bbox=arrays["bbox"], depth=arrays["depth"], radius=arrays["radius"],
        colors=arrays["colors"], source_index=arrays["source_index"],
        n_gaussians=len(field), stats=stats,
    )


def _run_kernel(prep: PreparedView, channels, dtype, workers,
                fill_cache=False, cache_offsets=None, cache_splat=None,
                cache_g=None, cache_t=None):
    h, w = prep.height, prep.width
    n_channels = channels.shape[1]
    out = np.zeros((h, w, n_channels), dtype)
    out_alpha = np.zeros((h, w), dtype)
    out_tfinal = np.ones((h, w), dtype)
    out_count = np.zeros((h, w), np.int32)
    if prep.inst_splat.size:
        mean2d = prep.mean2d.astype(dtype)
        conic = prep.conic.astype(dtype)
        alphas = prep.alphas.astype(dtype)
        chan = np.ascontiguousarray(channels, dtype)
        if not fill_cache:
            cache_offsets = np.zeros(1, np.int64)
            cache_splat = np.zeros(1, np.int32)
            cache_g = np.zeros(1, dtype)
            cache_t = np.zeros(1, dtype)
        args_for = lambda t0, t1: (
            t0, t1, prep.tiles_x, h, w, prep.tile_offsets, prep.inst_splat,
            mean2d, conic, alphas, prep.bbox, chan,
            ALPHA_SKIP, TRANSMITTANCE_STOP,
            out, out_alpha, out_tfinal, out_count,
            fill_cache, cache_offsets, cache_splat, cache_g, cache_t,
        )
        if workers <= 1:
            _kernels.composite_tile_range(*args_for(0, prep.n_tiles))
        else:
            bounds = np.linspace(0, prep.n_tiles, workers + 1).astype(int)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [
                    pool.submit(_kernels.composite_tile_range, *args_for(int(b0), int(b1)))
                    for b0, b1 in zip(bounds[:-1], bounds[1:])
                    if b1 > b0
                ]
                for f in futures:
                    f.result()
    return out, out_alpha, out_tfinal, out_count


def composite_prepared(prep: PreparedView, channels: np.ndarray,
                       dtype=np.float32, workers: int = 1,
                       compute_cache: bool = False):
    """Composite an arbitrary per-visible-splat channel matrix.

    ``channels`` has one row per visible splat of ``prep``. Returns
    (out, alpha, t_final, count, cache_or_None).
    """
    channels = np.asarray(channels)
    if channels.ndim != 2 or channels.shape[0] != len(prep.source_index):
        raise ShapeError(
            f"channels shape {channels.shape} does not match {len(prep.source_index)} "
            "visible splats")
    out, alpha, tfinal, count = _run_kernel(prep, channels, dtype, workers)
    cache = None
    if compute_cache:
        offsets = np.zeros(prep.height * prep.width + 1, np.int64)
        np.cumsum(count.reshape(-1), out=offsets[1:])
        total = int(offsets[-1])
        cache_splat = np.empty(total, np.int32)
        cache_g = np.empty(total, dtype)
        cache_t = np.empty(total, dtype)
        _run_kernel(prep, channels, dtype, workers, fill_cache=True,
                    cache_offsets=offsets, cache_splat=cache_splat,
                    cache_g=cache_g, cache_t=cache_t)
        cache = RenderCache(
            offsets=offsets, splat=cache_splat, gauss=cache_g, trans=cache_t,
            alphas=prep.alphas.astype(dtype), channels=np.asarray(channels, dtype),
            source_index=prep.source_index, n_gaussians=prep.n_gaussians,
            feat_dim=0, height=prep.height, width=prep.width,
        )
    return out, alpha, tfinal, count, cache


def render(field: GaussianField, cam: Camera,
           opts: RenderOptions = RenderOptions()) -> RenderOutput:
    """Render RGB, both semantic feature maps, and the alpha map to a camera."""
    if field.feat_region.shape[1] != field.feat_dim or \
            field.feat_context.shape[1] != field.feat_dim:
        raise ShapeError("field feature blocks disagree with feat_dim")
    k = field.feat_dim
    dtype = np.dtype(opts.dtype).type
    prep = prepare_view(field, cam)
    channels = np.concatenate(
        [prep.colors,
         field.feat_region[prep.source_index].astype(np.float64),
         field.feat_context[prep.source_index].astype(np.float64)],
        axis=1) if len(prep.source_index) else np.zeros((0, 3 + 2 * k))
    out, alpha, tfinal, count, cache = composite_prepared(
        prep, channels, dtype=dtype, workers=opts.workers,
        compute_cache=opts.compute_cache)
    if cache is not None:
        cache.feat_dim = k
    rgb = out[:, :, :3] + np.asarray(opts.background, dtype)[None, None, :] * tfinal[:, :, None]
    return RenderOutput(
        rgb=FeatureImage(rgb),
        feat_region=FeatureImage(out[:, :, 3:3 + k]),
        feat_context=FeatureImage(out[:, :, 3 + k:]),
        alpha=np.clip(alpha, 0.0, 1.0),
        per_pixel_count=count,
        t_final=tfinal,
        stats=prep.stats,
        cache=cache,
    )


def loss_mask_from_alpha(alpha: np.ndarray, tau: float) -> np.ndarray:
    """Binary validity mask: pixels whose accumulated alpha reaches ``tau``."""
    if not (0.0 < tau < 1.0):
        raise UsageError(f"loss_mask_from_alpha: tau must be in (0, 1), got {tau}")
    return np.asarray(alpha) >= tau
