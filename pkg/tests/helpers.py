"""Shared test utilities: random field factory and the brute-force
reference renderer (per-pixel full sort, vectorized transmittance
recurrence) used as the compositing oracle."""
from __future__ import annotations

import numpy as np

from gsfield.core import Camera, GaussianField
from gsfield.raster import (ALPHA_SKIP, TRANSMITTANCE_STOP, prepare_view)


def random_field(n: int, k: int = 8, seed: int = 0, opacity=(0.3, 0.95),
                 scale_log_mean=np.log(0.15), spread=1.0, sh_degree: int = 0,
                 dtype=np.float32) -> GaussianField:
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    basis = (sh_degree + 1) ** 2
    return GaussianField(
        points=rng.uniform(-spread, spread, (n, 3)),
        offsets=rng.normal(0, 0.02 * spread, (n, 3)),
        rotations=quats,
        scales=np.exp(rng.normal(scale_log_mean, 0.25, (n, 3))),
        opacities=rng.uniform(*opacity, size=n),
        sh=rng.normal(0, 0.3, (n, 3, basis)),
        feat_region=rng.normal(0, 0.8, (n, k)),
        feat_context=rng.normal(0, 0.8, (n, k)),
        sh_degree=sh_degree,
        dtype=dtype,
    )


def make_camera(size: int = 32, distance: float = 4.0, fx=None) -> Camera:
    return Camera.look_at(eye=(0.0, 0.4, -distance), target=(0.0, 0.0, 0.0),
                          fx=fx if fx is not None else size, width=size,
                          height=size, near=0.1, far=100.0)


def oracle_render(field: GaussianField, cam: Camera):
    """Reference compositing: every visible splat considered at every pixel,
    one global depth sort, exclusive-cumprod transmittance.

    Shares only the projection with the production path; the tile binning,
    per-pixel walk, and early-stop logic are reimplemented independently.
    Returns (out (H, W, C), alpha, t_final) in float64 with channel layout
    [rgb | feat_region | feat_context].
    """
    prep = prepare_view(field, cam)
    h, w = prep.height, prep.width
    k = field.feat_dim
    channels = np.concatenate(
        [prep.colors,
         np.asarray(field.feat_region, np.float64)[prep.source_index],
         np.asarray(field.feat_context, np.float64)[prep.source_index]],
        axis=1) if len(prep.source_index) else np.zeros((0, 3 + 2 * k))
    n = len(prep.source_index)
    if n == 0:
        return (np.zeros((h, w, 3 + 2 * k)), np.zeros((h, w)), np.ones((h, w)))

    order = np.lexsort((np.arange(n), prep.depth))
    mean2d = prep.mean2d[order]
    conic = prep.conic[order]
    alphas = prep.alphas[order]
    bbox = prep.bbox[order]
    channels = channels[order]

    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)
    dx = px[None, :] - mean2d[:, [0]]
    dy = py[None, :] - mean2d[:, [1]]
    power = (-0.5 * (conic[:, [0]] * dx * dx + conic[:, [2]] * dy * dy)
             - conic[:, [1]] * dx * dy)
    gauss = np.exp(power)
    inside = ((px[None, :] >= bbox[:, [0]]) & (px[None, :] < bbox[:, [1]])
              & (py[None, :] >= bbox[:, [2]]) & (py[None, :] < bbox[:, [3]]))
    a = alphas[:, None] * gauss
    a = np.where(inside & (a >= ALPHA_SKIP), np.minimum(a, 1.0), 0.0)

    # Exclusive transmittance; compositing for a splat happens only while the
    # running transmittance has not fallen below the stop threshold.
    trans = np.ones((n + 1, px.size))
    np.cumprod(1.0 - a, axis=0, out=trans[1:])
    live = trans[:-1] >= TRANSMITTANCE_STOP
    weights = a * trans[:-1] * live
    out = (weights.T @ channels).reshape(h, w, -1)
    alpha_map = weights.sum(axis=0).reshape(h, w)
    n_live = live.sum(axis=0)
    t_final = np.take_along_axis(trans, n_live[None, :], axis=0)[0].reshape(h, w)
    return out, alpha_map, t_final
