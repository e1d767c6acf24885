"""Numba kernels for tile-based alpha compositing.

Kernels are compiled with ``nogil=True`` so tile chunks can run concurrently
on a plain thread pool; every tile owns its output pixels exclusively, which
makes results bitwise identical for any worker count.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

TILE = 16


@njit(nogil=True, cache=True)
def composite_tile_range(t0, t1, tiles_x, height, width,
                         tile_offsets, inst_splat,
                         mean2d, conic, alphas, bbox, channels,
                         skip_alpha, stop_t,
                         out, out_alpha, out_tfinal, out_count,
                         fill_cache, cache_offsets, cache_splat, cache_g, cache_t):
    """Front-to-back composite tiles ``[t0, t1)`` into the output rasters.

    ``inst_splat`` holds per-tile splat indices sorted by (tile, depth, index);
    ``bbox`` is the integer pixel rect (x0, x1, y0, y1) of each splat. When
    ``fill_cache`` is set, the walk additionally records one
    (splat, gaussian value, transmittance) entry per composited contribution
    at the per-pixel offsets in ``cache_offsets``.
    """
    n_channels = channels.shape[1]
    acc = np.zeros(n_channels, np.float64)
    for tile in range(t0, t1):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y_lo = ty * TILE
        y_hi = min(y_lo + TILE, height)
        x_lo = tx * TILE
        x_hi = min(x_lo + TILE, width)
        s_lo = tile_offsets[tile]
        s_hi = tile_offsets[tile + 1]
        for py in range(y_lo, y_hi):
            for px in range(x_lo, x_hi):
                for c in range(n_channels):
                    acc[c] = 0.0
                trans = 1.0
                alpha_sum = 0.0
                count = 0
                pix = py * width + px
                base = cache_offsets[pix] if fill_cache else 0
                for si in range(s_lo, s_hi):
                    if trans < stop_t:
                        break
                    g = inst_splat[si]
                    if px < bbox[g, 0] or px >= bbox[g, 1]:
                        continue
                    if py < bbox[g, 2] or py >= bbox[g, 3]:
                        continue
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) \
                        - conic[g, 1] * dx * dy
                    gval = math.exp(power)
                    a = alphas[g] * gval
                    if a < skip_alpha:
                        continue
                    if a > 1.0:
                        a = 1.0
                    w = a * trans
                    for c in range(n_channels):
                        acc[c] += w * channels[g, c]
                    alpha_sum += w
                    if fill_cache:
                        cache_splat[base + count] = g
                        cache_g[base + count] = gval
                        cache_t[base + count] = trans
                    count += 1
                    trans *= 1.0 - a
                for c in range(n_channels):
                    out[py, px, c] = acc[c]
                out_alpha[py, px] = alpha_sum
                out_tfinal[py, px] = trans
                out_count[py, px] = count


@njit(nogil=True, cache=True)
def expand_tile_instances(counts_offsets, tx0, tx1, ty0, ty1, tiles_x,
                          out_tile, out_splat):
    """Fill (tile, splat) instance pairs from per-splat tile rectangles."""
    n = tx0.shape[0]
    for i in range(n):
        pos = counts_offsets[i]
        for ty in range(ty0[i], ty1[i]):
            for tx in range(tx0[i], tx1[i]):
                out_tile[pos] = ty * tiles_x + tx
                out_splat[pos] = i
                pos += 1
