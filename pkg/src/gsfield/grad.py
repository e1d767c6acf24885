"""Backward pass for rendered feature maps plus a finite-difference checker.

Compositing is linear in per-Gaussian features, so feature gradients are
weight-sums of the upstream map. The optional opacity gradient follows the
front-to-back recurrence product rule. Geometry gradients are out of scope:
only the semantic path is trainable.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from .core import Camera, GaussianField
from .errors import ShapeError, UsageError
from .raster import RenderCache, RenderOptions, RenderOutput, render

_DENOM_FLOOR = 1e-6


@dataclass
class FeatureGrad:
    d_feat_region: np.ndarray  # (N, K)
    d_feat_context: np.ndarray  # (N, K)
    d_opacity: np.ndarray  # (N,) zero-filled when opacity training is off

    def scaled(self, s: float) -> "FeatureGrad":
        return FeatureGrad(self.d_feat_region * s, self.d_feat_context * s,
                           self.d_opacity * s)

    def add_(self, other: "FeatureGrad") -> None:
        self.d_feat_region += other.d_feat_region
        self.d_feat_context += other.d_feat_context
        self.d_opacity += other.d_opacity


def _segment_pixels(cache: RenderCache) -> np.ndarray:
    counts = np.diff(cache.offsets)
    return np.repeat(np.arange(cache.height * cache.width, dtype=np.int64), counts)


def render_backward(field: GaussianField, cache: RenderCache | None,
                    d_feat_region: np.ndarray, d_feat_context: np.ndarray,
                    include_opacity: bool = False) -> FeatureGrad:
    """Gradients of a scalar loss wrt per-Gaussian features (and opacity).

    ``d_feat_region`` / ``d_feat_context`` are the upstream per-pixel
    gradients (H, W, K) of the loss wrt the rendered feature maps. Culled
    Gaussians receive zero gradient.
    """
    if cache is None:
        raise UsageError("render_backward requires a forward render with "
                         "compute_cache=True")
    n, k = len(field), field.feat_dim
    h, w = cache.height, cache.width
    for name, arr in (("d_feat_region", d_feat_region), ("d_feat_context", d_feat_context)):
        if np.asarray(arr).shape != (h, w, k):
            raise ShapeError(f"{name}: expected {(h, w, k)}, got {np.asarray(arr).shape}")

    out = FeatureGrad(
        d_feat_region=np.zeros((n, k)),
        d_feat_context=np.zeros((n, k)),
        d_opacity=np.zeros(n),
    )
    if cache.splat.size == 0:
        return out

    m = len(cache.source_index)
    pix = _segment_pixels(cache)
    alpha_e = cache.alphas[cache.splat].astype(np.float64)
    g_e = cache.gauss.astype(np.float64)
    t_e = cache.trans.astype(np.float64)
    w_e = alpha_e * g_e * t_e

    up_r = np.asarray(d_feat_region, np.float64).reshape(-1, k)
    up_c = np.asarray(d_feat_context, np.float64).reshape(-1, k)

    dfr = np.empty((m, k))
    dfc = np.empty((m, k))
    for c in range(k):
        dfr[:, c] = np.bincount(cache.splat, weights=w_e * up_r[pix, c], minlength=m)
        dfc[:, c] = np.bincount(cache.splat, weights=w_e * up_c[pix, c], minlength=m)
    out.d_feat_region[cache.source_index] = dfr
    out.d_feat_context[cache.source_index] = dfc

    if include_opacity:
        # d c(p) / d a_j = G_j (T_j f_j - suffix_j / (1 - a_j G_j)) where
        # suffix_j collects the weighted channels behind entry j at pixel p.
        chan = cache.channels.astype(np.float64)  # (M, C) rgb + both branches
        n_chan = chan.shape[1]
        up_full = np.zeros((h * w, n_chan))
        up_full[:, n_chan - 2 * k:n_chan - k] = up_r
        up_full[:, n_chan - k:] = up_c
        dot_f = np.einsum("ec,ec->e", chan[cache.splat], up_full[pix])
        s_e = w_e * dot_f
        # Per-pixel suffix sums of s_e: inclusive cumsum minus the segment base.
        cs = np.cumsum(s_e)
        padded = np.concatenate([[0.0], cs])
        seg_total = np.bincount(pix, weights=s_e, minlength=h * w)
        incl = cs - padded[cache.offsets[pix]]
        suffix = seg_total[pix] - incl
        a_e = alpha_e * g_e
        denom = np.maximum(1.0 - a_e, _DENOM_FLOOR)
        d_alpha_e = g_e * (t_e * dot_f - suffix / denom)
        out.d_opacity[cache.source_index] = np.bincount(
            cache.splat, weights=d_alpha_e, minlength=m)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    failures: list = dfield(default_factory=list)  # (param, flat_index, analytic, numeric, rel)

    @property
    def passed(self) -> bool:
        return not self.failures

    def format_table(self) -> str:
        lines = [
            f"gradient check: {self.n_checked} coordinates, tolerance {self.tolerance:g}",
            f"max relative error: {self.max_rel_error:.3e}",
        ]
        if self.failures:
            lines.append(f"{len(self.failures)} FAILURES:")
            lines.append(f"{'param':<14}{'index':>8}{'analytic':>16}{'numeric':>16}{'rel':>12}")
            for p, i, a, num, r in self.failures:
                lines.append(f"{p:<14}{i:>8}{a:>16.6e}{num:>16.6e}{r:>12.3e}")
        else:
            lines.append("all checks passed")
        return "\n".join(lines)


class LinearLoss:
    """Seeded linear functional of the rendered feature maps (for checking)."""

    def __init__(self, height: int, width: int, feat_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.u_region = rng.normal(size=(height, width, feat_dim))
        self.u_context = rng.normal(size=(height, width, feat_dim))

    def evaluate(self, rendered: RenderOutput):
        value = float(
            np.sum(self.u_region * rendered.feat_region.data.astype(np.float64))
            + np.sum(self.u_context * rendered.feat_context.data.astype(np.float64)))
        return value, self.u_region, self.u_context


def _rel_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    if scale < 1e-10:
        return 0.0
    return abs(a - b) / scale


def grad_check(field: GaussianField, cam: Camera, loss, step: float = 1e-4,
               tolerance: float = 1e-4, max_coords: int = 64, seed: int = 0,
               include_opacity: bool = False) -> GradCheckReport:
    """Compare analytic feature gradients against central finite differences.

    ``loss`` must expose ``evaluate(rendered) -> (value, d_region, d_context)``
    with gradients wrt the rendered K-channel maps. Checks run in double
    precision on a deterministic subsample of at most ``max_coords``
    coordinates per parameter block.
    """
    if step <= 0:
        raise UsageError("grad_check: step must be positive")
    field = field.astype(np.float64)
    opts = RenderOptions(compute_cache=True, dtype=np.float64)
    rendered = render(field, cam, opts)
    _, d_r, d_c = loss.evaluate(rendered)
    analytic = render_backward(field, rendered.cache, d_r, d_c,
                               include_opacity=include_opacity)

    n, k = len(field), field.feat_dim
    rng = np.random.default_rng(seed)
    blocks = [("feat_region", n * k), ("feat_context", n * k)]
    if include_opacity:
        blocks.append(("opacity", n))
    per_block = max(1, max_coords // len(blocks))

    def loss_at(name, flat_index, delta):
        key = "opacities" if name == "opacity" else name
        arr = np.array(getattr(field, key), np.float64)
        arr.reshape(-1)[flat_index] += delta
        probe = field.replace(**{key: arr})
        value, _, _ = loss.evaluate(render(probe, cam, RenderOptions(dtype=np.float64)))
        return value

    report = GradCheckReport(max_rel_error=0.0, n_checked=0, tolerance=tolerance)
    for name, size in blocks:
        if size == 0:
            continue
        coords = rng.choice(size, size=min(per_block, size), replace=False)
        grads = {
            "feat_region": analytic.d_feat_region,
            "feat_context": analytic.d_feat_context,
            "opacity": analytic.d_opacity,
        }[name].reshape(-1)
        for ci in np.sort(coords):
            upper = loss_at(name, int(ci), step)
            lower = loss_at(name, int(ci), -step)
            numeric = (upper - lower) / (2.0 * step)
            rel = _rel_error(float(grads[ci]), numeric)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, rel)
            if rel > tolerance:
                report.failures.append((name, int(ci), float(grads[ci]), numeric, rel))
    return report
