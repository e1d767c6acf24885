"""Distillation: fits per-Gaussian low-dim features and both codecs against
2D supervision feature maps with per-pixel cosine regression.

The per-pixel loss for each branch is ``1 - cos(decoded, target)``; the total
objective sums both branches over masked pixels and is normalized to a
masked-pixel mean so learning rates transfer across resolutions (the argmin
is unchanged). Geometry stays frozen: only features, codecs, and (optionally)
opacity receive updates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .codec import MlpCodec, codec_backward, decode_with_cache
from .core import Camera, FeatureImage, GaussianField
from .errors import DivergenceError, ShapeError, UsageError
from .grad import FeatureGrad, render_backward
from .raster import PreparedView, composite_prepared, prepare_view

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-8


@dataclass
class SupervisionView:
    """One target view: camera, both D-channel supervision maps, loss mask."""

    camera: Camera
    target_region: FeatureImage
    target_context: FeatureImage
    loss_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        tr, tc = self.target_region, self.target_context
        if (tr.height, tr.width, tr.channels) != (tc.height, tc.width, tc.channels):
            raise ShapeError("supervision: region/context targets disagree in shape")
        self.loss_mask = np.ascontiguousarray(self.loss_mask, dtype=bool)
        if self.loss_mask.shape != (tr.height, tr.width):
            raise ShapeError("supervision: loss mask shape mismatch")
        if (tr.height, tr.width) != (self.camera.height, self.camera.width):
            raise ShapeError("supervision: targets do not match camera resolution")

    @property
    def embed_dim(self) -> int:
        return self.target_region.channels


@dataclass
class FitConfig:
    iterations: int = 2000
    learning_rate: float = 5e-3  # per-Gaussian features
    codec_learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    train_opacity: bool = False
    log_every: int = 100
    codec_hidden: tuple = (64,)
    reinit_features: bool = True
    init_sigma: float = 0.01

    def __post_init__(self):
        if self.iterations < 0:
            raise UsageError("iterations must be >= 0")
        if self.learning_rate <= 0 or self.codec_learning_rate <= 0:
            raise UsageError("learning rates must be positive")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise UsageError("adam betas must lie in (0, 1)")


class Adam:
    """Plain Adam over a list of parameter arrays (bias-corrected)."""

    def __init__(self, params: list, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = [lr] * len(params) if np.isscalar(lr) else list(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        self.t += 1
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lr):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_loss(pred: np.ndarray, target: np.ndarray):
    """Per-vector cosine regression loss ``1 - cos(pred, target)`` in [0, 2].

    Returns (loss, d_pred). A zero-norm target is the caller's exclusion case
    (see ``cosine_loss_map``); the prediction norm is floored at 1e-8 to stay
    finite at the origin.
    """
    loss, d_pred, _ = cosine_loss_map(np.asarray(pred, np.float64)[None],
                                      np.asarray(target, np.float64)[None])
    return float(loss[0]), d_pred[0]


def cosine_loss_map(pred: np.ndarray, target: np.ndarray):
    """Vectorized cosine loss over (P, D) rows.

    Rows with zero-norm targets are excluded: they contribute zero loss and
    zero gradient, and their count is returned so callers can report it.
    """
    pred = np.asarray(pred, np.float64)
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"cosine loss: pred {pred.shape} vs target {target.shape}")
    n_p = np.maximum(np.linalg.norm(pred, axis=1), NORM_FLOOR)
    n_t = np.linalg.norm(target, axis=1)
    excluded = n_t == 0.0
    n_t_safe = np.where(excluded, 1.0, n_t)
    dot = np.einsum("ij,ij->i", pred, target)
    cos = dot / (n_p * n_t_safe)
    loss = np.where(excluded, 0.0, 1.0 - cos)
    # d(1 - cos)/d pred = -(target/(|p||t|) - cos * pred/|p|^2)
    d_pred = -(target / (n_p * n_t_safe)[:, None] - (cos / n_p**2)[:, None] * pred)
    d_pred[excluded] = 0.0
    return loss, d_pred, int(excluded.sum())


@dataclass
class LossGrads:
    codec_region: list  # interleaved dW/db, params64 order
    codec_context: list
    features: FeatureGrad
    excluded_pixels: int = 0


def total_semantic_loss(rendered, codecs, view: SupervisionView,
                        field: GaussianField | None = None,
                        include_opacity: bool = False):
    """Masked-pixel mean of both branches' cosine losses, with gradients.

    ``rendered`` must carry a forward cache. The gradient bundle covers both
    codecs and both per-Gaussian feature blocks (opacity optional).
    """
    codec_region, codec_context = codecs
    if rendered.cache is None:
        raise UsageError("total_semantic_loss requires a cached forward render")
    if field is None:
        raise UsageError("total_semantic_loss needs the rendered field")
    mask = view.loss_mask
    n_masked = int(mask.sum())
    n, k = len(field), field.feat_dim
    if n_masked == 0:
        logger.warning("total_semantic_loss: empty loss mask, returning zero loss")
        zero = FeatureGrad(np.zeros((n, k)), np.zeros((n, k)), np.zeros(n))
        return 0.0, LossGrads(
            codec_region=[np.zeros_like(p) for p in codec_region.params64()],
            codec_context=[np.zeros_like(p) for p in codec_context.params64()],
            features=zero)

    scale = 1.0 / n_masked
    total = 0.0
    excluded = 0
    upstream = {}
    codec_grads = {}
    for branch, codec, rend_map, target in (
        ("region", codec_region, rendered.feat_region.data, view.target_region.data),
        ("context", codec_context, rendered.feat_context.data, view.target_context.data),
    ):
        feats = rend_map[mask]
        decoded, cache = decode_with_cache(codec, feats)
        losses, d_decoded, n_excl = cosine_loss_map(decoded, target[mask])
        total += float(losses.sum()) * scale
        excluded += n_excl
        grads, d_in = codec_backward(codec, cache, d_decoded * scale)
        up = np.zeros((view.camera.height, view.camera.width, k))
        up[mask] = d_in
        upstream[branch] = up
        codec_grads[branch] = grads

    feature_grad = render_backward(field, rendered.cache, upstream["region"],
                                   upstream["context"],
                                   include_opacity=include_opacity)
    return total, LossGrads(codec_region=codec_grads["region"],
                            codec_context=codec_grads["context"],
                            features=feature_grad, excluded_pixels=excluded)


@dataclass
class FitResult:
    field: GaussianField
    codec_region: MlpCodec
    codec_context: MlpCodec
    history: list  # (iteration, loss)
    excluded_pixels: int = 0


class SemanticLoss:
    """Adapter exposing the full distillation objective to ``grad_check``.

    Wraps fixed codecs and one supervision view; gradients flow through the
    codecs into the rendered feature maps.
    """

    def __init__(self, codecs, view: SupervisionView, field: GaussianField):
        self.codecs = codecs
        self.view = view
        self.field = field

    def evaluate(self, rendered):
        codec_region, codec_context = self.codecs
        mask = self.view.loss_mask
        n_masked = max(int(mask.sum()), 1)
        scale = 1.0 / n_masked
        total = 0.0
        ups = []
        k = self.field.feat_dim
        for codec, rend_map, target in (
            (codec_region, rendered.feat_region.data, self.view.target_region.data),
            (codec_context, rendered.feat_context.data, self.view.target_context.data),
        ):
            decoded, cache = decode_with_cache(codec, rend_map[mask])
            losses, d_decoded, _ = cosine_loss_map(decoded, target[mask])
            total += float(losses.sum()) * scale
            _, d_in = codec_backward(codec, cache, d_decoded * scale)
            up = np.zeros((self.view.camera.height, self.view.camera.width, k))
            up[mask] = d_in
            ups.append(up)
        return total, ups[0], ups[1]


def _step_views(views, step: int):
    """Round-robin pair of supervision views for one step (deduplicated)."""
    n = len(views)
    first = (2 * step) % n
    second = (2 * step + 1) % n
    return [first] if first == second else [first, second]


def fit_semantics(field: GaussianField, views, cfg: FitConfig,
                  codecs=None) -> FitResult:
    """Optimize per-Gaussian features and both codecs against supervision views.

    Geometry is untouched bit-for-bit. Features restart from seeded Gaussian
    noise (sigma ``cfg.init_sigma``) unless ``cfg.reinit_features`` is off.
    Raises ``DivergenceError`` if the loss goes non-finite.
    """
    views = list(views)
    if not views:
        raise UsageError("fit_semantics needs at least one supervision view")
    embed_dim = views[0].embed_dim
    for v in views:
        if v.embed_dim != embed_dim:
            raise ShapeError("supervision views disagree on embedding dimension")
    if cfg.iterations == 0:
        cr = codecs[0] if codecs else MlpCodec.create(
            field.feat_dim, embed_dim, cfg.codec_hidden, seed=cfg.seed + 1)
        cc = codecs[1] if codecs else MlpCodec.create(
            field.feat_dim, embed_dim, cfg.codec_hidden, seed=cfg.seed + 2)
        return FitResult(field=field, codec_region=cr, codec_context=cc, history=[])

    n, k = len(field), field.feat_dim
    rng = np.random.default_rng([cfg.seed, 0])
    if cfg.reinit_features:
        feat_region = rng.normal(0.0, cfg.init_sigma, size=(n, k))
        feat_context = rng.normal(0.0, cfg.init_sigma, size=(n, k))
    else:
        feat_region = field.feat_region.astype(np.float64)
        feat_context = field.feat_context.astype(np.float64)
    opacities = field.opacities.astype(np.float64)

    if codecs is None:
        codec_region = MlpCodec.create(k, embed_dim, cfg.codec_hidden, seed=cfg.seed + 1)
        codec_context = MlpCodec.create(k, embed_dim, cfg.codec_hidden, seed=cfg.seed + 2)
    else:
        codec_region, codec_context = codecs
    params_region = codec_region.params64()
    params_context = codec_context.params64()

    feat_params = [feat_region, feat_context]
    feat_lrs = [cfg.learning_rate, cfg.learning_rate]
    if cfg.train_opacity:
        feat_params.append(opacities)
        feat_lrs.append(cfg.learning_rate)
    opt_feat = Adam(feat_params, feat_lrs, cfg.adam_betas, cfg.adam_eps)
    opt_codec = Adam(params_region + params_context, cfg.codec_learning_rate,
                     cfg.adam_betas, cfg.adam_eps)

    # Geometry is constant: project and tile-bin each view once.
    prepared: list[PreparedView] = [prepare_view(field, v.camera) for v in views]

    history = []
    excluded_total = 0
    for it in range(cfg.iterations):
        picked = _step_views(views, it)
        step_loss = 0.0
        g_fr = np.zeros((n, k))
        g_fc = np.zeros((n, k))
        g_op = np.zeros(n)
        g_cr = [np.zeros_like(p) for p in params_region]
        g_cc = [np.zeros_like(p) for p in params_context]
        for vi in picked:
            view = views[vi]
            prep = prepared[vi]
            alphas = opacities[prep.source_index]
            if cfg.train_opacity:
                prep.alphas = alphas
            channels = np.concatenate(
                [feat_region[prep.source_index], feat_context[prep.source_index]],
                axis=1)
            out, _, _, _, cache = composite_prepared(
                prep, channels, dtype=np.float64, compute_cache=True)
            rend_region = out[:, :, :k]
            rend_context = out[:, :, k:]

            mask = view.loss_mask
            n_masked = int(mask.sum())
            if n_masked == 0:
                continue
            scale = 1.0 / n_masked
            ups = {}
            for branch, codec, params, rend, target, g_codec in (
                ("region", codec_region, params_region, rend_region,
                 view.target_region.data, g_cr),
                ("context", codec_context, params_context, rend_context,
                 view.target_context.data, g_cc),
            ):
                decoded, ccache = decode_with_cache(codec, rend[mask], params=params)
                losses, d_decoded, n_excl = cosine_loss_map(decoded, target[mask])
                step_loss += float(losses.sum()) * scale
                excluded_total += n_excl
                pgrads, d_in = codec_backward(codec, ccache, d_decoded * scale,
                                              params=params)
                for acc, g in zip(g_codec, pgrads):
                    acc += g
                up = np.zeros((view.camera.height, view.camera.width, k))
                up[mask] = d_in
                ups[branch] = up
            fgrad = render_backward(field, cache, ups["region"], ups["context"],
                                    include_opacity=cfg.train_opacity)
            g_fr += fgrad.d_feat_region
            g_fc += fgrad.d_feat_context
            if cfg.train_opacity:
                g_op += fgrad.d_opacity

        inv = 1.0 / len(picked)
        step_loss *= inv
        if not np.isfinite(step_loss):
            raise DivergenceError("semantic loss went non-finite", iteration=it)
        feat_grads = [g_fr * inv, g_fc * inv]
        if cfg.train_opacity:
            feat_grads.append(g_op * inv)
        opt_feat.step(feat_grads)
        opt_codec.step([g * inv for g in g_cr] + [g * inv for g in g_cc])
        if cfg.train_opacity:
            np.clip(opacities, 0.0, 1.0, out=opacities)
        history.append((it, step_loss))
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("fit iteration %d: loss %.6f", it, step_loss)

    result_field = field.replace(
        feat_region=feat_region.astype(np.float32),
        feat_context=feat_context.astype(np.float32),
        opacities=(opacities.astype(np.float32) if cfg.train_opacity
                   else field.opacities),
    )
    return FitResult(
        field=result_field,
        codec_region=MlpCodec.from_params(params_region),
        codec_context=MlpCodec.from_params(params_context),
        history=history,
        excluded_pixels=excluded_total,
    )
