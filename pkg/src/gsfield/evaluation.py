"""Metrics and ablation harness: loss-masked IoU / localization / PSNR,
scene evaluation, strategy comparison with hit-rate, threshold and K sweeps.

All metrics are computed after applying the loss mask, excluding invisible
regions. Aggregates are unweighted means over records.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianField
from .errors import ShapeError, UsageError
from .query import (EmbeddingDictionary, decode_branches, relevancy_map,
                    select_branch_strategy)
from .raster import RenderOptions, loss_mask_from_alpha, render

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0


@dataclass
class EvalRecord:
    scene_id: str
    query: str
    iou: float
    localized: bool
    branch: str
    strategy: str
    threshold: float


@dataclass
class EvalAggregates:
    miou: float | None
    localization_accuracy: float | None
    n_records: int

    @property
    def defined(self) -> bool:
        return self.n_records > 0


def iou(pred: np.ndarray, gt: np.ndarray, loss_mask: np.ndarray) -> float:
    """Masked intersection-over-union; an empty masked union counts as 1.0
    (both methods agree nothing is present under the mask)."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    loss_mask = np.asarray(loss_mask, bool)
    if not (pred.shape == gt.shape == loss_mask.shape):
        raise ShapeError(
            f"iou: shapes disagree {pred.shape} / {gt.shape} / {loss_mask.shape}")
    union = int(((pred | gt) & loss_mask).sum())
    if union == 0:
        return 1.0
    inter = int((pred & gt & loss_mask).sum())
    return inter / union


def localization_accuracy(argmax_pixel, gt: np.ndarray) -> bool:
    """True iff the highest-response pixel falls inside the ground-truth mask."""
    gt = np.asarray(gt, bool)
    if argmax_pixel is None:
        return False
    r, c = argmax_pixel
    if not (0 <= r < gt.shape[0] and 0 <= c < gt.shape[1]):
        raise UsageError(f"argmax pixel {argmax_pixel} outside image {gt.shape}")
    return bool(gt[r, c])


def psnr(img_a: np.ndarray, img_b: np.ndarray, loss_mask: np.ndarray) -> float:
    """Masked PSNR in dB for [0, 1] images, capped at 99 dB for identical inputs."""
    a = np.asarray(img_a, np.float64)
    b = np.asarray(img_b, np.float64)
    loss_mask = np.asarray(loss_mask, bool)
    if a.shape != b.shape or a.shape[:2] != loss_mask.shape:
        raise ShapeError(f"psnr: shapes disagree {a.shape} / {b.shape} / {loss_mask.shape}")
    if not loss_mask.any():
        raise UsageError("psnr: empty loss mask")
    mse = float(np.mean((a[loss_mask] - b[loss_mask]) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def evaluate_scene(field: GaussianField, codecs, dictionary: EmbeddingDictionary,
                   views, queries, threshold: float = 0.5, strategy: str = "ours",
                   scene_id: str = "scene", alpha_mask_tau: float = 0.5,
                   workers: int = 1):
    """Render each evaluation view once and score every query on it.

    ``views`` is a sequence of (Camera, label_map) pairs; ``queries`` is a
    sequence of (name, label_id). The per-view loss mask comes from alpha
    thresholding, matching how the ground-truth labeler marks visibility.
    Returns (records, aggregates).
    """
    records = []
    for vi, (cam, labels) in enumerate(views):
        labels = np.asarray(labels)
        rendered = render(field, cam, RenderOptions(workers=workers))
        loss_mask = loss_mask_from_alpha(rendered.alpha, alpha_mask_tau)
        dec_r, dec_c = decode_branches(rendered, codecs)
        view_id = f"{scene_id}/v{vi}"
        for name, label_id in queries:
            if name not in dictionary.entries:
                raise KeyError(f"unknown query {name!r}")
            gt = (labels == label_id)
            if not gt.any():
                logger.warning("evaluate_scene: query %r has no ground truth in "
                               "view %s, skipped", name, view_id)
                continue
            qvec = dictionary.entries[name]
            map_r = relevancy_map(dec_r, qvec, dictionary.canonical)
            map_c = relevancy_map(dec_c, qvec, dictionary.canonical)
            eff, branch = select_branch_strategy(
                map_r, map_c, strategy, threshold=threshold,
                loss_mask=loss_mask, gt=gt)
            pred = (eff >= threshold) & loss_mask
            masked = np.where(loss_mask, eff, -np.inf)
            flat = int(np.argmax(masked))
            argmax_pixel = (flat // eff.shape[1], flat % eff.shape[1])
            records.append(EvalRecord(
                scene_id=view_id, query=name,
                iou=iou(pred, gt, loss_mask),
                localized=localization_accuracy(argmax_pixel, gt),
                branch=branch, strategy=strategy, threshold=threshold))
    return records, aggregate(records)


def aggregate(records) -> EvalAggregates:
    if not records:
        return EvalAggregates(miou=None, localization_accuracy=None, n_records=0)
    return EvalAggregates(
        miou=float(np.mean([r.iou for r in records])),
        localization_accuracy=float(np.mean([r.localized for r in records])),
        n_records=len(records),
    )


@dataclass
class StrategyReport:
    rows: list  # (strategy, miou, la, n)
    hit_rate: float | None  # agreement of ours with upper_bound on gapped queries
    n_gapped: int

    def format_table(self) -> str:
        lines = [f"{'strategy':<16}{'mIoU':>8}{'LA':>8}{'n':>6}"]
        for strategy, miou, la, n in self.rows:
            lines.append(f"{strategy:<16}{miou:>8.3f}{la:>8.3f}{n:>6}")
        if self.hit_rate is None:
            lines.append(f"hit-rate: N/A (no queries with branch-IoU gap > 0.05)")
        else:
            lines.append(f"hit-rate: {self.hit_rate:.1%} over {self.n_gapped} gapped queries")
        return "\n".join(lines)


def strategy_report(records_by_strategy: dict, gap: float = 0.05) -> StrategyReport:
    """Per-strategy aggregates plus the branch-selection hit-rate.

    Hit-rate: among (scene, query) pairs whose fixed-branch IoUs differ by
    more than ``gap``, the fraction where ``ours`` picked the same branch as
    ``upper_bound``. Requires records for ours, fixed_region, fixed_context,
    and upper_bound over identical query sets.
    """
    needed = ("ours", "fixed_region", "fixed_context", "upper_bound")
    for s in needed:
        if s not in records_by_strategy:
            raise UsageError(f"strategy_report requires records for {s!r}")

    def keyed(recs):
        return {(r.scene_id, r.query): r for r in recs}

    maps = {s: keyed(records_by_strategy[s]) for s in records_by_strategy}
    keys = set(maps["ours"])
    for s in needed:
        if set(maps[s]) != keys:
            raise UsageError(f"strategy_report: record sets disagree for {s!r}")

    rows = []
    for s, recs in records_by_strategy.items():
        agg = aggregate(recs)
        rows.append((s, agg.miou, agg.localization_accuracy, agg.n_records))

    hits = 0
    n_gapped = 0
    for key in sorted(keys):
        iou_r = maps["fixed_region"][key].iou
        iou_c = maps["fixed_context"][key].iou
        if abs(iou_r - iou_c) <= gap:
            continue
        n_gapped += 1
        if maps["ours"][key].branch == maps["upper_bound"][key].branch:
            hits += 1
    hit_rate = (hits / n_gapped) if n_gapped else None
    return StrategyReport(rows=rows, hit_rate=hit_rate, n_gapped=n_gapped)


# ---------------------------------------------------------------------------
# End-to-end pipeline + sweeps
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """One synth -> fit -> evaluate run, fully seeded."""

    scene: "SceneSpec"
    fit: "FitConfig"
    n_train_views: int = 4
    blur_radius: int = 2
    threshold: float = 0.5
    strategy: str = "ours"
    corrupt_region_rate: float = 0.0
    corrupt_context_rate: float = 0.0
    ambient: float = 0.35  # shared canonical-direction mass in synth supervision


@dataclass
class PipelineResult:
    scene: "Scene"
    dictionary: EmbeddingDictionary
    field: GaussianField
    codecs: tuple
    records: list
    aggregates: EvalAggregates
    history: list


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    from .distill import fit_semantics
    from .synthlab import make_embeddings, make_scene, make_supervision_view

    scene = make_scene(cfg.scene)
    dictionary = make_embeddings(cfg.scene.classes, cfg.scene.D, cfg.scene.seed,
                                 n_canonical=cfg.scene.n_canonical)
    if cfg.n_train_views >= len(scene.cameras):
        raise UsageError("pipeline needs at least one held-out evaluation view")
    views = [
        make_supervision_view(
            scene, i, dictionary, blur_radius=cfg.blur_radius,
            corrupt_region_rate=cfg.corrupt_region_rate,
            corrupt_context_rate=cfg.corrupt_context_rate,
            corrupt_seed=cfg.scene.seed * 1000 + i,
            ambient=cfg.ambient)
        for i in range(cfg.n_train_views)
    ]
    result = fit_semantics(scene.field, views, cfg.fit)
    codecs = (result.codec_region, result.codec_context)
    eval_views = [(scene.cameras[i], scene.labels[i])
                  for i in range(cfg.n_train_views, len(scene.cameras))]
    queries = [(name, i + 1) for i, name in enumerate(cfg.scene.classes)]
    records, aggregates = evaluate_scene(
        result.field, codecs, dictionary, eval_views, queries,
        threshold=cfg.threshold, strategy=cfg.strategy,
        scene_id=f"scene{cfg.scene.seed}")
    return PipelineResult(scene=scene, dictionary=dictionary, field=result.field,
                          codecs=codecs, records=records, aggregates=aggregates,
                          history=result.history)


SWEEP_AXES = ("threshold", "feat_dim")


def sweep(axis: str, values, cfg: PipelineConfig):
    """Ablation sweep rows for thresholds (one fit reused) or K (refit each).

    Returns a list of dict rows: axis, value, miou, la, n_records.
    """
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise UsageError("sweep needs at least one value")
    rows = []
    if axis == "threshold":
        base = run_pipeline(cfg)
        eval_views = [(base.scene.cameras[i], base.scene.labels[i])
                      for i in range(cfg.n_train_views, len(base.scene.cameras))]
        queries = [(name, i + 1) for i, name in enumerate(cfg.scene.classes)]
        for value in values:
            records, agg = evaluate_scene(
                base.field, base.codecs, base.dictionary, eval_views, queries,
                threshold=float(value), strategy=cfg.strategy,
                scene_id=f"scene{cfg.scene.seed}")
            rows.append({"axis": axis, "value": float(value), "miou": agg.miou,
                         "la": agg.localization_accuracy, "n_records": agg.n_records})
    else:
        for value in values:
            cfg_k = dataclasses.replace(
                cfg, scene=dataclasses.replace(cfg.scene, K=int(value)))
            result = run_pipeline(cfg_k)
            rows.append({"axis": axis, "value": int(value),
                         "miou": result.aggregates.miou,
                         "la": result.aggregates.localization_accuracy,
                         "n_records": result.aggregates.n_records})
    return rows
