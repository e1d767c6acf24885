"""Open-vocabulary querying over rendered semantic feature maps.

Relevancy follows the softmax-pair form: the score of a feature against a
query embedding is minimized over canonical embeddings,
``min_i exp(f.q) / (exp(f.q) + exp(f.c_i))``, mapping affinity into (0, 1).
Branch selection compares the masked maxima of the two regularized maps
(ties go to the region branch). Segmentation thresholds the selected map;
localization takes its masked argmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import NORM_FLOOR, decode
from .errors import ShapeError, UsageError

STRATEGIES = ("ours", "mean", "fixed_region", "fixed_context", "upper_bound")


@dataclass
class EmbeddingDictionary:
    """Named unit-norm embeddings plus canonical-phrase stand-ins."""

    entries: dict  # name -> (D,) unit vector
    canonical: np.ndarray  # (M, D) unit vectors

    def __post_init__(self):
        self.canonical = np.atleast_2d(np.asarray(self.canonical, np.float64))
        if self.canonical.shape[0] == 0:
            raise UsageError("dictionary needs at least one canonical vector")
        d = self.canonical.shape[1]
        self.entries = {k: np.asarray(v, np.float64) for k, v in self.entries.items()}
        for name, vec in self.entries.items():
            if vec.shape != (d,):
                raise ShapeError(f"dictionary entry {name!r}: expected dim {d}")
            if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
                raise ShapeError(f"dictionary entry {name!r} is not unit-norm")
        norms = np.linalg.norm(self.canonical, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ShapeError("canonical vectors must be unit-norm")

    @property
    def dim(self) -> int:
        return self.canonical.shape[1]

    def class_names(self) -> list:
        return list(self.entries.keys())

    def class_matrix(self) -> np.ndarray:
        return np.stack([self.entries[k] for k in self.entries])


@dataclass
class QueryResult:
    relevancy_region: np.ndarray  # (H, W) in (0, 1)
    relevancy_context: np.ndarray
    selected_branch: str  # "region" | "context"
    mask: np.ndarray  # (H, W) bool
    argmax_pixel: tuple | None  # (row, col)
    max_score: float
    empty: bool = False


def relevancy_score(feat: np.ndarray, query: np.ndarray, canon: np.ndarray) -> float:
    """Regularized relevancy of one feature vector; see module docstring."""
    return float(relevancy_map(np.asarray(feat, np.float64)[None], query, canon)[0])


def relevancy_map(feats: np.ndarray, query: np.ndarray, canon: np.ndarray) -> np.ndarray:
    """Vectorized relevancy over (..., D) features; result in (0, 1).

    Features are normalized here (1e-8 norm floor); query and canonical
    vectors are the caller's responsibility (unit-norm in a dictionary).
    """
    canon = np.atleast_2d(np.asarray(canon, np.float64))
    if canon.shape[0] == 0:
        raise UsageError("relevancy needs a non-empty canonical set")
    feats = np.asarray(feats, np.float64)
    query = np.asarray(query, np.float64)
    if feats.shape[-1] != query.shape[-1] or canon.shape[1] != query.shape[-1]:
        raise ShapeError("relevancy: embedding dimensions disagree")
    lead = feats.shape[:-1]
    flat = feats.reshape(-1, feats.shape[-1])
    norms = np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), NORM_FLOOR)
    unit = flat / norms
    dots_q = unit @ query
    worst_canon = (unit @ canon.T).max(axis=1)
    # min_i sigmoid(x - y_i) == sigmoid(x - max_i y_i); sigmoid is stable as
    # written because the argument is bounded by cosine ranges.
    score = 1.0 / (1.0 + np.exp(-(dots_q - worst_canon)))
    return score.reshape(lead)


def decode_branches(rendered, codecs):
    """Decode both rendered K-maps to unit-normalized D-maps."""
    codec_region, codec_context = codecs
    dec_r = decode(codec_region, rendered.feat_region.data, normalize=True)
    dec_c = decode(codec_context, rendered.feat_context.data, normalize=True)
    return dec_r, dec_c


def query_view(rendered, codecs, dictionary: EmbeddingDictionary, query_name: str,
               threshold: float = 0.5, loss_mask: np.ndarray | None = None) -> QueryResult:
    """Full per-view query: decode, score both branches, select, segment, localize."""
    if query_name not in dictionary.entries:
        raise KeyError(f"unknown query {query_name!r}")
    if not (0.0 < threshold <= 1.0):
        raise UsageError(f"threshold must lie in (0, 1], got {threshold}")
    dec_r, dec_c = decode_branches(rendered, codecs)
    query = dictionary.entries[query_name]
    map_r = relevancy_map(dec_r, query, dictionary.canonical)
    map_c = relevancy_map(dec_c, query, dictionary.canonical)
    if loss_mask is None:
        loss_mask = np.ones(map_r.shape, bool)
    loss_mask = np.asarray(loss_mask, bool)
    if loss_mask.shape != map_r.shape:
        raise ShapeError("query_view: loss mask shape mismatch")

    if not loss_mask.any():
        return QueryResult(relevancy_region=map_r, relevancy_context=map_c,
                           selected_branch="region",
                           mask=np.zeros_like(loss_mask), argmax_pixel=None,
                           max_score=float("nan"), empty=True)

    max_r = float(map_r[loss_mask].max())
    max_c = float(map_c[loss_mask].max())
    branch = "region" if max_r >= max_c else "context"
    selected = map_r if branch == "region" else map_c
    mask = (selected >= threshold) & loss_mask
    masked = np.where(loss_mask, selected, -np.inf)
    flat_idx = int(np.argmax(masked))  # row-major first on exact ties
    argmax_pixel = (flat_idx // selected.shape[1], flat_idx % selected.shape[1])
    return QueryResult(relevancy_region=map_r, relevancy_context=map_c,
                       selected_branch=branch, mask=mask,
                       argmax_pixel=argmax_pixel,
                       max_score=float(selected[argmax_pixel]))


def select_branch_strategy(map_region: np.ndarray, map_context: np.ndarray,
                           strategy: str, threshold: float = 0.5,
                           loss_mask: np.ndarray | None = None,
                           gt: np.ndarray | None = None):
    """Reduce the two relevancy maps to one effective map + branch label.

    Strategies: ``ours`` takes the branch with higher masked maximum; ``mean``
    averages the maps pixelwise; ``fixed_*`` force one branch; ``upper_bound``
    picks the branch whose thresholded mask has higher IoU against ``gt``.
    """
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    map_region = np.asarray(map_region, np.float64)
    map_context = np.asarray(map_context, np.float64)
    if map_region.shape != map_context.shape:
        raise ShapeError("strategy: relevancy maps disagree in shape")
    if loss_mask is None:
        loss_mask = np.ones(map_region.shape, bool)

    if strategy == "fixed_region":
        return map_region, "region"
    if strategy == "fixed_context":
        return map_context, "context"
    if strategy == "mean":
        return 0.5 * (map_region + map_context), "mean"
    if strategy == "ours":
        if not loss_mask.any():
            return map_region, "region"
        max_r = float(map_region[loss_mask].max())
        max_c = float(map_context[loss_mask].max())
        return (map_region, "region") if max_r >= max_c else (map_context, "context")
    # upper_bound
    if gt is None:
        raise UsageError("upper_bound strategy requires a ground-truth mask")
    from .evaluation import iou

    gt = np.asarray(gt, bool)
    iou_r = iou((map_region >= threshold) & loss_mask, gt, loss_mask)
    iou_c = iou((map_context >= threshold) & loss_mask, gt, loss_mask)
    return (map_region, "region") if iou_r >= iou_c else (map_context, "context")


def pca_visualize(feats: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project (H, W, D) features to an RGB image via 3-component PCA.

    PCA runs over masked pixels (mean-centered; eigen-decomposition of the
    DxD covariance or of the Gram matrix, whichever is smaller). Projections
    are min-max scaled per channel to [0, 1]; unmasked pixels are black.
    Rank-deficient inputs pad the missing channels with zeros. Principal
    directions are oriented so their largest-magnitude loading is positive,
    which makes the output reproducible.
    """
    feats = np.asarray(feats, np.float64)
    if feats.ndim != 3:
        raise ShapeError(f"pca_visualize: expected (H, W, D), got {feats.shape}")
    h, w, d = feats.shape
    if mask is None:
        mask = np.ones((h, w), bool)
    mask = np.asarray(mask, bool)
    pts = feats[mask]
    if pts.shape[0] < 3:
        raise UsageError("pca_visualize needs at least 3 masked pixels")
    centered = pts - pts.mean(axis=0)

    if d <= pts.shape[0]:
        cov = centered.T @ centered
        eigval, eigvec = np.linalg.eigh(cov)
        order = np.argsort(eigval)[::-1][:3]
        components = eigvec[:, order].T
        strengths = eigval[order]
    else:
        gram = centered @ centered.T
        eigval, eigvec = np.linalg.eigh(gram)
        order = np.argsort(eigval)[::-1][:3]
        strengths = eigval[order]
        components = []
        for i, o in enumerate(order):
            v = centered.T @ eigvec[:, o]
            n = np.linalg.norm(v)
            components.append(v / n if n > 1e-12 else np.zeros(d))
        components = np.stack(components)
        components = components * (strengths > 1e-12)[:, None]

    out = np.zeros((h, w, 3))
    scale0 = max(float(strengths[0]), 0.0)
    for c in range(min(3, len(strengths))):
        if strengths[c] <= 1e-12 * max(scale0, 1e-30) or strengths[c] <= 0:
            continue  # rank-deficient channel stays zero
        comp = components[c]
        # Sign convention: largest-|loading| coordinate is positive.
        j = int(np.argmax(np.abs(comp)))
        if comp[j] < 0:
            comp = -comp
        proj = centered @ comp
        lo, hi = float(proj.min()), float(proj.max())
        if hi - lo > 1e-12:
            out[:, :, c][mask] = (proj - lo) / (hi - lo)
    return out
