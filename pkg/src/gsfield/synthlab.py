"""Synthetic scenes for desk-scale experiments: labeled Gaussian clusters,
ring cameras, ground-truth label maps, orthogonal embedding dictionaries,
and both supervision styles (region-specific and context-aware) with seeded
region-level corruption.

Every generator is a pure function of its spec and seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Camera, FeatureImage, GaussianField, SH_C0
from .errors import PlacementError, ShapeError, UsageError
from .query import EmbeddingDictionary
from .raster import composite_prepared, prepare_view
from .distill import SupervisionView

GT_ALPHA_TAU = 0.5
DEFAULT_AMBIENT = 0.35

_PALETTE = np.array([
    [0.85, 0.25, 0.25], [0.25, 0.65, 0.30], [0.25, 0.40, 0.85],
    [0.90, 0.75, 0.20], [0.65, 0.30, 0.75], [0.20, 0.75, 0.75],
    [0.90, 0.50, 0.20], [0.50, 0.50, 0.50],
])


@dataclass(frozen=True)
class SceneSpec:
    classes: tuple  # class names, label k = index + 1
    clusters_per_class: int = 2
    gaussians_per_cluster: int = 40
    extent: float = 4.0
    K: int = 16
    D: int = 64
    seed: int = 0
    n_cameras: int = 6
    image_size: int = 64
    n_canonical: int = 4
    # Azimuth span of the camera ring. The full circle suits many-view
    # suites; sparse-pair suites use a narrow arc so held-out views do not
    # stare at unsupervised back sides of the clusters.
    camera_arc: float = 2.0 * np.pi

    def __post_init__(self):
        if not self.classes:
            raise UsageError("scene needs at least one class")
        if min(self.clusters_per_class, self.gaussians_per_cluster, self.K,
               self.D, self.n_cameras, self.image_size) <= 0:
            raise UsageError("scene counts must be positive")
        if self.D < len(self.classes):
            raise UsageError("D must be at least the number of classes")


@dataclass
class Scene:
    spec: SceneSpec
    field: GaussianField
    cameras: list  # [Camera]
    labels: list  # [(H, W) int32], 0 = unlabeled
    class_of_gaussian: np.ndarray  # (N,) int32 labels, 1-based
    cluster_of_gaussian: np.ndarray  # (N,) int32 cluster ids

    def class_id(self, name: str) -> int:
        return self.spec.classes.index(name) + 1


def _place_clusters(rng, n_clusters: int, extent: float, min_sep: float) -> np.ndarray:
    centers = []
    for _ in range(n_clusters):
        for attempt in range(1000):
            c = rng.uniform(-extent / 2, extent / 2, size=3)
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                centers.append(c)
                break
        else:
            raise PlacementError(
                f"could not place {n_clusters} clusters with separation "
                f"{min_sep:.3f} in extent {extent:.3f} after 1000 attempts")
    return np.array(centers)


def _ring_cameras(rng, spec: SceneSpec) -> list:
    distance = 2.1 * spec.extent
    f = 0.95 * spec.image_size
    full_circle = abs(spec.camera_arc - 2.0 * np.pi) < 1e-9
    step = spec.camera_arc / (spec.n_cameras if full_circle
                              else max(spec.n_cameras - 1, 1))
    cams = []
    for i in range(spec.n_cameras):
        azim = step * i + rng.uniform(-0.08, 0.08)
        elev = np.deg2rad(rng.uniform(12.0, 30.0))
        eye = distance * np.array([
            np.cos(elev) * np.cos(azim),
            np.sin(elev),
            np.cos(elev) * np.sin(azim),
        ])
        target = rng.uniform(-0.05, 0.05, size=3) * spec.extent
        cams.append(Camera.look_at(
            eye=eye, target=target, fx=f, width=spec.image_size,
            height=spec.image_size, near=0.05 * spec.extent,
            far=20.0 * spec.extent))
    return cams


def render_labels(field: GaussianField, cam: Camera,
                  class_of_gaussian: np.ndarray, n_classes: int) -> np.ndarray:
    """Ground-truth label map by compositing class one-hot indicators.

    A pixel gets the argmax class of the composited one-hot weights, or 0
    where accumulated alpha stays below the visibility threshold. Using the
    rasterizer itself keeps labels exactly consistent with what it renders.
    """
    prep = prepare_view(field, cam)
    onehot = np.zeros((len(prep.source_index), n_classes))
    cls = class_of_gaussian[prep.source_index]
    onehot[np.arange(len(cls)), cls - 1] = 1.0
    out, alpha, _, _, _ = composite_prepared(prep, onehot, dtype=np.float64)
    labels = np.argmax(out, axis=2).astype(np.int32) + 1
    labels[alpha < GT_ALPHA_TAU] = 0
    return labels


def make_scene(spec: SceneSpec) -> Scene:
    """Build the field, ring cameras, and per-camera ground-truth labels."""
    rng = np.random.default_rng([spec.seed, 1])
    n_classes = len(spec.classes)
    n_clusters = n_classes * spec.clusters_per_class
    cluster_radius = spec.extent / 7.0
    centers = _place_clusters(rng, n_clusters, spec.extent, 2.6 * cluster_radius)

    n = n_clusters * spec.gaussians_per_cluster
    points = np.empty((n, 3))
    scales = np.empty((n, 3))
    class_of = np.empty(n, np.int32)
    cluster_of = np.empty(n, np.int32)
    for ci in range(n_clusters):
        sl = slice(ci * spec.gaussians_per_cluster, (ci + 1) * spec.gaussians_per_cluster)
        points[sl] = centers[ci] + rng.normal(0.0, cluster_radius / 2.4,
                                              size=(spec.gaussians_per_cluster, 3))
        scales[sl] = np.exp(rng.normal(np.log(cluster_radius / 4.5), 0.25,
                                       size=(spec.gaussians_per_cluster, 3)))
        class_of[sl] = ci % n_classes + 1
        cluster_of[sl] = ci

    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.65, 0.95, size=n)
    colors = _PALETTE[(class_of - 1) % len(_PALETTE)] + rng.uniform(-0.04, 0.04, (n, 3))
    sh = (colors / SH_C0)[:, :, None]

    field = GaussianField(
        points=points, offsets=np.zeros((n, 3)), rotations=quats, scales=scales,
        opacities=opacities, sh=sh,
        feat_region=np.zeros((n, spec.K)), feat_context=np.zeros((n, spec.K)),
        sh_degree=0,
        meta={"generator": "synthlab", "seed": str(spec.seed)},
    )
    cameras = _ring_cameras(rng, spec)
    labels = [render_labels(field, cam, class_of, n_classes) for cam in cameras]
    return Scene(spec=spec, field=field, cameras=cameras, labels=labels,
                 class_of_gaussian=class_of, cluster_of_gaussian=cluster_of)


def make_embeddings(classes, d: int, seed: int, n_canonical: int = 4) -> EmbeddingDictionary:
    """Seeded random unit vectors, Gram-Schmidt orthogonalized.

    Class embeddings are pairwise orthogonal and the canonical vectors are
    orthogonal to every class vector (|dot| <= 1e-6), standing in for text
    embeddings at desk scale.
    """
    classes = list(classes)
    total = len(classes) + n_canonical
    if d < total:
        raise UsageError(f"make_embeddings: D={d} too small for {len(classes)} "
                         f"classes + {n_canonical} canonical vectors")
    rng = np.random.default_rng([seed, 2])
    basis = []
    while len(basis) < total:
        v = rng.normal(size=d)
        for b in basis:
            v -= (v @ b) * b
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            basis.append(v / norm)
    entries = {name: basis[i] for i, name in enumerate(classes)}
    canonical = np.stack(basis[len(classes):])
    return EmbeddingDictionary(entries=entries, canonical=canonical)


def _class_matrix(dictionary: EmbeddingDictionary) -> np.ndarray:
    return dictionary.class_matrix()


def class_targets(dictionary: EmbeddingDictionary, ambient: float = 0.0) -> np.ndarray:
    """Per-class supervision vectors, optionally mixed with ambient context.

    ``ambient`` blends the normalized mean of the canonical vectors into each
    class embedding (renormalized). Real extracted features always correlate
    with generic canonical phrases; without this shared component, every
    wrong-class pixel would score exactly 0.5 and threshold masks at the 0.5
    default would be meaningless. Zero keeps the exact class embeddings.
    """
    mat = _class_matrix(dictionary)
    if ambient == 0.0:
        return mat
    cbar = dictionary.canonical.mean(axis=0)
    cbar = cbar / np.linalg.norm(cbar)
    mixed = mat + ambient * cbar[None, :]
    return mixed / np.linalg.norm(mixed, axis=1, keepdims=True)


def region_supervision(labels: np.ndarray, dictionary: EmbeddingDictionary,
                       ambient: float = 0.0) -> FeatureImage:
    """Constant class target inside every labeled region, zero elsewhere.

    With the default ``ambient=0`` the target is the class embedding exactly.
    Zero vectors at unlabeled pixels are excluded from the cosine loss by the
    zero-target rule.
    """
    labels = np.asarray(labels)
    mat = class_targets(dictionary, ambient)
    if labels.max(initial=0) > len(mat):
        raise ShapeError("labels reference classes missing from the dictionary")
    lut = np.concatenate([np.zeros((1, mat.shape[1])), mat], axis=0)
    data = lut[labels].astype(np.float32)
    return FeatureImage(data=data, mask=labels > 0)


def label_regions(labels: np.ndarray):
    """Connected components of constant nonzero label (4-connectivity).

    Returns a list of (class_id, pixel_mask) in deterministic order: class
    ascending, then component id ascending.
    """
    labels = np.asarray(labels)
    regions = []
    for k in range(1, int(labels.max(initial=0)) + 1):
        comp, n = ndimage.label(labels == k)
        for j in range(1, n + 1):
            regions.append((k, comp == j))
    return regions


def context_supervision(labels: np.ndarray, dictionary: EmbeddingDictionary,
                        blur_radius: int = 2, ambient: float = 0.0) -> FeatureImage:
    """Context-bearing supervision: blur a dense embedding map, then pool it
    back to constancy within each labeled region.

    The box blur simulates a low-resolution dense feature map that leaks
    neighborhood context; pooling within regions mirrors mask-level feature
    aggregation. Radius 0 degenerates to ``region_supervision`` exactly.
    """
    if blur_radius < 0:
        raise UsageError("blur_radius must be >= 0")
    dense = region_supervision(labels, dictionary, ambient)
    if blur_radius == 0:
        return dense
    size = 2 * blur_radius + 1
    blurred = ndimage.uniform_filter(dense.data.astype(np.float64),
                                     size=(size, size, 1), mode="constant")
    data = np.zeros_like(dense.data, dtype=np.float64)
    for _cls, mask in label_regions(labels):
        data[mask] = blurred[mask].mean(axis=0)
    return FeatureImage(data=data.astype(np.float32), mask=dense.mask)


def corrupt_supervision(feats: FeatureImage, labels: np.ndarray, rate: float,
                        dictionary: EmbeddingDictionary, seed: int,
                        ambient: float = 0.0) -> FeatureImage:
    """Replace a seeded fraction of whole labeled regions with a wrong class
    embedding (floor rule on the region count).

    Mirrors the realistic failure mode of an entire segmented region getting
    an incorrect embedding, rather than salt-and-pepper pixel noise.
    """
    if not (0.0 <= rate <= 1.0):
        raise UsageError(f"corruption rate must lie in [0, 1], got {rate}")
    labels = np.asarray(labels)
    if feats.data.shape[:2] != labels.shape:
        raise ShapeError("corrupt_supervision: labels do not match features")
    regions = label_regions(labels)
    n_corrupt = int(np.floor(rate * len(regions)))
    data = feats.data.copy()
    if n_corrupt == 0:
        return FeatureImage(data=data, mask=feats.mask)
    rng = np.random.default_rng([seed, 3])
    chosen = rng.choice(len(regions), size=n_corrupt, replace=False)
    targets = class_targets(dictionary, ambient)
    n_classes = len(targets)
    for ri in np.sort(chosen):
        cls, mask = regions[ri]
        others = [i + 1 for i in range(n_classes) if i + 1 != cls]
        if not others:
            continue  # single-class dictionary: nothing different to swap in
        wrong = int(rng.choice(others))
        data[mask] = targets[wrong - 1].astype(np.float32)
    return FeatureImage(data=data, mask=feats.mask)


def make_supervision_view(scene: Scene, view_index: int,
                          dictionary: EmbeddingDictionary, blur_radius: int = 2,
                          corrupt_region_rate: float = 0.0,
                          corrupt_context_rate: float = 0.0,
                          corrupt_seed: int = 0,
                          ambient: float = DEFAULT_AMBIENT) -> SupervisionView:
    """Bundle one camera's supervision: both branches + label-derived mask."""
    labels = scene.labels[view_index]
    region = region_supervision(labels, dictionary, ambient)
    context = context_supervision(labels, dictionary, blur_radius, ambient)
    if corrupt_region_rate > 0:
        region = corrupt_supervision(region, labels, corrupt_region_rate,
                                     dictionary, corrupt_seed, ambient)
    if corrupt_context_rate > 0:
        context = corrupt_supervision(context, labels, corrupt_context_rate,
                                      dictionary, corrupt_seed + 1000, ambient)
    return SupervisionView(camera=scene.cameras[view_index],
                           target_region=region, target_context=context,
                           loss_mask=labels > 0)
