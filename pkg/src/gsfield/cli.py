"""Single executable wiring all modules into reproducible pipelines.

Subcommands: synth | fit | render | query | eval | sweep | gradcheck | bench.
Every run writes a ``manifest.json`` next to its outputs recording the
subcommand, resolved flags, seed, tool version, input digests, and duration.

Exit codes: 0 ok, 1 usage, 2 format, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io
from .codec import MlpCodec
from .core import Camera, FeatureImage, GaussianField
from .distill import FitConfig, fit_semantics
from .errors import DivergenceError, FormatError, GsfieldError, UsageError
from .evaluation import (PipelineConfig, evaluate_scene, strategy_report, sweep)
from .grad import LinearLoss, grad_check
from .query import STRATEGIES, pca_visualize, query_view
from .raster import RenderOptions, loss_mask_from_alpha, render
from .synthlab import (DEFAULT_AMBIENT, SceneSpec, make_embeddings, make_scene,
                       make_supervision_view)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse errors to exit code 1
        raise UsageError(message)


def _write_png(path, array):
    from PIL import Image

    arr = np.asarray(array, np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    img = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(img).save(path)


def _write_manifest(out_dir: Path, subcommand: str, args: argparse.Namespace,
                    inputs: list, started: float) -> None:
    flags = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "subcommand": subcommand,
        "flags": {k: (list(v) if isinstance(v, tuple) else v) for k, v in flags.items()},
        "seed": flags.get("seed"),
        "tool_version": __version__,
        "input_digests": {str(p): io.file_digest(p) for p in inputs},
        "duration_seconds": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _write_csv(path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _scene_spec(args) -> SceneSpec:
    return SceneSpec(
        classes=tuple(args.classes), clusters_per_class=args.clusters_per_class,
        gaussians_per_cluster=args.gaussians_per_cluster, extent=args.extent,
        K=args.feat_dim, D=args.embed_dim, seed=args.seed,
        n_cameras=args.cameras, image_size=args.image_size,
        n_canonical=args.canonical)


def _load_scene_dir(scene_dir: Path):
    field = io.load_field(scene_dir / "field.gsem")
    dictionary = io.load_dictionary(scene_dir / "dictionary.json")
    cameras, labels = [], []
    i = 0
    while (scene_dir / f"cam_{i:02d}.json").exists():
        cameras.append(io.load_camera(scene_dir / f"cam_{i:02d}.json"))
        labels.append(io.load_label_map(scene_dir / f"labels_{i:02d}.glbl"))
        i += 1
    if not cameras:
        raise UsageError(f"no cameras found in scene directory {scene_dir}")
    return field, dictionary, cameras, labels


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    spec = _scene_spec(args)
    scene = make_scene(spec)
    dictionary = make_embeddings(spec.classes, spec.D, spec.seed, spec.n_canonical)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_field(scene.field, out / "field.gsem")
    io.save_dictionary(dictionary, out / "dictionary.json")
    for i, (cam, labels) in enumerate(zip(scene.cameras, scene.labels)):
        io.save_camera(cam, out / f"cam_{i:02d}.json")
        io.save_label_map(labels, out / f"labels_{i:02d}.glbl")
        view = make_supervision_view(scene, i, dictionary, blur_radius=args.blur_radius,
                                     ambient=args.ambient)
        io.save_feature_image(view.target_region, out / f"sup_region_{i:02d}.fmap")
        io.save_feature_image(view.target_context, out / f"sup_context_{i:02d}.fmap")
    _write_manifest(out, "synth", args, [], started)
    print(f"scene written to {out}: {len(scene.field)} gaussians, "
          f"{len(scene.cameras)} cameras")
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.time()
    scene_dir = Path(args.scene)
    field, dictionary, cameras, labels = _load_scene_dir(scene_dir)
    inputs = sorted(p for p in scene_dir.iterdir() if p.suffix in
                    (".gsem", ".json", ".glbl", ".fmap") and p.name != "manifest.json")
    n_train = min(args.train_views, len(cameras))
    views = []
    from .distill import SupervisionView

    for i in range(n_train):
        region = io.load_feature_image(scene_dir / f"sup_region_{i:02d}.fmap")
        context = io.load_feature_image(scene_dir / f"sup_context_{i:02d}.fmap")
        mask = region.mask if region.mask is not None else labels[i] > 0
        views.append(SupervisionView(camera=cameras[i], target_region=region,
                                     target_context=context, loss_mask=mask))
    cfg = FitConfig(iterations=args.iterations, learning_rate=args.learning_rate,
                    codec_learning_rate=args.codec_learning_rate,
                    adam_betas=(args.beta1, args.beta2), adam_eps=args.adam_eps,
                    seed=args.seed, train_opacity=args.train_opacity,
                    log_every=args.log_every)
    result = fit_semantics(field, views, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_field(result.field, out / "field.gsem")
    io.save_codec(result.codec_region, out / "codec_region.gmlp")
    io.save_codec(result.codec_context, out / "codec_context.gmlp")
    _write_csv(out / "loss.csv",
               [{"iteration": i, "loss": l} for i, l in result.history],
               ["iteration", "loss"])
    _write_manifest(out, "fit", args, inputs, started)
    last = result.history[-1][1] if result.history else float("nan")
    print(f"fitted {len(field)} gaussians over {n_train} views, "
          f"final loss {last:.6f}, outputs in {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    started = time.time()
    field = io.load_field(args.field)
    cam = io.load_camera(args.camera)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rendered = render(field, cam, RenderOptions(
        background=tuple(args.background), workers=args.threads))
    _write_png(out / "rgb.png", rendered.rgb.data)
    io.save_feature_image(rendered.feat_region, out / "feat_region.fmap")
    io.save_feature_image(rendered.feat_context, out / "feat_context.fmap")
    io.save_feature_image(FeatureImage(rendered.alpha[:, :, None]), out / "alpha.fmap")
    if args.pca:
        if not (args.codec_region and args.codec_context):
            raise UsageError("--pca needs --codec-region and --codec-context")
        codec = io.load_codec(args.codec_region if args.pca_branch == "region"
                              else args.codec_context)
        from .codec import decode

        decoded = decode(codec, rendered.feat_region.data if args.pca_branch == "region"
                         else rendered.feat_context.data)
        mask = loss_mask_from_alpha(rendered.alpha, args.alpha_tau)
        _write_png(out / "pca.png", pca_visualize(decoded, mask))
    _write_manifest(out, "render", args, [args.field, args.camera], started)
    print(f"rendered {cam.width}x{cam.height} view of {len(field)} gaussians to {out}")
    return EXIT_OK


def cmd_query(args) -> int:
    started = time.time()
    field = io.load_field(args.field)
    cam = io.load_camera(args.camera)
    codecs = (io.load_codec(args.codec_region), io.load_codec(args.codec_context))
    dictionary = io.load_dictionary(args.dict)
    rendered = render(field, cam, RenderOptions(workers=args.threads))
    loss_mask = loss_mask_from_alpha(rendered.alpha, args.alpha_tau)
    result = query_view(rendered, codecs, dictionary, args.text,
                        threshold=args.threshold, loss_mask=loss_mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_png(out / "mask.png", result.mask.astype(np.float64))
    io.save_feature_image(FeatureImage(result.relevancy_region[:, :, None]),
                          out / "relevancy_region.fmap")
    io.save_feature_image(FeatureImage(result.relevancy_context[:, :, None]),
                          out / "relevancy_context.fmap")
    summary = {
        "query": args.text,
        "threshold": args.threshold,
        "selected_branch": result.selected_branch,
        "argmax_pixel": list(result.argmax_pixel) if result.argmax_pixel else None,
        "max_score": result.max_score if np.isfinite(result.max_score) else None,
        "mask_pixels": int(result.mask.sum()),
        "empty": result.empty,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    _write_manifest(out, "query", args,
                    [args.field, args.camera, args.codec_region,
                     args.codec_context, args.dict], started)
    print(json.dumps(summary))
    return EXIT_OK


def _eval_records(args, strategy: str):
    scene_dir = Path(args.scene)
    field, dictionary, cameras, labels = _load_scene_dir(scene_dir)
    if args.field:
        field = io.load_field(args.field)
    codecs = (io.load_codec(args.codec_region), io.load_codec(args.codec_context))
    views = [(cameras[i], labels[i]) for i in range(args.skip_views, len(cameras))]
    names = dictionary.class_names()
    queries = [(name, i + 1) for i, name in enumerate(names)]
    return evaluate_scene(field, codecs, dictionary, views, queries,
                          threshold=args.threshold, strategy=strategy,
                          scene_id=scene_dir.name, workers=args.threads)


def cmd_eval(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.strategy == "all":
        by_strategy = {}
        rows = []
        for strategy in STRATEGIES:
            records, agg = _eval_records(args, strategy)
            by_strategy[strategy] = records
            rows += [dataclasses.asdict(r) for r in records]
        report = strategy_report(by_strategy)
        _write_csv(out / "strategies.csv",
                   [{"strategy": s, "miou": m, "la": l, "n": n}
                    for s, m, l, n in report.rows],
                   ["strategy", "miou", "la", "n"])
        print(report.format_table())
        records = by_strategy["ours"]
        agg = None
    else:
        records, agg = _eval_records(args, args.strategy)
        rows = [dataclasses.asdict(r) for r in records]
    _write_csv(out / "records.csv", rows,
               ["scene_id", "query", "iou", "localized", "branch", "strategy",
                "threshold"])
    if agg is not None:
        _write_csv(out / "aggregates.csv",
                   [{"miou": agg.miou, "la": agg.localization_accuracy,
                     "n_records": agg.n_records}],
                   ["miou", "la", "n_records"])
        print(f"mIoU {agg.miou:.4f}  LA {agg.localization_accuracy:.4f}  "
              f"({agg.n_records} records)")
    _write_manifest(out, "eval", args, [], started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    spec = _scene_spec(args)
    cfg = PipelineConfig(
        scene=spec,
        fit=FitConfig(iterations=args.iterations, seed=args.seed, log_every=0),
        n_train_views=args.train_views, blur_radius=args.blur_radius,
        threshold=args.threshold, strategy=args.strategy, ambient=args.ambient)
    values = [float(v) if args.axis == "threshold" else int(v) for v in args.values]
    rows = sweep(args.axis, values, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"sweep_{args.axis}.csv", rows,
               ["axis", "value", "miou", "la", "n_records"])
    _write_manifest(out, "sweep", args, [], started)
    for row in rows:
        print(row)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.time()
    rng = np.random.default_rng(args.seed)
    n, k = args.gaussians, args.feat_dim
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    field = GaussianField(
        points=rng.uniform(-1, 1, (n, 3)), offsets=rng.normal(0, 0.05, (n, 3)),
        rotations=quats, scales=np.exp(rng.normal(np.log(0.15), 0.2, (n, 3))),
        opacities=rng.uniform(0.5, 0.9, n), sh=rng.normal(0, 0.3, (n, 3, 1)),
        feat_region=rng.normal(0, 0.5, (n, k)),
        feat_context=rng.normal(0, 0.5, (n, k)), sh_degree=0)
    cam = Camera.look_at(eye=(0, 0.5, -4), target=(0, 0, 0), fx=args.size,
                         width=args.size, height=args.size, near=0.1, far=50)
    if args.loss == "linear":
        loss = LinearLoss(args.size, args.size, k, seed=args.seed + 1)
    else:
        from .distill import SemanticLoss, SupervisionView

        d = args.embed_dim
        codecs = (MlpCodec.create(k, d, seed=args.seed + 2),
                  MlpCodec.create(k, d, seed=args.seed + 3))
        target_r = rng.normal(size=(args.size, args.size, d)).astype(np.float32)
        target_c = rng.normal(size=(args.size, args.size, d)).astype(np.float32)
        view = SupervisionView(camera=cam, target_region=FeatureImage(target_r),
                               target_context=FeatureImage(target_c),
                               loss_mask=np.ones((args.size, args.size), bool))
        loss = SemanticLoss(codecs, view, field)
    report = grad_check(field, cam, loss, step=args.step, tolerance=args.tolerance,
                        max_coords=args.coords, seed=args.seed,
                        include_opacity=args.opacity)
    print(report.format_table())
    if args.out:
        out = Path(args.out)
        _write_manifest(out, "gradcheck", args, [], started)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _bench_field(n: int, k: int, seed: int) -> GaussianField:
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianField(
        points=rng.uniform(-2, 2, (n, 3)), offsets=np.zeros((n, 3)),
        rotations=quats, scales=np.exp(rng.normal(np.log(0.02), 0.3, (n, 3))),
        opacities=rng.uniform(0.3, 0.95, n), sh=rng.normal(0, 0.3, (n, 3, 1)),
        feat_region=rng.normal(0, 1, (n, k)).astype(np.float32),
        feat_context=rng.normal(0, 1, (n, k)).astype(np.float32), sh_degree=0)


def cmd_bench(args) -> int:
    started = time.time()
    cam = Camera.look_at(eye=(0, 0, -6), target=(0, 0, 0), fx=args.size,
                         width=args.size, height=args.size, near=0.1, far=100)
    rows = []
    for n in args.gaussians:
        field = _bench_field(int(n), args.feat_dim, args.seed)
        render(field, cam)  # warm the compile cache before timing
        baseline = None
        for workers in args.workers:
            t0 = time.perf_counter()
            for _ in range(args.repeats):
                out = render(field, cam, RenderOptions(workers=int(workers)))
            dt = (time.perf_counter() - t0) / args.repeats
            if baseline is None:
                baseline = out
            identical = (np.array_equal(out.feat_region.data, baseline.feat_region.data)
                         and np.array_equal(out.rgb.data, baseline.rgb.data))
            rows.append({"gaussians": int(n), "size": args.size,
                         "feat_dim": args.feat_dim, "workers": int(workers),
                         "render_ms": round(dt * 1000.0, 3),
                         "identical": identical})
    if args.fit_gaussians:
        from .synthlab import SceneSpec as SSpec

        spec = SSpec(classes=("a", "b", "c"), clusters_per_class=2,
                     gaussians_per_cluster=max(args.fit_gaussians // 6, 1),
                     K=args.feat_dim, D=32, seed=args.seed, n_cameras=5,
                     image_size=48)
        scene = make_scene(spec)
        emb = make_embeddings(spec.classes, spec.D, spec.seed, spec.n_canonical)
        views = [make_supervision_view(scene, i, emb) for i in range(4)]
        t0 = time.perf_counter()
        fit_semantics(scene.field, views, FitConfig(iterations=args.fit_iterations,
                                                    seed=args.seed, log_every=0))
        rows.append({"gaussians": len(scene.field), "size": 48,
                     "feat_dim": args.feat_dim, "workers": 1,
                     "fit_s": round(time.perf_counter() - t0, 3),
                     "fit_iterations": args.fit_iterations})
    header = sorted({k for row in rows for k in row})
    print(",".join(header))
    for row in rows:
        print(",".join(str(row.get(k, "")) for k in header))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bench.csv", rows, header)
        _write_manifest(out, "bench", args, [], started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="gsfield", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1,
                       help="render worker count (output is worker-independent)")

    p = sub.add_parser("synth", help="generate a synthetic labeled scene directory")
    add_common(p)
    p.add_argument("--classes", nargs="+", default=["alpha", "beta", "gamma"])
    p.add_argument("--clusters-per-class", type=int, default=2)
    p.add_argument("--gaussians-per-cluster", type=int, default=30)
    p.add_argument("--extent", type=float, default=4.0)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--canonical", type=int, default=4)
    p.add_argument("--blur-radius", type=int, default=2)
    p.add_argument("--ambient", type=float, default=DEFAULT_AMBIENT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="distill features + codecs from a scene directory")
    add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-views", type=int, default=4)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--learning-rate", type=float, default=5e-3)
    p.add_argument("--codec-learning-rate", type=float, default=1e-3)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--adam-eps", type=float, default=1e-8)
    p.add_argument("--train-opacity", action="store_true")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render RGB + feature maps to one camera")
    add_common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background", nargs=3, type=float, default=(0.0, 0.0, 0.0))
    p.add_argument("--pca", action="store_true", help="emit a PCA visualization")
    p.add_argument("--pca-branch", choices=("region", "context"), default="region")
    p.add_argument("--codec-region")
    p.add_argument("--codec-context")
    p.add_argument("--alpha-tau", type=float, default=0.5)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="open-vocabulary text query against a view")
    add_common(p)
    p.add_argument("--field", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--codec-region", required=True)
    p.add_argument("--codec-context", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--alpha-tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mIoU / localization over a scene directory")
    add_common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--field", help="fitted field (defaults to the scene's)")
    p.add_argument("--codec-region", required=True)
    p.add_argument("--codec-context", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--strategy", choices=STRATEGIES + ("all",), default="ours")
    p.add_argument("--skip-views", type=int, default=4,
                   help="first N views are treated as training views")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold or feature-dimension ablation")
    add_common(p)
    p.add_argument("--axis", choices=("threshold", "feat_dim"), required=True)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--classes", nargs="+", default=["alpha", "beta", "gamma"])
    p.add_argument("--clusters-per-class", type=int, default=2)
    p.add_argument("--gaussians-per-cluster", type=int, default=30)
    p.add_argument("--extent", type=float, default=4.0)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--canonical", type=int, default=4)
    p.add_argument("--blur-radius", type=int, default=2)
    p.add_argument("--ambient", type=float, default=DEFAULT_AMBIENT)
    p.add_argument("--iterations", type=int, default=600)
    p.add_argument("--train-views", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--strategy", choices=STRATEGIES, default="ours")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    add_common(p)
    p.add_argument("--loss", choices=("linear", "semantic"), default="semantic")
    p.add_argument("--gaussians", type=int, default=20)
    p.add_argument("--feat-dim", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--opacity", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="render / fit timing table")
    add_common(p)
    p.add_argument("--gaussians", nargs="+", type=int, default=[100000])
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--workers", nargs="+", type=int, default=[1, 4])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--fit-gaussians", type=int, default=0)
    p.add_argument("--fit-iterations", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, KeyError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GsfieldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
