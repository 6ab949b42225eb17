"""Command-line entry point: ``gmattrib {synth,run,eval,probe,cam-grid}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 compute error.
The workspace root defaults to ``$GMATTRIB_WORKSPACE`` (else ``./workspace``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import augment
from .evaluation import build_report, multiclass_decision, probe, save_records
from .fixtures import FixtureConfig, gen_dataset
from .localization import cam, render_heatmap, saliency
from .manifest import DatasetManifest, ManifestError
from .models import BundleError, load_bundle
from .phases import PHASES, DependencyError, RunConfig, Workspace
from .preprocess import DecodeError, batch_inputs, load_image, save_image, standardize
from .training import MODEL_SEEDS, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_COMPUTE = 0, 1, 2, 3
WORKSPACE_ENV = "GMATTRIB_WORKSPACE"

log = logging.getLogger("gmattrib")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _ints(s: str) -> list[int]:
    try:
        return [int(p) for p in _csv(s)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")


def _workspace_default() -> str:
    return os.environ.get(WORKSPACE_ENV, "workspace")


def _set_threads(n: int):
    # caps BLAS pools when the backend honours it; the flag also bounds our own workers
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    cfg = FixtureConfig(image_size=args.size, n_sources=args.sources, amplitude=args.amplitude,
                        samples_per_source=args.per_source, external=not args.no_external,
                        siblings=args.siblings, seed=args.seed)
    man = gen_dataset(cfg, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.jsonl"), "rows": len(man.rows),
                      "sources": man.sources(include_external=True), "digest": man.digest()}))
    return EXIT_OK


# -------------------------------------------------------------------- run


def _run_config(args) -> RunConfig:
    return RunConfig(manifest=args.manifest, workspace=args.workspace, representation=args.representation,
                     models=_csv(args.models), seeds=args.seeds, data_seed=args.data_seed,
                     individual=_csv(args.individual), batch_size=args.batch_size, max_epochs=args.max_epochs,
                     patience=args.patience, min_delta=args.min_delta, lr_detection=args.lr_detection,
                     lr_attribution=args.lr_attribution, threads=args.threads)


def cmd_run(args) -> int:
    phases = _csv(args.phases)
    bad = [p for p in phases if p not in PHASES]
    if bad:
        raise UsageError(f"unknown phase(s) {bad}; choose from {','.join(PHASES)}")
    try:
        cfg = _run_config(args).validate()
    except FileNotFoundError as exc:
        raise ManifestError(str(exc))
    except ValueError as exc:
        raise UsageError(str(exc))
    ws = Workspace(cfg)
    made = ws.run(phases, force=args.force)
    print(json.dumps({"workspace": cfg.workspace, "artifacts": made}, indent=1))
    return EXIT_OK


# ------------------------------------------------------------------- eval


def _load_inputs(man: DatasetManifest, rows, size):
    return [standardize(load_image(man.resolve(r)), size) for r in rows]


def _variant_images(images, rows, variant: str, seed: int):
    if variant == "clean":
        return images
    items = [(r.image_id, img) for r, img in zip(rows, images)]
    if variant == "multi":
        out, _ = augment.multi_augment_dataset(items, seed)
    else:
        out, _ = augment.individually_augment(items, variant, seed)
    return [img for _, img in out]


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    man = DatasetManifest.load(args.manifest)
    rep = bundle.primary.representation
    if args.representation and args.representation != rep:
        raise ValueError(f"requested representation {args.representation!r} but bundle is {rep!r}")
    size = bundle.primary.input_shape[-1]
    if man.image_size != size and not args.resize:
        raise ValueError(f"manifest image size {man.image_size} does not match bundle input {size} "
                         "(pass --resize to resample)")
    ext_rows = man.select(split="external")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for variant in _csv(args.variants):
        if variant not in ("clean", "multi", "jpeg", "crop", "blur", "noise"):
            raise UsageError(f"unknown variant {variant!r}")
        ext_recs = None
        if ext_rows:
            imgs = _variant_images(_load_inputs(man, ext_rows, size), ext_rows, variant, args.data_seed)
            ext_recs = probe(bundle, batch_inputs(imgs, rep, bundle.stats), [r.image_id for r in ext_rows],
                             [r.source for r in ext_rows])
        for split in _csv(args.splits):
            rows = man.select(split=split)
            if not rows:
                raise ManifestError(f"manifest has no rows for split {split!r}")
            imgs = _variant_images(_load_inputs(man, rows, size), rows, variant, args.data_seed)
            recs = probe(bundle, batch_inputs(imgs, rep, bundle.stats), [r.image_id for r in rows],
                         [r.source for r in rows])
            save_records(recs, out_dir / f"records_{split}_{variant}.jsonl")
            if ext_recs is not None and split != "external":
                save_records(ext_recs, out_dir / f"records_external_{variant}.jsonl")
            reports.append(build_report(recs, split, variant, ext_recs if split != "external" else None).to_dict())
    (out_dir / "report.json").write_text(json.dumps(reports, indent=1, sort_keys=True))
    for r in reports:
        print(json.dumps(r["table"], sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------ probe


def _emit_heatmaps(bundle, x, img, image_id, verdict, out_dir: Path, sidecar: Path) -> int:
    p = bundle.primary
    smaps = [saliency(p, x, name="primary")]
    feats = p.forward(x[None], stop=p.branch_layer)
    for name, sec in bundle.secondaries.items():
        smaps.append(saliency(sec, feats, name=name))
    for smap in smaps:
        render_heatmap(smap, img, out_dir / f"{image_id}__{smap.output_name}.png", sidecar=sidecar,
                       image_id=image_id, verdict=verdict)
    return len(smaps)


def cmd_probe(args) -> int:
    bundle = load_bundle(args.bundle)
    size = bundle.primary.input_shape[-1]
    out_dir = Path(args.out) if args.out else None
    if args.cam:
        if out_dir is None:
            raise UsageError("--cam needs --out")
        out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        image_id = Path(path).stem
        try:
            img = standardize(load_image(path), size)
        except (DecodeError, OSError) as exc:
            failures += 1
            print(json.dumps({"image": str(path), "error": str(exc)}), flush=True)
            continue
        x = batch_inputs([img], bundle.primary.representation, bundle.stats)
        rec = probe(bundle, x, [image_id])[0]
        verdict = multiclass_decision(rec)
        line = {"image": str(path), **rec.to_dict(), "verdict": verdict}
        line.pop("true_label")
        if args.cam:
            line["heatmaps"] = _emit_heatmaps(bundle, x[0], img, image_id, verdict, out_dir,
                                              out_dir / "heatmaps.jsonl")
        print(json.dumps(line, sort_keys=True), flush=True)
    if failures:
        print(f"{failures} of {len(args.images)} image(s) could not be read", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# --------------------------------------------------------------- cam-grid


def _tile(images: list[np.ndarray], cols: int) -> np.ndarray:
    h, w = images[0].shape[:2]
    rows = -(-len(images) // cols)
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = im
    return grid


def cmd_cam_grid(args) -> int:
    """Heatmaps of ``n`` test images per source, one tiled grid per (source, output)."""
    from .localization import overlay
    bundle = load_bundle(args.bundle)
    man = DatasetManifest.load(args.manifest)
    size = bundle.primary.input_shape[-1]
    p = bundle.primary
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = _csv(args.sources) if args.sources else ["real"] + man.sources(include_external=True)
    written = []
    for src in sources:
        rows = [r for r in man.rows if r.source == src and r.split in ("test", "external")][:args.n]
        if not rows:
            raise ManifestError(f"no test/external images for source {src!r}")
        imgs = _load_inputs(man, rows, size)
        x = batch_inputs(imgs, p.representation, bundle.stats)
        tiles: dict[str, list] = {}
        for xi, img in zip(x, imgs):
            tiles.setdefault("primary", []).append(overlay(saliency(p, xi, name="primary"), img, args.alpha))
            feats = p.forward(xi[None], stop=p.branch_layer)
            for name, sec in bundle.secondaries.items():
                tiles.setdefault(name, []).append(overlay(saliency(sec, feats, name=name), img, args.alpha))
        for output, ims in tiles.items():
            path = out_dir / f"grid_{src}__{output}.png"
            save_image(_tile(ims, args.cols), path)
            written.append(str(path))
    print(json.dumps({"grids": written}, indent=1))
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gmattrib", description="Deepfake detection and GM source attribution toolkit.")
    ap.add_argument("--threads", type=int, default=1, help="cap on worker/BLAS threads (default 1)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic fingerprint dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--sources", type=int, default=3)
    s.add_argument("--amplitude", type=float, default=8.0)
    s.add_argument("--per-source", type=int, default=200)
    s.add_argument("--siblings", action="store_true", help="make gm1 a correlation-0.5 sibling of gm0")
    s.add_argument("--no-external", action="store_true")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="execute training phases I-IV")
    r.add_argument("--manifest", required=True)
    r.add_argument("--workspace", default=None)
    r.add_argument("--phases", default="I,II,III,IV")
    r.add_argument("--representation", choices=("pixel", "dct"), default="pixel")
    r.add_argument("--models", default="proposed", help="comma list of proposed,gandct-conv,ganfp-postpool")
    r.add_argument("--seeds", type=_ints, default=list(MODEL_SEEDS))
    r.add_argument("--data-seed", type=int, default=0)
    r.add_argument("--individual", default="jpeg,crop", help="individually augmented sets for phases II/IV")
    r.add_argument("--batch-size", type=int, default=128)
    r.add_argument("--max-epochs", type=int, default=100)
    r.add_argument("--patience", type=int, default=5)
    r.add_argument("--min-delta", type=float, default=0.0)
    r.add_argument("--lr-detection", type=float, default=1e-3)
    r.add_argument("--lr-attribution", type=float, default=1e-4)
    r.add_argument("--force", action="store_true", help="recompute phases that already completed")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a weight bundle on a manifest")
    e.add_argument("--bundle", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--splits", default="test")
    e.add_argument("--variants", default="clean")
    e.add_argument("--representation", choices=("pixel", "dct"), default=None)
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--resize", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="score individual images")
    p.add_argument("--bundle", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--cam", action="store_true", help="write one heatmap per output per image")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_probe)

    g = sub.add_parser("cam-grid", help="tiled heatmap grids per source and output")
    g.add_argument("--bundle", required=True)
    g.add_argument("--manifest", required=True)
    g.add_argument("--sources", default=None)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--cols", type=int, default=4)
    g.add_argument("--alpha", type=float, default=0.5)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_cam_grid)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: synth, run, eval, probe, cam-grid")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    if getattr(args, "workspace", "unset") is None:
        args.workspace = _workspace_default()
    try:
        return args.func(args)
    except (UsageError, DependencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, DecodeError, BundleError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError, ArithmeticError, RuntimeError, MemoryError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
