"""``cached-det`` command line: convert, synth, train, infer, eval.

Exit codes: 0 success, 1 internal error, 2 input or schema error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont, UnidentifiedImageError

from . import __version__
from .detector import CheckpointError, cascade_infer, load_checkpoint
from .evalkit import EvalInputError, evaluate, predictions_from_json, predictions_to_json
from .synthcharts import generate_corpus, load_config
from .taxonomy import (CATEGORY_ID, RefinementError, SchemaError, category_counts,
                       convert_source_chart, from_dataset_json, parse_source_document,
                       to_dataset_json)
from .trainer import TrainConfig, train

log = logging.getLogger("cached_det")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}
# one colour per category, in category-id order
PALETTE = [
    (230, 25, 75), (60, 180, 75), (255, 150, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 200, 200), (240, 50, 230), (160, 190, 20), (200, 120, 120), (0, 128, 128), (150, 110, 240),
    (170, 110, 40), (128, 0, 0), (40, 160, 120), (128, 128, 0), (0, 0, 128), (100, 100, 100),
]


class InputError(Exception):
    """Bad command input; reported with exit code 2."""


def _write(path: str | Path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def cmd_convert(args) -> int:
    src = Path(args.input)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    if not files:
        raise InputError(f"{src}: no annotation files found")
    charts, report = [], []
    for f in files:
        try:
            sources = parse_source_document(f.read_bytes(), f"source file {f.name}")
            converted = [convert_source_chart(c, len(charts) + i + 1, args.plot_area_source)
                         for i, c in enumerate(sources)]
        except (SchemaError, RefinementError) as exc:
            raise InputError(f"{f}: {exc}") from None
        except OSError as exc:
            raise InputError(f"{f}: cannot read ({exc.strerror})") from None
        charts += converted
        counts = category_counts(b for c in converted for b in c.boxes)
        report.append({"file": str(f), "charts": len(converted),
                       "counts": {k: v for k, v in counts.items() if v}})
        print(f"{f.name}: {len(converted)} chart(s), "
              + ", ".join(f"{k}={v}" for k, v in counts.items() if v))
    _write(args.out, to_dataset_json(charts))
    if args.report:
        _write(args.report, json.dumps(report, indent=1))
    print(f"wrote {len(charts)} chart(s) to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = None
    if args.config:
        try:
            config = {**load_config(), **json.loads(Path(args.config).read_text())}
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.config}: {exc}") from None
    path = generate_corpus(args.n, args.seed, args.out, config)
    print(f"wrote {args.n} chart(s) and {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"{args.config}: {exc}") from None
    overrides = {"dataset": args.dataset, "out_dir": args.out_dir, "epochs": args.epochs,
                 "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed,
                 "max_steps": args.max_steps}
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from None
    if not cfg.dataset:
        raise InputError("no dataset given (use --dataset or a config file)")
    try:
        result = train(cfg)
    except (OSError, SchemaError) as exc:
        raise InputError(f"{cfg.dataset}: {exc}") from None
    print(f"trained {result.steps} steps in {result.seconds:.0f}s; "
          f"final loss {result.losses[-1]:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def render_overlay(image: np.ndarray, detections, path: Path):
    canvas = Image.fromarray(image).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    for d in detections:
        color = PALETTE[CATEGORY_ID[d.category] - 1]
        draw.rectangle(d.box.as_tuple(), outline=color, width=1)
        draw.text((d.box.x1, max(d.box.y1 - 10, 0)), f"{d.category} {d.score:.2f}",
                  fill=color, font=font)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path)


def cmd_infer(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise InputError(f"{args.checkpoint}: {exc}") from None
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise InputError(f"{image_dir}: not a directory")
    files = sorted(p for p in image_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    ids = {}
    if args.dataset:
        try:
            charts = from_dataset_json(Path(args.dataset).read_bytes())
        except (OSError, SchemaError) as exc:
            raise InputError(f"{args.dataset}: {exc}") from None
        root = Path(args.dataset).parent
        by_path = {(root / c.file_name).resolve(): c.id for c in charts}
        ids = {f: by_path[f.resolve()] for f in files if f.resolve() in by_path}
        files = [f for f in files if f in ids]
    else:
        ids = {f: i + 1 for i, f in enumerate(files)}
    detections, skipped, manifest = {}, [], []
    for f in files:
        try:
            with Image.open(f) as im:
                image = np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", f, exc)
            skipped.append({"file": str(f), "reason": str(exc)})
            continue
        dets = cascade_infer(image, model)
        detections[ids[f]] = dets
        manifest.append({"id": ids[f], "file": str(f), "detections": len(dets)})
        if args.render:
            render_overlay(image, dets, Path(args.render) / f"{f.stem}_overlay.png")
    _write(args.out, predictions_to_json(detections))
    out = Path(args.out)
    _write(out.with_name(out.stem + ".manifest.json"),
           json.dumps({"images": manifest, "skipped": skipped}, indent=1))
    print(f"{len(detections)} image(s) processed, {len(skipped)} skipped; wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        charts = from_dataset_json(Path(args.dataset).read_bytes())
        dets = predictions_from_json(Path(args.predictions).read_bytes())
        report = evaluate(dets, charts)
    except OSError as exc:
        raise InputError(f"cannot read input: {exc}") from None
    except (SchemaError, EvalInputError) as exc:
        raise InputError(str(exc)) from None
    print(report.table())
    if args.out:
        _write(args.out, report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cached-det", description="Chart element detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="refine PMC-style annotations into the 18-class dataset JSON")
    c.add_argument("--in", dest="input", required=True, help="source JSON file or directory of them")
    c.add_argument("--plot-area-source", choices=("annotation", "detect"), default="annotation",
                   help="take the plot area from the annotations, or estimate it from tick marks")
    c.add_argument("--out", required=True, help="output dataset JSON")
    c.add_argument("--report", help="optional JSON file for per-file category counts")
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("synth", help="generate a synthetic chart corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="JSON overriding generator ranges")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="TrainConfig JSON; flags below override it")
    t.add_argument("--dataset")
    t.add_argument("--out-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect chart elements in a directory of images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--images", required=True)
    i.add_argument("--out", required=True, help="prediction JSON")
    i.add_argument("--render", help="directory for overlay PNGs")
    i.add_argument("--dataset", help="dataset JSON whose image ids the predictions should use")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", help="EvalReport JSON")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
