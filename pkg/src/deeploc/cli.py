"""``deeploc`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import cv2
import yaml

from .config import ConfigError, RunConfig, apply_overrides, load_run_config, load_splits
from .data import IMAGE_SUFFIXES, MERGED_NAMES, Sample, read_image, save_labels
from .geometry import BoundingBox
from .model import VARIANTS, build, graph_dump, layer_count, parameter_count
from .preprocess import ClaheConfig, enhance, letterbox
from .train import TrainingDiverged, collate, evaluate, load_checkpoint, predict, seed_everything, train

log = logging.getLogger("deeploc")


class CommandError(RuntimeError):
    pass


# ----------------------------------------------------------------- helpers


def _model_and_config(args):
    """Model plus resolved RunConfig from ``--checkpoint`` and/or ``--config``."""
    if getattr(args, "checkpoint", None):
        model, ckpt = load_checkpoint(args.checkpoint)
        if args.config is None and not args.overrides:
            return model, RunConfig.from_dict(ckpt["config"])
        cfg = load_run_config(args.config, args.overrides) if args.config else _ckpt_config(ckpt, args.overrides)
        return model, cfg.with_model(model.cfg)
    if getattr(args, "config", None) is None and not args.overrides:
        raise CommandError("give --checkpoint or --config")
    cfg = load_run_config(args.config, args.overrides)
    seed_everything(cfg.seed)
    return build(cfg.model), cfg


def _ckpt_config(ckpt, overrides):
    return RunConfig.from_dict(apply_overrides(ckpt["config"], overrides))


def _plot_losses(metrics_path: Path, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
    epochs = [r for r in rows if r.get("type") == "epoch"]
    if not epochs:
        return
    fig, ax = plt.subplots(figsize=(6, 4), dpi=110)
    for k in ("loc", "obj", "cls", "total"):
        ax.plot([r["epoch"] for r in epochs], [r[k] for r in epochs], label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)


def _unletterbox(box: BoundingBox, size: int, orig_w: int, orig_h: int) -> BoundingBox | None:
    gain = size / max(orig_w, orig_h)
    nw, nh = max(1, round(orig_w * gain)), max(1, round(orig_h * gain))
    px, py = (size - nw) // 2, (size - nh) // 2
    x1, y1, x2, y2 = box.to_xyxy(size, size)
    x1, x2 = [min(max((v - px) / nw, 0.0), 1.0) for v in (x1, x2)]
    y1, y2 = [min(max((v - py) / nh, 0.0), 1.0) for v in (y1, y2)]
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox.from_xyxy(x1, y1, x2, y2, 1.0, 1.0, box.category_id, box.confidence)


def _draw(image, boxes, names, min_conf=0.25):
    out = image.copy()
    h, w = out.shape[:2]
    for b in boxes:
        if (b.confidence or 0) < min_conf:
            continue
        x1, y1, x2, y2 = (int(round(v)) for v in b.to_xyxy(w, h))
        cv2.rectangle(out, (x1, y1), (x2, y2), (0, 255, 0), 2)
        name = names[b.category_id] if b.category_id < len(names) else str(b.category_id)
        cv2.putText(out, f"{name} {b.confidence:.2f}", (x1, max(12, y1 - 4)), cv2.FONT_HERSHEY_SIMPLEX, 0.45,
                    (0, 255, 0), 1)
    return out


def _images_in(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.exists():
            out.append(p)
        else:
            raise FileNotFoundError(p)
    if not out:
        raise CommandError("no input images found")
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.overrides)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    seed_everything(cfg.seed)
    splits = load_splits(cfg)
    model = build(cfg.model)
    log.info("model: %.2fM params, %d layers", parameter_count(model) / 1e6, layer_count(model))
    summary = train(
        model, splits["train"], cfg.train, run_dir, aug=cfg.augment, loss_cfg=cfg.loss,
        val_source=splits["val"], run_config=cfg.to_dict(),
    )
    best, _ = load_checkpoint(run_dir / "checkpoints" / "best.pt")
    report = evaluate(best, splits["val"], cfg.train.conf_threshold, cfg.train.nms_iou)
    report.save(run_dir / "eval" / "val")
    _plot_losses(run_dir / "metrics.jsonl", run_dir / "plots" / "losses.png")
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({"run_dir": str(run_dir), **summary, "val": report.to_dict()["all"]}))
    return 0


def cmd_eval(args) -> int:
    model, cfg = _model_and_config(args)
    splits = load_splits(cfg)
    out = Path(args.out) if args.out else cfg.run_dir / "eval" / args.split
    report = evaluate(model, splits[args.split], args.conf, args.iou)
    report.save(out)
    cfg.save(out / "config.yaml")
    print(json.dumps(report.to_dict()["all"]))
    return 0


def cmd_predict(args) -> int:
    model, ckpt = load_checkpoint(args.checkpoint)
    size = model.cfg.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(ckpt["config"], sort_keys=False))
    names = MERGED_NAMES[: model.cfg.num_categories]
    for path in _images_in(args.images):
        image = read_image(path)
        h, w = image.shape[:2]
        canvas, _, _, _ = letterbox(Sample(path.stem, image, []), size)
        images, _, _ = collate([Sample(path.stem, canvas, [])])
        dets = predict(model, images, args.conf, args.iou)[0]
        boxes = [b for b in (_unletterbox(d, size, w, h) for d in dets) if b is not None]
        save_labels(out / f"{path.stem}.txt", boxes, with_confidence=True)
        if not cv2.imwrite(str(out / f"{path.stem}.png"), _draw(image, boxes, names, args.draw_conf)):
            raise OSError(f"could not write {out / path.stem}.png")
    return 0


def cmd_preprocess(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    clahe_cfg = ClaheConfig(window_size=args.window, clip_limit=args.clip)
    for path in _images_in([args.input]):
        result = enhance(read_image(path), args.method, clahe_cfg, amount=args.amount, kernel=args.kernel)
        if not cv2.imwrite(str(out / f"{path.stem}.png"), result):
            raise OSError(f"could not write {out / path.stem}.png")
    return 0


def cmd_explain(args) -> int:
    from .explain import DetectionTarget, detect_with_slots, explain_detection, save_explanation

    model, _ = load_checkpoint(args.checkpoint)
    size = model.cfg.input_size
    image = read_image(args.image)
    canvas, _, _, _ = letterbox(Sample(Path(args.image).stem, image, []), size)
    tensor, _, _ = collate([Sample("x", canvas, [])])
    dets = detect_with_slots(model, tensor, args.conf)
    if args.index >= len(dets):
        raise CommandError(f"detection index {args.index} out of range ({len(dets)} detections)")
    target: DetectionTarget = dets[args.index]
    heatmap = explain_detection(model, tensor, target, args.layer)
    names = MERGED_NAMES[: model.cfg.num_categories]
    out = Path(args.out) / f"{Path(args.image).stem}_det{args.index}"
    save_explanation(out, canvas, heatmap, target.box, names[target.category])
    print(str(out.with_suffix(".png")))
    return 0


def cmd_matrix(args) -> int:
    from .experiments import run_matrix

    cfg = load_run_config(args.config, args.overrides)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    run_dir = cfg.run_dir
    cfg.save(run_dir / "config.yaml")
    splits = load_splits(cfg)
    rows = run_matrix(
        variants, cfg.model, None if args.no_train else cfg.train, splits, run_dir,
        loss_cfg=cfg.loss, aug_cfg=cfg.augment,
    )
    print((run_dir / "matrix.csv").read_text(), end="")
    return 1 if any("error" in r for r in rows) else 0


def cmd_graph_dump(args) -> int:
    model, cfg = _model_and_config(args)
    rows = graph_dump(model, cfg.model.input_size)
    total = parameter_count(model)
    if args.json:
        Path(args.json).write_text(json.dumps({"params": total, "layers": layer_count(model), "rows": rows}, indent=1))
    for r in rows:
        print(f"{r['name']:<60} {r['type']:<18} {str(r['out_shape']):<24} {r['params']}")
    print(f"total params: {total} ({total / 1e6:.2f}M), leaf layers: {layer_count(model)}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deeploc", allow_abbrev=False, description="Radiograph abnormality detector: train, evaluate, explain.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="run config YAML; extra --section.key value pairs override it")

    sp = sub.add_parser("train", allow_abbrev=False, help="train a model and write runs/<name>/")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", allow_abbrev=False, help="evaluate a checkpoint (or an untrained model from --config)")
    sp.add_argument("--checkpoint")
    with_config(sp)
    sp.add_argument("--split", default="val", choices=("train", "val", "test"))
    sp.add_argument("--out")
    sp.add_argument("--conf", type=float, default=1e-3)
    sp.add_argument("--iou", type=float, default=0.65)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", allow_abbrev=False, help="write detection files and annotated images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--conf", type=float, default=1e-3)
    sp.add_argument("--iou", type=float, default=0.65)
    sp.add_argument("--draw-conf", type=float, default=0.25, help="minimum confidence drawn on the PNGs")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_predict, overrides=[])

    sp = sub.add_parser("preprocess", allow_abbrev=False, help="apply CLAHE or unsharp masking to a directory of images")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--method", required=True, choices=("none", "clahe", "um_median", "um_gaussian"))
    sp.add_argument("--window", type=int, default=8)
    sp.add_argument("--clip", type=float, default=4.0)
    sp.add_argument("--amount", type=float, default=1.0)
    sp.add_argument("--kernel", type=int, default=5)
    sp.set_defaults(func=cmd_preprocess, overrides=[])

    sp = sub.add_parser("explain", allow_abbrev=False, help="GradCAM++ overlay for one detection")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--index", type=int, default=0, help="detection index after NMS (0 = most confident)")
    sp.add_argument("--layer", help="submodule name; default: the feature entering the head's RepConv")
    sp.add_argument("--conf", type=float, default=1e-3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_explain, overrides=[])

    sp = sub.add_parser("matrix", allow_abbrev=False, help="compare placement variants")
    with_config(sp)
    sp.add_argument("--variants", default="yolov7,gam_ba,sw_ba,deeploc")
    sp.add_argument("--no-train", action="store_true", help="profile and evaluate untrained weights only")
    sp.set_defaults(func=cmd_matrix)

    sp = sub.add_parser("graph-dump", allow_abbrev=False, help="list layers with output shapes and parameter counts")
    sp.add_argument("--checkpoint")
    with_config(sp)
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_graph_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if rest and args.command in ("predict", "preprocess", "explain"):
        parser.error(f"unrecognized arguments: {' '.join(rest)}")
    args.overrides = rest
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (CommandError, FileNotFoundError, KeyError, ValueError, OSError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
