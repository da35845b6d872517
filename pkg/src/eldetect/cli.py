"""Command-line entry point: synth, train, detect, eval, viz-attn, ablate.

Exit codes: 0 success, 1 validation error (bad config, arguments or
inputs), 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imageio
from .attention import export_map, map_statistics
from .bafpn import ALL_VARIANTS, NONE, Variant
from .boxes import CLASSES
from .checkpoint import CheckpointError
from .detector import DetectorConfig, normalize_image
from .metrics import (
    ClassificationCounts,
    confusion,
    evaluate_detections,
    image_level_counts,
    precision_recall_f,
)
from .synth import emit_dataset
from .tensor import ContractError, DimensionError
from .train import (
    TrainConfig,
    TrainingError,
    code_version,
    detect_dataset,
    file_digest,
    load_checkpoint,
    load_dataset,
    load_sample,
    train,
)
from .voc import Annotation, VOCParseError, parse_voc

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
DETECTION_FIELDS = ("image_id", "class", "score", "x_min", "y_min", "x_max", "y_max")


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def load_config(path: str | None, overrides: list[str]) -> tuple[DetectorConfig, TrainConfig]:
    """JSON file ``{"detector": {...}, "train": {...}}`` plus ``section.key=value`` overrides."""
    raw = {"detector": {}, "train": {}}
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        unknown = set(loaded) - set(raw)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        for k in raw:
            raw[k].update(loaded.get(k, {}))
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in raw:
            raise ValidationError(f"override must look like detector.key=value or train.key=value: {item!r}")
        try:
            raw[section][name] = json.loads(value)
        except json.JSONDecodeError:
            raw[section][name] = value
    try:
        return DetectorConfig.from_dict(raw["detector"]), TrainConfig(**raw["train"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config: {exc}") from None


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def run_metadata(args: argparse.Namespace, **extra) -> dict:
    return {"command": args.command, "argv": sys.argv[1:], "code_version": code_version(), **extra}


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = emit_dataset(args.n, args.split, args.out, seed=args.seed, size=args.size)
    write_json(Path(args.out) / "run_metadata.json",
               run_metadata(args, manifest_hash=file_digest(manifest), image_size=args.size, seed=args.seed))
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    det_cfg, train_cfg = load_config(args.config, args.set)
    if args.variant:
        det_cfg = replace(det_cfg, variant=Variant.parse(args.variant))
    data = load_dataset(args.manifest, det_cfg.backbone.input_size)
    log_every = max(train_cfg.log_every, 1)

    def progress(it, info):
        if (it + 1) % log_every == 0:
            print(f"iter {it + 1} loss {info['loss']:.4f} lr {info['lr']:g}", flush=True)

    train(data, train_cfg, detector_cfg=det_cfg, out_dir=args.out,
          manifest_hash=file_digest(args.manifest), callback=progress)
    print(Path(args.out) / "model.bin")
    return EXIT_OK


def _image_paths(target: Path) -> list[Path]:
    if target.is_dir():
        return sorted(target.glob("*.pgm"))
    return [target]


def write_detections(path: Path, dets: dict) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for image_id in sorted(dets):
            for d in dets[image_id]:
                x0, y0, x1, y1 = d.box.corners()
                w.writerow([image_id, CLASSES[d.class_id], f"{d.score:.6f}",
                            f"{x0:.3f}", f"{y0:.3f}", f"{x1:.3f}", f"{y1:.3f}"])


def read_detections(path: Path) -> dict:
    from .boxes import BBox, CLASS_INDEX, Detection

    out: dict = {}
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row["class"] not in CLASS_INDEX:
                raise ValidationError(f"unknown class {row['class']!r} in {path}")
            box = BBox.from_corners(*(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
            out.setdefault(row["image_id"], []).append(
                Detection(box, CLASS_INDEX[row["class"]], float(row["score"]), row["image_id"]))
    return out


def cmd_detect(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    size = model.cfg.backbone.input_size
    dets, failed = {}, 0
    for path in _image_paths(Path(args.input)):
        try:
            sample = load_sample(path, None, size)
        except (OSError, ValueError) as exc:
            print(f"error: {path}: {exc}", file=sys.stderr)
            failed += 1
            continue
        found = model.detect(normalize_image(sample.pixels), args.score_threshold, sample.image_id)
        dets[sample.image_id] = found
        if args.overlay:
            Path(args.overlay).mkdir(parents=True, exist_ok=True)
            imageio.write_pgm(Path(args.overlay) / f"{sample.image_id}.pgm", draw_boxes(sample.pixels, found))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_detections(out, dets)
    write_json(out.with_suffix(".meta.json"), run_metadata(args, checkpoint=str(args.checkpoint), failed=failed))
    return EXIT_RUNTIME if failed and not dets else EXIT_OK


def draw_boxes(pixels: np.ndarray, dets) -> np.ndarray:
    img = np.clip(pixels, 0, 255).astype(np.uint8).copy()
    h, w = img.shape
    for d in dets:
        x0, y0, x1, y1 = (int(round(v)) for v in d.box.corners())
        x0, x1 = max(x0, 0), min(x1, w) - 1
        y0, y1 = max(y0, 0), min(y1, h) - 1
        if x1 < x0 or y1 < y0:
            continue
        img[y0, x0 : x1 + 1] = img[y1, x0 : x1 + 1] = 255
        img[y0 : y1 + 1, x0] = img[y0 : y1 + 1, x1] = 255
    return img


def load_ground_truth(directory: Path) -> dict[str, list[Annotation]]:
    gts = {}
    for xml in sorted(directory.glob("*.xml")):
        try:
            gts[xml.stem] = parse_voc(xml.read_text()).objects
        except VOCParseError as exc:
            raise ValidationError(f"{xml}: {exc}") from None
    if not gts:
        raise ValidationError(f"no VOC XML files in {directory}")
    return gts


def evaluation_report(dets: dict, gts: dict, iou_thr: float = 0.5, score_thr: float = 0.3) -> tuple[dict, object]:
    res = evaluate_detections(dets, gts, iou_thr)
    shown = {k: [d for d in v if d.score >= score_thr] for k, v in dets.items()}
    conf = confusion(shown, gts, score_thr)
    prf = precision_recall_f(image_level_counts(shown, gts, score_thr))
    per_class = {}
    for k, cname in enumerate(CLASSES):
        tp = int(conf.matrix[k, k])
        fn = int(conf.matrix[k].sum() - tp)
        fp = int(conf.matrix[:, k].sum() - tp)
        p = precision_recall_f(ClassificationCounts(tp, fp, fn))
        per_class[cname] = {"P": p.precision, "R": p.recall, "F": p.f_measure}
    report = {**res.to_dict(), "P": prf.precision, "R": prf.recall, "F": prf.f_measure,
              "degenerate_prf": prf.degenerate, "per_class_prf": per_class, "confusion": conf.to_dict()}
    return report, res


def write_curves(path: Path, res) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "threshold", "recall", "precision"])
        for cname, curve in res.curves.items():
            for t, r, p in zip(curve.thresholds, curve.recall, curve.precision):
                w.writerow([cname, f"{t:.6f}", f"{r:.6f}", f"{p:.6f}"])


def cmd_eval(args) -> int:
    gts = load_ground_truth(Path(args.annotations))
    dets = read_detections(Path(args.detections))
    report, res = evaluation_report(dets, gts, args.iou, args.score_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report)
    write_curves(out / "pr_curves.csv", res)
    write_json(out / "run_metadata.json", run_metadata(args))
    print(json.dumps({"mAP": report["mAP"], "MIoU": report["MIoU"], "F": report["F"]}))
    return EXIT_OK


def cmd_viz_attn(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.cfg.variant.attention == NONE:
        raise ValidationError(f"no attention in this variant ({model.cfg.variant.name})")
    sample = load_sample(Path(args.image), None, model.cfg.backbone.input_size)
    state = model.forward(normalize_image(sample.pixels))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for level, sim in sorted(state.pyramid.similarity.items()):
        m = sim.attention
        export_map(m, out / f"{level}_similarity.pgm", out / f"{level}_similarity.csv")
        stats[level] = map_statistics(m).to_dict()
    write_json(out / "map_statistics.json", stats)
    write_json(out / "run_metadata.json", run_metadata(args, checkpoint=str(args.checkpoint)))
    return EXIT_OK


ABLATION_FIELDS = ("variant", "seed", "parameters", "P", "R", "F", "mAP", "MIoU")


def run_ablation(train_data, test_data, det_cfg: DetectorConfig, train_cfg: TrainConfig,
                 seeds=(0,), variants=ALL_VARIANTS, out_dir: Path | None = None) -> list[dict]:
    """Train and evaluate every variant for every seed; one result row each."""
    gts = {s.image_id: s.annotations for s in test_data}
    rows = []
    for variant in variants:
        for seed in seeds:
            cfg = replace(det_cfg, variant=variant, seed=seed)
            tcfg = replace(train_cfg, seed=seed)
            sub = out_dir / f"{variant.name}_seed{seed}" if out_dir else None
            model, _ = train(train_data, tcfg, detector_cfg=cfg, out_dir=sub)
            report, _ = evaluation_report(detect_dataset(model, test_data, 0.0), gts)
            rows.append({"variant": variant.name, "seed": seed, "parameters": model.num_parameters(),
                         "P": report["P"], "R": report["R"], "F": report["F"],
                         "mAP": report["mAP"], "MIoU": report["MIoU"]})
    return rows


def cmd_ablate(args) -> int:
    det_cfg, train_cfg = load_config(args.config, args.set)
    size = det_cfg.backbone.input_size
    tr = load_dataset(args.train, size)
    te = load_dataset(args.test, size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(tr, te, det_cfg, train_cfg, tuple(args.seeds), out_dir=out)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_json(out / "run_metadata.json", run_metadata(args, detector=det_cfg.to_dict(), train=train_cfg.to_dict()))
    print(out / "ablation.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eldetect", description="EL defect detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic EL dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=128)
    s.set_defaults(func=cmd_synth)

    def config_args(q):
        q.add_argument("--config", help="JSON config with 'detector' and 'train' sections")
        q.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    t = sub.add_parser("train", help="train a detector on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", help="e.g. bidirectional+cosine, topdown+none")
    config_args(t)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run a checkpoint on an image or directory")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="detection CSV path")
    d.add_argument("--score-threshold", type=float, default=None)
    d.add_argument("--overlay", help="directory for annotated PGM overlays")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score a detection CSV against VOC annotations")
    e.add_argument("--detections", required=True)
    e.add_argument("--annotations", required=True, help="directory of VOC XML files")
    e.add_argument("--out", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score-threshold", type=float, default=0.3)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-attn", help="export B3/B4 similarity maps")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--image", required=True)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_attn)

    a = sub.add_parser("ablate", help="train and score all six pyramid variants")
    a.add_argument("--train", required=True, help="train manifest")
    a.add_argument("--test", required=True, help="test manifest")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    config_args(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except (ValidationError, VOCParseError, CheckpointError, ContractError, DimensionError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, TrainingError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
