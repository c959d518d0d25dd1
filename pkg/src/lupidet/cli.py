"""Command-line orchestrator for the full experiment pipeline.

Subcommands: generate, prepare, train-teacher, train-student, sweep,
evaluate, cross-eval, report. Exit codes: 0 success, 1 usage, 2 data error,
3 training failure. The resolved configuration is echoed to config.json in
every output directory so any artifact can be reproduced from its own run
directory.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .core import Dataset, ImageSample
from .detector import DetectorModel, load_model, parameter_count, save_model
from .distill import DistillConfig, TrainingError, TrainLog, train_student, train_teacher
from .ingest import (
    DatasetError,
    load_dataset,
    load_split_dir,
    normalize_image,
    parse_coco,
    read_split_map,
    serialize_coco,
    write_pgm,
    write_ppm,
    write_split_map,
    CocoAnnotation,
    CocoCategory,
    CocoImage,
    CocoManifest,
    MANIFEST_FILENAME,
)
from .metrics import EvalConfig, EvalReport, evaluate_detector, write_predictions
from .preprocess import TileSpec, resize_sample, tile_image
from .privileged import attach_privileged_channel, mask_to_uint8
from .synth import SynthConfig, generate_dataset, write_dataset


class UsageError(Exception):
    """Command-line misuse; mapped to exit code 1."""


DEFAULT_CONFIG = {
    "data": {
        "source": None,
        "synth": {
            "num_images": 20,
            "image_size": 192,
            "num_classes": 6,
            "objects_min": 1,
            "objects_max": 4,
            "side_min": 8.0,
            "side_max": 24.0,
            "occlusion_rate": 0.2,
            "seed": 1,
        },
        "tile": {"grid": 3, "min_visibility": 0.25, "min_side_px": 2.0},
        "resize": None,
    },
    "model": {"input_size": 64},
    "train": {
        "alpha": 0.0,
        "lr": 1e-4,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 0.0,
        "max_epochs": 100,
        "patience": 8,
        "batch_size": 8,
        "seed": 1,
    },
    "eval": {
        "score_threshold": 0.01,
        "nms_iou": 0.5,
        "thresholds": [i / 100.0 for i in range(50, 100, 5)],
        "operating_score": 0.5,
        "operating_iou": 0.5,
    },
    "sweep": {"alphas": [0.0, 0.25, 0.5, 0.75, 1.0], "seeds": [1, 2, 3]},
}

SUMMARY_HEADER = "role,alpha,seed,map50,map75,map5095,precision,recall,f1"
REPORT_METRICS = ("map5095", "map50", "map75", "precision", "recall", "f1")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(args) -> dict:
    """defaults <- config file <- CLI flags, in increasing priority."""
    config = DEFAULT_CONFIG
    path = getattr(args, "config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        config = _merge(config, doc)
    if getattr(args, "seed", None) is not None:
        config = _merge(config, {"train": {"seed": args.seed}})
    if getattr(args, "alpha", None) is not None:
        config = _merge(config, {"train": {"alpha": args.alpha}})
    return config


def _echo_config(config: dict, out_dir: Path) -> None:
    (out_dir / "config.json").write_text(json.dumps(config, sort_keys=True, indent=1))


def _out_dir(args) -> Path:
    out = Path(args.out)
    if not out.parent.exists():
        raise DatasetError(f"parent of output directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _synth_config(config: dict) -> SynthConfig:
    return SynthConfig(**config["data"]["synth"])


def _train_config(config: dict) -> DistillConfig:
    return DistillConfig(**config["train"])


def _eval_config(config: dict) -> EvalConfig:
    ev = config["eval"]
    return EvalConfig(
        score_threshold=ev["score_threshold"],
        nms_iou=ev["nms_iou"],
        thresholds=tuple(ev["thresholds"]),
        operating_score=ev["operating_score"],
        operating_iou=ev["operating_iou"],
    )


# ---------------------------------------------------------------------------
# generate / prepare
# ---------------------------------------------------------------------------

def cmd_generate(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    result = generate_dataset(_synth_config(config))
    write_dataset(result, out, write_masks=args.masks)
    _echo_config(config, out)
    print(f"generated {len(result.manifest.images)} images -> {out}")


def _prepare_samples(config: dict, samples: list[ImageSample], num_classes: int):
    tile_cfg = config["data"]["tile"]
    resize = config["data"]["resize"]
    prepared = []
    for sample in samples:
        tiles = tile_image(sample, TileSpec(**tile_cfg)) if tile_cfg else [sample]
        for tile in tiles:
            if resize:
                tile = resize_sample(tile, int(resize), int(resize))
            prepared.append(attach_privileged_channel(tile, num_classes))
    return prepared


def cmd_prepare(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    root = Path(args.data)
    try:
        manifest = parse_coco((root / MANIFEST_FILENAME).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest under {root}: {exc}") from exc
    split_map = read_split_map(root)
    categories = manifest.category_names()
    num_classes = len(categories)

    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    images: list[CocoImage] = []
    annotations: list[CocoAnnotation] = []
    new_split_map: dict[str, list[int]] = {}
    next_image_id = 1
    next_ann_id = 1
    for split in ("train", "val", "test"):
        if split not in split_map:
            continue
        ds = load_dataset(
            manifest, root / "images", split=split,
            image_ids=set(split_map[split]), normalize=False,
        )
        new_split_map[split] = []
        for sample in _prepare_samples(config, list(ds.samples), num_classes):
            raster = np.stack([p.values for p in sample.rgb], axis=2)
            raster = np.floor(np.clip(raster, 0.0, 255.0) + 0.5).astype(np.uint8)
            file_name = f"{sample.id}.ppm"
            write_ppm(out / "images" / file_name, raster)
            write_pgm(out / "masks" / f"{sample.id}_priv.pgm", mask_to_uint8(sample.privileged))
            images.append(CocoImage(
                id=next_image_id, file_name=file_name,
                width=sample.width, height=sample.height,
            ))
            for ann in sample.annotations:
                annotations.append(CocoAnnotation(
                    id=next_ann_id, image_id=next_image_id,
                    category_id=ann.class_id + 1,
                    bbox=tuple(ann.box.as_xywh()),
                ))
                next_ann_id += 1
            new_split_map[split].append(next_image_id)
            next_image_id += 1

    new_manifest = CocoManifest(
        images=tuple(images),
        annotations=tuple(annotations),
        categories=tuple(CocoCategory(id=k + 1, name=n) for k, n in enumerate(categories)),
    )
    (out / MANIFEST_FILENAME).write_text(serialize_coco(new_manifest))
    write_split_map(out, new_split_map)
    _echo_config(config, out)
    print(f"prepared {len(images)} samples -> {out}")


# ---------------------------------------------------------------------------
# training commands
# ---------------------------------------------------------------------------

def _save_run(out: Path, model: DetectorModel, log: TrainLog, cfg: DistillConfig, name: str) -> None:
    meta = {
        "seed": cfg.seed,
        "alpha": cfg.alpha,
        "best_epoch": log.best_epoch,
        "best_val_map50": log.best_val_map50,
        "epochs_run": len(log.records),
    }
    save_model(model, out / f"{name}.ckpt", meta=meta)
    (out / "trainlog.csv").write_text(log.to_csv())


def cmd_train_teacher(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    train = load_split_dir(args.data, "train", with_masks=True)
    val = load_split_dir(args.data, "val", with_masks=True)
    model, log = train_teacher(train, val, _train_config(config), _eval_config(config))
    _save_run(out, model, log, _train_config(config), "teacher")
    _echo_config(config, out)
    print(f"teacher: best epoch {log.best_epoch}, val mAP@50 {log.best_val_map50:.4f}")


def cmd_train_student(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    cfg = _train_config(config)
    teacher = None
    if args.teacher:
        teacher = load_model(args.teacher)
    elif cfg.alpha > 0.0:
        raise UsageError("--teacher is required when alpha > 0")
    train = load_split_dir(args.data, "train", with_masks=cfg.alpha > 0.0)
    val = load_split_dir(args.data, "val", with_masks=False)
    model, log = train_student(train, val, teacher, cfg, _eval_config(config))
    _save_run(out, model, log, cfg, "student")
    _echo_config(config, out)
    print(f"student(alpha={cfg.alpha}): best epoch {log.best_epoch}, "
          f"val mAP@50 {log.best_val_map50:.4f}")


def _summary_row(role: str, alpha, seed, report: EvalReport) -> str:
    alpha_txt = "" if alpha is None else repr(float(alpha))
    return (f"{role},{alpha_txt},{seed},{report.map50!r},{report.map75!r},"
            f"{report.map5095!r},{report.precision!r},{report.recall!r},{report.f1!r}")


def _evaluate_to(out: Path, model: DetectorModel, ds: Dataset, eval_cfg: EvalConfig) -> EvalReport:
    report, dets = evaluate_detector(model, ds, eval_cfg)
    (out / "eval.json").write_text(report.to_json())
    (out / "eval.csv").write_text(report.to_csv())
    write_predictions(out / "predictions.json", dets)
    return report


def cmd_sweep(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    _echo_config(config, out)
    eval_cfg = _eval_config(config)
    base_cfg = _train_config(config)
    alphas = [float(a) for a in config["sweep"]["alphas"]]
    seeds = [int(s) for s in config["sweep"]["seeds"]]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise UsageError(f"sweep alphas must lie in [0, 1], got {alphas}")

    train_m = load_split_dir(args.data, "train", with_masks=True)
    val_m = load_split_dir(args.data, "val", with_masks=True)
    val = load_split_dir(args.data, "val", with_masks=False)
    test_m = load_split_dir(args.data, "test", with_masks=True)
    test = load_split_dir(args.data, "test", with_masks=False)

    rows: list[str] = []
    partial = None
    try:
        teacher_dir = out / "teacher"
        teacher_dir.mkdir(exist_ok=True)
        teacher, tlog = train_teacher(train_m, val_m, base_cfg, eval_cfg)
        _save_run(teacher_dir, teacher, tlog, base_cfg, "teacher")
        treport = _evaluate_to(teacher_dir, teacher, test_m, eval_cfg)
        rows.append(_summary_row("teacher", None, base_cfg.seed, treport))

        results: dict[tuple[float, int], EvalReport] = {}
        for alpha in sorted(alphas):
            for seed in sorted(seeds):
                run_dir = out / f"alpha_{alpha:g}_seed_{seed}"
                run_dir.mkdir(exist_ok=True)
                run_cfg = DistillConfig(
                    alpha=alpha, lr=base_cfg.lr, adam_beta1=base_cfg.adam_beta1,
                    adam_beta2=base_cfg.adam_beta2, adam_eps=base_cfg.adam_eps,
                    weight_decay=base_cfg.weight_decay, max_epochs=base_cfg.max_epochs,
                    patience=base_cfg.patience, batch_size=base_cfg.batch_size, seed=seed,
                )
                student, slog = train_student(
                    train_m, val, teacher if alpha > 0 else None, run_cfg, eval_cfg,
                )
                _save_run(run_dir, student, slog, run_cfg, "student")
                sreport = _evaluate_to(run_dir, student, test, eval_cfg)
                results[(alpha, seed)] = sreport
                rows.append(_summary_row("student", alpha, seed, sreport))
    except TrainingError as exc:
        partial = str(exc)
        raise
    finally:
        (out / "summary.csv").write_text(SUMMARY_HEADER + "\n" + "\n".join(rows) + "\n")
        if partial is not None:
            (out / "partial.flag").write_text(partial + "\n")

    _write_sweep_svg(out / "sweep_alpha.svg", alphas, seeds, results)
    print(f"sweep complete: {len(rows) - 1} student runs + 1 teacher -> {out}")


def cmd_evaluate(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    model = load_model(args.checkpoint)
    ds = load_split_dir(args.data, args.split, with_masks=model.config.in_planes == 4)
    report = _evaluate_to(out, model, ds, _eval_config(config))
    _echo_config(config, out)
    print(f"{args.split}: mAP@50 {report.map50:.4f} mAP@75 {report.map75:.4f} "
          f"mAP@50-95 {report.map5095:.4f} P {report.precision:.4f} "
          f"R {report.recall:.4f} F1 {report.f1:.4f}")


def cmd_cross_eval(args) -> None:
    config = resolve_config(args)
    out = _out_dir(args)
    model = load_model(args.checkpoint)
    if model.config.in_planes != 3:
        raise UsageError("cross-eval takes a student or baseline checkpoint (RGB-only)")
    root = Path(args.data)
    try:
        manifest = parse_coco((root / MANIFEST_FILENAME).read_text())
    except OSError as exc:
        raise DatasetError(f"cannot read manifest under {root}: {exc}") from exc
    # whole target dataset, resized to the model input; never tiled
    raw = load_dataset(manifest, root / "images", split="test", normalize=False)
    size = model.config.input_size
    samples = []
    for s in raw.samples:
        resized = resize_sample(s, size, size)
        samples.append(ImageSample(
            id=resized.id,
            rgb=tuple(normalize_image(p) for p in resized.rgb),
            annotations=resized.annotations,
        ))
    ds = Dataset(samples=tuple(samples), categories=raw.categories, split="test")
    report = _evaluate_to(out, model, ds, _eval_config(config))
    _echo_config(config, out)
    print(f"cross-eval: mAP@50 {report.map50:.4f} mAP@50-95 {report.map5095:.4f} "
          f"F1 {report.f1:.4f}")


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _read_summary(run_dir: Path) -> list[dict]:
    path = run_dir / "summary.csv"
    if not path.exists():
        raise DatasetError(f"missing summary file {path}")
    lines = path.read_text().strip().splitlines()
    if not lines or lines[0] != SUMMARY_HEADER:
        raise DatasetError(f"unexpected summary header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append({
            "role": parts[0],
            "alpha": None if parts[1] == "" else float(parts[1]),
            "seed": int(parts[2]),
            **{k: float(v) for k, v in zip(SUMMARY_HEADER.split(",")[3:], parts[3:])},
        })
    return rows


def cmd_report(args) -> None:
    if not args.runs:
        raise UsageError("report requires at least one run directory")
    out = _out_dir(args)
    merged = ["run_id," + SUMMARY_HEADER]
    groups = []
    for run in args.runs:
        run_dir = Path(run)
        rows = _read_summary(run_dir)
        run_id = run_dir.name
        for r in rows:
            alpha_txt = "" if r["alpha"] is None else repr(r["alpha"])
            merged.append(
                f"{run_id},{r['role']},{alpha_txt},{r['seed']}," +
                ",".join(repr(r[m]) for m in REPORT_METRICS_ORDERED)
            )
        groups.append((run_id, rows))
    (out / "merged.csv").write_text("\n".join(merged) + "\n")

    svg_groups = []
    for metric in REPORT_METRICS:
        bars = []
        for run_id, rows in groups:
            students = [r for r in rows if r["role"] == "student"]
            baseline = _median_or_zero([r[metric] for r in students if r["alpha"] == 0.0])
            nonzero = sorted({r["alpha"] for r in students if r["alpha"] not in (None, 0.0)})
            best = 0.0
            for alpha in nonzero:
                v = _median_or_zero([r[metric] for r in students if r["alpha"] == alpha])
                best = max(best, v)
            bars.append((f"{run_id} base", baseline))
            bars.append((f"{run_id} best", best))
        svg_groups.append((metric, bars))
    _write_grouped_svg(out / "report.svg", "baseline vs best student", svg_groups)
    print(f"report over {len(groups)} runs -> {out}")


REPORT_METRICS_ORDERED = ("map50", "map75", "map5095", "precision", "recall", "f1")


def _median_or_zero(values: list[float]) -> float:
    return statistics.median(values) if values else 0.0


# ---------------------------------------------------------------------------
# SVG rendering (hand-rolled rectangles and text; no plotting dependency)
# ---------------------------------------------------------------------------

_PALETTE = ("#4878a8", "#e49444", "#589e62", "#b24d50", "#8a7cc2", "#967662")


def _svg_header(width: int, height: int, title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]


def _write_grouped_svg(path: Path, title: str, groups) -> None:
    """groups: [(group_label, [(bar_label, value in [0, 1]), ...]), ...]"""
    bar_w = 26
    gap = 10
    group_gap = 30
    margin_l, margin_b, margin_t = 50, 58, 30
    plot_h = 180
    x = margin_l
    positions = []
    for label, bars in groups:
        positions.append((label, x, bars))
        x += len(bars) * (bar_w + gap) - gap + group_gap
    width = int(x - group_gap + 20)
    height = plot_h + margin_t + margin_b
    lines = _svg_header(width, height, title)
    base_y = margin_t + plot_h
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = base_y - frac * plot_h
        lines.append(f'<line x1="{margin_l - 6}" y1="{y:.1f}" x2="{width - 10}" y2="{y:.1f}" '
                     f'stroke="#dddddd" stroke-width="1"/>')
        lines.append(f'<text x="{margin_l - 10}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-size="10" font-family="sans-serif">{frac:g}</text>')
    for label, gx, bars in positions:
        for i, (bar_label, value) in enumerate(bars):
            v = min(max(float(value), 0.0), 1.0)
            bx = gx + i * (bar_w + gap)
            bh = v * plot_h
            color = _PALETTE[i % len(_PALETTE)]
            lines.append(f'<rect x="{bx:.1f}" y="{base_y - bh:.1f}" width="{bar_w}" '
                         f'height="{bh:.1f}" fill="{color}"/>')
            lines.append(f'<text x="{bx + bar_w / 2:.1f}" y="{base_y - bh - 4:.1f}" '
                         f'text-anchor="middle" font-size="9" font-family="sans-serif">'
                         f'{v:.2f}</text>')
            lines.append(f'<text x="{bx + bar_w / 2:.1f}" y="{base_y + 12:.1f}" '
                         f'text-anchor="middle" font-size="8" font-family="sans-serif" '
                         f'transform="rotate(35 {bx + bar_w / 2:.1f} {base_y + 12:.1f})">'
                         f'{bar_label}</text>')
        center = gx + (len(bars) * (bar_w + gap) - gap) / 2
        lines.append(f'<text x="{center:.1f}" y="{base_y + 44:.1f}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{label}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def _write_sweep_svg(path: Path, alphas, seeds, results) -> None:
    groups = []
    for alpha in sorted(set(alphas)):
        map50 = _median_or_zero([results[(alpha, s)].map50 for s in seeds if (alpha, s) in results])
        f1 = _median_or_zero([results[(alpha, s)].f1 for s in seeds if (alpha, s) in results])
        groups.append((f"alpha={alpha:g}", [("mAP@50", map50), ("F1", f1)]))
    _write_grouped_svg(path, "student performance vs alpha (median over seeds)", groups)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lupidet", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=False):
        p.add_argument("--config", help="JSON config file merged over defaults")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--alpha", type=float, help="override train.alpha")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("generate", help="emit a synthetic dataset")
    common(p)
    p.add_argument("--masks", action="store_true", help="also write full-image masks")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prepare", help="tile, resize, and attach privileged masks")
    common(p, data=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-teacher", help="train the 4-plane teacher")
    common(p, data=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a student (alpha=0 is the baseline)")
    common(p, data=True)
    p.add_argument("--teacher", help="teacher checkpoint (required when alpha > 0)")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("sweep", help="teacher + students over the alpha/seed grid")
    common(p, data=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cross-eval", help="score an RGB-only checkpoint on another dataset")
    common(p, data=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("report", help="consolidate sweep runs into CSV + SVG")
    p.add_argument("runs", nargs="*", help="run directories containing summary.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required (see --help)")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
