"""Post-processing and evaluation: NMS, COCO-style AP/mAP, precision/recall/F1.

AP uses the 101-point interpolation over recall {0, 0.01, ..., 1}. The
single-number precision/recall/F1 operating point is: detections surviving
NMS with score >= 0.5, matched class-wise at IoU 0.5, counts pooled over
classes and images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Annotation, BoundingBox, Dataset, Detection, box_area, iou

# IoU thresholds 0.50:0.05:0.95, built from integer ratios so comparisons
# against exactly representable recall/IoU values stay exact.
IOU_THRESHOLDS = tuple(i / 100.0 for i in range(50, 100, 5))
RECALL_GRID = np.arange(101) / 100.0


@dataclass(frozen=True)
class EvalConfig:
    """Decode/post-process/eval knobs used by model evaluation."""

    score_threshold: float = 0.01
    nms_iou: float = 0.5
    thresholds: tuple[float, ...] = IOU_THRESHOLDS
    operating_score: float = 0.5
    operating_iou: float = 0.5


def _sort_order(dets: list[Detection]) -> list[int]:
    # score descending; ties: larger area first, then input order
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, -box_area(dets[i].box), i))


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy non-maximum suppression.

    A detection is kept iff its IoU with every already-kept detection of the
    same class is strictly below the threshold. Output is sorted by score
    descending (ties: larger area, then input order).
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    kept: list[Detection] = []
    for i in _sort_order(dets):
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def match_detections(
    dets: list[Detection],
    gts: list[Annotation],
    iou_threshold: float,
) -> tuple[list[bool], list[bool], int]:
    """Greedy class-aware matching of score-sorted detections to ground truth.

    Each detection matches the unmatched same-class ground truth of highest
    IoU >= threshold (ties: first in list order); each ground truth matches
    at most once. Returns (tp_flags, fp_flags, fn_count).
    """
    matched = [False] * len(gts)
    tp_flags = []
    for d in dets:
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            matched[best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    fn = matched.count(False)
    return tp_flags, [not t for t in tp_flags], fn


def average_precision(tp_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP for one score-sorted TP/FP sequence.

    Zero when there is no ground truth; callers skip classes that are empty
    on both sides rather than scoring them.
    """
    if num_gt <= 0 or not tp_flags:
        return 0.0
    flags = np.asarray(tp_flags, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # monotone non-increasing precision envelope
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # first index with recall >= r; envelope value there is the suffix max
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    valid = idx < len(recall)
    ap = precision[idx[valid]].sum() / len(RECALL_GRID)
    return float(ap)


def prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, and their harmonic mean from pooled counts."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    """Per-class AP table plus operating-point precision/recall/F1."""

    thresholds: tuple[float, ...]
    per_class_ap: dict[int, tuple[float, ...]]  # valid classes only
    map50: float
    map75: float
    map5095: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def to_json(self) -> str:
        doc = {
            "map50": self.map50,
            "map75": self.map75,
            "map5095": self.map5095,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "thresholds": list(self.thresholds),
            "per_class_ap": {
                str(c): {f"{t:.2f}": ap for t, ap in zip(self.thresholds, aps)}
                for c, aps in self.per_class_ap.items()
            },
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        thresholds = tuple(doc["thresholds"])
        per_class = {
            int(c): tuple(row[f"{t:.2f}"] for t in thresholds)
            for c, row in doc["per_class_ap"].items()
        }
        return cls(
            thresholds=thresholds, per_class_ap=per_class,
            map50=doc["map50"], map75=doc["map75"], map5095=doc["map5095"],
            precision=doc["precision"], recall=doc["recall"], f1=doc["f1"],
            tp=doc["counts"]["tp"], fp=doc["counts"]["fp"], fn=doc["counts"]["fn"],
        )

    def to_csv(self) -> str:
        lines = ["metric,class,threshold,value"]
        for name in ("map50", "map75", "map5095", "precision", "recall", "f1"):
            lines.append(f"{name},,,{getattr(self, name)!r}")
        for name in ("tp", "fp", "fn"):
            lines.append(f"{name},,,{getattr(self, name)}")
        for c in sorted(self.per_class_ap):
            for t, ap in zip(self.thresholds, self.per_class_ap[c]):
                lines.append(f"ap,{c},{t:.2f},{ap!r}")
        return "\n".join(lines) + "\n"


def _threshold_row(thresholds: tuple[float, ...], wanted: float) -> int | None:
    for i, t in enumerate(thresholds):
        if abs(t - wanted) < 1e-9:
            return i
    return None


def coco_map(
    dets_by_image: dict[str, list[Detection]],
    gts_by_image: dict[str, list[Annotation]],
    num_classes: int,
    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
    operating_score: float = 0.5,
    operating_iou: float = 0.5,
) -> EvalReport:
    """Score a prediction set against ground truth across IoU thresholds.

    AP is computed per class per threshold by matching within each image and
    pooling the score-sorted TP/FP sequence across images. Classes with no
    ground truth anywhere are excluded from every mean. The operating-point
    counts use detections with score >= `operating_score` at `operating_iou`.
    """
    if set(dets_by_image) != set(gts_by_image):
        raise ValueError("detection and ground-truth image id sets differ")
    image_ids = sorted(gts_by_image)
    for dets in dets_by_image.values():
        for d in dets:
            if d.class_id >= num_classes:
                raise ValueError(f"unknown class id {d.class_id} in detections")

    num_gt = [0] * num_classes
    for gts in gts_by_image.values():
        for g in gts:
            if g.class_id >= num_classes:
                raise ValueError(f"unknown class id {g.class_id} in ground truth")
            num_gt[g.class_id] += 1
    valid_classes = [c for c in range(num_classes) if num_gt[c] > 0]

    # per image: detections sorted once (score desc, area desc, input order)
    sorted_dets = {
        img: [dets_by_image[img][i] for i in _sort_order(dets_by_image[img])]
        for img in image_ids
    }

    per_class_ap: dict[int, tuple[float, ...]] = {}
    for c in valid_classes:
        rows = []
        for t in thresholds:
            pooled: list[tuple[float, float, int, bool]] = []
            order = 0
            for img in image_ids:
                cls_dets = [d for d in sorted_dets[img] if d.class_id == c]
                cls_gts = [g for g in gts_by_image[img] if g.class_id == c]
                tp_flags, _, _ = match_detections(cls_dets, cls_gts, t)
                for d, flag in zip(cls_dets, tp_flags):
                    pooled.append((d.score, box_area(d.box), order, flag))
                    order += 1
            pooled.sort(key=lambda e: (-e[0], -e[1], e[2]))
            rows.append(average_precision([e[3] for e in pooled], num_gt[c]))
        per_class_ap[c] = tuple(rows)

    if valid_classes:
        by_threshold = [
            sum(per_class_ap[c][i] for c in valid_classes) / len(valid_classes)
            for i in range(len(thresholds))
        ]
        map5095 = sum(by_threshold) / len(by_threshold)
    else:
        by_threshold = [0.0] * len(thresholds)
        map5095 = 0.0
    i50 = _threshold_row(thresholds, 0.50)
    i75 = _threshold_row(thresholds, 0.75)
    map50 = by_threshold[i50] if i50 is not None else float("nan")
    map75 = by_threshold[i75] if i75 is not None else float("nan")

    tp = fp = fn = 0
    for img in image_ids:
        op_dets = [d for d in sorted_dets[img] if d.score >= operating_score]
        tps, fps, fns = match_detections(op_dets, list(gts_by_image[img]), operating_iou)
        tp += sum(tps)
        fp += sum(fps)
        fn += fns
    precision, recall, f1 = prf1(tp, fp, fn)

    return EvalReport(
        thresholds=tuple(thresholds), per_class_ap=per_class_ap,
        map50=map50, map75=map75, map5095=map5095,
        precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn,
    )


# ---------------------------------------------------------------------------
# Prediction interchange
# ---------------------------------------------------------------------------

def write_predictions(path: Path | str, dets_by_image: dict[str, list[Detection]]) -> None:
    """Persist detections as a JSON list of {image_id, class_id, bbox, score}."""
    rows = []
    for img in sorted(dets_by_image):
        for d in dets_by_image[img]:
            rows.append({
                "image_id": img,
                "class_id": d.class_id,
                "bbox": d.box.as_xywh(),
                "score": d.score,
            })
    Path(path).write_text(json.dumps(rows, sort_keys=True, indent=1))


def read_predictions(path: Path | str) -> dict[str, list[Detection]]:
    rows = json.loads(Path(path).read_text())
    out: dict[str, list[Detection]] = {}
    for row in rows:
        x, y, w, h = row["bbox"]
        out.setdefault(str(row["image_id"]), []).append(Detection(
            box=BoundingBox(x, y, x + w, y + h),
            class_id=int(row["class_id"]),
            score=float(row["score"]),
        ))
    return out


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------

def evaluate_detector(model, dataset: Dataset, cfg: EvalConfig = EvalConfig()):
    """Run a detector over a dataset split and score it.

    The teacher (4-plane) consumes each sample's privileged mask; 3-plane
    models see RGB only. Returns (EvalReport, detections by sample id).
    """
    from .detector import decode, predict_samples

    preds = predict_samples(model, dataset.samples)
    dets_by_image: dict[str, list[Detection]] = {}
    gts_by_image: dict[str, list[Annotation]] = {}
    for sample, raw in zip(dataset.samples, preds):
        dets = decode(raw, model.config, cfg.score_threshold)
        dets_by_image[sample.id] = nms(dets, cfg.nms_iou)
        gts_by_image[sample.id] = list(sample.annotations)
    report = coco_map(
        dets_by_image, gts_by_image, dataset.num_classes,
        thresholds=cfg.thresholds,
        operating_score=cfg.operating_score,
        operating_iou=cfg.operating_iou,
    )
    return report, dets_by_image
