"""Detection metrics: class-wise NMS, COCO-style AP/AR, and the base-to-novel
transferability ratios."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .anchors import iou_matrix
from .datamodel import DetectionDataset

IOU_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
NMS_IOU = 0.5
SCORE_FLOOR = 0.05
MAX_DETS_PER_IMAGE = 100


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be a finite value in [0, 1], got {self.score}")
        x, y, w, h = self.bbox
        if not all(np.isfinite(v) for v in self.bbox) or w <= 0 or h <= 0:
            raise ValueError(f"invalid box {self.bbox}")


class GroundTruth(NamedTuple):
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class SplitMetrics:
    """AP averaged over IoU 0.50:0.05:0.95, the 0.50/0.75 cuts, and AR@100."""

    ap: float
    ap50: float
    ap75: float
    ar: float


@dataclass(frozen=True)
class EvalReport:
    bAP: float
    bAP50: float
    bAP75: float
    bAR: float
    nAP: float
    nAP50: float
    nAP75: float
    nAR: float
    PT: float | None
    PT50: float | None
    PT75: float | None
    RT: float | None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def dataset_ground_truths(ds: DetectionDataset, class_ids=None) -> list[GroundTruth]:
    wanted = None if class_ids is None else set(class_ids)
    out = []
    for rec in ds.records:
        for ann in rec.annotations:
            if wanted is None or ann.class_id in wanted:
                out.append(GroundTruth(rec.image_id, ann.class_id, ann.bbox))
    return out


def nms(
    detections: Sequence[Detection],
    iou_threshold: float = NMS_IOU,
    score_floor: float = SCORE_FLOOR,
    max_per_image: int = MAX_DETS_PER_IMAGE,
) -> list[Detection]:
    """Class-wise greedy suppression, then a per-image top-k score cap."""
    by_group: dict[tuple[int, int], list[Detection]] = {}
    for det in detections:
        if det.score >= score_floor:
            by_group.setdefault((det.image_id, det.class_id), []).append(det)

    survivors: dict[int, list[Detection]] = {}
    for (image_id, _), group in sorted(by_group.items()):
        group.sort(key=lambda d: (-d.score, d.bbox))
        boxes = np.array([d.bbox for d in group], dtype=np.float64)
        ious = iou_matrix(boxes, boxes)
        keep: list[int] = []
        for i in range(len(group)):
            if all(ious[i, j] <= iou_threshold for j in keep):
                keep.append(i)
        survivors.setdefault(image_id, []).extend(group[i] for i in keep)

    out: list[Detection] = []
    for image_id in sorted(survivors):
        dets = sorted(survivors[image_id], key=lambda d: (-d.score, d.class_id, d.bbox))
        out.extend(dets[:max_per_image])
    return out


def _sorted_class_dets(detections, class_id):
    dets = [d for d in detections if d.class_id == class_id]
    dets.sort(key=lambda d: (-d.score, d.image_id, d.bbox))
    return dets


def _match_flags(dets: list[Detection], gts: list[GroundTruth], iou_threshold: float) -> np.ndarray:
    """Greedy score-ordered matching; one gt matches at most one detection.

    Returns a bool array marking each detection true positive or not.
    """
    gt_by_image: dict[int, list[int]] = {}
    for i, gt in enumerate(gts):
        gt_by_image.setdefault(gt.image_id, []).append(i)
    gt_boxes = np.array([g.bbox for g in gts], dtype=np.float64).reshape(-1, 4)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i, det in enumerate(dets):
        candidates = gt_by_image.get(det.image_id, [])
        if not candidates:
            continue
        ious = iou_matrix(np.array([det.bbox]), gt_boxes[candidates])[0]
        best, best_iou = -1, -1.0
        for j, giou in zip(candidates, ious):
            if taken[j] or giou < iou_threshold:
                continue
            if giou > best_iou:
                best, best_iou = j, giou
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp


def _interpolated_ap(tp: np.ndarray, n_gts: int) -> float:
    """101-point interpolated AP from cumulative score-ordered matches."""
    if n_gts == 0:
        raise ValueError("AP undefined without ground truths")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gts
    precision = cum_tp / np.arange(1, len(tp) + 1)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def average_precision(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_thresholds: Iterable[float] = IOU_THRESHOLDS,
) -> tuple[dict[int, float], float]:
    """Per-class AP averaged over IoU thresholds, plus the mean over classes.

    Classes that appear only in detections carry no signal and are skipped
    with a warning; classes with ground truth but no detections score 0.
    """
    thresholds = tuple(iou_thresholds)
    gt_classes = sorted({g.class_id for g in ground_truths})
    orphan = sorted({d.class_id for d in detections} - set(gt_classes))
    if orphan:
        warnings.warn(f"no ground truth for classes {orphan}; excluded from AP")
    per_class: dict[int, float] = {}
    for cid in gt_classes:
        gts = [g for g in ground_truths if g.class_id == cid]
        dets = _sorted_class_dets(detections, cid)
        aps = [_interpolated_ap(_match_flags(dets, gts, t), len(gts)) for t in thresholds]
        per_class[cid] = float(np.mean(aps))
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


def average_recall(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_thresholds: Iterable[float] = IOU_THRESHOLDS,
    max_per_image: int = MAX_DETS_PER_IMAGE,
) -> float:
    """Mean over classes and thresholds of the maximum achieved recall with
    at most max_per_image detections per image."""
    thresholds = tuple(iou_thresholds)
    gt_classes = sorted({g.class_id for g in ground_truths})
    if not gt_classes:
        return 0.0
    capped: list[Detection] = []
    by_image: dict[int, list[Detection]] = {}
    for det in detections:
        by_image.setdefault(det.image_id, []).append(det)
    for image_id in sorted(by_image):
        dets = sorted(by_image[image_id], key=lambda d: (-d.score, d.class_id, d.bbox))
        capped.extend(dets[:max_per_image])

    recalls = []
    for cid in gt_classes:
        gts = [g for g in ground_truths if g.class_id == cid]
        dets = _sorted_class_dets(capped, cid)
        for t in thresholds:
            tp = _match_flags(dets, gts, t)
            recalls.append(tp.sum() / len(gts))
    return float(np.mean(recalls))


def evaluate_split(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
) -> SplitMetrics:
    _, ap = average_precision(detections, ground_truths)
    _, ap50 = average_precision(detections, ground_truths, (0.5,))
    _, ap75 = average_precision(detections, ground_truths, (0.75,))
    ar = average_recall(detections, ground_truths)
    return SplitMetrics(ap=ap, ap50=ap50, ap75=ap75, ar=ar)


def precision_recall(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-class raw (recall, precision) curves at one IoU threshold."""
    out: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for cid in sorted({g.class_id for g in ground_truths}):
        gts = [g for g in ground_truths if g.class_id == cid]
        dets = _sorted_class_dets(detections, cid)
        tp = _match_flags(dets, gts, iou_threshold)
        cum_tp = np.cumsum(tp)
        recall = cum_tp / len(gts)
        precision = cum_tp / np.arange(1, len(tp) + 1) if len(tp) else np.array([])
        out[cid] = (recall, precision)
    return out


def _ratio(num: float, den: float, name: str) -> float | None:
    if den == 0:
        warnings.warn(f"{name} undefined: zero denominator")
        return None
    return num / den


def transferability(base: SplitMetrics, novel: SplitMetrics) -> dict[str, float | None]:
    """Novel-over-base ratios; scale-invariant, so raw or x100 inputs agree."""
    return {
        "PT": _ratio(novel.ap, base.ap, "PT"),
        "PT50": _ratio(novel.ap50, base.ap50, "PT50"),
        "PT75": _ratio(novel.ap75, base.ap75, "PT75"),
        "RT": _ratio(novel.ar, base.ar, "RT"),
    }


def build_report(base: SplitMetrics, novel: SplitMetrics) -> EvalReport:
    ratios = transferability(base, novel)
    return EvalReport(
        bAP=base.ap, bAP50=base.ap50, bAP75=base.ap75, bAR=base.ar,
        nAP=novel.ap, nAP50=novel.ap50, nAP75=novel.ap75, nAR=novel.ar,
        PT=ratios["PT"], PT50=ratios["PT50"], PT75=ratios["PT75"], RT=ratios["RT"],
    )


def format_report(report: EvalReport) -> str:
    """Fixed-width table: AP/AR columns x100, transfer ratios to 2 decimals."""
    cols = ["bAP", "bAP50", "bAP75", "bAR", "nAP", "nAP50", "nAP75", "nAR",
            "PT", "PT50", "PT75", "RT"]
    cells = []
    for name in cols:
        value = getattr(report, name)
        if value is None:
            cells.append("n/a")
        elif name.startswith(("b", "n")):
            cells.append(f"{100.0 * value:.1f}")
        else:
            cells.append(f"{value:.2f}")
    header = " ".join(f"{c:>6}" for c in cols)
    row = " ".join(f"{c:>6}" for c in cells)
    return header + "\n" + row


def save_detections_jsonl(detections: Sequence[Detection], path) -> None:
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps({
                "image_id": det.image_id,
                "class_id": det.class_id,
                "bbox": [float(v) for v in det.bbox],
                "score": float(det.score),
            }) + "\n")


def load_detections_jsonl(path) -> list[Detection]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(Detection(
                image_id=int(obj["image_id"]),
                class_id=int(obj["class_id"]),
                bbox=tuple(float(v) for v in obj["bbox"]),
                score=float(obj["score"]),
            ))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
    return out
