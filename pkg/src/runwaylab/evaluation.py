"""COCO-style average precision for single-class detections.

AP at one IoU threshold pools all detections, sorts by descending score
(ties by insertion order), greedily matches per image, and averages the
precision envelope over 101 recall points. The headline number averages
the ten thresholds 0.50 to 0.95 in 0.05 steps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .dataset import Condition
from .geometry import BBox

IOU_THRESHOLDS: tuple[float, ...] = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0


class EvalError(Exception):
    pass


class NoGroundTruth(EvalError):
    pass


@dataclass(frozen=True)
class EvalReport:
    """Per-threshold APs plus their mean, tagged with condition and strategy."""

    per_threshold_ap: dict[float, float]
    coco_ap: float
    condition: Optional[Condition]
    strategy: str

    def to_json(self, path: str | Path) -> None:
        doc = {
            "condition": self.condition.value if self.condition else None,
            "strategy": self.strategy,
            "coco_ap": self.coco_ap,
            "per_threshold_ap": {f"{t:.2f}": v for t, v in self.per_threshold_ap.items()},
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["condition", "strategy", "coco_ap"]
                       + [f"ap_{t:.2f}" for t in IOU_THRESHOLDS])
            w.writerow([self.condition.value if self.condition else "", self.strategy,
                        f"{self.coco_ap:.6f}"]
                       + [f"{self.per_threshold_ap[t]:.6f}" for t in IOU_THRESHOLDS])


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; zero-area unions give 0."""
    ix0 = max(a.xmin, b.xmin)
    iy0 = max(a.ymin, b.ymin)
    ix1 = min(a.xmax, b.xmax)
    iy1 = min(a.ymax, b.ymax)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _pool_detections(dets: Mapping[Any, Sequence]) -> list[tuple[float, Any, BBox]]:
    pooled = []
    for key, det_list in dets.items():
        for d in det_list:
            pooled.append((float(d.score), key, d.bbox))
    # Stable sort keeps insertion order among equal scores.
    pooled.sort(key=lambda t: -t[0])
    return pooled


def _match_flags(
    pooled: Sequence[tuple[float, Any, BBox]],
    gts: Mapping[Any, Sequence[BBox]],
    tau: float,
) -> np.ndarray:
    """Greedy per-image matching; 1 where a detection claims an unmatched gt."""
    matched: dict[Any, set[int]] = {key: set() for key in gts}
    flags = np.zeros(len(pooled), dtype=bool)
    for i, (_, key, box) in enumerate(pooled):
        best_iou = 0.0
        best_gi = -1
        for gi, gt in enumerate(gts[key]):
            if gi in matched[key]:
                continue
            v = iou(box, gt)
            if v >= tau and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            matched[key].add(best_gi)
            flags[i] = True
    return flags


def ap_at_iou(
    dets: Mapping[Any, Sequence],
    gts: Mapping[Any, Sequence[BBox]],
    tau: float,
) -> float:
    """101-point interpolated AP at one IoU threshold.

    dets maps image key to objects with .score and .bbox; gts maps image key
    to ground-truth boxes. Detection keys must be a subset of gt keys.
    """
    missing = set(dets) - set(gts)
    if missing:
        raise ValueError(f"detections reference unknown images: {sorted(missing)!r}")
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise NoGroundTruth("no ground-truth boxes")
    pooled = _pool_detections(dets)
    if not pooled:
        return 0.0
    tp = np.cumsum(_match_flags(pooled, gts, tau))
    ranks = np.arange(1, len(pooled) + 1)
    precisions = tp / ranks
    recalls = tp / n_gt
    # Precision envelope from the right, sampled at the 101 recall points.
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    idx = np.searchsorted(recalls, RECALL_POINTS, side="left")
    ap = np.where(idx < len(pooled), np.concatenate([envelope, [0.0]])[idx], 0.0)
    return float(ap.mean())


def coco_ap(
    dets: Mapping[Any, Sequence],
    gts: Mapping[Any, Sequence[BBox]],
    condition: Optional[Condition] = None,
    strategy: str = "",
) -> EvalReport:
    """AP averaged over the ten-threshold IoU sweep."""
    per = {tau: ap_at_iou(dets, gts, tau) for tau in IOU_THRESHOLDS}
    return EvalReport(
        per_threshold_ap=per,
        coco_ap=float(np.mean([per[t] for t in IOU_THRESHOLDS])),
        condition=condition,
        strategy=strategy,
    )


@dataclass(frozen=True)
class _Det:
    bbox: BBox
    score: float


def load_coco_ground_truth(path: str | Path) -> dict[int, list[BBox]]:
    """Read COCO annotation JSON into per-image ground-truth boxes."""
    with open(path) as f:
        doc = json.load(f)
    gts: dict[int, list[BBox]] = {img["id"]: [] for img in doc["images"]}
    for ann in doc["annotations"]:
        x, y, w, h = ann["bbox"]
        gts[ann["image_id"]].append(BBox(x, y, x + w, y + h))
    return gts


def load_detections(path: str | Path) -> dict[int, list[_Det]]:
    """Read a detections JSON: a list of {image_id, bbox [x, y, w, h], score}."""
    with open(path) as f:
        records = json.load(f)
    dets: dict[int, list[_Det]] = {}
    for rec in records:
        x, y, w, h = rec["bbox"]
        dets.setdefault(rec["image_id"], []).append(
            _Det(bbox=BBox(x, y, x + w, y + h), score=float(rec["score"])))
    return dets
