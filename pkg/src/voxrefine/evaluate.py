"""Evaluation: detection matching, average precision, and reporting.

Average precision follows the detection-benchmark convention: rank all
detections of a class by confidence, greedily match each against the
highest-overlap ground truth of its scene (a second detection of an
already-claimed box counts as a false positive), then average the
interpolated precision at 40 equally spaced recall levels and scale to
[0, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Roi, iou_3d, iou_bev, nms
from .pipeline import RefinementModel

__all__ = [
    "RECALL_POSITIONS",
    "ScoredDetection",
    "average_precision",
    "EvalReport",
    "evaluate",
]

RECALL_POSITIONS = 40


@dataclass
class ScoredDetection:
    """A refined box in a specific scene, carrying its confidence."""

    scene: int
    box: Roi


def _iou_fn(mode: str):
    try:
        return {"3d": iou_3d, "bev": iou_bev}[mode]
    except KeyError:
        raise ConfigError(f"eval.iou_mode must be '3d' or 'bev', got {mode!r}") from None


def match_detections(
    detections: list, gts: list, iou_threshold: float, iou_mode: str = "3d"
) -> np.ndarray:
    """Greedy confidence-ordered matching; True per detection = true positive.

    Detections are visited in descending confidence (ties by list
    order).  Each is compared against every ground truth of its scene;
    if its best-overlap box clears the threshold and is unclaimed, the
    detection claims it, otherwise it is a false positive.
    """
    fn = _iou_fn(iou_mode)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].box.confidence, i))
    claimed = np.zeros(len(gts), dtype=bool)
    is_tp = np.zeros(len(detections), dtype=bool)
    for i in order:
        det = detections[i]
        best_j = -1
        best_iou = 0.0
        for j, (scene, gt) in enumerate(gts):
            if scene != det.scene:
                continue
            overlap = fn(det.box, gt)
            if overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0 and best_iou >= iou_threshold and not claimed[best_j]:
            claimed[best_j] = True
            is_tp[i] = True
    return is_tp


def average_precision(
    detections: list, gts: list, iou_threshold: float, iou_mode: str = "3d"
) -> float | None:
    """AP over 40 recall positions, in [0, 100]; None without ground truth.

    `detections` are ScoredDetection, `gts` are (scene, Roi) pairs of
    one class.  Invariant under any strictly monotone transform of all
    confidences.
    """
    if not gts:
        return None
    if not detections:
        return 0.0
    is_tp = match_detections(detections, gts, iou_threshold, iou_mode)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].box.confidence, i))
    tp_cum = np.cumsum([1.0 if is_tp[i] else 0.0 for i in order])
    fp_cum = np.cumsum([0.0 if is_tp[i] else 1.0 for i in order])
    recall = tp_cum / len(gts)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    total = 0.0
    for k in range(1, RECALL_POSITIONS + 1):
        level = k / RECALL_POSITIONS
        reached = recall >= level - 1e-12
        total += float(precision[reached].max()) if reached.any() else 0.0
    return 100.0 * total / RECALL_POSITIONS


@dataclass
class EvalReport:
    """Per-class AP plus refinement-quality and calibration summaries."""

    ap: dict
    proposal_mean_iou: float
    refined_mean_iou: float
    calibration: list
    num_scenes: int
    num_detections: int
    extras: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        doc = {
            "ap": {str(k): v for k, v in self.ap.items()},
            "proposal_mean_iou": self.proposal_mean_iou,
            "refined_mean_iou": self.refined_mean_iou,
            "iou_gain": self.refined_mean_iou - self.proposal_mean_iou,
            "calibration": self.calibration,
            "num_scenes": self.num_scenes,
            "num_detections": self.num_detections,
        }
        doc.update(self.extras)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2)


def _calibration_table(confs: list, ious: list, bins: int = 10) -> list:
    """Rows of (bin_low, bin_high, count, mean_confidence, mean_iou)."""
    rows = []
    confs_arr = np.asarray(confs)
    ious_arr = np.asarray(ious)
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        mask = (confs_arr >= lo) & (confs_arr < hi if b < bins - 1 else confs_arr <= hi)
        rows.append(
            {
                "low": lo,
                "high": hi,
                "count": int(mask.sum()),
                "mean_confidence": float(confs_arr[mask].mean()) if mask.any() else None,
                "mean_iou": float(ious_arr[mask].mean()) if mask.any() else None,
            }
        )
    return rows


def evaluate(model: RefinementModel, scenes: list, seed: int = 0) -> EvalReport:
    """Full evaluation pass: proposals -> refinement -> suppression -> AP."""
    from .train import build_proposals  # late import to avoid a cycle

    cfg = model.cfg
    mode = cfg["eval.iou_mode"]
    _iou_fn(mode)  # validate early
    thresholds = {0: cfg["eval.match_threshold_car"], 1: cfg["eval.match_threshold_small"]}

    detections_by_cls: dict[int, list] = {}
    gts_by_cls: dict[int, list] = {}
    before: list[float] = []
    after: list[float] = []
    confs: list[float] = []
    matched_ious: list[float] = []
    n_det = 0

    for index, scene in enumerate(scenes):
        for gt in scene.boxes:
            gts_by_cls.setdefault(gt.cls, []).append((index, gt))
        proposals = build_proposals(scene.boxes, cfg, [seed, index], training=False)
        if not proposals:
            continue
        prepared = model.prepare(scene.points, proposals, scene.boxes)
        out = model.forward(prepared, training=False)
        refined = model.decode_detections(prepared, out)
        for r in range(len(proposals)):
            g = prepared.targets.matched_gt[r]
            if g >= 0:
                before.append(float(prepared.targets.raw_iou[r]))
                after.append(iou_3d(refined[r], prepared.gts[g]))
                confs.append(refined[r].confidence)
                matched_ious.append(after[-1])
        kept = nms(refined, cfg["eval.nms_threshold"], cfg["eval.nms_keep"])
        for i in kept:
            box = refined[i]
            detections_by_cls.setdefault(box.cls, []).append(ScoredDetection(index, box))
            n_det += 1

    ap: dict = {}
    for cls, gts in gts_by_cls.items():
        threshold = thresholds.get(cls, cfg["eval.match_threshold_small"])
        ap[cls] = average_precision(detections_by_cls.get(cls, []), gts, threshold, mode)

    if not before:
        raise ContractError("evaluation matched no proposals to ground truth")
    return EvalReport(
        ap=ap,
        proposal_mean_iou=float(np.mean(before)),
        refined_mean_iou=float(np.mean(after)),
        calibration=_calibration_table(confs, matched_ious),
        num_scenes=len(scenes),
        num_detections=n_det,
    )
