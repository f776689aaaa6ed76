from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.detect.boxes import iou
from src.embedding.registry import UNKNOWN_NAME

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class ScoredBox:
    """A detection as evaluation sees it: string label, "unknown" for the UNKNOWN class."""
    scene_id: str
    box: Box
    label: str
    confidence: float
    ood: float = 0.0

    @property
    def is_unknown(self) -> bool:
        return self.label == UNKNOWN_NAME


@dataclass(frozen=True)
class GtBox:
    scene_id: str
    box: Box
    class_name: str


@dataclass
class MatchResult:
    """Per detection the matched GT index (or None) and its IoU; per GT the matching detection."""
    det_gt: List[Optional[int]]
    det_iou: List[float]
    gt_det: List[Optional[int]]

    @property
    def tp(self) -> np.ndarray:
        return np.array([g is not None for g in self.det_gt], dtype=bool)

    @property
    def num_matched_gt(self) -> int:
        return sum(d is not None for d in self.gt_det)


def confidence_order(dets: Sequence[ScoredBox]) -> np.ndarray:
    """Descending confidence; equal confidences keep input order."""
    return np.argsort(-np.asarray([d.confidence for d in dets], dtype=np.float64), kind="stable")


def match_detections(dets: Sequence[ScoredBox], gts: Sequence[GtBox], iou_thr: float = 0.5,
                     label_aware: bool = True) -> MatchResult:
    """
    Greedy matching within one scene.

    Detections are visited by descending confidence; each takes the unmatched GT of
    highest IoU >= iou_thr (same label only when `label_aware`), ties to the lower GT index.
    """
    det_gt: List[Optional[int]] = [None] * len(dets)
    det_iou = [0.0] * len(dets)
    gt_det: List[Optional[int]] = [None] * len(gts)
    for d in confidence_order(dets):
        det = dets[d]
        best, best_iou = None, iou_thr
        for g, gt in enumerate(gts):
            if gt_det[g] is not None or (label_aware and gt.class_name != det.label):
                continue
            overlap = iou(det.box, gt.box)
            if overlap > best_iou or (best is None and overlap >= best_iou):
                best, best_iou = g, overlap
        if best is not None:
            det_gt[d] = best
            det_iou[d] = best_iou
            gt_det[best] = int(d)
    return MatchResult(det_gt=det_gt, det_iou=det_iou, gt_det=gt_det)


def group_by_scene(dets: Iterable[ScoredBox], gts: Iterable[GtBox]
                   ) -> List[Tuple[str, List[ScoredBox], List[GtBox]]]:
    """(scene_id, dets, gts) triples in scene-id order, file order kept within a scene."""
    det_map: Dict[str, List[ScoredBox]] = defaultdict(list)
    gt_map: Dict[str, List[GtBox]] = defaultdict(list)
    for d in dets:
        det_map[d.scene_id].append(d)
    for g in gts:
        gt_map[g.scene_id].append(g)
    return [(sid, det_map.get(sid, []), gt_map.get(sid, [])) for sid in sorted(set(det_map) | set(gt_map))]
