import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Any, Sequence, Tuple

import numpy as np

from src.analytics.matching import ScoredBox, GtBox, match_detections, group_by_scene
from src.detect.boxes import iou
from src.embedding.registry import TaskSchedule
from src.utils.config import get_config
from src.utils.errors import UndefinedOperatingPoint

logger = logging.getLogger("openworld_kit.analytics")

AP_PROTOCOL = "all-point interpolated AP (VOC2010+), IoU >= {iou}"
WI_PROTOCOL = ("first confidence cutoff reaching known recall >= {recall}; closed-set precision ignores "
               "false positives overlapping unknown GT at IoU >= {iou}, open-set precision counts them")


def average_precision(confidences: Sequence[float], tp: Sequence[bool], n_gt: int) -> Optional[float]:
    """
    All-point interpolated AP.

    Returns:
        None when the class has neither GT nor detections, 0.0 when it has detections
        but no GT.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    if n_gt == 0:
        return None if confidences.size == 0 else 0.0
    if confidences.size == 0:
        return 0.0
    order = np.argsort(-confidences, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    rec = tp_cum / float(n_gt)
    prec = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = np.maximum(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def class_ap(dets: Sequence[ScoredBox], gts: Sequence[GtBox], class_name: str,
             iou_thr: float = 0.5) -> Optional[float]:
    """AP of one class, matching per scene and ranking across scenes."""
    confidences, flags, n_gt = [], [], 0
    for _, scene_dets, scene_gts in group_by_scene(
            (d for d in dets if d.label == class_name), (g for g in gts if g.class_name == class_name)):
        n_gt += len(scene_gts)
        result = match_detections(scene_dets, scene_gts, iou_thr, label_aware=False)
        confidences += [d.confidence for d in scene_dets]
        flags += result.tp.tolist()
    return average_precision(confidences, flags, n_gt)


def mean_ap(per_class: Dict[str, Optional[float]], classes: Sequence[str]) -> Optional[float]:
    """Mean over classes with a defined AP; None if there are none."""
    values = [per_class[c] for c in classes if per_class.get(c) is not None]
    return float(np.mean(values)) if values else None


def _unknown_matches(dets: Sequence[ScoredBox], gts: Sequence[GtBox], unknown_classes: Sequence[str],
                     iou_thr: float, unknown_labeled: bool) -> Tuple[int, int]:
    unknown = set(unknown_classes)
    matched = total = 0
    for _, scene_dets, scene_gts in group_by_scene(
            (d for d in dets if d.is_unknown == unknown_labeled), (g for g in gts if g.class_name in unknown)):
        total += len(scene_gts)
        if scene_dets and scene_gts:
            matched += match_detections(scene_dets, scene_gts, iou_thr, label_aware=False).num_matched_gt
    return matched, total


def u_recall(dets: Sequence[ScoredBox], gts: Sequence[GtBox], unknown_classes: Sequence[str],
             iou_thr: float = 0.5) -> Optional[float]:
    """Share of unknown GT (all unknown classes pooled) matched by UNKNOWN-labeled detections."""
    matched, total = _unknown_matches(dets, gts, unknown_classes, iou_thr, unknown_labeled=True)
    return matched / total if total else None


def a_ose(dets: Sequence[ScoredBox], gts: Sequence[GtBox], unknown_classes: Sequence[str],
          iou_thr: float = 0.5) -> int:
    """Number of unknown GT boxes matched by detections carrying a known label."""
    matched, _ = _unknown_matches(dets, gts, unknown_classes, iou_thr, unknown_labeled=False)
    return matched


def wilderness_impact(dets: Sequence[ScoredBox], gts: Sequence[GtBox], known_classes: Sequence[str],
                      unknown_classes: Sequence[str], recall_level: float = 0.8, iou_thr: float = 0.5) -> float:
    """
    WI = P_K / P_{K u U} - 1 at the first confidence cutoff where known recall reaches `recall_level`.

    Known-labeled detections are matched label-aware to known GT. Unmatched ones that
    overlap an unknown GT (IoU >= iou_thr) are dropped from the closed-set precision P_K
    and counted as false positives in the open-set precision.

    Raises:
        UndefinedOperatingPoint: if the recall level is never reached.
    """
    known, unknown = set(known_classes), set(unknown_classes)
    conf, is_tp, hits_unknown = [], [], []
    n_known_gt = 0
    for _, scene_dets, scene_gts in group_by_scene((d for d in dets if not d.is_unknown), gts):
        known_gts = [g for g in scene_gts if g.class_name in known]
        unknown_gts = [g for g in scene_gts if g.class_name in unknown]
        n_known_gt += len(known_gts)
        tp = match_detections(scene_dets, known_gts, iou_thr, label_aware=True).tp
        for d, det in enumerate(scene_dets):
            conf.append(det.confidence)
            is_tp.append(bool(tp[d]))
            hits_unknown.append(any(iou(det.box, g.box) >= iou_thr for g in unknown_gts))
    if n_known_gt == 0 or not conf:
        raise UndefinedOperatingPoint("No known GT or no known-labeled detections to sweep")

    conf = np.asarray(conf)
    order = np.argsort(-conf, kind="stable")
    conf = conf[order]
    tp_cum = np.cumsum(np.asarray(is_tp)[order])
    fp = ~np.asarray(is_tp)[order]
    fp_unk_cum = np.cumsum(fp & np.asarray(hits_unknown)[order])
    fp_known_cum = np.cumsum(fp & ~np.asarray(hits_unknown)[order])

    # cutoffs sit at the end of each group of equal confidence
    ends = np.flatnonzero(np.append(conf[1:] != conf[:-1], True))
    for k in ends:
        if tp_cum[k] / n_known_gt >= recall_level:
            tp_k = float(tp_cum[k])
            p_k = tp_k / (tp_k + fp_known_cum[k])
            p_ku = tp_k / (tp_k + fp_known_cum[k] + fp_unk_cum[k])
            return float(p_k / p_ku - 1.0)
    raise UndefinedOperatingPoint(f"Known recall never reaches {recall_level}")


@dataclass
class EvalReport:
    task_id: int
    map_prev: Optional[float]
    map_curr: Optional[float]
    map_both: Optional[float]
    u_recall: Optional[float]
    wi: Optional[float]
    a_ose: int
    per_class_ap: Dict[str, Optional[float]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "EvalReport":
        return cls(**payload)

    def summary_row(self) -> Dict[str, Any]:
        return {"task_id": self.task_id, "map_prev": self.map_prev, "map_curr": self.map_curr,
                "map_both": self.map_both, "u_recall": self.u_recall, "wi": self.wi, "a_ose": self.a_ose,
                "arm": self.metadata.get("arm")}


class OwodEvaluator:
    def __init__(self, config: Optional[Any] = None):
        """
        Open-world metric suite: per-class AP, mAP splits, U-Recall, WI, and A-OSE.

        Args:
            config: ConfigLoader; reads evaluation.iou_threshold and evaluation.wi_recall_level.
        """
        self.config = config if config else get_config()
        self.iou_thr = float(self.config.get('evaluation.iou_threshold', 0.5))
        self.recall_level = float(self.config.get('evaluation.wi_recall_level', 0.8))

    def evaluate_task(self, dets: Sequence[ScoredBox], gts: Sequence[GtBox], schedule: TaskSchedule,
                      task_id: int, metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
        """
        Assemble every metric for the detections produced under `task_id`'s registry.

        Args:
            dets: Detections of the split, any scene order.
            gts: Full GT of the split, unknown classes included.
            schedule: Task schedule naming previous, current and unknown classes.
            task_id: Task whose registry produced `dets`.
            metadata: Extra fields recorded in the report (arm, checkpoint, ...).

        Returns:
            EvalReport; undefined metrics are None.
        """
        prev = schedule.previously_known_at(task_id)
        curr = schedule.introduced_at(task_id)
        known = prev + curr
        gt_classes = sorted({g.class_name for g in gts})
        unknown = sorted(set(schedule.unknown_at(task_id)) | (set(gt_classes) - set(known)))

        per_class = {c: class_ap(dets, gts, c, self.iou_thr) for c in known}
        try:
            wi = wilderness_impact(dets, gts, known, unknown, self.recall_level, self.iou_thr)
        except UndefinedOperatingPoint as e:
            logger.warning(f"Task {task_id}: WI undefined ({e})")
            wi = None

        n_unknown_gt = sum(g.class_name in set(unknown) for g in gts)
        report = EvalReport(
            task_id=task_id,
            map_prev=mean_ap(per_class, prev),
            map_curr=mean_ap(per_class, curr),
            map_both=mean_ap(per_class, known),
            u_recall=u_recall(dets, gts, unknown, self.iou_thr),
            wi=wi,
            a_ose=a_ose(dets, gts, unknown, self.iou_thr),
            per_class_ap=per_class,
            metadata={
                "ap_protocol": AP_PROTOCOL.format(iou=self.iou_thr),
                "wi_protocol": WI_PROTOCOL.format(recall=self.recall_level, iou=self.iou_thr),
                "n_detections": len(dets),
                "n_known_gt": len(gts) - n_unknown_gt,
                "n_unknown_gt": n_unknown_gt,
                **(metadata or {}),
            },
            config=self.config.resolved() if hasattr(self.config, 'resolved') else {},
        )
        logger.info(f"Task {task_id}: mAP both={_fmt(report.map_both)} U-Recall={_fmt(report.u_recall)} "
                    f"WI={_fmt(report.wi)} A-OSE={report.a_ose}")
        return report


def _fmt(value: Optional[float]) -> str:
    return "—" if value is None else f"{value:.4f}"
