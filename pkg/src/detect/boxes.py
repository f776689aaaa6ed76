import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from src.detect.pyramid import Box

logger = logging.getLogger("openworld_kit.detect")


@dataclass(frozen=True)
class Detection:
    box: Box
    label: int             # known class index, or UNKNOWN
    confidence: float
    source: Tuple[int, int, int]  # (level, row, col)
    ood: float = 0.0


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes with continuous coordinates."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    iy = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def confidence_order(dets: Sequence[Detection]) -> List[int]:
    """Indices by descending confidence, ties broken by earlier source index."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].source))


def nms(dets: Sequence[Detection], iou_threshold: float, class_wise: bool = True) -> List[Detection]:
    """
    Greedy non-maximum suppression.

    A detection is kept iff its IoU with every already-kept detection (of the same
    label when `class_wise`; UNKNOWN counts as its own label) is below `iou_threshold`.
    Output is in kept order, i.e. non-increasing confidence.
    """
    kept: List[Detection] = []
    for i in confidence_order(dets):
        det = dets[i]
        suppressed = False
        for other in kept:
            if class_wise and other.label != det.label:
                continue
            if iou(det.box, other.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(det)
    logger.debug(f"NMS kept {len(kept)}/{len(dets)} detections")
    return kept
