import logging
import math
from dataclasses import replace
from typing import List, Dict, Optional, Any, Sequence

import numpy as np
from scipy.special import expit
from sklearn.metrics.pairwise import cosine_similarity

from src.detect.boxes import Detection, nms
from src.detect.pyramid import FeaturePyramid
from src.embedding.registry import UNKNOWN, ZERO_NORM
from src.utils.config import get_config
from src.utils.errors import ZeroVector, SourceOutOfRange, ShapeMismatch

logger = logging.getLogger("openworld_kit.detect")

GATE_MODES = ("relabel", "suppress")


def classify_locations(pyramid: FeaturePyramid, prompts: np.ndarray, logit_scale: float) -> List[np.ndarray]:
    """
    Cosine-similarity head.

    Returns:
        Per level, an (H, W, C) array with confidence sigmoid(logit_scale * cos(w_c, f)).
    """
    prompts = np.asarray(prompts, dtype=np.float64)
    if logit_scale <= 0:
        raise ValueError(f"logit_scale must be positive, got {logit_scale}")
    norms = np.linalg.norm(prompts, axis=1)
    if np.any(norms < ZERO_NORM):
        raise ZeroVector(f"Prompt rows {np.flatnonzero(norms < ZERO_NORM).tolist()} have zero norm")
    if prompts.shape[1] != pyramid.dim:
        raise ShapeMismatch(f"Prompts have D={prompts.shape[1]}, pyramid has D={pyramid.dim}")

    scores = []
    for j in range(pyramid.num_levels):
        h, w, _ = pyramid.geometry.shapes[j]
        cos = cosine_similarity(pyramid.flat(j), prompts)
        scores.append(expit(logit_scale * cos).reshape(h, w, -1))
    return scores


def decode_detections(pyramid: FeaturePyramid, class_scores: Sequence[np.ndarray], conf_threshold: float,
                      unknown_row: Optional[int] = None) -> List[Detection]:
    """
    One candidate per location: the argmax prompt row, kept if its confidence reaches
    `conf_threshold`. Ties go to the lower row index; `unknown_row` maps to UNKNOWN.
    """
    dets: List[Detection] = []
    for j, scores in enumerate(class_scores):
        if scores.shape[:2] != pyramid.layers[j].shape[:2]:
            raise ShapeMismatch(f"Scores for level {j} do not match the pyramid grid")
        best = np.argmax(scores, axis=-1)
        best_conf = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0]
        rows, cols = np.nonzero(best_conf >= conf_threshold)
        for r, c in zip(rows.tolist(), cols.tolist()):
            label = int(best[r, c])
            if unknown_row is not None and label == unknown_row:
                label = UNKNOWN
            dets.append(Detection(
                box=tuple(float(v) for v in pyramid.boxes[j][r, c]),
                label=label,
                confidence=float(best_conf[r, c]),
                source=(j, r, c),
                ood=0.0,
            ))
    return dets


def apply_ood_gate(dets: Sequence[Detection], ood_map: Sequence[np.ndarray], theta: float,
                   mode: str = "relabel") -> List[Detection]:
    """
    Attach OOD scores and gate known detections whose score exceeds `theta`.

    In "relabel" mode gated detections become UNKNOWN with their confidence kept;
    in "suppress" mode they are dropped. UNKNOWN detections pass through.
    """
    if mode not in GATE_MODES:
        raise ValueError(f"Unknown gate mode {mode!r}, expected one of {GATE_MODES}")
    out: List[Detection] = []
    for det in dets:
        level, row, col = det.source
        if not (0 <= level < len(ood_map) and 0 <= row < ood_map[level].shape[0] and 0 <= col < ood_map[level].shape[1]):
            raise SourceOutOfRange(f"Detection source {det.source} is outside the OOD map")
        score = float(ood_map[level][row, col])
        gated = det.label != UNKNOWN and score > theta
        if gated and mode == "suppress":
            continue
        out.append(replace(det, ood=score, label=UNKNOWN if gated else det.label))
    return out


class OpenWorldDetector:
    def __init__(self, config: Optional[Any] = None):
        """
        Inference head: cosine classification, decoding, OOD gating, and NMS.

        Args:
            config: ConfigLoader; loads the default configuration if None.
        """
        self.config = config if config else get_config()

        self.logit_scale = float(self.config.get('detection.logit_scale', 10.0))
        self.conf_threshold = float(self.config.get('detection.conf_threshold', 0.25))
        self.nms_iou = float(self.config.get('detection.nms_iou', 0.7))
        self.class_wise = bool(self.config.get('detection.class_wise_nms', True))
        self.gate_mode = self.config.get('detection.gate_mode', 'relabel')
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"detection.gate_mode must be one of {GATE_MODES}")

    def detect(self, pyramid: FeaturePyramid, prompts: np.ndarray, unknown_row: Optional[int],
               ood_map: Optional[Sequence[np.ndarray]] = None, theta: float = math.inf) -> List[Detection]:
        """
        Run the inference path on one scene.

        Args:
            pyramid: Scene feature pyramid.
            prompts: Prompt matrix, known rows first.
            unknown_row: Row index carrying the UNKNOWN label, or None.
            ood_map: Per-level OOD scores; None skips the gate.
            theta: Gate threshold.

        Returns:
            Post-NMS detections in kept order.
        """
        scores = classify_locations(pyramid, prompts, self.logit_scale)
        dets = decode_detections(pyramid, scores, self.conf_threshold, unknown_row)
        if ood_map is not None:
            dets = apply_ood_gate(dets, ood_map, theta, self.gate_mode)
        return nms(dets, self.nms_iou, self.class_wise)

    def describe(self) -> Dict[str, Any]:
        return {
            'logit_scale': self.logit_scale,
            'conf_threshold': self.conf_threshold,
            'nms_iou': self.nms_iou,
            'class_wise_nms': self.class_wise,
            'gate_mode': self.gate_mode,
        }
