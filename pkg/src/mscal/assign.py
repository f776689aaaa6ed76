from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from src.detect.pyramid import GroundTruth, PyramidGeometry, level_for_box, centers_in_box


@dataclass
class SampleAssignment:
    """Per-level boolean masks over batch locations (image-major, then row-major)."""
    positive: List[np.ndarray]
    negative: List[np.ndarray]

    @property
    def num_positive(self) -> int:
        return int(sum(m.sum() for m in self.positive))

    @property
    def num_negative(self) -> int:
        return int(sum(m.sum() for m in self.negative))

    def samples(self, level: int) -> np.ndarray:
        return self.positive[level] | self.negative[level]

    @property
    def num_samples(self) -> int:
        return self.num_positive + self.num_negative


def foreground_masks(geometry: PyramidGeometry, gt_boxes: Sequence[GroundTruth], level_bounds: Sequence[float],
                     n_images: int = 1) -> List[Dict[int, np.ndarray]]:
    """Per level, class_id -> mask of locations whose center lies in a box of that class owned by the level."""
    per_level: List[Dict[int, np.ndarray]] = []
    for j in range(geometry.num_levels):
        centers = geometry.centers(j)
        size = geometry.level_size(j)
        masks: Dict[int, np.ndarray] = {}
        for gt in gt_boxes:
            if level_for_box(gt.box, level_bounds) != j:
                continue
            mask = masks.setdefault(gt.class_id, np.zeros(n_images * size, dtype=bool))
            offset = gt.image_index * size
            mask[offset:offset + size] |= centers_in_box(centers, gt.box)
        per_level.append(masks)
    return per_level


def assign_samples(geometry: PyramidGeometry, gt_boxes: Sequence[GroundTruth], class_id: int, neg_cap: int,
                   rng_seed: int, level_bounds: Sequence[float], n_images: int = 1) -> SampleAssignment:
    """
    Positive and negative locations for one class.

    Positives are locations whose center lies inside a box of `class_id` owned by
    that level. Locations positive for any other class are negatives; background
    locations fill the remaining budget, sampled uniformly across all levels.
    Total negatives never exceed neg_cap * max(1, positives).
    """
    per_level = foreground_masks(geometry, gt_boxes, level_bounds, n_images)
    positive, class_neg, background = [], [], []
    for j, masks in enumerate(per_level):
        n = n_images * geometry.level_size(j)
        pos = masks.get(class_id, np.zeros(n, dtype=bool))
        other = np.zeros(n, dtype=bool)
        for cid, mask in masks.items():
            if cid != class_id:
                other |= mask
        other &= ~pos
        positive.append(pos)
        class_neg.append(other)
        background.append(~(pos | other))

    rng = np.random.default_rng(rng_seed)
    num_pos = int(sum(m.sum() for m in positive))
    cap = int(neg_cap) * max(1, num_pos)

    sizes = [m.shape[0] for m in positive]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pooled_class = np.flatnonzero(np.concatenate(class_neg))
    pooled_background = np.flatnonzero(np.concatenate(background))

    if pooled_class.size > cap:
        chosen = np.sort(rng.choice(pooled_class, size=cap, replace=False))
    else:
        budget = min(pooled_background.size, cap - pooled_class.size)
        sampled = rng.choice(pooled_background, size=budget, replace=False) if budget > 0 else np.zeros(0, dtype=int)
        chosen = np.sort(np.concatenate([pooled_class, sampled]))

    pooled_negative = np.zeros(offsets[-1], dtype=bool)
    pooled_negative[chosen] = True
    negative = [pooled_negative[offsets[j]:offsets[j + 1]] for j in range(len(sizes))]
    return SampleAssignment(positive=positive, negative=negative)
