import logging
from typing import List, Sequence

import numpy as np

from src.detect.pyramid import FeaturePyramid
from src.mscal.module import MscalModule, project
from src.utils.errors import NoModules, EmptyScores, ShapeMismatch

logger = logging.getLogger("openworld_kit.mscal")


def ood_score(modules: Sequence[MscalModule], z_by_class: Sequence[np.ndarray], layer: int) -> float:
    """
    S(z) = -max_i mu_ij . z_i, where z_i is the location projected by module i.

    Higher means more out-of-distribution.
    """
    if not modules:
        raise NoModules("OOD score needs at least one class module")
    if len(z_by_class) != len(modules):
        raise ShapeMismatch(f"Got {len(z_by_class)} projections for {len(modules)} modules")
    return -max(float(m.anchor(layer) @ z) for m, z in zip(modules, z_by_class))


def ood_score_map(modules: Sequence[MscalModule], pyramid: FeaturePyramid) -> List[np.ndarray]:
    """Per level, the (H, W) grid of OOD scores under infer-mode projection."""
    if not modules:
        raise NoModules("OOD score map needs at least one class module")
    best = [np.full(pyramid.layers[j].shape[:2], -np.inf) for j in range(pyramid.num_levels)]
    for module in modules:
        grids = project(module, pyramid, mode="infer")
        for j, z in enumerate(grids):
            np.maximum(best[j], z @ module.anchor(j), out=best[j])
    return [-b for b in best]


def calibrate_threshold(scores: Sequence[float], quantile: float = 0.95) -> float:
    """Empirical quantile (linear interpolation) of OOD scores at known-class locations."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise EmptyScores("Cannot calibrate a threshold from an empty score set")
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    return float(np.quantile(scores, quantile))


def freeze_class_modules(modules: Sequence[MscalModule], up_to_task: int) -> List[MscalModule]:
    """Mark every module introduced at or before `up_to_task` frozen. Idempotent."""
    frozen = 0
    for module in modules:
        if module.task_id <= up_to_task and not module.frozen:
            module.freeze()
            frozen += 1
    if frozen:
        logger.info(f"Froze {frozen} MSCAL modules up to task {up_to_task}")
    return list(modules)
