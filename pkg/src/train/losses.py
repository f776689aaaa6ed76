import logging
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.embedding.registry import ClassEmbeddingRegistry, ZERO_NORM
from src.mscal.assign import SampleAssignment
from src.utils.errors import NoSamples, ZeroVector

logger = logging.getLogger("openworld_kit.train")


def sampled_locations(assignments: Dict[int, SampleAssignment], num_levels: int) -> list:
    """Per level, the union over classes of every positive and negative location."""
    masks = []
    for j in range(num_levels):
        mask = None
        for assignment in assignments.values():
            m = assignment.samples(j)
            mask = m.copy() if mask is None else mask | m
        masks.append(mask)
    return masks


def detection_loss(levels: Sequence[np.ndarray], assignments: Dict[int, SampleAssignment],
                   registry: ClassEmbeddingRegistry, logit_scale: float) -> Tuple[float, np.ndarray]:
    """
    Mean binary cross-entropy over (sampled location, known class) pairs.

    The logit for class c at location f is logit_scale * cos(w_c, f); the target
    is 1 where the location is a positive of c and 0 otherwise.

    Args:
        levels: Per level, the (n_j, D) batch location embeddings.
        assignments: class index in the registry -> its SampleAssignment.
        registry: Known classes; rows marked frozen receive zero gradient.
        logit_scale: Positive scale on cosine logits.

    Returns:
        (loss, gradient w.r.t. the (N, D) embedding matrix)
    """
    W = registry.matrix()
    n_classes = W.shape[0]
    w_norm = np.linalg.norm(W, axis=1, keepdims=True)
    if np.any(w_norm < ZERO_NORM):
        raise ZeroVector("Class embedding with zero norm")
    W_hat = W / w_norm

    sampled = sampled_locations(assignments, len(levels)) if assignments else []
    feats, targets = [], []
    for j, x in enumerate(levels):
        if not sampled or not sampled[j].any():
            continue
        idx = np.flatnonzero(sampled[j])
        f = x[idx]
        f_norm = np.linalg.norm(f, axis=1, keepdims=True)
        if np.any(f_norm < ZERO_NORM):
            raise ZeroVector(f"Zero-norm location feature at level {j}")
        feats.append(f / f_norm)
        y = np.zeros((idx.size, n_classes))
        for c, assignment in assignments.items():
            y[:, c] = assignment.positive[j][idx]
        targets.append(y)
    if not feats:
        raise NoSamples("Detection loss needs at least one assigned location")

    F_hat = np.concatenate(feats)
    Y = np.concatenate(targets)
    logits = logit_scale * (F_hat @ W_hat.T)
    count = logits.size
    loss = float(np.sum(np.logaddexp(0.0, logits) - Y * logits) / count)

    g_logits = (expit(logits) - Y) / count
    d_what = logit_scale * (g_logits.T @ F_hat)
    grad = (d_what - W_hat * np.sum(W_hat * d_what, axis=1, keepdims=True)) / w_norm
    for c, entry in enumerate(registry.entries):
        if entry.frozen:
            grad[c] = 0.0
    return loss, grad
