import logging
from typing import Dict, List, Sequence, Tuple, Any

import numpy as np
from scipy.special import logsumexp

from src.mscal.assign import SampleAssignment
from src.mscal.module import MscalModule
from src.utils.errors import NoSamples, ShapeMismatch

logger = logging.getLogger("openworld_kit.mscal")


def _sample_logits(module: MscalModule, projected: Sequence[np.ndarray],
                   assignment: SampleAssignment) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
    """Per level: sampled row indices, their logits mu_j . z / tau, and their positive flags."""
    if len(projected) != module.num_levels:
        raise ShapeMismatch(f"Expected {module.num_levels} projected levels, got {len(projected)}")
    rows, logits, is_pos = [], [], []
    for j, z in enumerate(projected):
        idx = np.flatnonzero(assignment.samples(j))
        rows.append(idx)
        logits.append(z[idx] @ module.anchor(j) / module.tau)
        is_pos.append(assignment.positive[j][idx])
    return rows, logits, is_pos


def mscal_loss(module: MscalModule, projected: Sequence[np.ndarray], assignment: SampleAssignment) -> float:
    """
    Multi-scale contrastive anchor loss for one class.

    L = -(1/|Z+|) sum_j sum_{k in Z+_j} log( exp(mu_j.z_k/tau) / sum_m sum_{n in Z_m} exp(mu_m.z_n/tau) )

    The denominator pools samples of every level. A class without positives
    contributes 0.

    Raises:
        NoSamples: if no level has any sample.
    """
    return mscal_loss_and_grads(module, projected, assignment)[0]


def mscal_loss_and_grads(module: MscalModule, projected: Sequence[np.ndarray],
                         assignment: SampleAssignment) -> Tuple[float, List[np.ndarray], Dict[str, np.ndarray]]:
    """Loss value, dL/dz per level (dense, zero off-sample) and dL/d anchor."""
    if assignment.num_samples == 0:
        raise NoSamples(f"Class {module.class_name!r} has no samples at any level")
    grad_z = [np.zeros_like(z) for z in projected]
    grad_anchor = {f"anchor{k}": np.zeros_like(mu) for k, mu in enumerate(module.anchors)}
    num_pos = assignment.num_positive
    if num_pos == 0:
        return 0.0, grad_z, grad_anchor

    rows, logits, is_pos = _sample_logits(module, projected, assignment)
    flat_logits = np.concatenate(logits)
    lse = logsumexp(flat_logits)
    loss = float(lse - flat_logits[np.concatenate(is_pos)].sum() / num_pos)

    for j, (idx, s, pos) in enumerate(zip(rows, logits, is_pos)):
        if idx.size == 0:
            continue
        g = np.exp(s - lse) - pos / num_pos  # dL/ds
        grad_z[j][idx] = np.outer(g, module.anchor(j)) / module.tau
        grad_anchor[f"anchor{module.anchor_index(j)}"] += projected[j][idx].T @ g / module.tau
    return loss, grad_z, grad_anchor


def mscal_loss_gradients(module: MscalModule, traces: Sequence[Dict[str, Any]],
                         assignment: SampleAssignment) -> Dict[str, np.ndarray]:
    """Analytic gradients of the class loss w.r.t. every projector parameter and anchor."""
    projected = [t["z"] for t in traces]
    _, grad_z, grad_anchor = mscal_loss_and_grads(module, projected, assignment)
    grads = module.backward(traces, grad_z)
    grads.update(grad_anchor)
    return grads


def mscal_total_loss(modules: Sequence[MscalModule], levels: Sequence[np.ndarray],
                     assignments: Dict[int, SampleAssignment]) -> float:
    """Mean class loss over all known classes; classes without positives count as 0."""
    return mscal_total_loss_and_grads(modules, levels, assignments, with_grads=False)[0]


def mscal_total_loss_and_grads(modules: Sequence[MscalModule], levels: Sequence[np.ndarray],
                               assignments: Dict[int, SampleAssignment], with_grads: bool = True
                               ) -> Tuple[float, Dict[int, float], Dict[int, Dict[str, np.ndarray]], Dict[int, List]]:
    """
    Mean loss over classes plus, for trainable modules with positives, gradients of the mean.

    Each module runs in its default mode (train, or infer when frozen).

    Returns:
        (total, per-class losses, per-class gradients, per-class traces)
    """
    if not modules:
        return 0.0, {}, {}, {}
    per_class: Dict[int, float] = {}
    grads: Dict[int, Dict[str, np.ndarray]] = {}
    traces_by_class: Dict[int, List] = {}
    n = len(modules)
    for module in modules:
        assignment = assignments[module.class_id]
        if assignment.num_positive == 0:
            per_class[module.class_id] = 0.0
            continue
        projected, traces = module.forward(levels, module.default_mode)
        traces_by_class[module.class_id] = traces
        loss, grad_z, grad_anchor = mscal_loss_and_grads(module, projected, assignment)
        per_class[module.class_id] = loss
        if with_grads and not module.frozen:
            g = module.backward(traces, grad_z)
            g.update(grad_anchor)
            grads[module.class_id] = {k: v / n for k, v in g.items()}
    total = float(sum(per_class[m.class_id] for m in modules) / n)
    return total, per_class, grads, traces_by_class


def mscal_loss_floor(modules: Sequence[MscalModule], assignments: Dict[int, SampleAssignment]) -> float:
    """
    Lower bound of `mscal_total_loss` for these assignments.

    A class loss is logsumexp over all samples minus the mean positive logit, which is
    at least log|Z+| (equality when negatives vanish and positives tie).
    """
    if not modules:
        return 0.0
    counts = [assignments[m.class_id].num_positive for m in modules]
    return float(sum(np.log(n) for n in counts if n > 0) / len(modules))
