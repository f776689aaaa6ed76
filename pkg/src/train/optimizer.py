import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Any, Tuple

import numpy as np

from src.utils.config import get_config
from src.utils.errors import ShapeMismatch

logger = logging.getLogger("openworld_kit.train")


@dataclass
class OptimizerState:
    """First/second moments and step counts per parameter name."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState,
               lr: float = 1e-4, weight_decay: float = 0.0125, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One AdamW update with bias correction and decoupled weight decay.

        theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)

    Parameters without an entry in `grads` are returned unchanged and keep their
    moments and step count. Frozen parameters must be left out of `params`.

    Returns:
        New parameter arrays (inputs are not mutated) and the updated state.
    """
    updated = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = theta
            continue
        if np.shape(g) != np.shape(theta):
            raise ShapeMismatch(f"Gradient for {name!r} has shape {np.shape(g)}, parameter {np.shape(theta)}")
        m = state.m.get(name, np.zeros_like(theta))
        v = state.v.get(name, np.zeros_like(theta))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        t = state.steps.get(name, 0) + 1
        state.m[name] = m
        state.v[name] = v
        state.steps[name] = t
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        updated[name] = theta * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated, state


class AdamW:
    def __init__(self, config: Optional[Any] = None, group_lrs: Optional[Dict[str, float]] = None):
        """
        AdamW over named numpy arrays.

        Args:
            config: ConfigLoader; reads the training.* optimizer keys.
            group_lrs: Learning rate per parameter-name prefix; names matching no
                prefix use training.learning_rate. The longest matching prefix wins.
        """
        self.config = config if config else get_config()
        self.lr = float(self.config.get('training.learning_rate', 1e-4))
        self.weight_decay = float(self.config.get('training.weight_decay', 0.0125))
        self.beta1 = float(self.config.get('training.beta1', 0.9))
        self.beta2 = float(self.config.get('training.beta2', 0.999))
        self.eps = float(self.config.get('training.eps', 1e-8))
        self.group_lrs = {prefix: float(lr) for prefix, lr in (group_lrs or {}).items()}
        self.state = OptimizerState()

    def lr_for(self, name: str) -> float:
        matches = [prefix for prefix in self.group_lrs if name.startswith(prefix)]
        return self.group_lrs[max(matches, key=len)] if matches else self.lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        groups: Dict[float, Dict[str, np.ndarray]] = {}
        for name, theta in params.items():
            groups.setdefault(self.lr_for(name), {})[name] = theta
        updated: Dict[str, np.ndarray] = {}
        for lr, group in groups.items():
            out, self.state = adamw_step(group, grads, self.state, lr=lr, weight_decay=self.weight_decay,
                                         beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            updated.update(out)
        return {name: updated[name] for name in params}
