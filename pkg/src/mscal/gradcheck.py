from typing import Callable, Dict

import numpy as np

STEP = 1e-5
TOLERANCE = 1e-4
# absolute differences below this are float64 cancellation noise at STEP
NOISE_FLOOR = 1e-7


def numeric_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                      h: float = STEP) -> Dict[str, np.ndarray]:
    """
    Central-difference gradients of `loss_fn` w.r.t. every entry of every array in `params`.

    Arrays are perturbed in place and restored; `loss_fn` must read them by reference.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            plus = loss_fn()
            arr[idx] = orig - h
            minus = loss_fn()
            arr[idx] = orig
            g[idx] = (plus - minus) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    """
    max |analytic - numeric| / max(1e-8, |numeric|) over all entries.

    Differences at or below `atol` count as zero.
    """
    if numeric.size == 0:
        return 0.0
    diff = np.abs(analytic - numeric)
    diff = np.where(diff <= atol, 0.0, diff)
    return float(np.max(diff / np.maximum(1e-8, np.abs(numeric))))


def check_gradients(loss_fn: Callable[[], float], params: Dict[str, np.ndarray],
                    analytic: Dict[str, np.ndarray], h: float = STEP, atol: float = NOISE_FLOOR) -> Dict[str, float]:
    """Per-parameter relative error between analytic and central-difference gradients."""
    numeric = numeric_gradients(loss_fn, params, h)
    return {name: relative_error(analytic[name], numeric[name], atol) for name in params}
