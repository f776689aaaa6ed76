import logging
from typing import Dict, List, Optional, Sequence, Tuple, Any

import numpy as np

from src.detect.pyramid import FeaturePyramid
from src.utils.errors import ShapeMismatch, DegenerateProjection

logger = logging.getLogger("openworld_kit.mscal")

MODES = ("train", "infer")
LAYER_PARAMS = ("w1", "b1", "gamma", "beta", "w2", "b2")
CHECKPOINT_VERSION = 1


class MscalModule:
    """
    Per-class contrastive projector with one anchor per pyramid level.

    Each level j owns two 1x1 convolutions realized as per-location affine maps
    (w1: D x Dh, w2: Dh x Dz), a batch norm over the Dh hidden channels, and a
    unit anchor mu_j in the Dz-dimensional projection space. With
    `share_anchor` a single anchor serves every level.
    """

    def __init__(self, class_id: int, class_name: str, task_id: int,
                 layers: List[Dict[str, np.ndarray]], anchors: List[np.ndarray],
                 tau: float = 0.1, normalize: bool = True,
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5, frozen: bool = False):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        if len(anchors) not in (1, len(layers)):
            raise ShapeMismatch(f"Expected 1 or {len(layers)} anchors, got {len(anchors)}")
        self.class_id = class_id
        self.class_name = class_name
        self.task_id = task_id
        self.layers = layers
        self.anchors = anchors
        self.tau = float(tau)
        self.normalize = bool(normalize)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)
        self.frozen = bool(frozen)

    @classmethod
    def initialize(cls, class_id: int, class_name: str, task_id: int, num_levels: int, dim: int,
                   rng: np.random.Generator, hidden_dim: Optional[int] = None, proj_dim: Optional[int] = None,
                   tau: float = 0.1, normalize: bool = True, share_anchor: bool = False,
                   bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> "MscalModule":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit batch norm, random unit anchors."""
        hidden_dim = hidden_dim or dim
        proj_dim = proj_dim or max(1, dim // 2)
        if proj_dim > dim:
            raise ShapeMismatch(f"Projection dim {proj_dim} exceeds feature dim {dim}")

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        layers = []
        for _ in range(num_levels):
            layers.append({
                "w1": uniform(dim, (dim, hidden_dim)),
                "b1": uniform(dim, (hidden_dim,)),
                "gamma": np.ones(hidden_dim),
                "beta": np.zeros(hidden_dim),
                "running_mean": np.zeros(hidden_dim),
                "running_var": np.ones(hidden_dim),
                "w2": uniform(hidden_dim, (hidden_dim, proj_dim)),
                "b2": uniform(hidden_dim, (proj_dim,)),
            })
        n_anchors = 1 if share_anchor else num_levels
        anchors = []
        for _ in range(n_anchors):
            mu = rng.normal(size=proj_dim)
            anchors.append(mu / np.linalg.norm(mu))
        return cls(class_id, class_name, task_id, layers, anchors, tau=tau, normalize=normalize,
                   bn_momentum=bn_momentum, bn_eps=bn_eps)

    @property
    def num_levels(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return int(self.layers[0]["w1"].shape[0])

    @property
    def proj_dim(self) -> int:
        return int(self.layers[0]["w2"].shape[1])

    @property
    def shares_anchor(self) -> bool:
        return len(self.anchors) == 1 and self.num_levels > 1

    @property
    def default_mode(self) -> str:
        """Frozen modules always run on locked running statistics."""
        return "infer" if self.frozen else "train"

    def anchor(self, level: int) -> np.ndarray:
        return self.anchors[0] if len(self.anchors) == 1 else self.anchors[level]

    def anchor_index(self, level: int) -> int:
        return 0 if len(self.anchors) == 1 else level

    # ------------------------------------------------------------------ forward

    def forward(self, levels: Sequence[np.ndarray], mode: str) -> Tuple[List[np.ndarray], List[Dict[str, Any]]]:
        """
        Project flat per-level location arrays.

        Args:
            levels: Per level, an (n_j, D) array of location embeddings.
            mode: "train" normalizes with batch statistics, "infer" with running statistics.

        Returns:
            Per-level (n_j, Dz) projections and the traces needed by `backward`.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if len(levels) != self.num_levels:
            raise ShapeMismatch(f"Module has {self.num_levels} levels, input has {len(levels)}")

        outputs, traces = [], []
        for j, x in enumerate(levels):
            if x.ndim != 2 or x.shape[1] != self.dim:
                raise ShapeMismatch(f"Level {j} input has shape {x.shape}, expected (n, {self.dim})")
            p = self.layers[j]
            a = x @ p["w1"] + p["b1"]
            if mode == "train":
                mean = a.mean(axis=0)
                var = a.var(axis=0)
            else:
                mean = p["running_mean"]
                var = p["running_var"]
            inv_std = 1.0 / np.sqrt(var + self.bn_eps)
            xhat = (a - mean) * inv_std
            h = p["gamma"] * xhat + p["beta"]
            r = np.maximum(h, 0.0)
            u = r @ p["w2"] + p["b2"]
            if self.normalize:
                norm = np.linalg.norm(u, axis=1, keepdims=True)
                if np.any(norm < 1e-12):
                    raise DegenerateProjection(
                        f"Class {self.class_name!r} level {j}: {int(np.sum(norm < 1e-12))} locations project to zero")
                z = u / norm
            else:
                norm = None
                z = u
            outputs.append(z)
            traces.append({"x": x, "a": a, "mean": mean, "var": var, "inv_std": inv_std, "xhat": xhat,
                           "h": h, "r": r, "norm": norm, "z": z, "mode": mode})
        return outputs, traces

    # ----------------------------------------------------------------- backward

    def backward(self, traces: Sequence[Dict[str, Any]], grad_z: Sequence[np.ndarray]) -> Dict[str, np.ndarray]:
        """
        Backpropagate dL/dz through normalization, affine2, ReLU, batch norm and affine1.

        Returns:
            Gradients keyed like `parameters()`, anchors excluded.
        """
        grads: Dict[str, np.ndarray] = {}
        for j, (t, dz) in enumerate(zip(traces, grad_z)):
            p = self.layers[j]
            if self.normalize:
                z = t["z"]
                du = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / t["norm"]
            else:
                du = dz
            grads[f"L{j}.w2"] = t["r"].T @ du
            grads[f"L{j}.b2"] = du.sum(axis=0)
            dh = (du @ p["w2"].T) * (t["h"] > 0)
            grads[f"L{j}.gamma"] = np.sum(dh * t["xhat"], axis=0)
            grads[f"L{j}.beta"] = dh.sum(axis=0)
            dxhat = dh * p["gamma"]
            if t["mode"] == "train":
                n = dxhat.shape[0]
                da = (t["inv_std"] / n) * (n * dxhat - dxhat.sum(axis=0)
                                           - t["xhat"] * np.sum(dxhat * t["xhat"], axis=0))
            else:
                da = dxhat * t["inv_std"]
            grads[f"L{j}.w1"] = t["x"].T @ da
            grads[f"L{j}.b1"] = da.sum(axis=0)
        return grads

    def update_running_stats(self, traces: Sequence[Dict[str, Any]]):
        """Momentum update of running statistics from train-mode traces (unbiased variance)."""
        if self.frozen:
            return
        m = self.bn_momentum
        for p, t in zip(self.layers, traces):
            if t["mode"] != "train":
                continue
            n = t["a"].shape[0]
            unbiased = t["var"] * n / (n - 1) if n > 1 else t["var"]
            p["running_mean"] = (1.0 - m) * p["running_mean"] + m * t["mean"]
            p["running_var"] = (1.0 - m) * p["running_var"] + m * unbiased

    # --------------------------------------------------------------- parameters

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays (batch norm running statistics are buffers, not parameters)."""
        params = {}
        for j, p in enumerate(self.layers):
            for key in LAYER_PARAMS:
                params[f"L{j}.{key}"] = p[key]
        for k, mu in enumerate(self.anchors):
            params[f"anchor{k}"] = mu
        return params

    def set_parameters(self, params: Dict[str, np.ndarray]):
        for name, value in params.items():
            if name.startswith("anchor"):
                self.anchors[int(name[len("anchor"):])] = value
            else:
                level, key = name.split(".", 1)
                self.layers[int(level[1:])][key] = value

    def renormalize_anchors(self):
        self.anchors = [mu / np.linalg.norm(mu) for mu in self.anchors]

    def freeze(self) -> "MscalModule":
        self.frozen = True
        return self

    def copy(self) -> "MscalModule":
        return MscalModule.from_dict(self.to_dict())

    # -------------------------------------------------------------- persistence

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "task_id": self.task_id,
            "tau": self.tau,
            "normalize": self.normalize,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "frozen": self.frozen,
            "layers": [{k: v.tolist() for k, v in p.items()} for p in self.layers],
            "anchors": [mu.tolist() for mu in self.anchors],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "MscalModule":
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"Unsupported MSCAL checkpoint version {payload.get('version')}")
        layers = [{k: np.asarray(v, dtype=np.float64) for k, v in p.items()} for p in payload["layers"]]
        anchors = [np.asarray(mu, dtype=np.float64) for mu in payload["anchors"]]
        return cls(payload["class_id"], payload["class_name"], payload["task_id"], layers, anchors,
                   tau=payload["tau"], normalize=payload["normalize"], bn_momentum=payload["bn_momentum"],
                   bn_eps=payload["bn_eps"], frozen=payload["frozen"])


def project(module: MscalModule, pyramid: FeaturePyramid, mode: str = "infer") -> List[np.ndarray]:
    """Project every location of one pyramid; output grids mirror the input grids with Dz channels."""
    if pyramid.num_levels != module.num_levels or pyramid.dim != module.dim:
        raise ShapeMismatch(
            f"Module expects {module.num_levels} levels of D={module.dim}, "
            f"pyramid has {pyramid.num_levels} levels of D={pyramid.dim}")
    flat = [pyramid.flat(j).astype(np.float64) for j in range(pyramid.num_levels)]
    outputs, _ = module.forward(flat, mode)
    return [z.reshape(pyramid.layers[j].shape[0], pyramid.layers[j].shape[1], -1) for j, z in enumerate(outputs)]
