import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional

import pandas as pd
import yaml

from src.embedding.io import registry_to_dict, registry_from_dict
from src.embedding.registry import ClassEmbeddingRegistry
from src.mscal.module import MscalModule
from src.utils.errors import MissingCheckpoint

logger = logging.getLogger("openworld_kit.checkpoint")

TRAIN_LOG_COLUMNS = ["step", "det_loss", "mscal_loss", "mscal_floor", "total"]


@dataclass
class Checkpoint:
    """Everything a task boundary hands to the next task and to inference."""
    task_id: int
    registry: ClassEmbeddingRegistry
    modules: List[MscalModule]
    theta: float
    config: Dict[str, Any] = field(default_factory=dict)
    train_log: Optional[pd.DataFrame] = None
    calibration: Dict[str, Any] = field(default_factory=dict)


def checkpoint_dir(output_dir: str, task_id: int) -> str:
    return os.path.join(output_dir, "checkpoints", f"task_{task_id}")


def save_checkpoint(path: str, ckpt: Checkpoint):
    """
    Directory layout:
        registry.json       exact class embeddings, w_0, alpha, frozen flags
        modules/<name>.json one MSCAL module per class
        config.yaml         resolved configuration snapshot
        theta.json          calibrated OOD threshold and calibration metadata
        train_log.csv       step, det_loss, mscal_loss, total
    """
    os.makedirs(os.path.join(path, "modules"), exist_ok=True)
    with open(os.path.join(path, "registry.json"), "w") as f:
        json.dump(registry_to_dict(ckpt.registry), f)
    for module in ckpt.modules:
        with open(os.path.join(path, "modules", f"{module.class_name}.json"), "w") as f:
            json.dump(module.to_dict(), f)
    with open(os.path.join(path, "config.yaml"), "w") as f:
        yaml.safe_dump(ckpt.config, f, sort_keys=True)
    with open(os.path.join(path, "theta.json"), "w") as f:
        json.dump({"task_id": ckpt.task_id, "theta": ckpt.theta, **ckpt.calibration}, f, indent=2, sort_keys=True)
    log = ckpt.train_log if ckpt.train_log is not None else pd.DataFrame(columns=TRAIN_LOG_COLUMNS)
    log.to_csv(os.path.join(path, "train_log.csv"), index=False)
    logger.info(f"Saved task {ckpt.task_id} checkpoint to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isdir(path) or not os.path.exists(os.path.join(path, "registry.json")):
        raise MissingCheckpoint(f"No checkpoint at {path}")
    with open(os.path.join(path, "registry.json"), "r") as f:
        registry = registry_from_dict(json.load(f))
    modules = []
    for name in registry.names:
        module_path = os.path.join(path, "modules", f"{name}.json")
        if not os.path.exists(module_path):
            raise MissingCheckpoint(f"Missing MSCAL module for class {name!r} in {path}")
        with open(module_path, "r") as f:
            modules.append(MscalModule.from_dict(json.load(f)))
    config = {}
    config_path = os.path.join(path, "config.yaml")
    if os.path.exists(config_path):
        with open(config_path, "r") as f:
            config = yaml.safe_load(f) or {}
    with open(os.path.join(path, "theta.json"), "r") as f:
        meta = json.load(f)
    task_id = int(meta.pop("task_id"))
    theta = float(meta.pop("theta"))
    log_path = os.path.join(path, "train_log.csv")
    train_log = pd.read_csv(log_path) if os.path.exists(log_path) else None
    return Checkpoint(task_id=task_id, registry=registry, modules=modules, theta=theta,
                      config=config, train_log=train_log, calibration=meta)
