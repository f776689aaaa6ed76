import logging
from typing import Dict, List, Optional, Any, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.detect.pyramid import GroundTruth, stack_levels
from src.embedding.registry import ClassEmbeddingRegistry
from src.mscal.assign import SampleAssignment, assign_samples, foreground_masks
from src.mscal.loss import mscal_loss_floor, mscal_total_loss_and_grads
from src.mscal.module import MscalModule
from src.mscal.scoring import ood_score_map, calibrate_threshold, freeze_class_modules
from src.train.losses import detection_loss
from src.train.optimizer import AdamW
from src.utils.checkpoint import Checkpoint, TRAIN_LOG_COLUMNS
from src.utils.config import get_config
from src.utils.seeding import derive_seed, make_rng

logger = logging.getLogger("openworld_kit.train")


def known_ground_truth(scenes: Sequence[Any], registry: ClassEmbeddingRegistry) -> List[GroundTruth]:
    """GT of registry classes only, labeled by registry index; other objects stay unannotated."""
    names = {name: i for i, name in enumerate(registry.names)}
    gts = []
    for image_index, scene in enumerate(scenes):
        for obj in scene.objects:
            if obj.class_name in names:
                gts.append(GroundTruth(box=obj.box, class_id=names[obj.class_name], image_index=image_index))
    return gts


class Trainer:
    def __init__(self, config: Optional[Any] = None):
        """
        Joint detection + MSCAL optimization for one task of the schedule.

        Args:
            config: ConfigLoader; loads the default configuration if None.
        """
        self.config = config if config else get_config()

        self.seed = int(self.config.get('system.seed', 0))
        self.steps = int(self.config.get('training.steps_per_task', 500))
        self.batch_size = int(self.config.get('training.batch_size', 16))
        self.det_weight = float(self.config.get('training.det_weight', 1.0))
        self.mscal_weight = float(self.config.get('training.mscal_weight', 1.0))
        mscal_lr = self.config.get('mscal.learning_rate')
        self.mscal_lr = float(mscal_lr if mscal_lr is not None else self.config.get('training.learning_rate', 1e-4))
        self.logit_scale = float(self.config.get('detection.logit_scale', 10.0))
        self.neg_cap = int(self.config.get('mscal.neg_cap', 10))
        self.level_bounds = list(self.config.get('mscal.level_bounds', [0, 24]))
        self.quantile = float(self.config.get('mscal.quantile', 0.95))

    def init_modules(self, registry: ClassEmbeddingRegistry, modules: Sequence[MscalModule],
                     num_levels: int) -> List[MscalModule]:
        """Keep existing modules and create a fresh one, seeded by class name, for every new class."""
        by_name = {m.class_name: m for m in modules}
        out = []
        for i, entry in enumerate(registry.entries):
            if entry.name in by_name:
                out.append(by_name[entry.name])
                continue
            out.append(MscalModule.initialize(
                class_id=i, class_name=entry.name, task_id=entry.task_id, num_levels=num_levels,
                dim=registry.dim, rng=make_rng(self.seed, "module", entry.name),
                hidden_dim=self.config.get('mscal.hidden_dim'), proj_dim=self.config.get('mscal.proj_dim'),
                tau=float(self.config.get('mscal.tau', 0.1)), normalize=bool(self.config.get('mscal.normalize', True)),
                share_anchor=bool(self.config.get('mscal.share_anchor', False)),
                bn_momentum=float(self.config.get('mscal.bn_momentum', 0.1)),
                bn_eps=float(self.config.get('mscal.bn_eps', 1e-5)),
            ))
        return out

    def build_assignments(self, scenes: Sequence[Any], registry: ClassEmbeddingRegistry,
                          task_id: int, step: int) -> Dict[int, SampleAssignment]:
        geometry = scenes[0].pyramid.geometry
        gts = known_ground_truth(scenes, registry)
        return {
            c: assign_samples(geometry, gts, c, self.neg_cap, derive_seed(self.seed, "negatives", task_id, step, c),
                              self.level_bounds, n_images=len(scenes))
            for c in range(len(registry))
        }

    def train_step(self, scenes: Sequence[Any], registry: ClassEmbeddingRegistry, modules: List[MscalModule],
                   optimizer: AdamW, task_id: int, step: int) -> Tuple[ClassEmbeddingRegistry, Dict[str, float]]:
        """One optimizer step on a batch; returns the new registry and the logged losses."""
        levels = stack_levels([s.pyramid for s in scenes])
        assignments = self.build_assignments(scenes, registry, task_id, step)

        det_loss, det_grad = detection_loss(levels, assignments, registry, self.logit_scale)
        mscal_loss, _, mscal_grads, traces = mscal_total_loss_and_grads(modules, levels, assignments)

        params: Dict[str, np.ndarray] = {}
        grads: Dict[str, np.ndarray] = {}
        W = registry.matrix()
        for i in registry.trainable_indices():
            key = f"embedding/{registry.entries[i].name}"
            params[key] = W[i]
            grads[key] = self.det_weight * det_grad[i]
        for module in modules:
            if module.frozen:
                continue
            for name, value in module.parameters().items():
                params[f"mscal/{module.class_name}/{name}"] = value
            for name, g in mscal_grads.get(module.class_id, {}).items():
                grads[f"mscal/{module.class_name}/{name}"] = self.mscal_weight * g
            if module.class_id in traces:
                module.update_running_stats(traces[module.class_id])

        updated = optimizer.step(params, grads)

        for i in registry.trainable_indices():
            W[i] = updated[f"embedding/{registry.entries[i].name}"]
        registry = registry.with_embeddings(W)
        for module in modules:
            if module.frozen:
                continue
            prefix = f"mscal/{module.class_name}/"
            module.set_parameters({k[len(prefix):]: v for k, v in updated.items() if k.startswith(prefix)})
            module.renormalize_anchors()

        det = self.det_weight * det_loss
        msc = self.mscal_weight * mscal_loss
        floor = self.mscal_weight * mscal_loss_floor(modules, assignments)
        return registry, {"det_loss": det, "mscal_loss": msc, "mscal_floor": floor, "total": det + msc}

    def calibrate(self, scenes: Sequence[Any], registry: ClassEmbeddingRegistry,
                  modules: Sequence[MscalModule]) -> Tuple[float, int]:
        """theta = quantile of S over known-class positive locations of held-out scenes."""
        scores = []
        for scene in scenes:
            gts = known_ground_truth([scene], registry)
            if not gts:
                continue
            ood_map = ood_score_map(modules, scene.pyramid)
            masks = foreground_masks(scene.pyramid.geometry, gts, self.level_bounds, 1)
            for j, per_class in enumerate(masks):
                if not per_class:
                    continue
                known = np.logical_or.reduce(list(per_class.values()))
                scores.append(ood_map[j].ravel()[known])
        flat = np.concatenate(scores) if scores else np.zeros(0)
        return calibrate_threshold(flat, self.quantile), int(flat.size)

    def train_task(self, train_scenes: Sequence[Any], cal_scenes: Sequence[Any], registry: ClassEmbeddingRegistry,
                   modules: Sequence[MscalModule], task_id: int) -> Checkpoint:
        """
        Train the classes introduced at `task_id`; earlier embeddings and modules stay frozen.

        Args:
            train_scenes: Training split scenes (unknown objects unannotated).
            cal_scenes: Held-out calibration scenes, never trained on.
            registry: Registry with `task_id` already registered.
            modules: Modules of earlier tasks; new classes get fresh modules.
            task_id: Task being trained.

        Returns:
            Checkpoint with the trained registry, modules, theta, and TrainLog.
        """
        num_levels = train_scenes[0].pyramid.num_levels
        modules = freeze_class_modules(self.init_modules(registry, modules, num_levels), task_id - 1)
        optimizer = AdamW(self.config, group_lrs={"mscal/": self.mscal_lr})

        logger.info(f"Task {task_id}: training {len(registry.trainable_indices())} classes "
                    f"for {self.steps} steps on {len(train_scenes)} scenes "
                    f"(lr {optimizer.lr:g}, MSCAL lr {self.mscal_lr:g})")
        rows = []
        for step in tqdm(range(self.steps), desc=f"Task {task_id}", disable=self.steps == 0):
            rng = make_rng(self.seed, "batch", task_id, step)
            batch_idx = np.sort(rng.choice(len(train_scenes), size=min(self.batch_size, len(train_scenes)),
                                           replace=False))
            batch = [train_scenes[i] for i in batch_idx]
            registry, losses = self.train_step(batch, registry, modules, optimizer, task_id, step)
            rows.append({"step": step, **losses})
            logger.debug(f"step {step}: det {losses['det_loss']:.6f} mscal {losses['mscal_loss']:.6f}")

        train_log = pd.DataFrame(rows, columns=TRAIN_LOG_COLUMNS)
        if rows:
            logger.info(f"Task {task_id}: total loss {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f}")

        theta, n_scores = self.calibrate(cal_scenes, registry, modules)
        logger.info(f"Task {task_id}: calibrated theta={theta:.6f} from {n_scores} known locations")
        return Checkpoint(
            task_id=task_id, registry=registry, modules=modules, theta=theta,
            config=self.config.resolved(), train_log=train_log,
            calibration={"quantile": self.quantile, "n_scores": n_scores, "neg_cap": self.neg_cap},
        )
