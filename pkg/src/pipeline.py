import copy
import glob
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Any, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.analytics import (EvalReport, GtBox, OwodEvaluator, ScoredBox, write_report, load_report,
                           render_markdown, plot_loss_curves)
from src.detect import OpenWorldDetector, Detection
from src.detect.pyramid import centers_in_box
from src.embedding import (ClassEmbeddingRegistry, UNKNOWN, UNKNOWN_NAME, prompt_matrix, register_task)
from src.mscal import ood_score_map
from src.train import Trainer
from src.utils.checkpoint import Checkpoint, checkpoint_dir, load_checkpoint, save_checkpoint
from src.utils.config import get_config
from src.utils.errors import ConfigError, MissingCheckpoint, ParseError
from src.world import (SPLITS, World, WorldSpec, Scene, make_world, generate_scene, save_world, load_world,
                       export_split, load_split, read_gt_lines)
from src.world.generator import KNOWN

logger = logging.getLogger("openworld_kit.pipeline")

DETECTIONS_FORMAT = "openworld-kit-detections"
ARMS = {"full": (True, True), "owel": (True, False), "mscal": (False, True), "base": (False, False)}
ABLATION_PARAMS = ("alpha", "prompt", "conf", "tau")
RETRAIN_PARAMS = ("tau",)


def arm_name(use_owel: bool, use_mscal: bool) -> str:
    return {v: k for k, v in ARMS.items()}[(bool(use_owel), bool(use_mscal))]


def worker_threads() -> int:
    """Thread cap for per-scene inference, from OPENWORLD_KIT_THREADS (default 1)."""
    try:
        return max(1, int(os.getenv("OPENWORLD_KIT_THREADS", "1")))
    except ValueError:
        logger.warning("OPENWORLD_KIT_THREADS is not an integer, using 1 thread")
        return 1


def read_detections(path: str) -> Tuple[Dict[str, Any], List[ScoredBox]]:
    """Parse a detections file: one header line, then one JSON object per detection."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Detections file not found: {path}")
    header: Dict[str, Any] = {}
    dets: List[ScoredBox] = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if line_no == 1:
                    if rec.get("format") != DETECTIONS_FORMAT:
                        raise ValueError("missing detections header")
                    header = rec
                    continue
                dets.append(ScoredBox(
                    scene_id=rec["scene_id"],
                    box=(float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"])),
                    label=str(rec["label"]), confidence=float(rec["confidence"]), ood=float(rec["ood"]),
                ))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(path, line_no, str(e)) from e
    if not header:
        raise ParseError(path, 1, "empty detections file")
    return header, dets


class OpenWorldPipeline:
    def __init__(self, config: Optional[Any] = None, world_dir: Optional[str] = None):
        """
        Orchestrates world generation, task training, inference, evaluation, ablations and reports.

        Args:
            config: ConfigLoader; loads the default configuration if None.
            world_dir: Existing world directory; defaults to `<output_dir>/world`.
        """
        self.config = config if config else get_config()
        self.seed = int(self.config.get('system.seed', 0))
        self.out_dir = self.config.get('system.output_dir', 'outputs')
        self.world_dir = world_dir or os.path.join(self.out_dir, "world")
        self.detections_dir = os.path.join(self.out_dir, "detections")
        self.reports_dir = os.path.join(self.out_dir, "reports")
        self._world: Optional[World] = None

    # ----------------------------------------------------------------- world

    @property
    def world(self) -> World:
        if self._world is None:
            self._world = load_world(self.world_dir)
        return self._world

    def gen(self) -> Dict[str, Any]:
        """Build the world from config + seed and export every split."""
        spec = WorldSpec.from_config(self.config)
        world = make_world(spec, self.seed)
        save_world(world, self.world_dir)
        counts = {}
        for split in SPLITS:
            n = spec.scenes_per_split.get(split, 0)
            scenes = [generate_scene(world, split, i) for i in tqdm(range(n), desc=f"gen {split}", disable=n == 0)]
            counts[split] = {"scenes": n, "gt": export_split(world, split, self.world_dir, scenes)}
        self._world = load_world(self.world_dir)
        summary = {
            "tasks": world.schedule.num_tasks,
            "known": len(world.known_classes),
            "unknown": len(world.unknown_classes),
            "splits": counts,
        }
        logger.info(f"World written to {self.world_dir}: {summary}")
        return summary

    def scenes(self, split: str) -> List[Scene]:
        return load_split(self.world_dir, split, self.world)

    # -------------------------------------------------------------- training

    def checkpoint_path(self, task_id: int) -> str:
        return checkpoint_dir(self.out_dir, task_id)

    def load_checkpoint(self, task_id: int) -> Checkpoint:
        return load_checkpoint(self.checkpoint_path(task_id))

    def task_registry(self, task_id: int) -> Tuple[ClassEmbeddingRegistry, list]:
        """Registry and modules entering `task_id`: the previous checkpoint plus the new classes."""
        world = self.world
        if task_id < 1 or task_id > world.schedule.num_tasks:
            raise ConfigError(f"Task {task_id} is outside the schedule 1..{world.schedule.num_tasks}")
        if task_id == 1:
            prompt = self.config.get('embedding.generic_prompt', 'object')
            if prompt not in world.prompt_bank:
                raise ConfigError(f"Unknown generic prompt {prompt!r}, have {sorted(world.prompt_bank)}")
            registry = ClassEmbeddingRegistry(generic_object=world.prompt_bank[prompt],
                                              alpha=float(self.config.get('embedding.alpha', 0.4)))
            modules = []
        else:
            previous = self.checkpoint_path(task_id - 1)
            if not os.path.isdir(previous):
                raise MissingCheckpoint(f"Task {task_id} needs the task {task_id - 1} checkpoint at {previous}")
            ckpt = load_checkpoint(previous)
            registry, modules = ckpt.registry, ckpt.modules
        new = [(name, world.text_embeddings[name]) for name in world.schedule.introduced_at(task_id)]
        return register_task(registry, new), modules

    def train(self, task_id: int) -> Checkpoint:
        registry, modules = self.task_registry(task_id)
        ckpt = Trainer(self.config).train_task(self.scenes("train"), self.scenes("cal"), registry, modules, task_id)
        save_checkpoint(self.checkpoint_path(task_id), ckpt)
        return ckpt

    # ------------------------------------------------------------- inference

    def infer(self, task_id: int, split: str = "test", use_owel: Optional[bool] = None,
              use_mscal: Optional[bool] = None, alpha: Optional[float] = None, prompt: Optional[str] = None,
              conf: Optional[float] = None, name: Optional[str] = None) -> str:
        """
        Run the inference path over a split and write its detections file.

        Args:
            task_id: Checkpoint to load.
            split: Scene split to process.
            use_owel: Pseudo-unknown row (True) or raw w_0 row (False); defaults to detection.use_owel.
            use_mscal: Gate with the calibrated theta (True) or theta=+inf (False); defaults to detection.use_mscal.
            alpha: Override of the checkpoint's alpha.
            prompt: Generic prompt key replacing w_0.
            conf: Override of detection.conf_threshold.
            name: File stem under the detections directory.

        Returns:
            Path of the detections file.
        """
        use_owel = bool(self.config.get('detection.use_owel', True)) if use_owel is None else use_owel
        use_mscal = bool(self.config.get('detection.use_mscal', True)) if use_mscal is None else use_mscal
        arm = arm_name(use_owel, use_mscal)

        ckpt = self.load_checkpoint(task_id)
        registry = ckpt.registry
        if alpha is not None:
            registry = registry.with_alpha(alpha)
        if prompt is not None:
            if prompt not in self.world.prompt_bank:
                raise ConfigError(f"Unknown generic prompt {prompt!r}, have {sorted(self.world.prompt_bank)}")
            registry = registry.with_generic_object(self.world.prompt_bank[prompt])
        prompts = prompt_matrix(registry, include_unknown=True,
                                unknown_row=None if use_owel else registry.generic_object)
        unknown_row = len(registry)
        theta = ckpt.theta if use_mscal else math.inf

        detector = OpenWorldDetector(self.config)
        if conf is not None:
            detector.conf_threshold = float(conf)
        modules = ckpt.modules
        scenes = self.scenes(split)

        def run(scene: Scene) -> List[Detection]:
            ood_map = ood_score_map(modules, scene.pyramid)
            return detector.detect(scene.pyramid, prompts, unknown_row, ood_map, theta)

        threads = worker_threads()
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(run, scenes), total=len(scenes), desc=f"infer {split} [{arm}]",
                                disable=not scenes))

        name = name or f"task_{task_id}_{split}_{arm}"
        os.makedirs(self.detections_dir, exist_ok=True)
        path = os.path.join(self.detections_dir, f"{name}.jsonl")
        header = {
            "format": DETECTIONS_FORMAT, "version": 1, "task_id": task_id, "split": split, "arm": arm,
            "theta": None if math.isinf(theta) else theta, "alpha": registry.alpha,
            "prompt": prompt or self.config.get('embedding.generic_prompt', 'object'),
            "conf_threshold": detector.conf_threshold, "neg_cap": ckpt.calibration.get("neg_cap"),
            "classes": registry.names,
        }
        count = 0
        with open(path, "w") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for scene, dets in zip(scenes, results):
                for det in dets:
                    x1, y1, x2, y2 = det.box
                    f.write(json.dumps({
                        "scene_id": scene.scene_id,
                        "x1": round(x1, 4), "y1": round(y1, 4), "x2": round(x2, 4), "y2": round(y2, 4),
                        "label": UNKNOWN_NAME if det.label == UNKNOWN else registry.names[det.label],
                        "confidence": det.confidence, "ood": det.ood,
                    }) + "\n")
                    count += 1
        logger.info(f"Wrote {count} detections for {len(scenes)} {split} scenes to {path}")
        return path

    # ------------------------------------------------------------ evaluation

    def mean_ood_scores(self, task_id: int, split: str = "test") -> Tuple[Optional[float], Optional[float]]:
        """Mean OOD score over known-class and unknown-class foreground locations of a split."""
        ckpt = self.load_checkpoint(task_id)
        known_names = set(ckpt.registry.names)
        world = self.world
        geometry = world.spec.geometry
        known, unknown = [], []
        for scene in self.scenes(split):
            ood_map = ood_score_map(ckpt.modules, scene.pyramid)
            for obj in scene.objects:
                scores = ood_map[obj.level].reshape(-1)[centers_in_box(geometry.centers(obj.level), obj.box)]
                if obj.class_name in known_names:
                    known.extend(scores)
                elif world.kinds[obj.class_name] != KNOWN:
                    unknown.extend(scores)
        return (float(np.mean(known)) if known else None), (float(np.mean(unknown)) if unknown else None)

    def ground_truth(self, split: str) -> List[GtBox]:
        path = os.path.join(self.world_dir, split, "gt.jsonl")
        if not os.path.exists(path):
            raise FileNotFoundError(f"No GT for split {split!r} at {path}. Run `gen` first.")
        return [GtBox(scene_id=sid, box=box, class_name=name)
                for sid, items in read_gt_lines(path).items() for box, name in items]

    def evaluate(self, task_id: int, detections_path: str, split: str = "test",
                 name: Optional[str] = None) -> Tuple[EvalReport, List[str]]:
        """
        Score a detections file and write the report.

        Returns:
            The report and the list of unmet acceptance thresholds.
        """
        header, dets = read_detections(detections_path)
        report = OwodEvaluator(self.config).evaluate_task(
            dets, self.ground_truth(split), self.world.schedule, task_id,
            metadata={"arm": header.get("arm"), "split": split, "detections": os.path.basename(detections_path),
                      "theta": header.get("theta"), "alpha": header.get("alpha"), "prompt": header.get("prompt"),
                      "conf_threshold": header.get("conf_threshold"), "neg_cap": header.get("neg_cap")},
        )
        stem = name or os.path.splitext(os.path.basename(detections_path))[0]
        write_report(report, self.reports_dir, stem)
        return report, self.check_acceptance(report)

    def check_acceptance(self, report: EvalReport) -> List[str]:
        """Unmet configured thresholds; undefined metrics never fail a check."""
        failures = []
        checks = [
            ("min_u_recall", report.u_recall, lambda v, t: v >= t),
            ("max_a_ose", report.a_ose, lambda v, t: v <= t),
            ("min_map_both", report.map_both, lambda v, t: v >= t),
            ("max_wi", report.wi, lambda v, t: v <= t),
        ]
        for key, value, ok in checks:
            threshold = self.config.get(f'acceptance.{key}')
            if threshold is None or value is None:
                continue
            if not ok(value, threshold):
                failures.append(f"{key}: {value} vs {threshold}")
        return failures

    # -------------------------------------------------------------- ablation

    def ablate(self, task_id: int, param: str, values: Sequence[Any], split: str = "test",
               retrain: bool = False) -> pd.DataFrame:
        """
        One inference + evaluation per value. alpha, prompt and conf act at inference on the
        trained checkpoint; tau retrains every task up to `task_id` in a sibling output directory.
        """
        if param not in ABLATION_PARAMS:
            raise ConfigError(f"Cannot ablate {param!r}, expected one of {ABLATION_PARAMS}")
        if param in RETRAIN_PARAMS and not retrain:
            logger.warning(f"Changing {param} only takes effect after retraining; pass --retrain")
            raise ConfigError(f"Ablating {param} requires --retrain")
        if param == "prompt" and not values:
            values = list(self.world.prompt_bank)

        rows = []
        for value in values:
            label = f"ablate_{param}_{value}"
            if param == "tau":
                report = self._retrained_report(task_id, float(value), split, label)
            else:
                kwargs = {"alpha": float(value)} if param == "alpha" else \
                    {"prompt": str(value)} if param == "prompt" else {"conf": float(value)}
                path = self.infer(task_id, split, name=f"task_{task_id}_{label}", **kwargs)
                report, _ = self.evaluate(task_id, path, split, name=f"task_{task_id}_{label}")
            rows.append({"param": param, "value": value, **report.summary_row()})

        df = pd.DataFrame(rows)
        os.makedirs(self.reports_dir, exist_ok=True)
        df.to_csv(os.path.join(self.reports_dir, f"ablate_task_{task_id}_{param}.csv"), index=False)
        logger.info(f"Ablation over {param}: {len(rows)} rows")
        return df

    def _retrained_report(self, task_id: int, tau: float, split: str, label: str) -> EvalReport:
        config = copy.deepcopy(self.config)
        config.set('mscal.tau', tau)
        config.set('system.output_dir', os.path.join(self.out_dir, "ablations", label))
        child = OpenWorldPipeline(config, world_dir=self.world_dir)
        for t in range(1, task_id + 1):
            child.train(t)
        path = child.infer(task_id, split)
        report, _ = child.evaluate(task_id, path, split)
        return report

    # ---------------------------------------------------------------- report

    def report(self) -> Dict[str, Optional[str]]:
        """Markdown summary of every per-task report plus training loss curves."""
        paths = sorted(glob.glob(os.path.join(self.reports_dir, "task_*.json")))
        reports = [load_report(p) for p in paths]
        os.makedirs(self.reports_dir, exist_ok=True)
        summary_path = os.path.join(self.reports_dir, "summary.md")
        with open(summary_path, "w") as f:
            f.write(render_markdown(reports))

        logs = {}
        for ckpt_dir in sorted(glob.glob(os.path.join(self.out_dir, "checkpoints", "task_*"))):
            log_path = os.path.join(ckpt_dir, "train_log.csv")
            if os.path.exists(log_path):
                logs[int(ckpt_dir.rsplit("_", 1)[-1])] = pd.read_csv(log_path)
        plot = plot_loss_curves(logs, os.path.join(self.reports_dir, "loss_curves.png"))
        logger.info(f"Summary of {len(reports)} reports written to {summary_path}")
        return {"summary": summary_path, "loss_curves": plot}
