import sys
import os
import logging
import numpy as np

sys.path.append(os.getcwd())

from src.embedding import ClassEmbeddingRegistry, register_task
from src.mscal import MscalModule, SampleAssignment, mscal_loss, mscal_loss_gradients
from src.mscal.gradcheck import STEP, TOLERANCE, check_gradients
from src.train import detection_loss
from src.utils import setup_logger

setup_logger("openworld_kit", log_dir=None)
logger = logging.getLogger("openworld_kit.verify_gradients")

DIM = 8
GRID = 16  # 4x4 locations per level
NUM_CLASSES = 3
SEEDS = range(5)


def random_assignment(rng, sizes, n_pos=2, n_neg=4):
    positive, negative = [], []
    for n in sizes:
        order = rng.permutation(n)
        pos = np.zeros(n, dtype=bool)
        neg = np.zeros(n, dtype=bool)
        pos[order[:n_pos]] = True
        neg[order[n_pos:n_pos + n_neg]] = True
        positive.append(pos)
        negative.append(neg)
    return SampleAssignment(positive, negative)


def report(errors, label: str) -> bool:
    worst_name = max(errors, key=errors.get)
    ok = errors[worst_name] <= TOLERANCE
    logger.info(f"{'PASS' if ok else 'FAIL'}: {label} max relative error {errors[worst_name]:.2e} ({worst_name})")
    return ok


def verify_module(seed: int, mode: str, share_anchor: bool) -> bool:
    rng = np.random.default_rng(seed)
    module = MscalModule.initialize(class_id=0, class_name="cls_00", task_id=1, num_levels=2, dim=DIM, rng=rng,
                                    share_anchor=share_anchor)
    sizes = (GRID, GRID)
    levels = [rng.normal(size=(n, DIM)) for n in sizes]
    assignment = random_assignment(rng, sizes)

    _, traces = module.forward(levels, mode)
    analytic = mscal_loss_gradients(module, traces, assignment)
    errors = check_gradients(lambda: mscal_loss(module, module.forward(levels, mode)[0], assignment),
                             module.parameters(), analytic, h=STEP)
    return report(errors, f"MSCAL seed={seed} mode={mode} shared={share_anchor}")


def verify_detection(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    registry = register_task(ClassEmbeddingRegistry(generic_object=np.ones(DIM) / np.sqrt(DIM)),
                             [(f"cls_{i:02d}", rng.normal(size=DIM)) for i in range(NUM_CLASSES)])
    sizes = (GRID, GRID)
    levels = [rng.normal(size=(n, DIM)) for n in sizes]
    assignments = {i: random_assignment(rng, sizes, n_pos=1, n_neg=3) for i in range(NUM_CLASSES)}
    _, grad = detection_loss(levels, assignments, registry, 10.0)
    params = {entry.name: entry.embedding for entry in registry.entries}
    analytic = {entry.name: grad[i] for i, entry in enumerate(registry.entries)}
    errors = check_gradients(lambda: detection_loss(levels, assignments, registry, 10.0)[0], params, analytic, h=STEP)
    return report(errors, f"detection seed={seed}")


def verify_gradients():
    logger.info(f"Starting gradient verification (h={STEP}, tolerance {TOLERANCE})...")
    results = [verify_module(seed, mode, shared)
               for seed in SEEDS for mode in ("train", "infer") for shared in (False, True)]
    results += [verify_detection(seed) for seed in SEEDS]
    if all(results):
        logger.info(f"SUCCESS: all {len(results)} gradient checks within {TOLERANCE}.")
    else:
        logger.error(f"FAILURE: {results.count(False)} of {len(results)} gradient checks failed.")
    return all(results)


if __name__ == "__main__":
    sys.exit(0 if verify_gradients() else 1)
