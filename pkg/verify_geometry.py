import sys
import os
import logging
import numpy as np

sys.path.append(os.getcwd())

from src.detect.pyramid import centers_in_box
from src.utils import get_config, setup_logger
from src.world import WorldSpec, food_turns, make_world, generate_split
from src.world.generator import FOOD, NOOD

setup_logger("openworld_kit", log_dir=None)
logger = logging.getLogger("openworld_kit.verify_geometry")

FOOD_TURN_SEEDS = range(20)
MIN_FOOD_TURN_RATE = 0.9


def check(ok: bool, message: str) -> bool:
    logger.info(f"{'PASS' if ok else 'FAIL'}: {message}")
    return ok


def verify_geometry():
    logger.info("Starting synthetic world geometry verification...")
    config = get_config()
    spec = WorldSpec.from_config(config)
    world = make_world(spec, int(config.get('system.seed', 0)))
    known = np.stack([world.prototype(n) for n in world.known_classes])
    results = []

    norms = np.linalg.norm(world.prototypes, axis=1)
    results.append(check(np.allclose(norms, 1.0, atol=1e-9), f"{len(norms)} prototypes on the unit sphere"))

    cos = known @ known.T
    off = cos[~np.eye(len(known), dtype=bool)]
    results.append(check(off.max() <= np.cos(2 * spec.nood_angle) + 1e-12,
                         f"known classes separated: max cos {off.max():.4f}"))

    for name, kind in world.kinds.items():
        p = world.prototype(name)
        if kind == NOOD:
            partner = world.partners[name]
            angle = float(np.arccos(np.clip(p @ world.prototype(partner), -1.0, 1.0)))
            nearest = world.known_classes[int(np.argmax(known @ p))]
            results.append(check(abs(angle - spec.nood_angle) < 1e-6 and nearest == partner,
                                 f"{name} sits {angle:.4f} rad from {partner} (nearest: {nearest})"))
        elif kind == FOOD:
            max_cos = float(np.max(known @ p))
            results.append(check(max_cos <= np.cos(spec.food_min_angle) + 1e-12,
                                 f"{name} far from every known class: max cos {max_cos:.4f}"))

    results.append(check(bool(np.all(world.prototypes @ world.generic_object > 0.0)),
                         "generic prompt lies on the hemisphere of every prototype"))

    alpha = float(config.get('embedding.alpha', 0.4))
    turns = [hit for seed in FOOD_TURN_SEEDS for hit in food_turns(make_world(spec, seed), alpha)]
    rate = float(np.mean(turns)) if turns else 0.0
    results.append(check(rate >= MIN_FOOD_TURN_RATE,
                         f"w_U closer to FOOD than to every known class in {sum(turns)}/{len(turns)} cases "
                         f"over {len(FOOD_TURN_SEEDS)} seeds (rate {rate:.3f} >= {MIN_FOOD_TURN_RATE})"))

    geometry = spec.geometry
    mismatches = 0
    scenes = generate_split(world, "test")
    for scene in scenes:
        expected = sum(int(centers_in_box(geometry.centers(o.level), o.box).sum()) for o in scene.objects)
        counted = sum(int(np.sum(np.max(scene.pyramid.flat(j) @ world.prototypes.T, axis=1) > 0.5))
                      for j in range(geometry.num_levels))
        mismatches += expected != counted
    results.append(check(mismatches == 0, f"foreground locations match box centers in {len(scenes)} test scenes"))

    if all(results):
        logger.info("SUCCESS: world geometry verified.")
    else:
        logger.error(f"FAILURE: {results.count(False)} geometry checks failed.")
    return all(results)


if __name__ == "__main__":
    sys.exit(0 if verify_geometry() else 1)
