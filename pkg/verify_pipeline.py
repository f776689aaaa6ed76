import sys
import os
import logging
import numpy as np

sys.path.append(os.getcwd())

from src.pipeline import ARMS, OpenWorldPipeline
from src.utils import get_config, setup_logger

setup_logger("openworld_kit", log_dir=None)
logger = logging.getLogger("openworld_kit.verify_pipeline")

MIN_U_RECALL = 0.75
MAX_OSE_RATIO = 0.5
MAX_MAP_DROP = 0.02


def check(ok: bool, message: str) -> bool:
    logger.info(f"{'PASS' if ok else 'FAIL'}: {message}")
    return ok


def verify_pipeline():
    logger.info("Starting synthetic end-to-end verification...")
    config = get_config()
    config.set('system.output_dir', os.path.join(config.get('system.output_dir', 'outputs'), 'verify'))
    pipeline = OpenWorldPipeline(config)
    summary = pipeline.gen()
    results = []

    for t in range(1, summary["tasks"] + 1):
        log = pipeline.train(t).train_log
        if not len(log):
            continue
        first, last = float(log["total"].iloc[0]), float(log["total"].iloc[-1])
        floor = float(log["mscal_floor"].iloc[-1])
        results.append(check(last < first, f"task {t} loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f}; "
                                           f"the MSCAL floor alone is {floor / first:.3f} of the start)"))
        results.append(check(bool(np.all(log["mscal_loss"] >= log["mscal_floor"] - 1e-12)),
                             f"task {t} MSCAL loss stays above its log|Z+| floor"))

    task_id = 1
    reports = {}
    for arm in ("full", "owel", "mscal"):
        use_owel, use_mscal = ARMS[arm]
        path = pipeline.infer(task_id, use_owel=use_owel, use_mscal=use_mscal)
        reports[arm], _ = pipeline.evaluate(task_id, path)
    full, owel, mscal = reports["full"], reports["owel"], reports["mscal"]

    results.append(check(full.u_recall is not None and full.u_recall >= MIN_U_RECALL,
                         f"U-Recall {full.u_recall} >= {MIN_U_RECALL}"))
    results.append(check(full.a_ose <= MAX_OSE_RATIO * owel.a_ose,
                         f"A-OSE with gate {full.a_ose} <= {MAX_OSE_RATIO} x {owel.a_ose} without"))
    if full.map_both is not None and owel.map_both is not None:
        drop = owel.map_both - full.map_both
        results.append(check(drop <= MAX_MAP_DROP, f"mAP drop from the gate {drop:.4f} <= {MAX_MAP_DROP}"))
    results.append(check(all(r.u_recall is not None for r in (full, owel, mscal))
                         and full.u_recall > owel.u_recall and full.u_recall > mscal.u_recall,
                         f"U-Recall full {full.u_recall} beats OWEL-only {owel.u_recall} "
                         f"and MSCAL-only {mscal.u_recall}"))

    known_s, unknown_s = pipeline.mean_ood_scores(task_id)
    results.append(check(known_s is not None and unknown_s is not None and unknown_s > known_s,
                         f"mean OOD score unknown {unknown_s} > known {known_s}"))

    pipeline.report()
    if all(results):
        logger.info("SUCCESS: synthetic acceptance criteria met.")
    else:
        logger.error(f"FAILURE: {results.count(False)} of {len(results)} acceptance checks failed.")
    return all(results)


if __name__ == "__main__":
    sys.exit(0 if verify_pipeline() else 1)
