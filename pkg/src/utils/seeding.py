"""Labeled seed derivation.

All randomness flows from the single ``system.seed``. Each subsystem derives
its own stream from a label, so adding a new label never shifts another one.

Labels in use:
    world                          prototypes, text embeddings, prompt bank
    scene/<split>/<index>          one synthetic scene
    module/<class_name>            MSCAL module initialization
    batch/<task_id>/<step>         mini-batch scene selection
    negatives/<task_id>/<step>     background negative subsampling
"""
import hashlib

import numpy as np


def derive_seed(master_seed: int, *labels) -> int:
    text = "/".join([str(int(master_seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(master_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *labels))
