import json
import logging
import os
from typing import Dict, List, Tuple

import numpy as np

from src.embedding.registry import ClassEmbeddingRegistry, ClassEntry
from src.utils.errors import ParseError

logger = logging.getLogger("openworld_kit.embedding")

GENERIC_KEY = "object"


def _round9(values: np.ndarray) -> List[float]:
    return [float(f"{v:.9g}") for v in np.asarray(values, dtype=np.float64)]


def save_embedding_file(path: str, embeddings: Dict[str, np.ndarray]):
    """
    Write a class-name -> vector JSON object at 9 significant digits.

    The reserved key "object" holds the generic objectness embedding w_0.
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {name: _round9(vec) for name, vec in embeddings.items()}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    logger.info(f"Wrote {len(payload)} embeddings to {path}")


def load_embedding_file(path: str) -> Dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Embedding file not found: {path}")
    with open(path, "r") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(path, e.lineno, e.msg) from e
    dims = {len(v) for v in payload.values()}
    if len(dims) > 1:
        raise ParseError(path, 1, f"Embeddings disagree on dimension: {sorted(dims)}")
    return {name: np.asarray(vec, dtype=np.float64) for name, vec in payload.items()}


def registry_to_dict(registry: ClassEmbeddingRegistry) -> Dict:
    """Exact (repr-precision) serialization used for checkpoints."""
    return {
        "version": 1,
        "alpha": registry.alpha,
        "generic_object": None if registry.generic_object is None else registry.generic_object.tolist(),
        "entries": [
            {"name": e.name, "task_id": e.task_id, "frozen": e.frozen, "embedding": e.embedding.tolist()}
            for e in registry.entries
        ],
    }


def registry_from_dict(payload: Dict) -> ClassEmbeddingRegistry:
    entries: Tuple[ClassEntry, ...] = tuple(
        ClassEntry(name=e["name"], embedding=np.asarray(e["embedding"], dtype=np.float64),
                   task_id=int(e["task_id"]), frozen=bool(e["frozen"]))
        for e in payload["entries"]
    )
    w0 = payload.get("generic_object")
    return ClassEmbeddingRegistry(
        entries=entries,
        generic_object=None if w0 is None else np.asarray(w0, dtype=np.float64),
        alpha=float(payload["alpha"]),
    )
