import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Dict

import numpy as np

from src.utils.errors import ZeroVector, EmptyRegistry, DegenerateMean, DuplicateClass, InvalidSchedule

logger = logging.getLogger("openworld_kit.embedding")

# Reserved label for the pseudo-unknown prompt row and for unknown detections.
UNKNOWN = -1
UNKNOWN_NAME = "unknown"

ZERO_NORM = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    """
    Scale a vector to unit L2 norm.

    Raises:
        ZeroVector: if the norm is below 1e-12.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not norm >= ZERO_NORM:
        raise ZeroVector(f"Cannot normalize vector with norm {norm:.3e}")
    return v / norm


@dataclass(frozen=True)
class ClassEntry:
    name: str
    embedding: np.ndarray
    task_id: int
    frozen: bool = False


@dataclass(frozen=True)
class ClassEmbeddingRegistry:
    """Ordered known-class embeddings W_K plus the generic objectness embedding w_0.

    Values are immutable; `register_task` and `with_embeddings` return new registries.
    """
    entries: Tuple[ClassEntry, ...] = ()
    generic_object: Optional[np.ndarray] = None
    alpha: float = 0.4

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise DuplicateClass(f"Duplicate class names in registry: {names}")
        task_ids = [e.task_id for e in self.entries]
        if any(b < a for a, b in zip(task_ids, task_ids[1:])):
            raise InvalidSchedule("Registry task ids must be non-decreasing")
        if not 0.0 <= self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in [0, 2], got {self.alpha}")
        for e in self.entries:
            if not np.all(np.isfinite(e.embedding)):
                raise ValueError(f"Embedding for {e.name} has non-finite entries")

    @property
    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    @property
    def current_task(self) -> int:
        return self.entries[-1].task_id if self.entries else 0

    @property
    def dim(self) -> int:
        if self.generic_object is not None:
            return int(self.generic_object.shape[0])
        return int(self.entries[0].embedding.shape[0])

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        """Known embeddings stacked in registry order (N x D)."""
        if not self.entries:
            return np.zeros((0, self.dim))
        return np.stack([e.embedding for e in self.entries])

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def trainable_indices(self) -> List[int]:
        return [i for i, e in enumerate(self.entries) if not e.frozen]

    def with_embeddings(self, matrix: np.ndarray) -> "ClassEmbeddingRegistry":
        """Replace trainable rows from `matrix`; frozen rows keep their exact arrays."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (len(self.entries), self.dim):
            raise ValueError(f"Expected {(len(self.entries), self.dim)} embeddings, got {matrix.shape}")
        entries = tuple(
            e if e.frozen else replace(e, embedding=matrix[i].copy())
            for i, e in enumerate(self.entries)
        )
        return replace(self, entries=entries)

    def with_alpha(self, alpha: float) -> "ClassEmbeddingRegistry":
        return replace(self, alpha=float(alpha))

    def with_generic_object(self, w0: np.ndarray) -> "ClassEmbeddingRegistry":
        return replace(self, generic_object=np.asarray(w0, dtype=np.float64).copy())


def mean_known_embedding(registry: ClassEmbeddingRegistry) -> np.ndarray:
    """Mean of the normalized known embeddings, w̄ = (1/N) Σ w_i/||w_i||. Not unit norm in general."""
    if len(registry) == 0:
        raise EmptyRegistry("Mean known embedding needs at least one known class")
    return np.mean([normalize(e.embedding) for e in registry.entries], axis=0)


def pseudo_unknown_embedding(registry: ClassEmbeddingRegistry) -> np.ndarray:
    """
    Pseudo unknown embedding w_U = w_0 - alpha * w̄/||w̄||.

    The result is left unnormalized; the cosine head normalizes at use.

    Raises:
        DegenerateMean: if the known embeddings cancel (||w̄|| < 1e-12).
    """
    if registry.generic_object is None:
        raise ValueError("Registry has no generic object embedding (w_0)")
    w0 = np.asarray(registry.generic_object, dtype=np.float64)
    if registry.alpha == 0.0:
        return w0.copy()
    w_bar = mean_known_embedding(registry)
    norm = np.linalg.norm(w_bar)
    if norm < ZERO_NORM:
        raise DegenerateMean(f"Known class embeddings cancel out (||w̄|| = {norm:.3e})")
    return w0 - registry.alpha * (w_bar / norm)


def prompt_matrix(registry: ClassEmbeddingRegistry, include_unknown: bool,
                  unknown_row: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Prompt rows for the cosine detection head.

    Rows 0..N-1 are the known embeddings in registry order. With `include_unknown`
    row N carries the reserved UNKNOWN label; it is w_U unless `unknown_row`
    supplies a replacement (raw w_0 for the no-OWEL ablation).
    """
    rows = [registry.matrix()]
    if include_unknown:
        row = pseudo_unknown_embedding(registry) if unknown_row is None else np.asarray(unknown_row, dtype=np.float64)
        rows.append(row[None, :])
    return np.concatenate(rows, axis=0)


def register_task(registry: ClassEmbeddingRegistry,
                  new_classes: Sequence[Tuple[str, np.ndarray]]) -> ClassEmbeddingRegistry:
    """
    Freeze every existing class and append `new_classes` as the next task.

    Raises:
        DuplicateClass: if a new name is already registered or repeated.
    """
    existing = set(registry.names)
    seen = set()
    for name, _ in new_classes:
        if name in existing or name in seen:
            raise DuplicateClass(f"Class {name!r} is already registered")
        seen.add(name)

    task_id = registry.current_task + 1
    frozen = tuple(e if e.frozen else replace(e, frozen=True) for e in registry.entries)
    added = tuple(
        ClassEntry(name=name, embedding=np.asarray(emb, dtype=np.float64).copy(), task_id=task_id, frozen=False)
        for name, emb in new_classes
    )
    logger.info(f"Registered task {task_id}: {len(added)} new classes, {len(frozen)} frozen")
    return replace(registry, entries=frozen + added)


@dataclass(frozen=True)
class TaskSchedule:
    """Classes introduced per task; everything not yet introduced is unknown."""
    tasks: Tuple[Tuple[int, Tuple[str, ...]], ...]
    all_classes: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = [t for t, _ in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise InvalidSchedule(f"Task ids must be contiguous from 1, got {ids}")
        names = [n for _, group in self.tasks for n in group]
        if len(set(names)) != len(names):
            raise InvalidSchedule("Class names must be disjoint across tasks")

    @classmethod
    def from_dict(cls, mapping: Dict, all_classes: Sequence[str] = ()) -> "TaskSchedule":
        tasks = tuple((int(k), tuple(v)) for k, v in sorted(mapping.items(), key=lambda kv: int(kv[0])))
        return cls(tasks=tasks, all_classes=tuple(all_classes))

    def to_dict(self) -> Dict[str, List[str]]:
        return {str(t): list(group) for t, group in self.tasks}

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def introduced_at(self, task_id: int) -> List[str]:
        return list(dict(self.tasks)[task_id])

    def known_at(self, task_id: int) -> List[str]:
        return [n for t, group in self.tasks if t <= task_id for n in group]

    def previously_known_at(self, task_id: int) -> List[str]:
        return [n for t, group in self.tasks if t < task_id for n in group]

    def task_of(self, name: str) -> Optional[int]:
        for t, group in self.tasks:
            if name in group:
                return t
        return None

    def unknown_at(self, task_id: int) -> List[str]:
        known = set(self.known_at(task_id))
        return [n for n in self.all_classes if n not in known]
