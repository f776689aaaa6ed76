import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Any, Sequence, Tuple

import numpy as np

from src.detect.pyramid import Box, FeaturePyramid, PyramidGeometry, level_for_box, centers_in_box
from src.embedding.io import GENERIC_KEY
from src.embedding.registry import ClassEmbeddingRegistry, TaskSchedule, normalize, pseudo_unknown_embedding, register_task
from src.utils.config import get_config
from src.utils.errors import InfeasibleSpec
from src.utils.seeding import make_rng

logger = logging.getLogger("openworld_kit.world")

SPLITS = ("train", "cal", "test")
KNOWN, NOOD, FOOD = "known", "nood", "food"
# Generic prompts other than "object" are w_0 rotated away by these angles (radians).
PROMPT_ANGLES = {"entity": 0.3, "unknown": 0.5, "anything": 0.7, "everything": 0.9}
PLACEMENT_TRIES = 50


@dataclass
class WorldSpec:
    dim: int = 16
    known_per_task: List[int] = field(default_factory=lambda: [5, 5, 5])
    n_nood: int = 4
    n_food: int = 4
    nood_angle: float = 0.25
    food_min_angle: float = 1.2
    known_band: List[float] = field(default_factory=lambda: [0.1, 0.4])
    food_pole_min: float = 0.8
    noise_sigma: float = 0.1
    text_sigma: float = 0.05
    unknown_ratio: float = 0.3
    background_max_cos: float = 0.3
    image_size: int = 64
    pyramid: List[List[float]] = field(default_factory=lambda: [[8, 8, 8], [4, 4, 16]])
    box_sides: List[List[int]] = field(default_factory=lambda: [[16, 24], [32, 48]])
    boxes_per_scene: List[int] = field(default_factory=lambda: [1, 4])
    box_jitter: float = 0.0
    scenes_per_split: Dict[str, int] = field(default_factory=lambda: {"train": 160, "cal": 160, "test": 200})
    level_bounds: List[float] = field(default_factory=lambda: [0, 24])
    max_draws: int = 1_000_000

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError(f"World dimension must be at least 4, got {self.dim}")
        for name in ("nood_angle", "food_min_angle"):
            angle = getattr(self, name)
            if not 0.0 < angle < np.pi:
                raise ValueError(f"{name} must lie in (0, pi), got {angle}")
        low, high = self.known_band
        if not 0.0 <= low < high <= 1.0:
            raise ValueError(f"known_band must satisfy 0 <= low < high <= 1, got {self.known_band}")
        if not 0.0 < self.food_pole_min < 1.0:
            raise ValueError(f"food_pole_min must lie in (0, 1), got {self.food_pole_min}")
        counts = list(self.known_per_task) + [self.n_nood, self.n_food]
        if any(c < 0 for c in counts) or sum(self.known_per_task) < 1:
            raise ValueError("World counts must be non-negative with at least one known class")
        if len(self.box_sides) != len(self.pyramid):
            raise ValueError("world.box_sides needs one [min, max) range per pyramid level")

    @classmethod
    def from_config(cls, config: Optional[Any] = None) -> "WorldSpec":
        config = config if config else get_config()
        section = dict(config.get('world', {}))
        section['level_bounds'] = list(config.get('mscal.level_bounds', [0, 24]))
        return cls(**section)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def geometry(self) -> PyramidGeometry:
        return PyramidGeometry.from_config(self.pyramid)


@dataclass
class World:
    """Class prototypes, their roles, synthetic text embeddings, and the generic prompt bank."""
    spec: WorldSpec
    seed: int
    class_names: List[str]
    kinds: Dict[str, str]
    prototypes: np.ndarray
    partners: Dict[str, str]
    schedule: TaskSchedule
    text_embeddings: Dict[str, np.ndarray]
    generic_object: np.ndarray
    prompt_bank: Dict[str, np.ndarray]

    @property
    def known_classes(self) -> List[str]:
        return [n for n in self.class_names if self.kinds[n] == KNOWN]

    @property
    def unknown_classes(self) -> List[str]:
        return [n for n in self.class_names if self.kinds[n] != KNOWN]

    def prototype(self, name: str) -> np.ndarray:
        return self.prototypes[self.class_names.index(name)]


@dataclass
class SceneObject:
    box: Box
    class_name: str
    level: int
    unknown_at: Tuple[bool, ...]  # per task 1..T: class not yet introduced


@dataclass
class Scene:
    scene_id: str
    pyramid: FeaturePyramid
    objects: List[SceneObject]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _tangent(rng: np.random.Generator, p: np.ndarray) -> np.ndarray:
    g = rng.normal(size=p.shape)
    return _unit(g - (g @ p) * p)


class _DrawBudget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    def take(self, what: str):
        self.used += 1
        if self.used > self.limit:
            raise InfeasibleSpec(f"Rejection sampling exceeded {self.limit} draws while placing {what}")


def _band_sample(rng: np.random.Generator, pole: np.ndarray, band: Sequence[float], budget: _DrawBudget, what: str):
    low, high = band
    while True:
        budget.take(what)
        x = _unit(rng.normal(size=pole.shape))
        if low < x @ pole < high:
            return x


def _near_pole(rng: np.random.Generator, pole: np.ndarray, min_cos: float) -> np.ndarray:
    h = min_cos + (1.0 - min_cos) * rng.uniform()
    return h * pole + np.sqrt(1.0 - h * h) * _tangent(rng, pole)


def _draw_prototypes(spec: WorldSpec, rng: np.random.Generator, pole: np.ndarray,
                     budget: _DrawBudget) -> Tuple[List[np.ndarray], List[np.ndarray], List[int], List[np.ndarray]]:
    n_known = sum(spec.known_per_task)
    max_known_cos = np.cos(2.0 * spec.nood_angle)
    known: List[np.ndarray] = []
    while len(known) < n_known:
        x = _band_sample(rng, pole, spec.known_band, budget, "known prototypes")
        if all(x @ k <= max_known_cos for k in known):
            known.append(x)
    K = np.stack(known)

    nood, partners = [], []
    for k_idx in rng.permutation(n_known)[:spec.n_nood]:
        k = K[k_idx]
        while True:
            budget.take("NOOD prototypes")
            n = np.cos(spec.nood_angle) * k + np.sin(spec.nood_angle) * _tangent(rng, k)
            cos = K @ n
            if n @ pole > 0.0 and np.argmax(cos) == k_idx and np.sum(cos >= cos[k_idx]) == 1:
                nood.append(n)
                partners.append(int(k_idx))
                break

    food = []
    max_food_cos = np.cos(spec.food_min_angle)
    while len(food) < spec.n_food:
        budget.take("FOOD prototypes")
        x = _near_pole(rng, pole, spec.food_pole_min)
        if np.max(K @ x) <= max_food_cos:
            food.append(x)
    return known, nood, partners, food


def make_world(spec: WorldSpec, seed: int) -> World:
    """
    Sample a world of known, near-OOD and far-OOD class prototypes on the unit sphere.

    Known prototypes are pairwise at least 2*nood_angle apart; each NOOD prototype sits
    at exactly nood_angle from a distinct known partner (its strictly nearest known
    prototype); each FOOD prototype is at least food_min_angle from every known one.
    Known prototypes lie in the band known_band[0] < cos(pole) < known_band[1] around
    a random pole and FOOD prototypes near the pole (cos >= food_pole_min), so
    moving w_0 away from the known mean turns it toward the FOOD region. Every
    prototype stays in the open hemisphere of the pole, and worlds where the generic
    embedding w_0 (the normalized mean of all prototypes) is not central are redrawn.

    Raises:
        InfeasibleSpec: if rejection sampling exceeds `spec.max_draws` draws.
    """
    n_known = sum(spec.known_per_task)
    if spec.n_nood > n_known:
        raise InfeasibleSpec(f"{spec.n_nood} NOOD classes need as many distinct known partners, have {n_known}")

    rng = make_rng(seed, "world")
    budget = _DrawBudget(spec.max_draws)
    pole = _unit(rng.normal(size=spec.dim))
    while True:
        known, nood, partners, food = _draw_prototypes(spec, rng, pole, budget)
        prototypes = np.stack(known + nood + food)
        w0 = _unit(prototypes.mean(axis=0))
        if np.all(prototypes @ w0 > 0.0):
            break
        budget.take("a central generic embedding")
        logger.debug("w_0 not central, redrawing world")

    known_names = [f"cls_{i + 1:02d}" for i in range(n_known)]
    nood_names = [f"nood_{i + 1:02d}" for i in range(spec.n_nood)]
    food_names = [f"food_{i + 1:02d}" for i in range(spec.n_food)]
    class_names = known_names + nood_names + food_names
    kinds = {**{n: KNOWN for n in known_names}, **{n: NOOD for n in nood_names}, **{n: FOOD for n in food_names}}

    tasks, start = [], 0
    for t, count in enumerate(spec.known_per_task, start=1):
        tasks.append((t, tuple(known_names[start:start + count])))
        start += count
    schedule = TaskSchedule(tasks=tuple(tasks), all_classes=tuple(class_names))

    text_embeddings = {}
    for name, p in zip(known_names, known):
        g = rng.normal(size=spec.dim)
        text_embeddings[name] = _unit(p + spec.text_sigma * (g - (g @ p) * p))

    prompt_bank = {GENERIC_KEY: w0.copy()}
    for key, angle in PROMPT_ANGLES.items():
        prompt_bank[key] = np.cos(angle) * w0 + np.sin(angle) * _tangent(rng, w0)

    logger.info(f"World seed {seed}: {n_known} known, {spec.n_nood} NOOD, {spec.n_food} FOOD classes "
                f"({budget.used} rejection draws)")
    return World(
        spec=spec, seed=seed, class_names=class_names, kinds=kinds, prototypes=prototypes,
        partners={nood_names[i]: known_names[k] for i, k in enumerate(partners)},
        schedule=schedule, text_embeddings=text_embeddings, generic_object=w0, prompt_bank=prompt_bank,
    )


def food_turns(world: World, alpha: float) -> List[bool]:
    """
    Per task and FOOD class: whether w_U of that task's registry has a larger cosine
    with the FOOD prototype than with every known text embedding.
    """
    registry = ClassEmbeddingRegistry(generic_object=world.generic_object, alpha=alpha)
    food = [world.prototype(n) for n in world.unknown_classes if world.kinds[n] == FOOD]
    turns = []
    for _, names in world.schedule.tasks:
        registry = register_task(registry, [(n, world.text_embeddings[n]) for n in names])
        w_u = normalize(pseudo_unknown_embedding(registry))
        best_known = max(float(normalize(e.embedding) @ w_u) for e in registry.entries)
        turns.extend(bool(p @ w_u > best_known) for p in food)
    return turns


def _unknown_flags(world: World, class_name: str) -> Tuple[bool, ...]:
    known_by = world.schedule.task_of(class_name)
    return tuple(known_by is None or known_by > t for t in range(1, world.schedule.num_tasks + 1))


def _place_boxes(world: World, rng: np.random.Generator) -> List[Tuple[Box, int]]:
    spec = world.spec
    geometry = spec.geometry
    lo, hi = spec.boxes_per_scene
    placed: List[Tuple[Box, int]] = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        for _ in range(PLACEMENT_TRIES):
            level = int(rng.integers(geometry.num_levels))
            side_lo, side_hi = spec.box_sides[level]
            w = int(rng.integers(side_lo, side_hi))
            h = int(rng.integers(side_lo, side_hi))
            if w > spec.image_size or h > spec.image_size:
                continue
            x1 = int(rng.integers(0, spec.image_size - w + 1))
            y1 = int(rng.integers(0, spec.image_size - h + 1))
            box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            owner = level_for_box(box, spec.level_bounds)
            if not centers_in_box(geometry.centers(owner), box).any():
                continue
            if any(box[0] < b[2] and b[0] < box[2] and box[1] < b[3] and b[1] < box[3] for b, _ in placed):
                continue
            placed.append((box, owner))
            break
    return placed


def _as_float32(x: np.ndarray) -> np.ndarray:
    """Round to the nearest float32 values, kept in a float64 array."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _background(rng: np.random.Generator, n: int, dim: int, prototypes: np.ndarray, max_cos: float) -> np.ndarray:
    out = _as_float32(_unit(rng.normal(size=(n, dim))))
    bad = np.max(out @ prototypes.T, axis=1) >= max_cos
    while bad.any():
        out[bad] = _as_float32(_unit(rng.normal(size=(int(bad.sum()), dim))))
        bad = np.max(out @ prototypes.T, axis=1) >= max_cos
    return out


def generate_scene(world: World, split: str, index: int) -> Scene:
    """
    Deterministic scene for (world seed, split, index).

    Foreground locations (centers inside a box at the box's size-assigned level) carry
    normalize(prototype + noise) and emit the box; every other location carries a
    background unit vector with cosine below `background_max_cos` to all prototypes
    and emits its own cell. Features and boxes are float32 values, so a scene survives
    the pyramid blob round trip unchanged.
    """
    if split not in SPLITS:
        raise ValueError(f"Unknown split {split!r}, expected one of {SPLITS}")
    spec = world.spec
    geometry = spec.geometry
    rng = make_rng(world.seed, "scene", split, index)

    objects: List[SceneObject] = []
    known = world.known_classes
    unknown = world.unknown_classes
    for box, level in _place_boxes(world, rng):
        if unknown and rng.random() < spec.unknown_ratio:
            name = unknown[int(rng.integers(len(unknown)))]
        else:
            name = known[int(rng.integers(len(known)))]
        objects.append(SceneObject(box=box, class_name=name, level=level, unknown_at=_unknown_flags(world, name)))

    layers, boxes = [], []
    for j, (h, w, s) in enumerate(geometry.shapes):
        n = h * w
        feats = _background(rng, n, spec.dim, world.prototypes, spec.background_max_cos)
        rows, cols = np.divmod(np.arange(n), w)
        field_ = np.stack([cols * s, rows * s, (cols + 1) * s, (rows + 1) * s], axis=1).astype(np.float64)
        centers = geometry.centers(j)
        for obj in objects:
            if obj.level != j:
                continue
            mask = centers_in_box(centers, obj.box)
            k = int(mask.sum())
            noise = rng.normal(scale=spec.noise_sigma, size=(k, spec.dim))
            feats[mask] = _as_float32(_unit(world.prototype(obj.class_name) + noise))
            emitted = np.tile(np.asarray(obj.box, dtype=np.float64), (k, 1))
            if spec.box_jitter > 0:
                emitted += rng.uniform(-spec.box_jitter, spec.box_jitter, size=(k, 4))
                emitted[:, 2] = np.maximum(emitted[:, 2], emitted[:, 0] + 1.0)
                emitted[:, 3] = np.maximum(emitted[:, 3], emitted[:, 1] + 1.0)
            field_[mask] = _as_float32(emitted)
        layers.append(feats.reshape(h, w, spec.dim))
        boxes.append(field_.reshape(h, w, 4))

    return Scene(scene_id=f"{split}_{index:05d}", pyramid=FeaturePyramid(layers, boxes, geometry), objects=objects)


def generate_split(world: World, split: str, count: Optional[int] = None) -> List[Scene]:
    count = world.spec.scenes_per_split.get(split, 0) if count is None else count
    return [generate_scene(world, split, i) for i in range(count)]
