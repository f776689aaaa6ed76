import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.detect.pyramid import FeaturePyramid, PyramidGeometry, level_for_box
from src.embedding.io import GENERIC_KEY, save_embedding_file, load_embedding_file
from src.embedding.registry import TaskSchedule
from src.utils.errors import ParseError
from src.world.generator import KNOWN, World, WorldSpec, Scene, SceneObject, generate_scene

logger = logging.getLogger("openworld_kit.world")

MANIFEST = "manifest.json"
EMBEDDINGS = "embeddings.json"
PROMPTS = "prompts.json"
BLOB_DTYPE = np.dtype("<f4")


def _round9(values) -> List[float]:
    return [float(f"{v:.9g}") for v in np.asarray(values, dtype=np.float64)]


# ------------------------------------------------------------------ pyramid blob

def write_pyramid_blob(path: str, pyramid: FeaturePyramid):
    """
    Little-endian float32 stream: header [p, (H_j, W_j, D, stride_j) per level], then per
    level H_j*W_j records of D feature values followed by the 4 box-field values.
    """
    header = [float(pyramid.num_levels)]
    for h, w, s in pyramid.geometry.shapes:
        header += [float(h), float(w), float(pyramid.dim), float(s)]
    parts = [np.asarray(header, dtype=BLOB_DTYPE)]
    for j in range(pyramid.num_levels):
        records = np.concatenate([pyramid.flat(j), pyramid.boxes[j].reshape(-1, 4)], axis=1)
        parts.append(records.astype(BLOB_DTYPE).ravel())
    with open(path, "wb") as f:
        f.write(np.concatenate(parts).tobytes())


def read_pyramid_blob(path: str) -> FeaturePyramid:
    data = np.fromfile(path, dtype=BLOB_DTYPE)
    if data.size < 1:
        raise ParseError(path, 1, "Empty pyramid blob")
    p = int(data[0])
    if data.size < 1 + 4 * p:
        raise ParseError(path, 1, f"Truncated header for {p} levels")
    shapes: List[Tuple[int, int, float]] = []
    dims = set()
    for j in range(p):
        h, w, d, s = data[1 + 4 * j: 5 + 4 * j]
        shapes.append((int(h), int(w), float(s)))
        dims.add(int(d))
    if len(dims) != 1:
        raise ParseError(path, 1, f"Levels disagree on D: {sorted(dims)}")
    dim = dims.pop()
    offset = 1 + 4 * p
    layers, boxes = [], []
    for h, w, _ in shapes:
        count = h * w * (dim + 4)
        if data.size < offset + count:
            raise ParseError(path, 1, "Truncated pyramid payload")
        records = data[offset:offset + count].reshape(h * w, dim + 4).astype(np.float64)
        layers.append(records[:, :dim].reshape(h, w, dim))
        boxes.append(records[:, dim:].reshape(h, w, 4))
        offset += count
    return FeaturePyramid(layers, boxes, PyramidGeometry(tuple(shapes)))


# ------------------------------------------------------------------------ world

def save_world(world: World, out_dir: str):
    """Manifest (spec, seed, class table, schedule), embedding file, and generic prompt bank."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "version": 1,
        "seed": world.seed,
        "spec": world.spec.to_dict(),
        "classes": [
            {"name": name, "kind": world.kinds[name], "task": world.schedule.task_of(name),
             "partner": world.partners.get(name), "prototype": _round9(world.prototypes[i])}
            for i, name in enumerate(world.class_names)
        ],
        "schedule": world.schedule.to_dict(),
    }
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1)
    save_embedding_file(os.path.join(out_dir, EMBEDDINGS),
                        {**world.text_embeddings, GENERIC_KEY: world.generic_object})
    save_embedding_file(os.path.join(out_dir, PROMPTS), world.prompt_bank)


def load_world(out_dir: str) -> World:
    path = os.path.join(out_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"World manifest not found: {path}. Run `gen` first.")
    with open(path, "r") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(path, e.lineno, e.msg) from e
    classes = manifest["classes"]
    names = [c["name"] for c in classes]
    embeddings = load_embedding_file(os.path.join(out_dir, EMBEDDINGS))
    prompts = load_embedding_file(os.path.join(out_dir, PROMPTS))
    return World(
        spec=WorldSpec(**manifest["spec"]),
        seed=int(manifest["seed"]),
        class_names=names,
        kinds={c["name"]: c["kind"] for c in classes},
        prototypes=np.asarray([c["prototype"] for c in classes], dtype=np.float64),
        partners={c["name"]: c["partner"] for c in classes if c.get("partner")},
        schedule=TaskSchedule.from_dict(manifest["schedule"], names),
        text_embeddings={n: embeddings[n] for n in names if n in embeddings},
        generic_object=embeddings[GENERIC_KEY],
        prompt_bank=prompts,
    )


# ----------------------------------------------------------------------- splits

def split_dir(out_dir: str, split: str) -> str:
    return os.path.join(out_dir, split)


def export_split(world: World, split: str, out_dir: str, scenes: Optional[Sequence[Scene]] = None) -> int:
    """
    Write `<split>/scenes/<scene_id>.bin` blobs and `<split>/gt.jsonl`.

    Train and calibration GT leave world-unknown classes unannotated; the test GT
    lists every box.

    Returns:
        Number of GT lines written.
    """
    if scenes is None:
        count = world.spec.scenes_per_split.get(split, 0)
        scenes = [generate_scene(world, split, i) for i in range(count)]
    base = split_dir(out_dir, split)
    os.makedirs(os.path.join(base, "scenes"), exist_ok=True)
    annotate_unknown = split == "test"
    lines = 0
    with open(os.path.join(base, "gt.jsonl"), "w") as f:
        for scene in scenes:
            write_pyramid_blob(os.path.join(base, "scenes", f"{scene.scene_id}.bin"), scene.pyramid)
            for obj in scene.objects:
                if not annotate_unknown and world.kinds[obj.class_name] != KNOWN:
                    continue
                x1, y1, x2, y2 = obj.box
                f.write(json.dumps({"scene_id": scene.scene_id, "x1": x1, "y1": y1, "x2": x2, "y2": y2,
                                    "class_name": obj.class_name}) + "\n")
                lines += 1
    logger.info(f"Exported {len(scenes)} {split} scenes ({lines} GT boxes) to {base}")
    return lines


def read_gt_lines(path: str) -> Dict[str, List[Tuple[Tuple[float, float, float, float], str]]]:
    """scene_id -> [(box, class_name)] in file order."""
    out: Dict[str, List] = {}
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                box = (float(rec["x1"]), float(rec["y1"]), float(rec["x2"]), float(rec["y2"]))
                out.setdefault(rec["scene_id"], []).append((box, rec["class_name"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ParseError(path, line_no, str(e)) from e
    return out


def load_split(out_dir: str, split: str, world: World) -> List[Scene]:
    """Scenes in scene-id order with GT objects from gt.jsonl."""
    base = split_dir(out_dir, split)
    scene_dir = os.path.join(base, "scenes")
    if not os.path.isdir(scene_dir):
        raise FileNotFoundError(f"No exported {split} split under {out_dir}. Run `gen` first.")
    gt = read_gt_lines(os.path.join(base, "gt.jsonl"))
    n_tasks = world.schedule.num_tasks
    scenes = []
    for fname in sorted(os.listdir(scene_dir)):
        if not fname.endswith(".bin"):
            continue
        scene_id = fname[:-len(".bin")]
        pyramid = read_pyramid_blob(os.path.join(scene_dir, fname))
        objects = []
        for box, name in gt.get(scene_id, []):
            task = world.schedule.task_of(name)
            objects.append(SceneObject(
                box=box, class_name=name, level=level_for_box(box, world.spec.level_bounds),
                unknown_at=tuple(task is None or task > t for t in range(1, n_tasks + 1)),
            ))
        scenes.append(Scene(scene_id=scene_id, pyramid=pyramid, objects=objects))
    return scenes
