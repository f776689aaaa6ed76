from .generator import WorldSpec, World, Scene, SceneObject, make_world, food_turns, generate_scene, generate_split, SPLITS
from .io import (save_world, load_world, export_split, load_split, write_pyramid_blob, read_pyramid_blob,
                 read_gt_lines)
