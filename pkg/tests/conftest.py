import numpy as np
import pytest

from src.detect.pyramid import PyramidGeometry
from src.mscal.module import MscalModule
from src.utils.config import ConfigLoader, reset_config
from src.world.generator import WorldSpec, make_world

SMALL_WORLD = [
    "world.dim=8",
    "world.known_per_task=[2, 2]",
    "world.n_nood=1",
    "world.n_food=1",
    "world.image_size=32",
    "world.pyramid=[[4, 4, 8], [2, 2, 16]]",
    "world.box_sides=[[8, 16], [16, 32]]",
    "world.boxes_per_scene=[1, 2]",
    "world.scenes_per_split={train: 8, cal: 12, test: 6}",
    "mscal.level_bounds=[0, 16]",
    "training.steps_per_task=4",
    "training.batch_size=4",
]


@pytest.fixture(autouse=True)
def _fresh_config():
    reset_config()
    yield
    reset_config()


@pytest.fixture
def small_config(tmp_path):
    config = ConfigLoader(overrides=SMALL_WORLD)
    config.set('system.output_dir', str(tmp_path / "out"))
    return config


@pytest.fixture
def small_spec(small_config):
    return WorldSpec.from_config(small_config)


@pytest.fixture
def small_world(small_spec):
    return make_world(small_spec, seed=0)


@pytest.fixture
def geometry():
    return PyramidGeometry.from_config([[4, 4, 8], [2, 2, 16]])


@pytest.fixture
def make_module():
    def factory(class_id=0, num_levels=2, dim=6, seed=0, task_id=1, **kwargs):
        rng = np.random.default_rng(seed)
        return MscalModule.initialize(class_id=class_id, class_name=f"c{class_id}", task_id=task_id,
                                      num_levels=num_levels, dim=dim, rng=rng, **kwargs)
    return factory
