import logging

import pytest
import yaml

from src.utils import setup_logger
from src.utils.config import ConfigLoader, get_config
from src.utils.errors import ConfigError
from src.utils.seeding import derive_seed, make_rng


def test_defaults_match_published_hyperparameters():
    config = ConfigLoader()
    assert config.get('embedding.alpha') == 0.4
    assert config.get('training.learning_rate') == 1e-4
    assert config.get('training.weight_decay') == 0.0125
    assert config.get('training.batch_size') == 16
    assert config.get('mscal.tau') == 0.1
    assert config.get('detection.logit_scale') == 10.0


def test_dotted_get_with_default():
    config = ConfigLoader()
    assert config.get('world.scenes_per_split.cal') == 40
    assert config.get('world.missing', 'fallback') == 'fallback'


def test_override_parses_yaml_values():
    config = ConfigLoader(overrides=["training.learning_rate=1e-3", "world.known_per_task=[3, 2]",
                                     "detection.class_wise_nms=false"])
    assert config.get('training.learning_rate') == pytest.approx(1e-3)
    assert config.get('world.known_per_task') == [3, 2]
    assert config.get('detection.class_wise_nms') is False


def test_integer_key_rejects_fraction():
    config = ConfigLoader()
    config.set('training.batch_size', 8.0)
    assert config.get('training.batch_size') == 8
    with pytest.raises(ConfigError):
        config.set('training.batch_size', 2.5)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        ConfigLoader(overrides=["training.momentum=0.9"])
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"training": {"lr": 0.1}}))
    with pytest.raises(ConfigError):
        ConfigLoader(str(path))


def test_user_file_merges_over_defaults(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"mscal": {"tau": 0.2}}))
    config = ConfigLoader(str(path))
    assert config.get('mscal.tau') == 0.2
    assert config.get('mscal.neg_cap') == 10


def test_resolved_is_a_copy():
    config = ConfigLoader()
    snapshot = config.resolved()
    snapshot['mscal']['tau'] = 99.0
    assert config.get('mscal.tau') == 0.1


def test_singleton_rebuilds_on_overrides():
    first = get_config()
    assert get_config() is first
    second = get_config(overrides=["system.seed=3"])
    assert second is not first
    assert second.get('system.seed') == 3


def test_labeled_seeds_are_stable_and_independent():
    assert derive_seed(0, "scene", "train", 1) == derive_seed(0, "scene", "train", 1)
    assert derive_seed(0, "scene", "train", 1) != derive_seed(0, "scene", "cal", 1)
    assert derive_seed(0, "world") != derive_seed(1, "world")
    a = make_rng(5, "batch", 1, 0).normal(size=3)
    b = make_rng(5, "batch", 1, 0).normal(size=3)
    assert (a == b).all()


def test_setup_logger_replaces_handlers(tmp_path):
    name = "openworld_kit.test_logger"
    first = setup_logger(name, "DEBUG", log_dir=None)
    assert len(first.handlers) == 1
    assert first.level == logging.DEBUG
    second = setup_logger(name, "warning", log_dir=str(tmp_path / "logs"))
    assert second is first
    assert second.level == logging.WARNING
    assert len(second.handlers) == 2
    assert len(list((tmp_path / "logs").glob("*.log"))) == 1
    for handler in list(second.handlers):
        second.removeHandler(handler)
        handler.close()


def test_setup_logger_rejects_unknown_level():
    with pytest.raises(ConfigError):
        setup_logger("openworld_kit.test_logger", "LOUD", log_dir=None)


def test_setup_logger_console_writes_stderr(capsys):
    name = "openworld_kit.test_console"
    logger = setup_logger(name, "INFO", log_dir=None)
    logger.propagate = False
    logger.info("trained task 1")
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "trained task 1" in captured.err
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
