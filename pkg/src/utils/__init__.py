from .config import ConfigLoader, get_config
from .logger import setup_logger
from .seeding import derive_seed, make_rng
