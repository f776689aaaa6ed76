from .optimizer import OptimizerState, AdamW, adamw_step
from .losses import detection_loss, sampled_locations
from .trainer import Trainer, known_ground_truth
