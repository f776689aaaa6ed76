from .module import MscalModule, project
from .assign import SampleAssignment, assign_samples, foreground_masks
from .loss import (mscal_loss, mscal_loss_and_grads, mscal_loss_gradients, mscal_total_loss, mscal_total_loss_and_grads,
                   mscal_loss_floor)
from .scoring import ood_score, ood_score_map, calibrate_threshold, freeze_class_modules
