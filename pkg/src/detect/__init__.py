from .pyramid import Box, GroundTruth, PyramidGeometry, FeaturePyramid, stack_levels, level_for_box, centers_in_box
from .boxes import Detection, iou, iou_matrix, nms
from .detector import OpenWorldDetector, classify_locations, decode_detections, apply_ood_gate
