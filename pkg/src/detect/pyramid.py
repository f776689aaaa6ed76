from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from src.utils.errors import ShapeMismatch

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class PyramidGeometry:
    """Grid shapes and strides; cell (row, col) of level j is centered at ((col+0.5)s_j, (row+0.5)s_j)."""
    shapes: Tuple[Tuple[int, int, float], ...]

    def __post_init__(self):
        if len(self.shapes) < 1:
            raise ShapeMismatch("A pyramid needs at least one level")
        strides = [s for _, _, s in self.shapes]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ShapeMismatch(f"Strides must be strictly increasing, got {strides}")

    @classmethod
    def from_config(cls, levels: Sequence[Sequence]) -> "PyramidGeometry":
        return cls(tuple((int(h), int(w), float(s)) for h, w, s in levels))

    @property
    def num_levels(self) -> int:
        return len(self.shapes)

    def level_size(self, level: int) -> int:
        h, w, _ = self.shapes[level]
        return h * w

    @property
    def total_locations(self) -> int:
        return sum(self.level_size(j) for j in range(self.num_levels))

    def centers(self, level: int) -> np.ndarray:
        """(H*W, 2) array of (cx, cy) in row-major order."""
        h, w, s = self.shapes[level]
        rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return np.stack([(cols.ravel() + 0.5) * s, (rows.ravel() + 0.5) * s], axis=1)

    def unravel(self, level: int, flat_index: int) -> Tuple[int, int]:
        _, w, _ = self.shapes[level]
        return int(flat_index // w), int(flat_index % w)


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    image_index: int = 0


@dataclass
class FeaturePyramid:
    """
    Per-level grids of D-dimensional location embeddings.

    `layers[j]` has shape (H_j, W_j, D); `boxes[j]` has shape (H_j, W_j, 4) and holds
    the (x1, y1, x2, y2) box each location would emit.
    """
    layers: List[np.ndarray]
    boxes: List[np.ndarray]
    geometry: PyramidGeometry

    def __post_init__(self):
        if len(self.layers) != self.geometry.num_levels or len(self.boxes) != self.geometry.num_levels:
            raise ShapeMismatch("Pyramid layer count does not match its geometry")
        dims = {layer.shape[-1] for layer in self.layers}
        if len(dims) != 1:
            raise ShapeMismatch(f"Pyramid levels disagree on D: {sorted(dims)}")
        for j, (layer, boxes) in enumerate(zip(self.layers, self.boxes)):
            h, w, _ = self.geometry.shapes[j]
            if layer.shape[:2] != (h, w) or boxes.shape != (h, w, 4):
                raise ShapeMismatch(f"Level {j} has shape {layer.shape[:2]}, expected {(h, w)}")
            if not (np.all(boxes[..., 0] < boxes[..., 2]) and np.all(boxes[..., 1] < boxes[..., 3])):
                raise ShapeMismatch(f"Level {j} box field has malformed boxes")

    @property
    def dim(self) -> int:
        return int(self.layers[0].shape[-1])

    @property
    def num_levels(self) -> int:
        return self.geometry.num_levels

    def flat(self, level: int) -> np.ndarray:
        return self.layers[level].reshape(-1, self.dim)


def stack_levels(pyramids: Sequence[FeaturePyramid]) -> List[np.ndarray]:
    """Per level, all locations of all images, image-major then row-major: (B*H_j*W_j, D)."""
    if not pyramids:
        raise ShapeMismatch("Cannot stack an empty batch of pyramids")
    geometry = pyramids[0].geometry
    for p in pyramids[1:]:
        if p.geometry != geometry or p.dim != pyramids[0].dim:
            raise ShapeMismatch("All pyramids in a batch must share geometry and D")
    return [np.concatenate([p.flat(j) for p in pyramids], axis=0).astype(np.float64)
            for j in range(geometry.num_levels)]


def level_for_box(box: Box, level_bounds: Sequence[float]) -> int:
    """Level j owns boxes whose max side lies in [bounds[j], bounds[j+1]); the last level is open-ended."""
    side = max(box[2] - box[0], box[3] - box[1])
    level = 0
    for j, bound in enumerate(level_bounds):
        if side >= bound:
            level = j
    return level


def centers_in_box(centers: np.ndarray, box: Box) -> np.ndarray:
    """Half-open containment x1 <= cx < x2, y1 <= cy < y2."""
    x1, y1, x2, y2 = box
    return (centers[:, 0] >= x1) & (centers[:, 0] < x2) & (centers[:, 1] >= y1) & (centers[:, 1] < y2)
