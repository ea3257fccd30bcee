"""
Training-time augmentation: rescale to 256, random 224 crop, horizontal flip
and a small rotation.

Each sample's chain draws from its own generator seeded by
(seed, epoch, sample index), so results do not depend on processing order.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ShapeError
from .imaging import EDGE, bilinear_sample, crop_window, resize
from .tensor_ops import Tensor

logger = logging.getLogger(__name__)

RESCALE_SIZE = 256
CROP_SIZE = 224
MAX_ROTATION = 45.0


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def rescale_image(image: Tensor, size: int = RESCALE_SIZE) -> Tensor:
    """Bilinear resample to size x size; a size x size input comes back unchanged."""
    return resize(image, size, size)


def random_crop(image: Tensor, size: int = CROP_SIZE, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Exact size x size window at offsets drawn uniformly from {0 .. side - size}."""
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ShapeError(f"Crop {size} larger than image {h}x{w}")
    rng = rng or np.random.default_rng()
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop_window(image, top, left, (size, size))


def center_crop(image: Tensor, size: int = CROP_SIZE) -> Tensor:
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ShapeError(f"Crop {size} larger than image {h}x{w}")
    return crop_window(image, (h - size) // 2, (w - size) // 2, (size, size))


def horizontal_flip(image: Tensor, p: float = 0.5, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Columns reversed with probability p."""
    rng = rng or np.random.default_rng()
    if rng.random() < p:
        return image[:, ::-1].copy()
    return image


def rotate(
    image: Tensor,
    angle_degrees: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    max_degrees: float = 10.0,
) -> Tensor:
    """
    Rotate about the image centre with bilinear sampling and edge-replicated fill.

    Without an explicit angle one is drawn uniformly from [-max_degrees, max_degrees].
    Positive angles turn the content counter-clockwise.
    """
    if angle_degrees is None:
        rng = rng or np.random.default_rng()
        angle_degrees = float(rng.uniform(-max_degrees, max_degrees))
    if abs(angle_degrees) > MAX_ROTATION:
        raise ValueError(f"Rotation {angle_degrees} exceeds {MAX_ROTATION} degrees")
    if angle_degrees == 0:
        return image.copy()

    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: where each output pixel comes from in the source
    src_x = cx + cos * dx - sin * dy
    src_y = cy + sin * dx + cos * dy
    return bilinear_sample(image, src_y, src_x, fill=EDGE)


@dataclass(frozen=True)
class Augmenter:
    rescale_size: int = RESCALE_SIZE
    crop_size: int = CROP_SIZE
    flip_probability: float = 0.5
    rotation_degrees: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0, 1], got {self.flip_probability}")
        if not 0.0 <= self.rotation_degrees <= MAX_ROTATION:
            raise ValueError(f"rotation_degrees must be in [0, {MAX_ROTATION}], got {self.rotation_degrees}")

    def __call__(self, image: Tensor, rng: np.random.Generator) -> Tensor:
        out = rescale_image(image, self.rescale_size)
        out = random_crop(out, self.crop_size, rng)
        out = horizontal_flip(out, self.flip_probability, rng)
        if self.rotation_degrees > 0:
            out = rotate(out, rng=rng, max_degrees=self.rotation_degrees)
        return out

    def evaluation_view(self, image: Tensor) -> Tensor:
        """Deterministic rescale and centre crop used for validation."""
        return center_crop(rescale_image(image, self.rescale_size), self.crop_size)
