"""
Image I/O and bilinear resampling shared by detection, augmentation and inference.

Images are float32 HWC RGB tensors with values in [0, 255]. Pixel centres sit
at integer coordinates.
"""
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import DataError, InvalidBoxError, ShapeError
from .tensor_ops import Tensor

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".ppm")
EDGE = "edge"
ZERO = "zero"


def load_image(path) -> Tensor:
    """Read a PNG/JPEG/PPM file as a float32 (H, W, 3) RGB tensor."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"Unreadable image {path}: {e}") from e


def save_image(image: Tensor, path) -> None:
    """Write an (H, W, 3) tensor, rounding and clipping to 8-bit."""
    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, "RGB").save(path)


def is_readable_image(path) -> bool:
    try:
        with Image.open(path) as img:
            img.verify()
        return True
    except (OSError, UnidentifiedImageError, SyntaxError) as e:
        logger.warning(f"Skipping unreadable image {path}: {e}")
        return False


def list_images(directory) -> List[Path]:
    """All image files below `directory`, sorted by path."""
    root = Path(directory)
    return sorted(
        p for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def bilinear_sample(image: Tensor, ys: np.ndarray, xs: np.ndarray, fill: str = EDGE) -> Tensor:
    """
    Sample `image` at fractional coordinates.

    Args:
        image: (H, W, C) tensor
        ys, xs: Arrays of equal shape holding source row/column coordinates
        fill: "edge" replicates border pixels everywhere; "zero" replicates them
            inside the image extent and returns 0 for samples beyond it

    Returns:
        Tensor of shape ys.shape + (C,), same dtype as the image
    """
    if image.ndim != 3 or 0 in image.shape:
        raise ShapeError(f"bilinear_sample expects a non-empty (H, W, C) image, got {image.shape}")
    h, w = image.shape[:2]
    src = image.astype(np.float64)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y1 = y0 + 1
    x1 = x0 + 1

    if fill not in (EDGE, ZERO):
        raise ValueError(f"Unknown fill mode {fill!r}")

    def gather(yy, xx):
        return src[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]

    out = (
        (1 - fy) * (1 - fx) * gather(y0, x0)
        + (1 - fy) * fx * gather(y0, x1)
        + fy * (1 - fx) * gather(y1, x0)
        + fy * fx * gather(y1, x1)
    )
    if fill == ZERO:
        # pixel squares cover [-0.5, H - 0.5] x [-0.5, W - 0.5]; only samples past that are black
        inside = (ys >= -0.5) & (ys <= h - 0.5) & (xs >= -0.5) & (xs <= w - 0.5)
        out = np.where(inside[..., None], out, 0.0)
    return out.astype(image.dtype)


def _centre_grid(start: float, extent: float, size: int) -> np.ndarray:
    # maps output pixel centres onto the source interval [start, start + extent)
    return start + (np.arange(size) + 0.5) * (extent / size) - 0.5


def resize(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of the whole image to (out_h, out_w)."""
    if image.ndim != 3 or 0 in image.shape:
        raise ShapeError(f"Cannot resize image of shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"Cannot resize to {out_h}x{out_w}")
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys, xs = np.meshgrid(_centre_grid(0.0, h, out_h), _centre_grid(0.0, w, out_w), indexing="ij")
    return bilinear_sample(image, ys, xs, fill=EDGE)


def crop_and_resize(
    image: Tensor,
    box: Sequence[float],
    out_h: int,
    out_w: int,
    fill: str = ZERO,
) -> Tensor:
    """
    Crop the (x1, y1, x2, y2) region and resample it to (out_h, out_w).

    Regions outside the image are zero-filled by default.
    """
    x1, y1, x2, y2 = (float(v) for v in box)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise InvalidBoxError(f"Cannot crop zero-area box {(x1, y1, x2, y2)}")
    ys, xs = np.meshgrid(
        _centre_grid(y1, y2 - y1, out_h),
        _centre_grid(x1, x2 - x1, out_w),
        indexing="ij",
    )
    return bilinear_sample(image, ys, xs, fill=fill)


def crop_window(image: Tensor, top: int, left: int, size: Tuple[int, int]) -> Tensor:
    """Exact pixel copy of a window; no interpolation."""
    h, w = size
    if top < 0 or left < 0 or top + h > image.shape[0] or left + w > image.shape[1]:
        raise ShapeError(f"Window {(top, left, h, w)} outside image of shape {image.shape}")
    return image[top:top + h, left:left + w].copy()
