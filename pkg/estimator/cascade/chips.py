"""
Face chips and the detection log.

One log line per face: `path x1 y1 x2 y2 score lx1 ly1 ... lx5 ly5`.
Chips keep the class subdirectory of their source image and are named
`<stem>_<ext>_face<k>.png`, k counting from 0 in score order; the source
extension keeps `a.png` and `a.jpg` from sharing chips. Paths may contain
spaces since the 15 numeric fields are split off from the right.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

from estimator.exceptions import DataError
from estimator.imaging import ZERO, crop_and_resize, list_images, load_image
from estimator.tensor_ops import Tensor

from .boxes import BoundingBox, Detection, Stage, square_pad
from .graph import detect_faces

logger = logging.getLogger(__name__)


def extract_face_chip(image: Tensor, detection: Union[Detection, BoundingBox], out_size: int = 256) -> Tensor:
    """Square-padded crop of the detection, zero-filled outside the image, resampled to out_size."""
    box = detection.box if isinstance(detection, Detection) else detection
    return crop_and_resize(image, square_pad(box).as_tuple(), out_size, out_size, fill=ZERO)


def format_detection(path: str, detection: Detection) -> str:
    box = detection.box
    fields = [path, *(f"{v:.2f}" for v in box.as_tuple()), f"{box.score:.6f}"]
    for x, y in detection.landmarks or ():
        fields += [f"{x:.2f}", f"{y:.2f}"]
    return " ".join(fields)


def parse_detection(line: str) -> Tuple[str, Detection]:
    """Inverse of format_detection, up to the printed precision."""
    parts = line.rstrip("\n").rsplit(None, 15)
    if len(parts) != 16:
        raise ValueError(f"Detection line needs 16 fields, got {len(parts)}: {line!r}")
    values = [float(v) for v in parts[1:]]
    box = BoundingBox(*values[:5])
    marks = tuple((values[5 + 2 * i], values[6 + 2 * i]) for i in range(5))
    return parts[0], Detection(box, marks, Stage.O)


@dataclass
class DetectSummary:
    images: int = 0
    faces: int = 0
    skipped: int = 0


def chip_name(source: Path, index: int) -> str:
    return f"{source.stem}_{source.suffix.lstrip('.')}_face{index}.png"


def detect_directory(input_dir, writer, nets, config, chip_dir: str = "chips") -> Tuple[List[str], DetectSummary]:
    """
    Detect every image below `input_dir` and write its chips through `writer`.

    Returns the detection log lines (sorted by image path) and a summary.
    """
    root = Path(input_dir)
    lines, summary = [], DetectSummary()
    for path in list_images(root):
        relative = path.relative_to(root)
        try:
            image = load_image(path)
        except DataError as e:
            logger.warning(f"Skipping {relative}: {e}")
            summary.skipped += 1
            continue
        result = detect_faces(image, nets, config)
        summary.images += 1
        for k, detection in enumerate(result.detections):
            chip = extract_face_chip(image, detection, config.chip_size)
            writer.write_image(Path(chip_dir) / relative.parent / chip_name(path, k), chip)
            lines.append(format_detection(relative.as_posix(), detection))
            summary.faces += 1
        if not result.detections:
            logger.info(f"No face found in {relative}")
    logger.info(f"Detected {summary.faces} faces in {summary.images} images ({summary.skipped} skipped)")
    return lines, summary
