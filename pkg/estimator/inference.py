"""
Five-crop test-time prediction.

A test image is rescaled to 256x256; the four corner crops and the centre
crop (224x224 each) go through the network and their probability vectors
are averaged.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from .augment import CROP_SIZE, RESCALE_SIZE, rescale_image
from .exceptions import DataError, ShapeError
from .imaging import crop_window, load_image
from .network import AgeClass
from .tensor_ops import Tensor

logger = logging.getLogger(__name__)

# corners first, centre last
FIVE_CROP_OFFSETS = ((0, 0), (0, 32), (32, 0), (32, 32), (16, 16))


def five_crop(image: Tensor) -> List[Tensor]:
    if image.shape[:2] != (RESCALE_SIZE, RESCALE_SIZE):
        raise ShapeError(f"five_crop expects a {RESCALE_SIZE}x{RESCALE_SIZE} image, got {image.shape}")
    return [crop_window(image, top, left, (CROP_SIZE, CROP_SIZE)) for top, left in FIVE_CROP_OFFSETS]


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    per_crop: np.ndarray

    @property
    def predicted(self) -> AgeClass:
        # np.argmax returns the first maximum: lowest class index wins ties
        return AgeClass(int(np.argmax(self.probs)))

    @property
    def confidence(self) -> float:
        return float(np.max(self.probs))


def average_crops(per_crop) -> Prediction:
    per_crop = np.asarray(per_crop)
    probs = per_crop.astype(np.float64).mean(axis=0)
    return Prediction(probs.astype(per_crop.dtype), per_crop)


def predict(model, image: Tensor) -> Prediction:
    """
    Rescale, five-crop, eval-mode forward, average.

    `model` is anything with a `probabilities(crops) -> (5, C)` method,
    normally an AgeModel.
    """
    crops = np.stack(five_crop(rescale_image(image, RESCALE_SIZE)))
    return average_crops(model.probabilities(crops))


Preprocessor = Callable[[Tensor, str], Tensor]


def predict_batch(
    model,
    paths: Iterable,
    preprocess: Optional[Preprocessor] = None,
) -> List[Tuple[str, Prediction]]:
    """
    One prediction per readable image, ordered by path.

    `preprocess` may replace the loaded image before prediction (face
    extraction on test images); unreadable files are skipped with a warning.
    """
    results = []
    skipped = 0
    for path in sorted(str(p) for p in paths):
        try:
            image = load_image(path)
        except DataError as e:
            logger.warning(f"Skipping {path}: {e}")
            skipped += 1
            continue
        if preprocess is not None:
            image = preprocess(image, path)
        results.append((path, predict(model, image)))
    logger.info(f"Predicted {len(results)} images ({skipped} skipped)")
    return results


def format_prediction(path: str, prediction: Prediction) -> str:
    probs = "\t".join(f"{p:.6f}" for p in prediction.probs)
    return f"{path}\t{prediction.predicted.label}\t{probs}"


def dumps_predictions(results: Iterable[Tuple[str, Prediction]]) -> str:
    """`path<TAB>predicted_label<TAB>p0..p7` per line."""
    return "".join(format_prediction(path, prediction) + "\n" for path, prediction in results)


@dataclass(frozen=True)
class LoggedPrediction:
    path: str
    predicted: AgeClass
    probs: Tuple[float, ...]

    @property
    def confidence(self) -> float:
        return max(self.probs)


def loads_predictions(text: str, source: str = "<predictions>") -> List[LoggedPrediction]:
    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise DataError(f"{source}:{number}: expected path<TAB>label<TAB>probabilities")
        try:
            rows.append(LoggedPrediction(parts[0], AgeClass.from_label(parts[1]), tuple(float(p) for p in parts[2:])))
        except ValueError as e:
            raise DataError(f"{source}:{number}: {e}") from e
    return rows
