"""
Refine Node - rescores P-Net proposals with R-Net.
"""
import logging
from typing import Any, Dict, List, Sequence

import numpy as np

from estimator.exceptions import InvalidBoxError
from estimator.imaging import ZERO, crop_and_resize
from estimator.tensor_ops import Tensor

from ..boxes import UNION, BoundingBox, apply_bbox_regression, nms, square_pad
from ..networks import RNET_SIZE

logger = logging.getLogger(__name__)

RNET_NMS = 0.7


def square_crops(image: Tensor, boxes: Sequence[BoundingBox], size: int):
    """Square-pad each box and resample it to size x size (zero fill outside the image)."""
    squared = [square_pad(box) for box in boxes]
    crops = np.stack([crop_and_resize(image, box.as_tuple(), size, size, fill=ZERO) for box in squared])
    return squared, crops


def rnet_stage(
    image: Tensor,
    candidates: Sequence[BoundingBox],
    net,
    threshold: float = 0.7,
) -> List[BoundingBox]:
    if not candidates:
        return []
    squared, crops = square_crops(image, candidates, RNET_SIZE)
    scores, offsets = net(crops)
    kept = []
    for box, score, offset in zip(squared, np.asarray(scores), np.asarray(offsets)):
        if score <= threshold:
            continue
        rescored = BoundingBox(box.x1, box.y1, box.x2, box.y2, float(np.clip(score, 0.0, 1.0)))
        try:
            kept.append(apply_bbox_regression(rescored, offset))
        except InvalidBoxError as e:
            logger.warning(f"Dropping R-Net candidate: {e}")
    refined = nms(kept, RNET_NMS, UNION) if kept else []
    logger.info(f"R-Net: {len(candidates)} in, {len(kept)} above threshold, {len(refined)} after NMS")
    return refined


def refine(state: Dict[str, Any]) -> Dict[str, Any]:
    refined = rnet_stage(state['image'], state['proposals'], state['nets'].rnet, state['rnet_threshold'])
    return {
        **state,
        'refined': refined,
        'counts': {**state.get('counts', {}), 'R': len(refined)},
    }
