"""
Output Node - final boxes and five landmarks from O-Net.
"""
import logging
from typing import Any, Dict, List, Sequence

import numpy as np

from estimator.exceptions import InvalidBoxError
from estimator.tensor_ops import Tensor

from ..boxes import MIN, BoundingBox, Detection, Stage, apply_bbox_regression, nms
from ..networks import ONET_SIZE
from .refine import square_crops

logger = logging.getLogger(__name__)

ONET_NMS = 0.7


def decode_landmarks(box: BoundingBox, values: Sequence[float]):
    """
    Map normalized landmarks (five x values then five y values, each in
    [0, 1] within the box) to image coordinates.
    """
    values = np.clip(np.asarray(values, dtype=np.float64).reshape(10), 0.0, 1.0)
    xs = box.x1 + values[:5] * box.width
    ys = box.y1 + values[5:] * box.height
    return tuple((float(x), float(y)) for x, y in zip(xs, ys))


def onet_stage(
    image: Tensor,
    candidates: Sequence[BoundingBox],
    net,
    threshold: float = 0.7,
) -> List[Detection]:
    if not candidates:
        return []
    squared, crops = square_crops(image, candidates, ONET_SIZE)
    scores, offsets, landmarks = net(crops)
    boxes, points = [], {}
    for box, score, offset, marks in zip(squared, np.asarray(scores), np.asarray(offsets), np.asarray(landmarks)):
        if score <= threshold:
            continue
        rescored = BoundingBox(box.x1, box.y1, box.x2, box.y2, float(np.clip(score, 0.0, 1.0)))
        try:
            final = apply_bbox_regression(rescored, offset)
        except InvalidBoxError as e:
            logger.warning(f"Dropping O-Net candidate: {e}")
            continue
        boxes.append(final)
        points[id(final)] = decode_landmarks(final, marks)
    kept = nms(boxes, ONET_NMS, MIN) if boxes else []
    detections = [Detection(box, points[id(box)], Stage.O) for box in kept]
    logger.info(f"O-Net: {len(candidates)} in, {len(boxes)} above threshold, {len(detections)} faces")
    return detections


def output(state: Dict[str, Any]) -> Dict[str, Any]:
    detections = onet_stage(state['image'], state['refined'], state['nets'].onet, state['onet_threshold'])
    return {
        **state,
        'detections': detections,
        'counts': {**state.get('counts', {}), 'O': len(detections)},
    }
