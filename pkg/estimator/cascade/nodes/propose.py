"""
Propose Node - image pyramid and the P-Net stage.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np

from estimator.exceptions import InvalidBoxError
from estimator.imaging import resize
from estimator.tensor_ops import Tensor

from ..boxes import PNET_WINDOW, UNION, BoundingBox, apply_bbox_regression, map_pnet_cell, nms

logger = logging.getLogger(__name__)

LEVEL_NMS = 0.5
CROSS_LEVEL_NMS = 0.7


@dataclass(frozen=True)
class PyramidLevel:
    scale: float
    image: Tensor

    def __post_init__(self):
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"Pyramid scale must be in (0, 1], got {self.scale}")
        if min(self.image.shape[:2]) < PNET_WINDOW:
            raise ValueError(f"Pyramid level {self.image.shape} smaller than {PNET_WINDOW}px")


def pyramid_scales(height: int, width: int, min_face: float, factor: float) -> List[float]:
    """Scales 12/min_face * factor^k while the scaled short side stays >= 12."""
    if min_face < PNET_WINDOW:
        raise ValueError(f"min_face must be >= {PNET_WINDOW}, got {min_face}")
    if not 0.0 < factor < 1.0:
        raise ValueError(f"pyramid factor must be in (0, 1), got {factor}")
    scale = PNET_WINDOW / min_face
    short = min(height, width)
    scales = []
    while short * scale >= PNET_WINDOW:
        scales.append(scale)
        scale *= factor
    return scales


def build_pyramid(image: Tensor, min_face: float = 20, factor: float = 0.709) -> List[PyramidLevel]:
    """
    Progressively downscaled copies of `image`.

    An image smaller than min_face gives an empty pyramid.
    """
    h, w = image.shape[:2]
    levels = []
    for scale in pyramid_scales(h, w, min_face, factor):
        size = (max(PNET_WINDOW, math.ceil(h * scale)), max(PNET_WINDOW, math.ceil(w * scale)))
        levels.append(PyramidLevel(scale, resize(image, *size)))
    return levels


def _level_candidates(level: PyramidLevel, net, threshold: float) -> List[BoundingBox]:
    scores, offsets = net(level.image)
    scores = np.asarray(scores)
    offsets = np.asarray(offsets)
    boxes = []
    for row, col in zip(*np.nonzero(scores > threshold)):
        score = float(np.clip(scores[row, col], 0.0, 1.0))
        window = map_pnet_cell(int(row), int(col), level.scale, score)
        try:
            boxes.append(apply_bbox_regression(window, offsets[row, col]))
        except InvalidBoxError as e:
            logger.warning(f"Dropping P-Net candidate at scale {level.scale:.4f}: {e}")
    return nms(boxes, LEVEL_NMS, UNION) if boxes else []


def pnet_stage(
    image: Tensor,
    net,
    threshold: float = 0.6,
    min_face: float = 20,
    factor: float = 0.709,
    threads: int = 1,
) -> List[BoundingBox]:
    """
    Candidate windows over every pyramid level.

    Per level: score cells, keep those above `threshold`, map them to image
    coordinates, regress, NMS at 0.5. The union of levels goes through a
    second NMS at 0.7. Levels may be scored on `threads` workers; merging
    sorts before suppression so the result does not depend on completion order.
    """
    levels = build_pyramid(image, min_face, factor)
    if threads > 1 and len(levels) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_level = list(pool.map(lambda lv: _level_candidates(lv, net, threshold), levels))
    else:
        per_level = [_level_candidates(level, net, threshold) for level in levels]
    merged = sorted((box for boxes in per_level for box in boxes), key=BoundingBox.sort_key)
    proposals = nms(merged, CROSS_LEVEL_NMS, UNION)
    logger.info(f"P-Net: {len(levels)} pyramid levels, {len(merged)} level survivors, {len(proposals)} proposals")
    return proposals


def propose(state: Dict[str, Any]) -> Dict[str, Any]:
    image = state['image']
    proposals = pnet_stage(
        image,
        state['nets'].pnet,
        threshold=state['pnet_threshold'],
        min_face=state['min_face'],
        factor=state['pyramid_factor'],
        threads=state.get('threads', 1),
    )
    levels = len(pyramid_scales(image.shape[0], image.shape[1], state['min_face'], state['pyramid_factor']))
    return {
        **state,
        'levels': levels,
        'proposals': proposals,
        'counts': {**state.get('counts', {}), 'P': len(proposals)},
    }
