"""
LangGraph state schema for the detection cascade.
"""
from typing import Any, Dict, List, TypedDict

import numpy as np

from .boxes import BoundingBox, Detection


class CascadeState(TypedDict):
    """
    State passed between cascade nodes.
    """
    # Input
    image: np.ndarray
    nets: Any  # DetectorNets or any object with pnet/rnet/onet callables

    # Configuration
    min_face: float
    pyramid_factor: float
    pnet_threshold: float
    rnet_threshold: float
    onet_threshold: float
    threads: int

    # Stage outputs
    levels: int
    proposals: List[BoundingBox]
    refined: List[BoundingBox]
    detections: List[Detection]

    # Survivors per stage, keyed "P", "R", "O"
    counts: Dict[str, int]
