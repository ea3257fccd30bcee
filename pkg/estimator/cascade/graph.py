"""
LangGraph orchestration of the detection cascade.

The graph coordinates the three stages: pyramid proposals (P-Net),
refinement (R-Net) and output boxes with landmarks (O-Net). A stage with no
survivors ends the run early.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List

from langgraph.graph import END, StateGraph

from estimator.exceptions import ShapeError
from estimator.tensor_ops import Tensor

from .boxes import Detection
from .nodes import output, propose, refine
from .state import CascadeState

logger = logging.getLogger(__name__)


def create_cascade_graph():
    """
    Create and compile the cascade graph.

    Flow:
        START → Propose → [any proposals?] → Refine → [any refined?] → Output → END
    """
    graph = StateGraph(CascadeState)

    graph.add_node("propose", propose)
    graph.add_node("refine", refine)
    graph.add_node("output", output)

    graph.set_entry_point("propose")

    def has_proposals(state: Dict[str, Any]) -> str:
        return "refine" if state.get('proposals') else "end"

    def has_refined(state: Dict[str, Any]) -> str:
        return "output" if state.get('refined') else "end"

    graph.add_conditional_edges("propose", has_proposals, {"refine": "refine", "end": END})
    graph.add_conditional_edges("refine", has_refined, {"output": "output", "end": END})
    graph.add_edge("output", END)

    return graph.compile()


cascade_graph = create_cascade_graph()


@dataclass
class DetectionResult:
    detections: List[Detection]
    counts: Dict[str, int] = field(default_factory=dict)
    levels: int = 0


def detect_faces(image: Tensor, nets, config) -> DetectionResult:
    """
    Run the full cascade on one (H, W, 3) image.

    Args:
        image: RGB tensor in [0, 255]
        nets: Object exposing pnet, rnet and onet callables
        config: Anything with min_face, pyramid_factor, the three stage
            thresholds and threads attributes (usually a PipelineConfig)

    Returns:
        DetectionResult with O-stage detections and survivors per stage
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"Cascade expects an (H, W, 3) image, got {image.shape}")
    initial_state = {
        'image': image,
        'nets': nets,
        'min_face': config.min_face,
        'pyramid_factor': config.pyramid_factor,
        'pnet_threshold': config.pnet_threshold,
        'rnet_threshold': config.rnet_threshold,
        'onet_threshold': config.onet_threshold,
        'threads': getattr(config, 'threads', 1),
        'levels': 0,
        'proposals': [],
        'refined': [],
        'detections': [],
        'counts': {'P': 0, 'R': 0, 'O': 0},
    }
    final_state = cascade_graph.invoke(initial_state)
    counts = {'P': 0, 'R': 0, 'O': 0, **final_state.get('counts', {})}
    logger.info(f"Cascade survivors P={counts['P']} R={counts['R']} O={counts['O']}")
    return DetectionResult(final_state.get('detections', []), counts, final_state.get('levels', 0))
