"""
Stage networks of the detection cascade.

P-Net is fully convolutional with a 12x12 receptive field and output stride 2;
R-Net scores 24x24 crops; O-Net scores 48x48 crops and adds five landmarks.
The stages only depend on the call signatures below, so any callable with the
same contract (a stub in tests, a different backend) can be injected.
"""
import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Protocol, Tuple

import numpy as np

from estimator.exceptions import ModelNotLoadedError
from estimator.network import CONV, MPOOL, RELU, LayerSpec, NetworkSpec, PoolParams, WeightStore, forward, init_weights
from estimator.tensor_ops import ConvParams, Tensor, softmax
from estimator.weights import load_weights, validate_store

logger = logging.getLogger(__name__)

RNET_SIZE = 24
ONET_SIZE = 48


class ProposalNet(Protocol):
    def __call__(self, image: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        """(H, W, 3) image -> face scores (H', W') and offsets (H', W', 4)."""


class RefineNet(Protocol):
    def __call__(self, crops: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        """(N, 24, 24, 3) crops -> scores (N,) and offsets (N, 4)."""


class OutputNet(Protocol):
    def __call__(self, crops: Tensor) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(N, 48, 48, 3) crops -> scores (N,), offsets (N, 4), landmarks (N, 10) in [0, 1]."""


def _trunk(prefix: str, size: int, plan) -> NetworkSpec:
    layers = []
    channels = 3
    for index, item in enumerate(plan, start=1):
        kind, name = item[0], f"{prefix}_{item[1]}"
        if kind == CONV:
            support, filters = item[2], item[3]
            layers.append(LayerSpec(index, CONV, name, ConvParams(support, channels, filters)))
            channels = filters
        elif kind == MPOOL:
            layers.append(LayerSpec(index, MPOOL, name, PoolParams(2, 2)))
        else:
            layers.append(LayerSpec(index, RELU, name))
    return NetworkSpec(layers, (size, size, 3), trainable_from=len(layers) + 1)


def _branch(prefix: str, name: str, channels: int, outputs: int) -> NetworkSpec:
    layer = LayerSpec(1, CONV, f"{prefix}_{name}", ConvParams(1, channels, outputs))
    return NetworkSpec([layer], (1, 1, channels), trainable_from=2)


def _normalize(batch: Tensor) -> Tensor:
    return ((np.asarray(batch, dtype=np.float32) - 127.5) / 128.0).astype(np.float32)


@dataclass
class StageNetwork:
    """Shared trunk followed by 1x1 output branches."""
    trunk: NetworkSpec
    branches: Dict[str, NetworkSpec]
    weights: WeightStore

    @property
    def specs(self):
        return [self.trunk, *self.branches.values()]

    def outputs(self, batch: Tensor, trunk: Optional[NetworkSpec] = None) -> Dict[str, Tensor]:
        trunk = trunk or self.trunk
        features = forward(trunk, self.weights, _normalize(batch))
        out = {}
        for key, spec in self.branches.items():
            spec = dataclasses.replace(spec, input_shape=features.shape[-3:])
            out[key] = forward(spec, self.weights, features)
        return out


class PNet(StageNetwork):
    def __call__(self, image: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        # fully convolutional: re-declare the input contract for this pyramid level
        trunk = dataclasses.replace(self.trunk, input_shape=image.shape)
        out = self.outputs(image, trunk)
        scores = softmax(out["face"], axis=-1)[..., 1]
        return scores, out["bbox"]


class RNet(StageNetwork):
    def __call__(self, crops: Tensor) -> Tuple[np.ndarray, np.ndarray]:
        out = self.outputs(crops)
        n = len(crops)
        scores = softmax(out["face"].reshape(n, 2), axis=-1)[:, 1]
        return scores, out["bbox"].reshape(n, 4)


class ONet(StageNetwork):
    def __call__(self, crops: Tensor) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = self.outputs(crops)
        n = len(crops)
        scores = softmax(out["face"].reshape(n, 2), axis=-1)[:, 1]
        return scores, out["bbox"].reshape(n, 4), out["landmarks"].reshape(n, 10)


PNET_PLAN = [
    (CONV, "conv1", 3, 10), (RELU, "relu1"), (MPOOL, "pool1"),
    (CONV, "conv2", 3, 16), (RELU, "relu2"),
    (CONV, "conv3", 3, 32), (RELU, "relu3"),
]
RNET_PLAN = [
    (CONV, "conv1", 3, 28), (RELU, "relu1"), (MPOOL, "pool1"),
    (CONV, "conv2", 3, 48), (RELU, "relu2"), (MPOOL, "pool2"),
    (CONV, "conv3", 2, 64), (RELU, "relu3"),
    (CONV, "fc", 3, 128), (RELU, "relu4"),
]
ONET_PLAN = [
    (CONV, "conv1", 3, 32), (RELU, "relu1"), (MPOOL, "pool1"),
    (CONV, "conv2", 3, 64), (RELU, "relu2"), (MPOOL, "pool2"),
    (CONV, "conv3", 3, 64), (RELU, "relu3"), (MPOOL, "pool3"),
    (CONV, "conv4", 2, 128), (RELU, "relu4"),
    (CONV, "fc", 3, 256), (RELU, "relu5"),
]


def build_pnet(weights: Optional[WeightStore] = None) -> PNet:
    branches = {"face": _branch("pnet", "face", 32, 2), "bbox": _branch("pnet", "bbox", 32, 4)}
    return PNet(_trunk("pnet", 12, PNET_PLAN), branches, weights or {})


def build_rnet(weights: Optional[WeightStore] = None) -> RNet:
    branches = {"face": _branch("rnet", "face", 128, 2), "bbox": _branch("rnet", "bbox", 128, 4)}
    return RNet(_trunk("rnet", RNET_SIZE, RNET_PLAN), branches, weights or {})


def build_onet(weights: Optional[WeightStore] = None) -> ONet:
    branches = {
        "face": _branch("onet", "face", 256, 2),
        "bbox": _branch("onet", "bbox", 256, 4),
        "landmarks": _branch("onet", "landmarks", 256, 10),
    }
    return ONet(_trunk("onet", ONET_SIZE, ONET_PLAN), branches, weights or {})


@dataclass
class DetectorNets:
    pnet: ProposalNet
    rnet: RefineNet
    onet: OutputNet


def detector_specs():
    """Every network spec of the cascade, in weight-file order."""
    return [spec for net in (build_pnet(), build_rnet(), build_onet()) for spec in net.specs]


def init_detector(rng: np.random.Generator) -> DetectorNets:
    """Randomly initialized cascade (no trained weights)."""
    weights = {}
    for spec in detector_specs():
        weights.update(init_weights(spec, rng))
    return DetectorNets(build_pnet(weights), build_rnet(weights), build_onet(weights))


def load_detector(path) -> DetectorNets:
    """Load all three stages from one portable weight file."""
    if not path:
        raise ModelNotLoadedError("No detector weight file configured")
    weights = load_weights(path)
    validate_store(weights, detector_specs(), require_all=True)
    logger.info(f"Loaded cascade weights from {path}")
    return DetectorNets(build_pnet(weights), build_rnet(weights), build_onet(weights))
