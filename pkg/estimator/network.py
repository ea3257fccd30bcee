"""
Declarative network construction: the VGG-Face backbone of the architecture
table, the age classification head, forward evaluation and the AgeModel
bundle used by training and inference.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import MissingTensorError, ModelNotLoadedError, ShapeError
from .tensor_ops import (
    EVAL,
    ConvParams,
    Tensor,
    as_tensor,
    check_mode,
    conv2d,
    dropout,
    fully_connected,
    maxpool2d,
    relu,
    softmax,
)

logger = logging.getLogger(__name__)

WeightStore = Dict[str, np.ndarray]

AGE_LABELS = ("0-2", "4-6", "8-13", "15-20", "25-32", "38-43", "48-53", "60+")
NUM_AGE_CLASSES = len(AGE_LABELS)


class AgeClass(IntEnum):
    """The eight ordered age ranges of the benchmark."""
    AGE_0_2 = 0
    AGE_4_6 = 1
    AGE_8_13 = 2
    AGE_15_20 = 3
    AGE_25_32 = 4
    AGE_38_43 = 5
    AGE_48_53 = 6
    AGE_60_PLUS = 7

    @property
    def label(self) -> str:
        return AGE_LABELS[self.value]

    @property
    def letter(self) -> str:
        return "abcdefgh"[self.value]

    @classmethod
    def from_label(cls, label: str) -> "AgeClass":
        try:
            return cls(AGE_LABELS.index(label))
        except ValueError:
            raise ValueError(f"Unknown age range label {label!r}") from None


# Layer kinds
CONV = "conv"
RELU = "relu"
MPOOL = "mpool"
DROPOUT = "dropout"
SOFTMAX = "softmax"
KINDS = (CONV, RELU, MPOOL, DROPOUT, SOFTMAX)


@dataclass(frozen=True)
class PoolParams:
    support: int = 2
    stride: int = 2


@dataclass(frozen=True)
class DropoutParams:
    rate: float = 0.3


LayerParams = Union[ConvParams, PoolParams, DropoutParams, None]


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str
    name: str
    params: LayerParams = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unknown layer kind {self.kind!r} for layer {self.name}")

    @property
    def weight_key(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_key(self) -> str:
        return f"{self.name}.bias"


@dataclass(frozen=True)
class NetworkSpec:
    """
    Ordered layers plus the input contract.

    Layers whose index is below `trainable_from` are frozen.
    """
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    trainable_from: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("Layer names must be unique")
        self.trace_shapes()

    def trace_shapes(self) -> List[Tuple[str, Tuple[int, int, int]]]:
        """Static shape propagation; raises ShapeError naming the first layer that breaks."""
        h, w, c = self.input_shape
        trace = []
        for layer in self.layers:
            p = layer.params
            if layer.kind == CONV:
                if p.filt_dim != c:
                    raise ShapeError(
                        f"Layer {layer.name} (#{layer.index}) expects {p.filt_dim} input channels, got {c}"
                    )
                h, w, c = p.output_size(h), p.output_size(w), p.num_filts
            elif layer.kind == MPOOL:
                if p.support > h or p.support > w:
                    raise ShapeError(f"Layer {layer.name} (#{layer.index}) pools {p.support} over {h}x{w}")
                h, w = (h - p.support) // p.stride + 1, (w - p.support) // p.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"Layer {layer.name} (#{layer.index}) produces an empty map")
            trace.append((layer.name, (h, w, c)))
        return trace

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        trace = self.trace_shapes()
        return trace[-1][1] if trace else self.input_shape

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def conv_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == CONV]

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in self.conv_layers:
            shapes[layer.weight_key] = layer.params.weight_shape
            shapes[layer.bias_key] = (layer.params.num_filts,)
        return shapes

    def trainable_parameter_names(self) -> List[str]:
        return [
            key
            for layer in self.conv_layers if layer.index >= self.trainable_from
            for key in (layer.weight_key, layer.bias_key)
        ]

    def frozen_parameter_names(self) -> List[str]:
        trainable = set(self.trainable_parameter_names())
        return [key for key in self.parameter_shapes() if key not in trainable]

    def parameter_count(self) -> int:
        return sum(layer.params.parameter_count() for layer in self.conv_layers)


# Channel plan of the architecture table: numbers are 3x3/pad 1 convolutions,
# "M" is a 2x2/stride 2 max pool.
VGG_FACE_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
BACKBONE_INPUT = (224, 224, 3)


def build_backbone(width_divisor: int = 1) -> NetworkSpec:
    """
    Layers 1-31 of the VGG-Face table: 13 conv, 13 relu, 5 max pools.

    width_divisor=1 reproduces the table exactly; larger divisors shrink every
    channel count for quick desk-scale runs.
    """
    if width_divisor < 1 or 64 % width_divisor:
        raise ValueError(f"width_divisor must divide 64, got {width_divisor}")
    layers = []
    index = 1
    block, position = 1, 1
    channels = BACKBONE_INPUT[2]
    for item in VGG_FACE_CFG:
        if item == "M":
            layers.append(LayerSpec(index, MPOOL, f"pool{block}", PoolParams(2, 2)))
            index += 1
            block, position = block + 1, 1
            continue
        filters = item // width_divisor
        suffix = f"{block}_{position}"
        layers.append(LayerSpec(index, CONV, f"conv{suffix}", ConvParams(3, channels, filters, 1, 1)))
        layers.append(LayerSpec(index + 1, RELU, f"relu{suffix}"))
        index += 2
        position += 1
        channels = filters
    return NetworkSpec(layers, BACKBONE_INPUT, trainable_from=index)


def build_head(
    num_classes: int = NUM_AGE_CLASSES,
    in_shape: Sequence[int] = (7, 7, 512),
    hidden: Sequence[int] = (1000, 100),
    dropout_rate: float = 0.3,
    start_index: int = 32,
) -> NetworkSpec:
    """
    Replacement classification head.

    FC(in -> 1000) + relu + dropout(0.3) + FC(1000 -> 100) + relu + FC(100 -> classes)
    + softmax. Fully connected layers are convolutions whose support covers
    the whole input map, as fc6 is in the architecture table.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    h, w, c = (int(v) for v in in_shape)
    if h != w:
        raise ShapeError(f"Head input must be square, got {tuple(in_shape)}")
    first, second = hidden
    i = start_index
    layers = [
        LayerSpec(i, CONV, "fc6", ConvParams(h, c, first)),
        LayerSpec(i + 1, RELU, "relu6"),
        LayerSpec(i + 2, DROPOUT, "dropout7", DropoutParams(dropout_rate)),
        LayerSpec(i + 3, CONV, "fc8", ConvParams(1, first, second)),
        LayerSpec(i + 4, RELU, "relu7"),
        LayerSpec(i + 5, CONV, "fc9", ConvParams(1, second, num_classes)),
        LayerSpec(i + 6, SOFTMAX, "prob"),
    ]
    return NetworkSpec(layers, (h, w, c), trainable_from=start_index)


def compose(backbone: NetworkSpec, head: NetworkSpec) -> NetworkSpec:
    """Backbone followed by head; trainable parameters start at the head."""
    if backbone.output_shape != head.input_shape:
        raise ShapeError(f"Backbone output {backbone.output_shape} does not feed head input {head.input_shape}")
    return NetworkSpec(backbone.layers + head.layers, backbone.input_shape, head.trainable_from)


def init_weights(
    spec: NetworkSpec,
    rng: np.random.Generator,
    names: Optional[Sequence[str]] = None,
    dtype=np.float32,
) -> WeightStore:
    """
    Uniform +-sqrt(6 / (fan_in + fan_out)) weights and zero biases.

    fan_in is support*support*filt_dim, fan_out is num_filts. `names` limits
    initialization to the given layer names.
    """
    store = {}
    for layer in spec.conv_layers:
        if names is not None and layer.name not in names:
            continue
        p = layer.params
        limit = np.sqrt(6.0 / (p.support * p.support * p.filt_dim + p.num_filts))
        store[layer.weight_key] = rng.uniform(-limit, limit, p.weight_shape).astype(dtype)
        store[layer.bias_key] = np.zeros(p.num_filts, dtype=dtype)
    return store


def _layer_weights(layer: LayerSpec, weights: WeightStore):
    try:
        return weights[layer.weight_key], weights[layer.bias_key]
    except KeyError as e:
        raise MissingTensorError(f"No tensor {e.args[0]} for layer {layer.name}") from None


def _apply_layer(layer: LayerSpec, weights: WeightStore, x: Tensor, mode: str, rng) -> Tensor:
    p = layer.params
    if layer.kind == CONV:
        w, b = _layer_weights(layer, weights)
        if p.pad == 0 and x.shape[1] == x.shape[2] == p.support:
            return fully_connected(x, w, b)
        return np.stack([conv2d(image, w, b, p.stride, p.pad) for image in x])
    if layer.kind == RELU:
        return relu(x)
    if layer.kind == MPOOL:
        return np.stack([maxpool2d(image, p.support, p.stride) for image in x])
    if layer.kind == DROPOUT:
        return dropout(x, p.rate, mode, rng)
    return softmax(x, axis=-1)


def forward(
    spec: NetworkSpec,
    weights: WeightStore,
    input: Tensor,
    mode: str = EVAL,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[list] = None,
) -> Tensor:
    """
    Apply the layers of `spec` in order.

    Args:
        spec: Network to evaluate
        weights: Tensors keyed "<layer>.weight" / "<layer>.bias"
        input: (H, W, C) tensor or an (N, H, W, C) batch
        mode: "train" activates dropout, "eval" makes it the identity
        rng: Seeded generator, needed for train-mode dropout
        trace: Optional list receiving (layer name, per-sample output shape)

    Returns:
        Output tensor, batched like the input
    """
    check_mode(mode)
    x = as_tensor(input)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"Network expects input {spec.input_shape}, got {np.asarray(input).shape}")
    for layer in spec.layers:
        try:
            x = _apply_layer(layer, weights, x, mode, rng)
        except ShapeError as e:
            raise ShapeError(f"Layer {layer.name} (#{layer.index}): {e}") from e
        if trace is not None:
            trace.append((layer.name, tuple(x.shape[1:])))
    return x[0] if single else x


def dumps_spec(spec: NetworkSpec) -> str:
    layers = []
    for layer in spec.layers:
        params = None if layer.params is None else asdict(layer.params)
        layers.append({"index": layer.index, "kind": layer.kind, "name": layer.name, "params": params})
    return json.dumps(
        {"input_shape": list(spec.input_shape), "trainable_from": spec.trainable_from, "layers": layers},
        indent=1,
    )


_PARAM_TYPES = {CONV: ConvParams, MPOOL: PoolParams, DROPOUT: DropoutParams}


def loads_spec(text: str) -> NetworkSpec:
    data = json.loads(text)
    layers = []
    for item in data["layers"]:
        params = item.get("params")
        if params is not None:
            params = _PARAM_TYPES[item["kind"]](**params)
        layers.append(LayerSpec(item["index"], item["kind"], item["name"], params))
    return NetworkSpec(layers, tuple(data["input_shape"]), data["trainable_from"])


DEFAULT_MEAN = (131.1, 103.9, 91.6)


def preprocess(image: Tensor, mean: Sequence[float] = DEFAULT_MEAN) -> Tensor:
    """RGB in [0, 255] minus the per-channel mean."""
    return (np.asarray(image, dtype=np.float32) - np.asarray(mean, dtype=np.float32)).astype(np.float32)


@dataclass
class AgeModel:
    """Frozen backbone, trainable head and the tensors for both."""
    backbone: NetworkSpec
    head: NetworkSpec
    weights: WeightStore = field(default_factory=dict)
    mean: Tuple[float, float, float] = DEFAULT_MEAN

    @property
    def spec(self) -> NetworkSpec:
        return compose(self.backbone, self.head)

    @property
    def num_classes(self) -> int:
        return self.head.output_shape[2]

    def missing_parameters(self) -> List[str]:
        return [key for key in self.spec.parameter_shapes() if key not in self.weights]

    def ensure_loaded(self):
        missing = self.missing_parameters()
        if missing:
            raise ModelNotLoadedError(f"Model has no tensors for {len(missing)} parameters, e.g. {missing[0]}")

    def features(self, crops: Tensor) -> Tensor:
        """Backbone output for a batch of raw RGB crops."""
        return forward(self.backbone, self.weights, preprocess(crops, self.mean))

    def head_probabilities(self, features: Tensor) -> Tensor:
        out = forward(self.head, self.weights, features)
        return out.reshape(len(features), -1)

    def probabilities(self, crops: Tensor) -> Tensor:
        """Eval-mode class probabilities, one row per crop."""
        self.ensure_loaded()
        return self.head_probabilities(self.features(crops))


def build_model(
    width_divisor: int = 1,
    num_classes: int = NUM_AGE_CLASSES,
    dropout_rate: float = 0.3,
    mean: Sequence[float] = DEFAULT_MEAN,
) -> AgeModel:
    backbone = build_backbone(width_divisor)
    head = build_head(num_classes, backbone.output_shape, dropout_rate=dropout_rate,
                      start_index=backbone.trainable_from)
    return AgeModel(backbone, head, {}, tuple(mean))
