"""
Portable weight format.

Layout, all integers little-endian:
    b"CAGE" | u32 version=1 | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | float32 LE data
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    MagicMismatchError,
    MissingArtifactError,
    MissingTensorError,
    TruncatedFileError,
    UnknownLayerError,
    VersionMismatchError,
    WeightFormatError,
)
from .network import NetworkSpec, WeightStore

logger = logging.getLogger(__name__)

MAGIC = b"CAGE"
VERSION = 1


def layer_of(key: str) -> str:
    return key.rsplit(".", 1)[0]


def encode_weights(store: WeightStore, order: Optional[Iterable[str]] = None) -> bytes:
    """Serialize tensors (cast to float32) in `order`, or insertion order."""
    names = list(order) if order is not None else list(store)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(names))
    for name in names:
        tensor = np.ascontiguousarray(store[name], dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += tensor.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedFileError(
                f"{self.source}: file ends inside {what} (needs {count} bytes at offset {self.offset})"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_weights(data: bytes, source: str = "<bytes>") -> WeightStore:
    reader = _Reader(data, source)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise MagicMismatchError(f"{source}: not a CAGE weight file (magic {data[:4]!r})")
    reader.take(len(MAGIC), "magic")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"{source}: unsupported version {version}, expected {VERSION}")
    (count,) = reader.unpack("<I", "tensor count")

    store = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFormatError(f"{source}: tensor name is not UTF-8: {e}") from e
        (rank,) = reader.unpack("<B", f"rank of {name}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = reader.take(4 * size, f"data of {name}")
        store[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if reader.offset != len(data):
        raise WeightFormatError(f"{source}: {len(data) - reader.offset} trailing bytes after last tensor")
    return store


SpecLike = Union[NetworkSpec, Sequence[NetworkSpec]]


def _specs(spec: SpecLike) -> Sequence[NetworkSpec]:
    return [spec] if isinstance(spec, NetworkSpec) else list(spec)


def parameter_order(spec: SpecLike) -> Dict[str, tuple]:
    shapes = {}
    for part in _specs(spec):
        shapes.update(part.parameter_shapes())
    return shapes


def validate_store(store: WeightStore, spec: SpecLike, require_all: bool = False) -> None:
    """Check tensor names and dimensions against one network or a group of them."""
    shapes = parameter_order(spec)
    layer_names = {layer.name for part in _specs(spec) for layer in part.layers}
    for name, tensor in store.items():
        layer = layer_of(name)
        if layer not in layer_names or name not in shapes:
            raise UnknownLayerError(f"Tensor {name!r} matches no parameter of layer {layer!r} in the network")
        if tuple(tensor.shape) != tuple(shapes[name]):
            raise DimensionMismatchError(
                f"Layer {layer}: tensor {name} has shape {tuple(tensor.shape)}, network expects {tuple(shapes[name])}"
            )
    if require_all:
        missing = [name for name in shapes if name not in store]
        if missing:
            raise MissingTensorError(f"Weight store lacks {len(missing)} tensors, first {missing[0]}")


def serialize_weights(store: WeightStore, spec: Optional[SpecLike] = None) -> bytes:
    """
    Encode `store`; with a spec, every parameterized layer must have its
    tensors and the file lists them in network order.
    """
    order = None
    if spec is not None:
        validate_store(store, spec, require_all=True)
        order = list(parameter_order(spec))
    return encode_weights(store, order)


def save_weights(store: WeightStore, path, spec: Optional[SpecLike] = None) -> Path:
    path = Path(path)
    path.write_bytes(serialize_weights(store, spec))
    logger.info(f"Saved {len(store)} tensors to {path}")
    return path


def load_weights(path, spec: Optional[SpecLike] = None) -> WeightStore:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"Weight file {path} does not exist")
    store = decode_weights(path.read_bytes(), str(path))
    if spec is not None:
        validate_store(store, spec)
    logger.info(f"Loaded {len(store)} tensors from {path}")
    return store
