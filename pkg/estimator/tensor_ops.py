"""
Dense tensor kernels that every network in the pipeline is composed from.

Tensors are plain numpy arrays in HWC row-major layout. Storage is float32
(float64 arrays are passed through untouched so gradient checks can run in
double precision); convolution reductions accumulate in float64.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NumericError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)

# Upper bound on im2col elements materialized at once inside conv2d.
_BLOCK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class ConvParams:
    """One convolution column of the architecture table."""
    support: int
    filt_dim: int
    num_filts: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.support, self.filt_dim, self.num_filts, self.stride) < 1 or self.pad < 0:
            raise ValueError(f"Invalid convolution parameters: {self}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.support, self.support, self.filt_dim, self.num_filts)

    def output_size(self, size: int) -> int:
        return (size + 2 * self.pad - self.support) // self.stride + 1

    def parameter_count(self) -> int:
        return self.support * self.support * self.filt_dim * self.num_filts + self.num_filts


def as_tensor(values, dtype=None) -> Tensor:
    """Build a tensor; float64 input stays float64, everything else becomes float32."""
    arr = np.asarray(values)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if arr.ndim == 0 or 0 in arr.shape:
        raise ShapeError(f"Tensor needs at least one element per dimension, got shape {arr.shape}")
    return arr


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def conv2d(input: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """
    Cross-correlate an HWC tensor with a (k, k, Cin, Cout) kernel bank.

    Args:
        input: Tensor of shape (H, W, Cin)
        weights: Tensor of shape (k, k, Cin, Cout)
        bias: Tensor of shape (Cout,)
        stride: Step between windows
        pad: Zero padding added on every spatial border

    Returns:
        Tensor of shape (H', W', Cout) with H' = (H + 2*pad - k) // stride + 1
    """
    if input.ndim != 3:
        raise ShapeError(f"conv2d expects an (H, W, C) input, got shape {input.shape}")
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise ShapeError(f"conv2d expects (k, k, Cin, Cout) weights, got shape {weights.shape}")
    k, _, cin, cout = weights.shape
    if input.shape[2] != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {input.shape} vs weights shape {weights.shape}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match weights shape {weights.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")

    h, w = input.shape[:2]
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(
            f"conv2d window larger than input: input shape {input.shape}, weights shape {weights.shape}, pad {pad}"
        )

    padded = np.pad(input, ((pad, pad), (pad, pad), (0, 0))) if pad else input
    # (H', W', Cin, k, k) view; no copy until a row block is materialized
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    out_h, out_w = windows.shape[:2]
    kernel = weights.transpose(2, 0, 1, 3).astype(np.float64)
    bias64 = bias.astype(np.float64)

    out = np.empty((out_h, out_w, cout), dtype=np.result_type(input, weights))
    rows = max(1, _BLOCK_ELEMENTS // (out_w * cin * k * k))
    for start in range(0, out_h, rows):
        block = windows[start:start + rows].astype(np.float64)
        out[start:start + rows] = np.tensordot(block, kernel, axes=3) + bias64
    return out


def fully_connected(inputs: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """
    Apply a convolution whose support covers the whole input (a dense layer).

    inputs has a leading batch axis: (N, k, k, Cin) -> (N, 1, 1, Cout).
    """
    k, _, cin, cout = weights.shape
    if inputs.shape[1:] != (k, k, cin):
        raise ShapeError(
            f"fully connected layer expects inputs (N, {k}, {k}, {cin}), got shape {inputs.shape}"
        )
    flat = inputs.reshape(inputs.shape[0], -1)
    out = flat @ weights.reshape(-1, cout) + bias
    return out.reshape(inputs.shape[0], 1, 1, cout)


def relu(input: Tensor) -> Tensor:
    return np.maximum(input, 0).astype(input.dtype, copy=False)


def maxpool2d(input: Tensor, support: int, stride: int) -> Tensor:
    """Per-channel window maximum over an (H, W, C) tensor."""
    if input.ndim != 3:
        raise ShapeError(f"maxpool2d expects an (H, W, C) input, got shape {input.shape}")
    if support < 1 or stride < 1:
        raise ValueError(f"maxpool2d needs support >= 1 and stride >= 1, got {support}/{stride}")
    h, w = input.shape[:2]
    if support > h or support > w:
        raise ShapeError(f"maxpool2d window {support} larger than input shape {input.shape}")
    windows = sliding_window_view(input, (support, support), axis=(0, 1))[::stride, ::stride]
    return windows.max(axis=(3, 4))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; rejects non-finite logits."""
    x = np.asarray(logits)
    if x.size == 0:
        raise ShapeError("softmax needs at least one logit")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite logits")
    z = x.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p.astype(np.float64 if x.dtype == np.float64 else np.float32)


def _check_rate(rate: float):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Inverted-dropout mask: 0 for dropped units, 1/(1-rate) for survivors."""
    _check_rate(rate)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate))


def dropout(
    input: Tensor,
    rate: float,
    mode: str = EVAL,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    Inverted dropout. Eval mode (and rate 0) returns the input untouched.

    Args:
        input: Any tensor
        rate: Fraction of units zeroed in train mode
        mode: "train" or "eval"
        rng: Seeded generator, required in train mode

    Returns:
        Tensor of the same shape
    """
    _check_rate(rate)
    check_mode(mode)
    if mode == EVAL or rate == 0.0:
        return input
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded numpy Generator")
    return input * dropout_mask(input.shape, rate, rng, input.dtype.type)
