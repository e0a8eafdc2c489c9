"""Fixed small CNN for 1x28x28 binary classification, plus weight-file I/O.

Architecture (shapes asserted at init and on every forward):

    input [1,28,28]
      -> conv 6 @ 5x5, ReLU      [6,24,24]
      -> maxpool 2x2             [6,12,12]
      -> conv 16 @ 5x5, ReLU     [16,8,8]
      -> maxpool 2x2             [16,4,4]
      -> flatten                 [256]
      -> dense 120, ReLU
      -> dense 2, softmax

Weights live in a plain dict keyed by tensor name ("conv1.kernels", ...).
Training code treats weight dicts as immutable values: every update
returns a new dict, which is what makes client-parallel training and the
averaging step reproducible.

The weight file is a little-endian binary format used to carry stage-one
weights into stage two:

    magic "FSTW" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | ASCII name | u8 rank | u32 extents...
                | float32 values, row-major

Readers validate magic, version, tensor names, shapes, and total length.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .layers import (
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax,
    softmax_cross_entropy,
)

ModelWeights = dict[str, np.ndarray]

INPUT_SHAPE = (1, 28, 28)
NUM_CLASSES = 2
FLAT_FEATURES = 16 * 4 * 4

# Canonical parameter list: names, shapes, and file order.
WEIGHT_SHAPES: tuple[tuple[str, tuple[int, ...]], ...] = (
    ("conv1.kernels", (6, 1, 5, 5)),
    ("conv1.bias", (6,)),
    ("conv2.kernels", (16, 6, 5, 5)),
    ("conv2.bias", (16,)),
    ("fc1.weight", (120, FLAT_FEATURES)),
    ("fc1.bias", (120,)),
    ("fc2.weight", (NUM_CLASSES, 120)),
    ("fc2.bias", (NUM_CLASSES,)),
)

_MAGIC = b"FSTW"
_VERSION = 1


class WeightFileError(Exception):
    """Base for weight-file parsing and validation failures."""


class BadMagicError(WeightFileError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(WeightFileError):
    """File ends before the declared content is complete."""


class ShapeMismatchError(WeightFileError):
    """Tensor names or shapes do not match the fixed architecture."""


@dataclass
class Batch:
    """A training batch: images [b,1,28,28] with labels in {0,1}.

    Pixel values must already be normalized to [0,1].
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels)
        if self.images.ndim != 4 or self.images.shape[1:] != INPUT_SHAPE:
            raise ValueError(
                f"batch images must have shape [b,1,28,28], got {self.images.shape}"
            )
        b = self.images.shape[0]
        if b < 1:
            raise ValueError("batch must contain at least one example")
        if self.labels.shape != (b,):
            raise ValueError(
                f"batch has {b} images but {self.labels.shape} labels"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("batch labels must be 0 or 1")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"batch pixel values must lie in [0,1], got [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# Initialization and validation
# ---------------------------------------------------------------------------

def _glorot_limit(shape: tuple[int, ...]) -> float:
    if len(shape) == 4:  # conv kernels [O,C,kH,kW]
        o, c, kh, kw = shape
        fan_in = c * kh * kw
        fan_out = o * kh * kw
    else:  # dense weight [n_out, n_in]
        fan_out, fan_in = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_weights(seed: int) -> ModelWeights:
    """Glorot-uniform weights, zero biases, fully determined by the seed.

    Kernel and weight entries are drawn from U(-L, L) with
    L = sqrt(6 / (fan_in + fan_out)); tensors are drawn in the canonical
    order so the same seed always gives the same model.
    """
    rng = np.random.default_rng(seed)
    weights: ModelWeights = {}
    for name, shape in WEIGHT_SHAPES:
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            limit = _glorot_limit(shape)
            weights[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return weights


def validate_weights(weights: ModelWeights) -> None:
    """Check the weight dict against the fixed architecture."""
    expected = dict(WEIGHT_SHAPES)
    if set(weights) != set(expected):
        missing = sorted(set(expected) - set(weights))
        extra = sorted(set(weights) - set(expected))
        raise ShapeMismatchError(f"weight keys do not match architecture: missing={missing} extra={extra}")
    for name, shape in WEIGHT_SHAPES:
        arr = weights[name]
        if tuple(arr.shape) != shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        if not np.isfinite(arr).all():
            raise WeightFileError(f"tensor {name!r} contains non-finite values")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _forward_single(weights: ModelWeights, image: np.ndarray):
    """Run one image through the net, keeping per-layer caches for backward."""
    z1 = conv2d_forward(image, weights["conv1.kernels"], weights["conv1.bias"])
    a1 = relu_forward(z1)
    p1, m1 = maxpool2x2_forward(a1)
    z2 = conv2d_forward(p1, weights["conv2.kernels"], weights["conv2.bias"])
    a2 = relu_forward(z2)
    p2, m2 = maxpool2x2_forward(a2)
    flat = p2.reshape(FLAT_FEATURES)
    h = dense_forward(flat, weights["fc1.weight"], weights["fc1.bias"])
    hr = relu_forward(h)
    logits = dense_forward(hr, weights["fc2.weight"], weights["fc2.bias"])
    cache = (image, z1, m1, p1, z2, m2, flat, h, hr)
    return logits, cache


def _backward_single(weights: ModelWeights, cache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    image, z1, m1, p1, z2, m2, flat, h, hr = cache
    g_fc2 = dense_backward(hr, weights["fc2.weight"], grad_logits)
    g_hr = relu_backward(h, g_fc2.input_grad)
    g_fc1 = dense_backward(flat, weights["fc1.weight"], g_hr)
    g_p2 = g_fc1.input_grad.reshape(16, 4, 4)
    g_a2 = maxpool2x2_backward(m2, g_p2)
    g_z2 = relu_backward(z2, g_a2)
    g_conv2 = conv2d_backward(p1, weights["conv2.kernels"], g_z2)
    g_a1 = maxpool2x2_backward(m1, g_conv2.input_grad)
    g_z1 = relu_backward(z1, g_a1)
    g_conv1 = conv2d_backward(image, weights["conv1.kernels"], g_z1)
    return {
        "conv1.kernels": g_conv1.params["kernels"],
        "conv1.bias": g_conv1.params["bias"],
        "conv2.kernels": g_conv2.params["kernels"],
        "conv2.bias": g_conv2.params["bias"],
        "fc1.weight": g_fc1.params["weight"],
        "fc1.bias": g_fc1.params["bias"],
        "fc2.weight": g_fc2.params["weight"],
        "fc2.bias": g_fc2.params["bias"],
    }


def forward(weights: ModelWeights, images: np.ndarray) -> np.ndarray:
    """Class probabilities for a stack of images [b,1,28,28] -> [b,2].

    Rows are processed independently, so the output for an image does not
    depend on its batch neighbours.
    """
    validate_weights(weights)
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != INPUT_SHAPE:
        raise ValueError(f"forward expects images [b,1,28,28], got {images.shape}")
    probs = np.empty((images.shape[0], NUM_CLASSES), dtype=images.dtype)
    for i in range(images.shape[0]):
        logits, _ = _forward_single(weights, images[i])
        probs[i] = softmax(logits)
    return probs


def batch_loss_and_grads(
    weights: ModelWeights, images: np.ndarray, labels: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy loss and mean parameter gradients over a batch.

    The loss is accumulated as a Python float (64-bit); gradients are
    accumulated in the weights' dtype and divided by the batch size.
    """
    b = images.shape[0]
    loss_sum = 0.0
    grad_sums: dict[str, np.ndarray] | None = None
    for i in range(b):
        logits, cache = _forward_single(weights, images[i])
        loss, grad_logits, _ = softmax_cross_entropy(logits, int(labels[i]))
        loss_sum += loss
        grads = _backward_single(weights, cache, grad_logits)
        if grad_sums is None:
            grad_sums = grads
        else:
            for name in grad_sums:
                grad_sums[name] += grads[name]
    assert grad_sums is not None
    mean_grads = {name: g / b for name, g in grad_sums.items()}
    return loss_sum / b, mean_grads


def train_batch(weights: ModelWeights, batch: Batch, lr: float) -> tuple[ModelWeights, float]:
    """One SGD step on the mean gradient of the batch.

    Returns (updated weights, mean pre-update loss).  The input weights
    are not modified.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    mean_loss, mean_grads = batch_loss_and_grads(weights, batch.images, batch.labels)
    return sgd_step(weights, mean_grads, lr), mean_loss


def train_epoch_with_loss(
    weights: ModelWeights,
    dataset,
    lr: float,
    batch_size: int,
    shuffle_seed: int,
) -> tuple[ModelWeights, list[float]]:
    """One full pass over the dataset; returns per-batch pre-update losses.

    The example order is a seeded permutation, cut into consecutive
    batches of batch_size with the final short batch kept.
    """
    n = len(dataset)
    if n < 1:
        raise ValueError("train_epoch: dataset is empty")
    if batch_size < 1:
        raise ValueError(f"train_epoch: batch size must be >= 1, got {batch_size}")
    perm = np.random.default_rng(shuffle_seed).permutation(n)
    losses: list[float] = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        batch = Batch(dataset.images[idx], dataset.labels[idx])
        weights, loss = train_batch(weights, batch, lr)
        losses.append(loss)
    return weights, losses


def train_epoch(
    weights: ModelWeights,
    dataset,
    lr: float,
    batch_size: int,
    shuffle_seed: int,
) -> ModelWeights:
    """One full seeded pass over the dataset; see train_epoch_with_loss."""
    new_weights, _ = train_epoch_with_loss(weights, dataset, lr, batch_size, shuffle_seed)
    return new_weights


# ---------------------------------------------------------------------------
# Weight file I/O
# ---------------------------------------------------------------------------

def serialize_weights(weights: ModelWeights) -> bytes:
    """Encode weights in the canonical tensor order."""
    validate_weights(weights)
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(WEIGHT_SHAPES))]
    for name, shape in WEIGHT_SHAPES:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("B", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(weights[name], dtype="<f4").tobytes())
    return b"".join(parts)


def weights_checksum(weights: ModelWeights) -> str:
    """sha256 hex digest of the serialized weights."""
    return hashlib.sha256(serialize_weights(weights)).hexdigest()


def save_weights(weights: ModelWeights, path) -> None:
    """Write the weight file; the payload matches serialize_weights exactly."""
    Path(path).write_bytes(serialize_weights(weights))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def deserialize_weights(data: bytes) -> ModelWeights:
    """Decode and validate a weight payload against the fixed architecture."""
    reader = _Reader(data)
    if reader.take(4) != _MAGIC:
        raise BadMagicError(f"bad magic: expected {_MAGIC!r}")
    version, count = struct.unpack("<II", reader.take(8))
    if version != _VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    if count != len(WEIGHT_SHAPES):
        raise ShapeMismatchError(
            f"file declares {count} tensors, architecture has {len(WEIGHT_SHAPES)}"
        )
    weights: ModelWeights = {}
    for expected_name, expected_shape in WEIGHT_SHAPES:
        (name_len,) = struct.unpack("<H", reader.take(2))
        name = reader.take(name_len).decode("ascii")
        (rank,) = struct.unpack("B", reader.take(1))
        shape = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        if name != expected_name:
            raise ShapeMismatchError(f"tensor {name!r} where {expected_name!r} was expected")
        if shape != expected_shape:
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {shape}, expected {expected_shape}"
            )
        n_values = int(np.prod(shape, dtype=np.int64))
        raw = reader.take(4 * n_values)
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if reader.pos != len(data):
        raise WeightFileError(f"{len(data) - reader.pos} trailing bytes after last tensor")
    validate_weights(weights)
    return weights


def load_weights(path) -> ModelWeights:
    """Read a weight file; raises FileNotFoundError if the path is missing."""
    return deserialize_weights(Path(path).read_bytes())
