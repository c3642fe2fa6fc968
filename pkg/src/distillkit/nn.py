"""Model architectures, convolution/pooling ops and checkpoint files.

Two architectures are supported:

- ``mlp``: ``Linear -> ReLU -> ... -> Linear`` over flat features.
- ``plain_cnn``: three ``Conv(3x3) -> ReLU -> MaxPool(2x2)`` stages followed by
  ``FC -> ReLU -> FC``; a batchnorm-free desk-scale analogue of the plain CNN
  used in the exploratory experiments.

Checkpoints use a small little-endian binary layout::

    magic "DSTLKIT\\0" | version u32 | header_len u32 | header (UTF-8 JSON)
    | tensor_count u32 | per tensor: name_len u32, name, rank u32,
      extents u64[rank], float32 payload

The JSON header carries the model descriptor, epoch, seed and run metadata.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

import msgspec
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from distillkit.errors import CheckpointError, ShapeError
from distillkit.tensor import (
    ArrayLike,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    matmul,
    relu,
    reshape,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DSTLKIT\x00"
CHECKPOINT_VERSION = 1
KERNEL_SIZE = 3
POOL_STAGES = 3


class ModelDescriptor(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    """Architecture description that fully determines the parameter shapes.

    ``widths`` lists every MLP layer width including input and output, e.g.
    ``(32, 256, 10)``. For ``plain_cnn``, ``channels`` holds the three conv
    widths and ``fc`` the hidden fully-connected widths.
    """

    arch: Literal["mlp", "plain_cnn"]
    input_shape: tuple[int, ...]
    num_classes: int
    widths: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    fc: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {self.num_classes}")
        sizes = (*self.input_shape, *self.widths, *self.channels, *self.fc)
        if not self.input_shape or any(n <= 0 for n in sizes):
            raise ShapeError("descriptor extents and widths must be positive")
        if self.arch == "mlp":
            if len(self.widths) < 2:
                raise ShapeError("an MLP needs at least input and output widths")
            if self.widths[0] != math.prod(self.input_shape):
                raise ShapeError(f"first width {self.widths[0]} != input size {self.input_shape}")
            if self.widths[-1] != self.num_classes:
                raise ShapeError(f"last width {self.widths[-1]} != num_classes {self.num_classes}")
        else:
            if len(self.channels) != POOL_STAGES:
                raise ShapeError(f"plain_cnn needs {POOL_STAGES} conv widths")
            if len(self.input_shape) != 3:
                raise ShapeError("plain_cnn input_shape must be (C, H, W)")
            _, h, w = self.input_shape
            if h < 2**POOL_STAGES or w < 2**POOL_STAGES:
                raise ShapeError(f"plain_cnn needs spatial dims >= {2**POOL_STAGES}")

    @property
    def flat_features(self) -> int:
        """Width of the flattened conv output feeding the first FC layer."""
        _, h, w = self.input_shape
        scale = 2**POOL_STAGES
        return self.channels[-1] * (h // scale) * (w // scale)

    def parameter_shapes(self) -> list[tuple[str, tuple[int, ...], int]]:
        """Return ``(name, shape, fan_in)`` for every parameter, in creation order."""
        shapes: list[tuple[str, tuple[int, ...], int]] = []
        if self.arch == "mlp":
            dims = self.widths
        else:
            in_c = self.input_shape[0]
            for i, out_c in enumerate(self.channels):
                fan_in = in_c * KERNEL_SIZE * KERNEL_SIZE
                shapes.append((f"conv{i}.weight", (out_c, in_c, KERNEL_SIZE, KERNEL_SIZE), fan_in))
                shapes.append((f"conv{i}.bias", (out_c,), fan_in))
                in_c = out_c
            dims = (self.flat_features, *self.fc, self.num_classes)
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            shapes.append((f"fc{i}.weight", (fan_in, fan_out), fan_in))
            shapes.append((f"fc{i}.bias", (fan_out,), fan_in))
        return shapes


##############################  Ops  ##########################################


def conv2d(x: ArrayLike, weight: ArrayLike, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation of ``(N, C, H, W)`` input with ``(O, C, kh, kw)`` kernels."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    n, c, h, w = x.shape
    _, _, kh, kw = weight.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    kernel = weight.data
    out = np.einsum("nchwkl,ockl->nohw", windows, kernel, optimize=True)

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_w = np.einsum("nchwkl,nohw->ockl", windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        out_h, out_w = g.shape[2:]
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + out_h, j : j + out_w] += np.einsum(
                    "nohw,oc->nchw", g, kernel[:, :, i, j], optimize=True
                )
        return grad_padded[:, :, padding : padding + h, padding : padding + w], grad_w

    return Tensor.from_op(out, "conv2d", (x, weight), vjp)


def max_pool2x2(x: ArrayLike) -> Tensor:
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool2x2 expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"max_pool2x2: spatial dims of {x.shape} are below 2")
    blocks = (
        x.data[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]
    in_shape = x.shape

    def vjp(g: np.ndarray) -> tuple[np.ndarray]:
        grad_blocks = np.zeros_like(blocks)
        np.put_along_axis(grad_blocks, idx, g[..., None], axis=-1)
        grad = np.zeros(in_shape)
        grad[:, :, : 2 * h2, : 2 * w2] = (
            grad_blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (grad,)

    return Tensor.from_op(out, "max_pool2x2", (x,), vjp)


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` over a batch of row vectors."""
    out = matmul(x, weight)
    return add(out, broadcast_to(bias, out.shape))


def _channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    return add(x, broadcast_to(reshape(bias, (1, bias.shape[0], 1, 1)), x.shape))


##############################  Model  ########################################


class Model:
    """An ordered parameter collection bound to its descriptor."""

    def __init__(self, descriptor: ModelDescriptor, params: dict[str, Tensor]):
        expected = [(name, shape) for name, shape, _ in descriptor.parameter_shapes()]
        got = [(name, p.shape) for name, p in params.items()]
        if expected != got:
            raise ShapeError(f"parameters {got} do not match descriptor {expected}")
        self.descriptor = descriptor
        self.params = params
        self.checkpoint: Optional[Checkpoint] = None

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "Model":
        """Stop gradients from reaching this model's parameters."""
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def forward(self, batch: ArrayLike) -> Tensor:
        """Compute logits ``(N, K)`` for a batch shaped ``(N, *input_shape)``."""
        x = as_tensor(batch)
        if x.shape[1:] != self.descriptor.input_shape:
            raise ShapeError(
                f"batch of shape {x.shape} does not match input shape {self.descriptor.input_shape}"
            )
        p = self.params
        if self.descriptor.arch == "plain_cnn":
            for i in range(len(self.descriptor.channels)):
                x = _channel_bias(conv2d(x, p[f"conv{i}.weight"]), p[f"conv{i}.bias"])
                x = max_pool2x2(relu(x))
            x = flatten(x)
        n_fc = sum(1 for name in p if name.startswith("fc") and name.endswith(".weight"))
        for i in range(n_fc):
            x = linear(x, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < n_fc - 1:
                x = relu(x)
        return x

    __call__ = forward


def build(descriptor: ModelDescriptor, seed: int) -> Model:
    """Initialise a model: weights ~ Normal(0, sqrt(2 / fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, fan_in in descriptor.parameter_shapes():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            values = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(values, requires_grad=True)
    return Model(descriptor, params)


############################  Checkpoints  ####################################


class CheckpointHeader(msgspec.Struct, frozen=True, forbid_unknown_fields=True):
    """JSON header of a checkpoint file."""

    descriptor: ModelDescriptor
    epoch: int
    seed: int
    metadata: dict[str, Any] = {}


@dataclass
class Checkpoint:
    """Serializable model parameters (float32) plus run metadata."""

    descriptor: ModelDescriptor
    epoch: int
    seed: int
    params: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls, model: Model, *, epoch: int, seed: int, metadata: Optional[dict[str, Any]] = None
    ) -> "Checkpoint":
        return cls(
            descriptor=model.descriptor,
            epoch=epoch,
            seed=seed,
            params={name: p.data.astype("<f4") for name, p in model.params.items()},
            metadata=dict(metadata or {}),
        )

    def to_model(self, requires_grad: bool = False) -> Model:
        """Materialise a float64 model from the stored float32 parameters."""
        params = {
            name: Tensor(values.astype(np.float64), requires_grad=requires_grad)
            for name, values in self.params.items()
        }
        model = Model(self.descriptor, params)
        model.checkpoint = self
        return model

    def to_bytes(self) -> bytes:
        header = msgspec.json.encode(
            CheckpointHeader(
                descriptor=self.descriptor, epoch=self.epoch, seed=self.seed, metadata=self.metadata
            )
        )
        chunks = [
            CHECKPOINT_MAGIC,
            struct.pack("<II", CHECKPOINT_VERSION, len(header)),
            header,
            struct.pack("<I", len(self.params)),
        ]
        for name, values in self.params.items():
            raw_name = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
            chunks.append(struct.pack(f"<I{values.ndim}Q", values.ndim, *values.shape))
            chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Checkpoint":
        reader = _Reader(payload)
        if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError("not a distillkit checkpoint (bad magic)")
        (version,) = reader.unpack("<I")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )
        (header_len,) = reader.unpack("<I")
        try:
            header = msgspec.json.decode(reader.take(header_len), type=CheckpointHeader)
        except msgspec.DecodeError as exc:
            raise CheckpointError(f"invalid checkpoint header: {exc}") from exc
        (count,) = reader.unpack("<I")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<I")
            name = reader.take(name_len).decode("utf-8")
            (rank,) = reader.unpack("<I")
            shape = reader.unpack(f"<{rank}Q")
            n_bytes = 4 * math.prod(shape)
            params[name] = np.frombuffer(reader.take(n_bytes), dtype="<f4").reshape(shape).copy()
        if not reader.exhausted:
            raise CheckpointError("trailing bytes after the last tensor")
        ckpt = cls(
            descriptor=header.descriptor,
            epoch=header.epoch,
            seed=header.seed,
            params=params,
            metadata=dict(header.metadata),
        )
        ckpt.check_shapes(header.descriptor)
        return ckpt

    def check_shapes(self, descriptor: ModelDescriptor) -> None:
        """Raise :class:`CheckpointError` unless names and shapes match ``descriptor``."""
        expected = [(name, shape) for name, shape, _ in descriptor.parameter_shapes()]
        got = [(name, tuple(v.shape)) for name, v in self.params.items()]
        if expected != got:
            raise CheckpointError(f"checkpoint tensors {got} do not match descriptor {expected}")


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.payload)

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.offset}, "
                f"file has {len(self.payload)}"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(
    model_or_checkpoint: Union[Model, Checkpoint],
    path: Union[str, Path],
    *,
    epoch: int = 0,
    seed: int = 0,
    metadata: Optional[dict[str, Any]] = None,
) -> Path:
    """Write a model (or an in-memory checkpoint) to ``path``."""
    if isinstance(model_or_checkpoint, Checkpoint):
        ckpt = model_or_checkpoint
    else:
        ckpt = Checkpoint.from_model(model_or_checkpoint, epoch=epoch, seed=seed, metadata=metadata)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    logger.info("wrote checkpoint %s (epoch %d, seed %d)", path, ckpt.epoch, ckpt.seed)
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Parse a checkpoint file without building a model."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())


def load_checkpoint(
    path: Union[str, Path], descriptor: Optional[ModelDescriptor] = None
) -> Model:
    """Load a frozen model from ``path``, optionally checking it against ``descriptor``."""
    ckpt = read_checkpoint(path)
    if descriptor is not None:
        ckpt.check_shapes(descriptor)
    return ckpt.to_model(requires_grad=False)
