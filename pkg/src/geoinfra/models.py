"""Residual classifiers: construction, channel extension, checkpoints.

Two variants are supported.

``resnet18`` is the published 18-layer residual layout:

    stem    conv 7x7/64 stride 2 pad 3, bn, relu, maxpool 3x3 stride 2 pad 1
    layer1  2 basic blocks, 64 channels
    layer2  2 basic blocks, 128 channels, stride-2 entry with 1x1 downsample
    layer3  2 basic blocks, 256 channels, stride-2 entry with 1x1 downsample
    layer4  2 basic blocks, 512 channels, stride-2 entry with 1x1 downsample
    head    global average pool, linear 512 -> k

``micro`` is the desk-scale analogue that exercises every op kind while
training in seconds (about 43k parameters at 3 input channels):

    stem    conv 3x3/16 stride 1 pad 1, bn, relu
    layer1  2 basic blocks, 16 channels
    layer2  2 basic blocks, 32 channels, stride-2 entry with 1x1 downsample
    head    global average pool, linear 32 -> k

A basic block is conv3x3-bn-relu-conv3x3-bn plus the identity (or 1x1
downsample) shortcut, followed by relu. Convolutions carry no bias (the
following batch norm owns the shift). Weights are Glorot-uniform with
bound sqrt(6 / (fan_in + fan_out)), fan_in = C*kh*kw and fan_out = F*kh*kw
for a (F,C,kh,kw) filter; biases start at zero, bn at gamma=1/beta=0.

Checkpoint wire format (little-endian), magic "GICK", version 1:

    "GICK" | u32 version | u32 entry_count
    per entry: u16 path_len | path utf8 | u8 dtype (0=f32) | u8 ndim
               | ndim * u32 dims | raw f32 payload
    u32 metadata_count
    per item:  u16 key_len | key utf8 | u16 value_len | value utf8
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from geoinfra.autodiff import (
    Tensor,
    add,
    batch_norm2d,
    conv2d,
    global_avg_pool2d,
    linear,
    max_pool2d,
    relu,
)
from geoinfra.errors import DataError
from geoinfra.rng import RngState

CHECKPOINT_MAGIC = b"GICK"
CHECKPOINT_VERSION = 1
FIRST_CONV_PATH = "conv1.weight"


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    """Wrong magic or unsupported version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before the declared payload does."""


class CheckpointShapeError(CheckpointError):
    """Entry set does not match the declared variant."""


@dataclass(frozen=True)
class NetworkConfig:
    variant: str
    input_channels: int
    num_outputs: int
    input_size: int = 224

    def __post_init__(self):
        if self.variant not in _LAYOUTS:
            raise ValueError(
                f"unsupported variant {self.variant!r}; known: {sorted(_LAYOUTS)}")
        if self.input_channels < 1 or self.num_outputs < 1:
            raise ValueError("input_channels and num_outputs must be positive")


@dataclass(frozen=True)
class _Layout:
    stem_filters: int
    stem_kernel: int
    stem_stride: int
    stem_padding: int
    stem_pool: bool  # 3x3/2 max pool after the stem
    stages: tuple  # (channels, blocks, entry stride) per stage


_LAYOUTS = {
    "resnet18": _Layout(64, 7, 2, 3, True, ((64, 2, 1), (128, 2, 2), (256, 2, 2), (512, 2, 2))),
    "micro": _Layout(16, 3, 1, 1, False, ((16, 2, 1), (32, 2, 2))),
}


@dataclass(frozen=True)
class XavierSpec:
    """Glorot-uniform sampling spec for one filter or linear map.

    For a (F, C, kh, kw) convolution filter, n_in = C*kh*kw and
    n_out = F*kh*kw; for a (d_out, d_in) linear map, n_in = d_in and
    n_out = d_out. Samples are uniform in [-bound, +bound].
    """

    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError(f"fan sizes must be positive: {self.n_in}, {self.n_out}")

    @property
    def bound(self) -> float:
        return float(np.sqrt(6.0 / (self.n_in + self.n_out)))

    def sample(self, rng: RngState, shape: tuple, dtype=np.float32) -> np.ndarray:
        b = self.bound
        return rng.uniform(-b, b, size=shape).astype(dtype)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return XavierSpec(fan_in, fan_out).bound


def _conv_init(rng: RngState, shape: tuple, dtype) -> np.ndarray:
    f, c, kh, kw = shape
    return XavierSpec(c * kh * kw, f * kh * kw).sample(rng, shape, dtype)


def _entry_specs(variant: str, input_channels: int, num_outputs: int):
    """Canonical (path, kind, shape) sequence for the variant.

    'kind' is one of conv / gamma / beta / running_mean / running_var /
    linear_w / linear_b. Running stats are buffers, everything else is a
    trainable parameter. Saving, loading, validation and initialization all
    derive from this one table.
    """
    layout = _LAYOUTS[variant]

    def bn(prefix, ch):
        yield f"{prefix}.gamma", "gamma", (ch,)
        yield f"{prefix}.beta", "beta", (ch,)
        yield f"{prefix}.running_mean", "running_mean", (ch,)
        yield f"{prefix}.running_var", "running_var", (ch,)

    yield "conv1.weight", "conv", (layout.stem_filters, input_channels,
                                   layout.stem_kernel, layout.stem_kernel)
    yield from bn("bn1", layout.stem_filters)
    in_ch = layout.stem_filters
    for s, (ch, blocks, _stride) in enumerate(layout.stages, start=1):
        for b in range(blocks):
            name = f"layer{s}.{b}"
            yield f"{name}.conv1.weight", "conv", (ch, in_ch, 3, 3)
            yield from bn(f"{name}.bn1", ch)
            yield f"{name}.conv2.weight", "conv", (ch, ch, 3, 3)
            yield from bn(f"{name}.bn2", ch)
            if in_ch != ch or (b == 0 and _stride != 1):
                yield f"{name}.downsample.conv.weight", "conv", (ch, in_ch, 1, 1)
                yield from bn(f"{name}.downsample.bn", ch)
            in_ch = ch
    yield "fc.weight", "linear_w", (num_outputs, in_ch)
    yield "fc.bias", "linear_b", (num_outputs,)


_BUFFER_KINDS = {"running_mean", "running_var"}


class ResidualClassifier:
    """Parameter map plus a forward function; single writer while training."""

    def __init__(self, config: NetworkConfig, params: dict, buffers: dict,
                 creation_seed: Optional[int] = None):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.creation_seed = creation_seed

    @property
    def feature_dim(self) -> int:
        return _LAYOUTS[self.config.variant].stages[-1][0]

    def parameters(self) -> dict:
        return self.params

    def trainable_parameters(self) -> dict:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _bn(self, x, prefix, training):
        return batch_norm2d(
            x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            training=training)

    def _block(self, x, name, stride, has_down, training):
        out = conv2d(x, self.params[f"{name}.conv1.weight"], stride=stride, padding=1)
        out = relu(self._bn(out, f"{name}.bn1", training))
        out = conv2d(out, self.params[f"{name}.conv2.weight"], stride=1, padding=1)
        out = self._bn(out, f"{name}.bn2", training)
        if has_down:
            shortcut = conv2d(x, self.params[f"{name}.downsample.conv.weight"],
                              stride=stride, padding=0)
            shortcut = self._bn(shortcut, f"{name}.downsample.bn", training)
        else:
            shortcut = x
        return relu(add(out, shortcut))

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        """Final pre-head activations: global average pool output."""
        layout = _LAYOUTS[self.config.variant]
        h = conv2d(x, self.params["conv1.weight"],
                   stride=layout.stem_stride, padding=layout.stem_padding)
        h = relu(self._bn(h, "bn1", training))
        if layout.stem_pool:
            h = max_pool2d(h, 3, stride=2, padding=1)
        in_ch = layout.stem_filters
        for s, (ch, blocks, stride) in enumerate(layout.stages, start=1):
            for b in range(blocks):
                block_stride = stride if b == 0 else 1
                has_down = in_ch != ch or block_stride != 1
                h = self._block(h, f"layer{s}.{b}", block_stride, has_down, training)
                in_ch = ch
        return global_avg_pool2d(h)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        feats = self.features(x, training)
        return linear(feats, self.params["fc.weight"], self.params["fc.bias"])


def build_network(config: NetworkConfig, rng: RngState,
                  dtype=np.float32) -> ResidualClassifier:
    """Fresh network: Glorot conv/linear weights, zero biases, unit bn."""
    seed_before = rng.seed_state
    params: dict = {}
    buffers: dict = {}
    for path, kind, shape in _entry_specs(config.variant, config.input_channels,
                                          config.num_outputs):
        if kind == "conv":
            params[path] = Tensor(_conv_init(rng, shape, dtype), requires_grad=True)
        elif kind == "gamma":
            params[path] = Tensor(np.ones(shape, dtype), requires_grad=True)
        elif kind == "beta":
            params[path] = Tensor(np.zeros(shape, dtype), requires_grad=True)
        elif kind == "running_mean":
            buffers[path] = np.zeros(shape, dtype)
        elif kind == "running_var":
            buffers[path] = np.ones(shape, dtype)
        elif kind == "linear_w":
            out_dim, in_dim = shape
            bound = xavier_bound(in_dim, out_dim)
            params[path] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                                  requires_grad=True)
        elif kind == "linear_b":
            params[path] = Tensor(np.zeros(shape, dtype), requires_grad=True)
    return ResidualClassifier(config, params, buffers, creation_seed=seed_before)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Ordered path -> float32 array map plus string metadata."""

    entries: dict
    metadata: dict

    def config(self) -> NetworkConfig:
        try:
            return NetworkConfig(
                variant=self.metadata["variant"],
                input_channels=int(self.metadata["input_channels"]),
                num_outputs=int(self.metadata["num_outputs"]),
                input_size=int(self.metadata.get("input_size", 224)),
            )
        except KeyError as e:
            raise CheckpointError(f"checkpoint metadata missing {e}") from None


def checkpoint_from_model(model: ResidualClassifier, extra_metadata=None) -> Checkpoint:
    entries = {path: p.data.astype(np.float32, copy=True)
               for path, p in model.params.items()}
    entries.update({path: b.astype(np.float32, copy=True)
                    for path, b in model.buffers.items()})
    metadata = {
        "variant": model.config.variant,
        "input_channels": str(model.config.input_channels),
        "num_outputs": str(model.config.num_outputs),
        "input_size": str(model.config.input_size),
        "creation_seed": str(model.creation_seed),
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    return Checkpoint(entries, metadata)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> ResidualClassifier:
    config = ckpt.config()
    validate_checkpoint(ckpt)
    params: dict = {}
    buffers: dict = {}
    for path, kind, _shape in _entry_specs(config.variant, config.input_channels,
                                           config.num_outputs):
        arr = ckpt.entries[path].astype(dtype)
        if kind in _BUFFER_KINDS:
            buffers[path] = arr.copy()
        else:
            params[path] = Tensor(arr, requires_grad=True)
    return ResidualClassifier(config, params, buffers)


def validate_checkpoint(ckpt: Checkpoint) -> None:
    """Check every path the declared variant requires exists and has its shape."""
    config = ckpt.config()
    for path, _kind, shape in _entry_specs(config.variant, config.input_channels,
                                           config.num_outputs):
        if path not in ckpt.entries:
            raise CheckpointShapeError(
                f"checkpoint of variant {config.variant!r} is missing entry {path!r}")
        got = ckpt.entries[path].shape
        if tuple(got) != tuple(shape):
            raise CheckpointShapeError(
                f"entry {path!r} has shape {tuple(got)}, expected {tuple(shape)} "
                f"for variant {config.variant!r}")


def save_checkpoint(obj, path) -> None:
    """Write a Checkpoint (or a model, converted first) to the GICK format."""
    ckpt = obj if isinstance(obj, Checkpoint) else checkpoint_from_model(obj)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(ckpt.entries)))
        for name, arr in ckpt.entries.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", 0, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(ckpt.metadata)))
        for key, value in ckpt.metadata.items():
            for text in (key, value):
                encoded = str(text).encode("utf-8")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(
            f"truncated checkpoint: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        entries: dict = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
            name = _read_exact(fh, name_len, "entry name").decode("utf-8")
            dtype_code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "entry header"))
            if dtype_code != 0:
                raise CheckpointFormatError(f"unknown dtype code {dtype_code} in {name!r}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "entry dims"))
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
            payload = _read_exact(fh, n_bytes, f"payload of {name!r}")
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        (meta_count,) = struct.unpack("<I", _read_exact(fh, 4, "metadata count"))
        metadata: dict = {}
        for _ in range(meta_count):
            (klen,) = struct.unpack("<H", _read_exact(fh, 2, "metadata key length"))
            key = _read_exact(fh, klen, "metadata key").decode("utf-8")
            (vlen,) = struct.unpack("<H", _read_exact(fh, 2, "metadata value length"))
            metadata[key] = _read_exact(fh, vlen, "metadata value").decode("utf-8")
    ckpt = Checkpoint(entries, metadata)
    if "variant" in metadata:
        validate_checkpoint(ckpt)
    return ckpt


# ---------------------------------------------------------------------------
# transfer: channel extension and backbone freezing


def extend_input_channels(ckpt: Checkpoint, target_channels: int,
                          rgb_slots=(0, 1, 2), rng: Optional[RngState] = None) -> Checkpoint:
    """Widen the first convolution from 3 bands to target_channels.

    The three pretrained channel slices land in rgb_slots; every other slot
    is freshly Glorot-initialized with fan-in taken from the *extended*
    filter. Output channel count, stride and padding are untouched, as is
    every other entry (bit for bit, running stats included).
    """
    if FIRST_CONV_PATH not in ckpt.entries:
        raise CheckpointError(f"checkpoint has no {FIRST_CONV_PATH!r} entry")
    w_old = ckpt.entries[FIRST_CONV_PATH]
    f, c_old, kh, kw = w_old.shape
    if c_old != 3:
        raise ValueError(f"first convolution must have 3 input channels, found {c_old}")
    if target_channels < 3:
        raise ValueError(f"target_channels must be >= 3, got {target_channels}")
    slots = tuple(int(s) for s in rgb_slots)
    if len(slots) != 3 or len(set(slots)) != 3:
        raise ValueError(f"rgb_slots must be 3 distinct indices, got {rgb_slots}")
    if any(s < 0 or s >= target_channels for s in slots):
        raise ValueError(f"rgb_slots {slots} out of range for {target_channels} channels")

    if rng is None:
        rng = RngState(0)
    # fan-in comes from the *extended* filter, not the pretrained one
    spec = XavierSpec(target_channels * kh * kw, f * kh * kw)
    w_new = spec.sample(rng, (f, target_channels, kh, kw), w_old.dtype)
    for src, dst in enumerate(slots):
        w_new[:, dst] = w_old[:, src]

    entries = {}
    for name, arr in ckpt.entries.items():
        entries[name] = w_new if name == FIRST_CONV_PATH else arr.copy()
    metadata = dict(ckpt.metadata)
    metadata["input_channels"] = str(target_channels)
    metadata["rgb_slots"] = ",".join(str(s) for s in slots)
    return Checkpoint(entries, metadata)


class FrozenBackboneModel:
    """Feature extractor with a fresh logistic head; only the head trains.

    Features come from the backbone in eval mode (running statistics), so
    the extractor is a pure function of its input. The head starts at zero:
    fitting it is a convex problem, so no random restart is needed.
    """

    def __init__(self, backbone: ResidualClassifier, num_outputs: Optional[int] = None):
        k = backbone.config.num_outputs if num_outputs is None else num_outputs
        d = backbone.feature_dim
        self.backbone = backbone
        self.head_weight = Tensor(np.zeros((k, d), dtype=np.float32), requires_grad=True)
        self.head_bias = Tensor(np.zeros(k, dtype=np.float32), requires_grad=True)

    def features(self, x: Tensor) -> Tensor:
        return self.backbone.features(x, training=False)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        # training flag only gates head autodiff recording; backbone stays eval
        return linear(self.features(x), self.head_weight, self.head_bias)

    def trainable_parameters(self) -> dict:
        return {"head.weight": self.head_weight, "head.bias": self.head_bias}


def freeze_backbone(model: ResidualClassifier,
                    num_outputs: Optional[int] = None) -> FrozenBackboneModel:
    return FrozenBackboneModel(model, num_outputs)
