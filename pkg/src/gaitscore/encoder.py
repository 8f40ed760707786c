"""Four-layer 1D CNN encoder, linear head and checkpoint format.

A segment of 32 frames x 51 features is transposed to channels x time, run
through four conv+ReLU layers and average-pooled over time into a
256-dimensional embedding. A linear head maps the embedding to two logits
(index 0 = invalid step, index 1 = valid step).

Parameters live in a plain ``dict`` whose insertion order is fixed::

    conv1.weight, conv1.bias, ..., conv4.weight, conv4.bias, head.weight, head.bias
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

IN_FEATURES = 51
WINDOW = 32
N_CLASSES = 2
CHANNELS = (64, 64, 128, 256)
KERNEL = 3
STRIDES = (1, 2, 2, 2)
PADDING = 1
EMBED_DIM = CHANNELS[-1]

ParamSet = dict  # name -> float32 ndarray, insertion order is the manifest order


def layer_names(n_layers: int = len(CHANNELS)) -> list[str]:
    return [f"conv{i + 1}" for i in range(n_layers)]


def make_manifest(channels=CHANNELS, in_features: int = IN_FEATURES) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape table for an encoder with the given channel plan."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = in_features
    for name, c_out in zip(layer_names(len(channels)), channels):
        shapes[f"{name}.weight"] = (c_out, c_in, KERNEL)
        shapes[f"{name}.bias"] = (c_out,)
        c_in = c_out
    shapes["head.weight"] = (N_CLASSES, c_in)
    shapes["head.bias"] = (N_CLASSES,)
    return shapes


def manifest(params: ParamSet) -> dict[str, tuple[int, ...]]:
    return {name: tuple(value.shape) for name, value in params.items()}


def channels_of(params: ParamSet) -> tuple[int, ...]:
    return tuple(params[f"{name}.weight"].shape[0] for name in _conv_layers(params))


def _conv_layers(params: ParamSet) -> list[str]:
    return [name[: -len(".weight")] for name in params if name.startswith("conv") and name.endswith(".weight")]


def init_params(seed: int, channels=CHANNELS, in_features: int = IN_FEATURES) -> ParamSet:
    """Glorot-uniform weights from a seeded generator, zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, shape in make_manifest(channels, in_features).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=T.DTYPE)
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
    return params


def clone_params(params: ParamSet) -> ParamSet:
    return {name: value.copy() for name, value in params.items()}


def zeros_like_params(params: ParamSet) -> ParamSet:
    return {name: np.zeros_like(value) for name, value in params.items()}


def check_same_manifest(a: ParamSet, b: ParamSet) -> None:
    ma, mb = manifest(a), manifest(b)
    if list(ma) != list(mb):
        raise ValueError(f"parameter names differ: {list(ma)} vs {list(mb)}")
    for name in ma:
        if ma[name] != mb[name]:
            raise ValueError(f"{name}: shape {ma[name]} does not match {mb[name]}")


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


@dataclass
class EncoderCache:
    """Activations saved by :func:`encode_batch` for :func:`encode_backward`."""

    inputs: list[np.ndarray] = field(default_factory=list)  # conv inputs per layer
    pre_act: list[np.ndarray] = field(default_factory=list)  # conv outputs before ReLU
    length: int = 0  # time length pooled in the last layer


def _check_segments(segments: np.ndarray, in_features: int) -> None:
    if segments.ndim != 3 or segments.shape[1:] != (WINDOW, in_features):
        raise T.ShapeError(
            f"segment: expected N x {WINDOW} x {in_features}, got shape {segments.shape}"
        )


def encode_batch(params: ParamSet, segments) -> tuple[np.ndarray, EncoderCache]:
    """Encode ``N x 32 x F`` segments into ``N x D`` embeddings."""
    x = np.asarray(segments)
    in_features = params["conv1.weight"].shape[1]
    _check_segments(x, in_features)
    h = np.ascontiguousarray(x.transpose(0, 2, 1))
    cache = EncoderCache()
    for name, stride in zip(_conv_layers(params), STRIDES):
        cache.inputs.append(h)
        pre = T.conv1d_forward(h, params[f"{name}.weight"], params[f"{name}.bias"], stride, PADDING)
        cache.pre_act.append(pre)
        h = T.relu_forward(pre)
    cache.length = h.shape[-1]
    return T.global_avg_pool_forward(h), cache


def encode_backward(params: ParamSet, cache: EncoderCache, grad_z) -> ParamSet:
    """Gradients of the encoder parameters given ``dL/dz`` for a batch."""
    grads: ParamSet = {}
    g = T.global_avg_pool_backward(np.asarray(grad_z), cache.length)
    layers = _conv_layers(params)
    for idx in range(len(layers) - 1, -1, -1):
        name = layers[idx]
        g = T.relu_backward(g, cache.pre_act[idx])
        gx, gw, gb = T.conv1d_backward(
            g, cache.inputs[idx], params[f"{name}.weight"], STRIDES[idx], PADDING
        )
        grads[f"{name}.weight"] = gw
        grads[f"{name}.bias"] = gb
        g = gx
    return {name: grads[name] for name in params if name in grads}


def encode(params: ParamSet, segment) -> np.ndarray:
    """Embedding of a single ``32 x 51`` segment."""
    segment = np.asarray(segment)
    in_features = params["conv1.weight"].shape[1]
    if segment.shape != (WINDOW, in_features):
        raise T.ShapeError(f"segment: expected {WINDOW} x {in_features}, got shape {segment.shape}")
    if not np.all(np.isfinite(segment)):
        raise ValueError("segment contains NaN or Inf")
    z, _ = encode_batch(params, segment[None])
    return z[0]


def classify_batch(params: ParamSet, z) -> np.ndarray:
    return T.linear_forward(np.asarray(z), params["head.weight"], params["head.bias"])


def classify(params: ParamSet, z) -> np.ndarray:
    """Two logits for one embedding; see :func:`predict` for the label."""
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("embedding contains NaN or Inf")
    return classify_batch(params, z[None])[0]


def predict(logits) -> np.ndarray:
    """Label 1 (valid) only when its logit is strictly larger; ties go to invalid."""
    logits = np.asarray(logits)
    return (logits[..., 1] > logits[..., 0]).astype(np.int64)


def classification_loss_and_grads(params: ParamSet, segments, labels, train_encoder: bool = True):
    """Mean cross-entropy of ``classify(encode(x))`` and gradients for all parameters."""
    z, cache = encode_batch(params, segments)
    logits = classify_batch(params, z)
    loss, g_logits = T.softmax_cross_entropy(logits, labels)
    g_z, g_hw, g_hb = T.linear_backward(g_logits, z, params["head.weight"])
    if train_encoder:
        grads = encode_backward(params, cache, g_z)
    else:
        grads = {name: np.zeros_like(value) for name, value in params.items() if not name.startswith("head.")}
    grads["head.weight"] = g_hw
    grads["head.bias"] = g_hb
    return loss, {name: grads[name] for name in params}


def momentum_update(theta_k: ParamSet, theta_q: ParamSet, m: float) -> ParamSet:
    """In place: ``theta_k <- m * theta_k + (1 - m) * theta_q``."""
    if not 0.0 <= m < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {m}")
    check_same_manifest(theta_k, theta_q)
    for name, value in theta_k.items():
        if m == 0.0:
            value[...] = theta_q[name]
        else:
            value *= value.dtype.type(m)
            value += value.dtype.type(1.0 - m) * theta_q[name]
    return theta_k


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

MAGIC = b"GSC1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI32sI")  # magic, version, seed, epoch, config hash, tensor count


class CheckpointError(ValueError):
    """A checkpoint file is malformed; the message names the offending field."""


@dataclass
class Checkpoint:
    params: ParamSet
    seed: int = 0
    epoch: int = 0
    config_hash: bytes = b"\0" * 32


def config_digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def tensor_record_size(name: str, shape: tuple[int, ...]) -> int:
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))


def checkpoint_size(shapes: dict[str, tuple[int, ...]]) -> int:
    """Exact byte length of a checkpoint holding tensors of these shapes."""
    return _HEADER.size + sum(tensor_record_size(n, s) for n, s in shapes.items())


def checkpoint_bytes(params: ParamSet, seed: int = 0, epoch: int = 0, config_hash: bytes = b"") -> bytes:
    config_hash = config_hash.ljust(32, b"\0")[:32]
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, seed, epoch, config_hash, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ParamSet, path, seed: int = 0, epoch: int = 0, config_hash: bytes = b"") -> None:
    Path(path).write_bytes(checkpoint_bytes(params, seed, epoch, config_hash))


def _take(buf: bytes, offset: int, size: int, what: str) -> tuple[bytes, int]:
    if offset + size > len(buf):
        raise CheckpointError(f"{what}: file truncated at byte {len(buf)} (need {offset + size})")
    return buf[offset : offset + size], offset + size


def parse_checkpoint(buf: bytes, expected: dict[str, tuple[int, ...]] | None = None) -> Checkpoint:
    raw, off = _take(buf, 0, _HEADER.size, "header")
    magic, version, seed, epoch, chash, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError(f"magic: expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version: unsupported format version {version}")
    params: ParamSet = {}
    for i in range(count):
        raw, off = _take(buf, off, 2, f"tensor[{i}].name_length")
        (nlen,) = struct.unpack("<H", raw)
        raw, off = _take(buf, off, nlen, f"tensor[{i}].name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor[{i}].name: not valid UTF-8") from exc
        raw, off = _take(buf, off, 1, f"{name}.ndim")
        ndim = raw[0]
        raw, off = _take(buf, off, 4 * ndim, f"{name}.dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        numel = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw, off = _take(buf, off, 4 * numel, f"{name}.data")
        if name in params:
            raise CheckpointError(f"{name}: duplicate tensor")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(T.DTYPE).reshape(dims)
    if off != len(buf):
        raise CheckpointError(f"trailing data: {len(buf) - off} unexpected bytes after tensor table")
    _validate_manifest(params, expected)
    return Checkpoint(params, seed, epoch, chash)


def _validate_manifest(params: ParamSet, expected) -> None:
    n_layers = sum(1 for n in params if n.startswith("conv") and n.endswith(".weight"))
    if n_layers != len(CHANNELS):
        raise CheckpointError(f"tensor table: expected {len(CHANNELS)} conv layers, found {n_layers}")
    channels = []
    for name in layer_names(n_layers):
        w = params.get(f"{name}.weight")
        if w is None:
            raise CheckpointError(f"{name}.weight: missing")
        channels.append(w.shape[0] if w.ndim == 3 else -1)
    want = dict(expected) if expected is not None else make_manifest(channels, IN_FEATURES)
    if list(params) != list(want):
        missing = [n for n in want if n not in params]
        extra = [n for n in params if n not in want]
        raise CheckpointError(f"tensor table: missing {missing}, unexpected {extra}, or out of order")
    for name, shape in want.items():
        if tuple(params[name].shape) != tuple(shape):
            raise CheckpointError(f"{name}: shape {tuple(params[name].shape)} does not match manifest {tuple(shape)}")
    if not all(np.all(np.isfinite(v)) for v in params.values()):
        raise CheckpointError("tensor data: contains NaN or Inf")


def read_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expected)


def load_checkpoint(path, expected: dict[str, tuple[int, ...]] | None = None) -> ParamSet:
    """Parameters from a ``GSC1`` file, validated against the encoder manifest."""
    return read_checkpoint(path, expected).params
