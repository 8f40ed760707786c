"""Dense numeric kernels with explicit forward/backward pairs.

Tensors are plain ``numpy.ndarray`` objects. Parameters and activations are
float32; every kernel preserves the dtype of its inputs, so the gradient-check
oracles can run the same code in float64.

Kernels accept an optional leading batch axis: ``conv1d_forward`` takes either
``C_in x L`` or ``N x C_in x L``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an argument has the wrong rank or dimension."""


class DegenerateEmbeddingError(ValueError):
    """Raised when a vector is too close to zero to normalize."""


def tensor(values, dtype=DTYPE) -> np.ndarray:
    """Build a contiguous array, rejecting non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _batched(x: np.ndarray, rank: int, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"{name}: expected rank {rank} or {rank + 1}, got shape {x.shape}")


def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if length + 2 * padding < kernel:
        raise ShapeError(
            f"length: padded input length {length + 2 * padding} is shorter than kernel {kernel}"
        )
    return (length + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kernel: int, stride: int, l_out: int) -> np.ndarray:
    # (N, C, Lp) -> (N, L_out, C*K)
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)
    win = win[:, :, : stride * (l_out - 1) + 1 : stride, :]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n, l_out, c * kernel)


def _check_conv_args(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None) -> None:
    if weight.ndim != 3:
        raise ShapeError(f"weight: expected C_out x C_in x K, got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"C_in: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias: expected shape ({weight.shape[0]},), got {bias.shape}")


def conv1d_forward(x, weight, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation: ``out[c, t] = bias[c] + sum_{i,k} w[c, i, k] * xpad[i, t*stride + k]``."""
    x, squeeze = _batched(np.asarray(x), 2, "input")
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    _check_conv_args(x, weight, bias)
    c_out, _, kernel = weight.shape
    l_out = conv1d_output_length(x.shape[2], kernel, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols = _im2col(xp, kernel, stride, l_out)
    out = cols @ weight.reshape(c_out, -1).T + bias
    out = out.transpose(0, 2, 1)
    return out[0] if squeeze else np.ascontiguousarray(out)


def conv1d_backward(grad_out, saved_input, weight, stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv1d_forward`."""
    x, squeeze = _batched(np.asarray(saved_input), 2, "savedInput")
    g, g_squeeze = _batched(np.asarray(grad_out), 2, "gradOut")
    weight = np.asarray(weight)
    _check_conv_args(x, weight, None)
    c_out, c_in, kernel = weight.shape
    l_out = conv1d_output_length(x.shape[2], kernel, stride, padding)
    if squeeze != g_squeeze or g.shape != (x.shape[0], c_out, l_out):
        raise ShapeError(
            f"gradOut: expected shape {(x.shape[0], c_out, l_out)}, got {g.shape}"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    cols = _im2col(xp, kernel, stride, l_out)
    gt = g.transpose(0, 2, 1)  # (N, L_out, C_out)
    grad_w = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * kernel)).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))
    gcols = (gt @ weight.reshape(c_out, -1)).reshape(x.shape[0], l_out, c_in, kernel)
    gxp = np.zeros_like(xp)
    span = stride * (l_out - 1) + 1
    for k in range(kernel):
        gxp[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
    gx = gxp[:, :, padding : padding + x.shape[2]] if padding else gxp
    gx = np.ascontiguousarray(gx)
    return (gx[0] if squeeze else gx), grad_w.astype(weight.dtype), grad_b.astype(weight.dtype)


def linear_forward(x, weight, bias) -> np.ndarray:
    """``x @ weight.T + bias`` for ``x`` of shape ``N x D_in``."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"D_in: input has {x.shape[1]} features but weight expects {weight.shape[1]}")
    if np.shape(bias) != (weight.shape[0],):
        raise ShapeError(f"bias: expected shape ({weight.shape[0]},), got {np.shape(bias)}")
    return x @ weight.T + bias


def linear_backward(grad_out, saved_input, weight):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    grad_out = np.asarray(grad_out)
    saved_input = np.asarray(saved_input)
    if grad_out.shape != (saved_input.shape[0], weight.shape[0]):
        raise ShapeError(
            f"gradOut: expected shape {(saved_input.shape[0], weight.shape[0])}, got {grad_out.shape}"
        )
    return grad_out @ weight, grad_out.T @ saved_input, grad_out.sum(axis=0)


def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out, saved_input) -> np.ndarray:
    # subgradient at exactly zero is 0
    return np.where(np.asarray(saved_input) > 0, grad_out, 0).astype(np.asarray(grad_out).dtype)


def global_avg_pool_forward(x) -> np.ndarray:
    """Mean over the last (time) axis: ``C x L -> C``."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"global_avg_pool: expected C x L, got shape {x.shape}")
    if x.shape[-1] == 0:
        raise ShapeError("L: cannot pool over an empty time axis")
    return x.mean(axis=-1)


def global_avg_pool_backward(grad_out, length: int) -> np.ndarray:
    if length < 1:
        raise ShapeError("L: cannot pool over an empty time axis")
    grad_out = np.asarray(grad_out)
    return np.repeat((grad_out / length)[..., None], length, axis=-1)


def softmax(logits, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over rows and its gradient ``(softmax - onehot) / N``."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits: expected N x C, got shape {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets: expected length {n}, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"targets must lie in [0, {c}), got range [{targets.min()}, {targets.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, targets]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, targets] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype)


def l2_normalize(v, axis: int = -1) -> np.ndarray:
    """Scale to unit L2 norm along ``axis``."""
    v = np.asarray(v)
    # rescale before squaring so tiny and huge norms do not under/overflow
    peak = np.max(np.abs(v), axis=axis, keepdims=True)
    if np.any(peak <= 0):
        raise DegenerateEmbeddingError("cannot normalize a zero vector")
    scaled = v / peak
    norm = peak * np.sqrt(np.sum(scaled * scaled, axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateEmbeddingError(f"cannot normalize a vector with norm <= {NORM_EPS}")
    return scaled / (norm / peak)


def l2_normalize_backward(grad_out, normalized, norm) -> np.ndarray:
    """Gradient through ``u = v / |v|`` given ``u`` and ``|v|`` (rows on the last axis)."""
    dot = np.sum(grad_out * normalized, axis=-1, keepdims=True)
    return (grad_out - normalized * dot) / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    value = float(np.dot(l2_normalize(a), l2_normalize(b)))
    return min(1.0, max(-1.0, value))
