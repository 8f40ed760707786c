"""Contrastive pretraining: skeleton augmentations, InfoNCE, E2E and MoCo.

Both regimes use cosine similarity (dot products of L2-normalized
embeddings) divided by a temperature. E2E draws negatives from the other
samples of the current batch and symmetrizes the loss; MoCo encodes keys
with a momentum-averaged copy of the encoder and uses a FIFO queue of past
keys as negatives.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import encoder as E
from . import tensor as T
from .optim import AdamState, NonFiniteError, OptimConfig, adam_step

logger = logging.getLogger(__name__)

NORM_TOL = 1e-3


@dataclass
class AugmentConfig:
    rotation_deg: float = 30.0
    jitter_std: float = 0.02
    crop_drop: int = 4  # frames removed by the temporal crop (28 of 32 kept)
    scale_range: float = 0.1  # scale ~ Uniform(1 - r, 1 + r)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0, 0.0)


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    momentum: float = 0.999
    queue_size: int = 1024
    e2e_batch_size: int = 256
    moco_batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.e2e_batch_size < 2 or self.moco_batch_size < 1:
            raise ValueError("batch sizes must be >= 2 (E2E) and >= 1 (MoCo)")
        if self.queue_size < self.moco_batch_size:
            raise ValueError(
                f"queue_size {self.queue_size} is smaller than the MoCo batch size {self.moco_batch_size}"
            )
        if self.queue_size % self.moco_batch_size:
            raise ValueError(
                f"queue_size {self.queue_size} must be a multiple of the MoCo batch size {self.moco_batch_size}"
            )
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def resample_frames(frames: np.ndarray, length: int) -> np.ndarray:
    """Linear interpolation of ``T x ...`` frames onto ``length`` evenly spaced instants."""
    n = frames.shape[0]
    src = np.linspace(0.0, n - 1, length)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (src - lo).reshape((-1,) + (1,) * (frames.ndim - 1))
    return (1.0 - w) * frames[lo] + w * frames[hi]


def augment(segment: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """One random view of a ``32 x 51`` segment (y is the vertical axis)."""
    seg = np.asarray(segment, dtype=np.float64)
    n_frames = seg.shape[0]
    joints = seg.reshape(n_frames, -1, 3)
    theta = np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    out = joints @ rot.T
    if cfg.jitter_std > 0:
        out = out + rng.normal(0.0, cfg.jitter_std, size=out.shape)
    if cfg.crop_drop > 0:
        keep = n_frames - cfg.crop_drop
        start = rng.integers(0, cfg.crop_drop + 1)
        out = resample_frames(out[start : start + keep], n_frames)
    out = out * rng.uniform(1.0 - cfg.scale_range, 1.0 + cfg.scale_range)
    return out.reshape(n_frames, -1).astype(np.asarray(segment).dtype)


def make_views(segment, rng: np.random.Generator, cfg: AugmentConfig | None = None):
    """Independently augmented (query view, key view) pair."""
    cfg = cfg or AugmentConfig()
    return augment(segment, rng, cfg), augment(segment, rng, cfg)


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------


def _check_unit(name: str, v: np.ndarray) -> None:
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"{name}: expected L2-normalized rows, found norm {norms.ravel()[np.argmax(np.abs(norms - 1.0))]:.6g}")


def info_nce(q, k_pos, negatives, tau: float):
    """Loss and gradient w.r.t. ``q`` for one query; keys are constants.

    ``logits = [q.k_pos, q.neg_1, ..., q.neg_N] / tau`` with target index 0.
    """
    q = np.asarray(q)
    k_pos = np.asarray(k_pos)
    negatives = np.atleast_2d(np.asarray(negatives))
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if negatives.shape[0] < 1 or negatives.shape[1] != q.shape[0] or k_pos.shape != q.shape:
        raise T.ShapeError(
            f"info_nce: q {q.shape}, k_pos {k_pos.shape}, negatives {negatives.shape} are inconsistent"
        )
    _check_unit("q", q)
    _check_unit("k_pos", k_pos)
    _check_unit("negatives", negatives)
    keys = np.vstack([k_pos[None], negatives])
    logits = (keys @ q / tau)[None]
    loss, g_logits = T.softmax_cross_entropy(logits, np.zeros(1, dtype=np.int64))
    return loss, (g_logits[0] @ keys) / tau


def info_nce_batch(q, k_pos, negatives, tau: float):
    """Batched InfoNCE with a shared negative set (MoCo queue).

    Returns the mean loss and its gradient w.r.t. the ``B x D`` queries.
    """
    pos = np.sum(q * k_pos, axis=1, keepdims=True)
    logits = np.hstack([pos, q @ negatives.T]) / tau
    loss, g = T.softmax_cross_entropy(logits, np.zeros(len(q), dtype=np.int64))
    grad_q = (g[:, :1] * k_pos + g[:, 1:] @ negatives) / tau
    return loss, grad_q


def in_batch_nce(q, k, tau: float):
    """Query ``i`` against keys of the batch: positive ``k[i]``, negatives ``k[j != i]``."""
    logits = q @ k.T / tau
    loss, g = T.softmax_cross_entropy(logits, np.arange(len(q)))
    return loss, (g @ k) / tau


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class MocoState:
    theta_k: dict
    queue: np.ndarray  # queue_size x D, unit rows
    ptr: int = 0

    @classmethod
    def create(cls, theta_q: dict, queue_size: int, seed: int) -> "MocoState":
        dim = theta_q["head.weight"].shape[1]
        rng = np.random.default_rng(seed)
        queue = T.l2_normalize(rng.standard_normal((queue_size, dim))).astype(T.DTYPE)
        return cls(E.clone_params(theta_q), queue, 0)

    def enqueue(self, keys: np.ndarray) -> None:
        """Overwrite the oldest ``len(keys)`` entries and advance the pointer."""
        b = len(keys)
        size = len(self.queue)
        if b > size:
            raise ValueError(f"batch of {b} keys exceeds queue size {size}")
        idx = (self.ptr + np.arange(b)) % size
        self.queue[idx] = keys
        self.ptr = (self.ptr + b) % size


@dataclass
class PretrainResult:
    params: dict
    losses: list = field(default_factory=list)  # mean loss per epoch
    wall_ms: list = field(default_factory=list)
    state: MocoState | None = None


def _encoder_grads(params):
    return {n for n in params if not n.startswith("head.")}


def _normalized_embeddings(params, views):
    z, cache = E.encode_batch(params, views)
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norm <= T.NORM_EPS):
        raise T.DegenerateEmbeddingError("encoder produced a zero embedding")
    return z / norm, norm, cache


def _backprop_normalized(params, grad_u, u, norm, cache):
    grad_z = T.l2_normalize_backward(grad_u, u, norm)
    return E.encode_backward(params, cache, grad_z)


def _build_views(data, idx, rng, aug, groups):
    """Query and key views for ``data[idx]``; keys come from a same-group sample when ``groups`` is given."""
    q_views = np.empty((len(idx),) + data.shape[1:], dtype=T.DTYPE)
    k_views = np.empty_like(q_views)
    for row, i in enumerate(idx):
        q_views[row] = augment(data[i], rng, aug)
        j = i
        if groups is not None:
            members = groups[1][groups[0][i]]
            j = members[rng.integers(len(members))]
        k_views[row] = augment(data[j], rng, aug)
    return q_views, k_views


def _group_index(groups):
    if groups is None:
        return None
    labels = np.asarray(groups)
    members: dict = {}
    for i, g in enumerate(labels):
        members.setdefault(g, []).append(i)
    return labels, {g: np.array(v) for g, v in members.items()}


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n - batch + 1, batch):
        yield order[start : start + batch]


def _step(params, grads, state, optim_cfg):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"{name}: non-finite gradient during pretraining")
    adam_step(params, grads, state, optim_cfg)


def e2e_epoch(params, data, cfg: ContrastiveConfig, optim_cfg: OptimConfig, adam: AdamState,
              rng: np.random.Generator, groups=None) -> float:
    """One epoch of end-to-end training with in-batch negatives; returns the mean loss."""
    b = cfg.e2e_batch_size
    if b < 2:
        raise ValueError("E2E needs a batch of at least 2")
    if len(data) < b:
        raise ValueError(f"E2E needs at least {b} samples, got {len(data)}")
    gidx = _group_index(groups)
    losses = []
    for idx in _batches(len(data), b, rng):
        vq, vk = _build_views(data, idx, rng, cfg.augment, gidx)
        views = np.concatenate([vq, vk])
        u, norm, cache = _normalized_embeddings(params, views)
        q, k = u[:b], u[b:]
        loss_qk, g_q = in_batch_nce(q, k, cfg.temperature)
        loss_kq, g_k = in_batch_nce(k, q, cfg.temperature)
        loss = 0.5 * (loss_qk + loss_kq)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite E2E loss")
        grad_u = 0.5 * np.concatenate([g_q, g_k]).astype(T.DTYPE)
        grads = _backprop_normalized(params, grad_u, u, norm, cache)
        _step(params, grads, adam, optim_cfg)
        losses.append(loss)
    return float(np.mean(losses))


def moco_epoch(params, state: MocoState, data, cfg: ContrastiveConfig, optim_cfg: OptimConfig,
               adam: AdamState, rng: np.random.Generator, groups=None) -> float:
    """One epoch of momentum-contrast training; returns the mean loss."""
    b = cfg.moco_batch_size
    if b > len(state.queue):
        raise ValueError(f"batch size {b} exceeds queue size {len(state.queue)}")
    if len(data) < b:
        raise ValueError(f"MoCo needs at least {b} samples, got {len(data)}")
    E.check_same_manifest(params, state.theta_k)
    gidx = _group_index(groups)
    losses = []
    for idx in _batches(len(data), b, rng):
        vq, vk = _build_views(data, idx, rng, cfg.augment, gidx)
        q, norm, cache = _normalized_embeddings(params, vq)
        zk, _ = E.encode_batch(state.theta_k, vk)
        k = T.l2_normalize(zk).astype(T.DTYPE)
        loss, grad_q = info_nce_batch(q, k, state.queue, cfg.temperature)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite MoCo loss")
        grads = _backprop_normalized(params, grad_q.astype(T.DTYPE), q, norm, cache)
        _step(params, grads, adam, optim_cfg)
        E.momentum_update(state.theta_k, params, cfg.momentum)
        state.enqueue(k)
        losses.append(loss)
    return float(np.mean(losses))


def pretrain(method: str, data, cfg: ContrastiveConfig, optim_cfg: OptimConfig | None = None,
             init: dict | None = None, groups=None, channels=E.CHANNELS) -> PretrainResult:
    """Run ``cfg.epochs`` of E2E or MoCo on ``N x 32 x 51`` segments."""
    if method not in ("e2e", "moco"):
        raise ValueError(f"unknown pretraining method {method!r}")
    optim_cfg = optim_cfg or OptimConfig()
    data = np.ascontiguousarray(data, dtype=T.DTYPE)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    params = E.clone_params(init) if init is not None else E.init_params(int(seeds[0].generate_state(1)[0]), channels)
    rng = np.random.default_rng(seeds[1])
    adam = AdamState.for_params({n: p for n, p in params.items() if n in _encoder_grads(params)})
    state = None
    if method == "moco":
        state = MocoState.create(params, cfg.queue_size, int(seeds[2].generate_state(1)[0]))
    result = PretrainResult(params, state=state)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        if method == "e2e":
            loss = e2e_epoch(params, data, cfg, optim_cfg, adam, rng, groups)
        else:
            loss = moco_epoch(params, state, data, cfg, optim_cfg, adam, rng, groups)
        result.losses.append(loss)
        result.wall_ms.append(1000.0 * (time.perf_counter() - start))
        logger.info("%s epoch %d/%d loss %.4f", method, epoch + 1, cfg.epochs, loss)
    return result


def write_loss_csv(result: PretrainResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "wall_ms"])
        for i, (loss, ms) in enumerate(zip(result.losses, result.wall_ms), start=1):
            w.writerow([i, f"{loss:.6g}", f"{ms:.6g}"])
