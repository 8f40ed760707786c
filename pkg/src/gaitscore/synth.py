"""Synthetic tandem-gait recordings with known step validity.

Each recording is a child walking heel-to-toe along the x axis (y up, z
lateral) for 8 steps. Step ``i`` places the swinging foot so that its heel
lands a controlled distance ``gap`` in front of the other foot's toe; the
step is labelled valid when ``gap <= valid_threshold_mm``. Coordinate noise
is added after labelling.

Timing: with ``F`` frames the step period is ``P = F / 9``. The double-support
phase of step ``i`` is centred on frame ``(i + 1) * P``, which is the centre
of window ``i`` after segmentation (8 windows of 32 at stride 16 on 144
frames).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_io import J, N_JOINTS, N_STEPS, Recording

logger = logging.getLogger(__name__)

DOUBLE_SUPPORT = 0.375  # fraction of the step period with both feet planted
HEEL_HEIGHT = 0.025  # metres; heel and toe joints share it so planted gaps are horizontal


@dataclass
class SynthConfig:
    n_recordings: int = 27
    frames_per_recording: int = 144
    seed: int = 0
    fps: float = 30.0
    noise_std_mm: float = 5.0
    valid_threshold_mm: float = 30.0
    step_validity_rate: float = 0.55
    # per-child validity probability ~ Beta with this concentration around the rate
    validity_concentration: float = 3.0
    valid_gap_mm: tuple[float, float] = (0.0, 12.0)
    invalid_gap_mm: tuple[float, float] = (60.0, 150.0)
    # when set, every step uses exactly this gap
    fixed_gap_mm: float | None = None
    timing_jitter: float = 0.05  # fraction of the step period
    subject_prefix: str = "child"

    def __post_init__(self):
        if self.n_recordings < 0:
            raise ValueError("n_recordings must be >= 0")
        if self.frames_per_recording < 144:
            raise ValueError("frames_per_recording must be >= 144 (8 windows of 32 at stride 16)")
        if self.valid_threshold_mm <= 0:
            raise ValueError("valid_threshold_mm must be positive")
        if self.noise_std_mm < 0:
            raise ValueError("noise_std_mm must be >= 0")
        if not 0.0 <= self.step_validity_rate <= 1.0:
            raise ValueError("step_validity_rate must be in [0, 1]")
        lo, hi = self.valid_gap_mm
        if not 0 <= lo <= hi:
            raise ValueError("valid_gap_mm must be an ordered non-negative range")
        lo, hi = self.invalid_gap_mm
        if not 0 <= lo <= hi:
            raise ValueError("invalid_gap_mm must be an ordered non-negative range")
        self.valid_gap_mm = tuple(self.valid_gap_mm)
        self.invalid_gap_mm = tuple(self.invalid_gap_mm)


def step_centres(n_frames: int) -> np.ndarray:
    """Frame index at the middle of each step's double-support phase."""
    return np.arange(1, N_STEPS + 1) * (n_frames / (N_STEPS + 1))


def _draw_gaps(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Heel-to-toe gaps in metres for the 8 steps of one child."""
    rate = cfg.step_validity_rate
    if 0.0 < rate < 1.0:
        a = rate * cfg.validity_concentration
        p_child = rng.beta(a, cfg.validity_concentration - a)
    else:
        p_child = rate
    valid = rng.random(N_STEPS) < p_child
    gaps = np.where(
        valid,
        rng.uniform(*cfg.valid_gap_mm, size=N_STEPS),
        rng.uniform(*cfg.invalid_gap_mm, size=N_STEPS),
    )
    if cfg.fixed_gap_mm is not None:
        gaps = np.full(N_STEPS, float(cfg.fixed_gap_mm))
    return gaps / 1000.0


def _ease(u: np.ndarray) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(np.pi * np.clip(u, 0.0, 1.0))


def _foot_tracks(n_frames, gaps, foot_len, lift, rng, jitter):
    """Heel positions (T x 3) for left and right feet, plus swing phase per foot."""
    period = n_frames / (N_STEPS + 1)
    ds = DOUBLE_SUPPORT * period
    swing = period - ds
    t = np.arange(n_frames, dtype=np.float64)
    start_gap = rng.uniform(0.0, 0.01)
    # footprint heels: 0 left (rear), 1 right, then one per step
    prints = [0.0, foot_len + start_gap]
    for g in gaps:
        prints.append(prints[-1] + foot_len + g)
    x = [np.full(n_frames, prints[0]), np.full(n_frames, prints[1])]
    phase = [np.zeros(n_frames), np.zeros(n_frames)]
    centres = step_centres(n_frames)
    for i in range(N_STEPS):
        foot = i % 2
        land = centres[i] - ds / 2 + rng.uniform(-jitter, jitter) * period
        u = (t - (land - swing)) / swing
        moving = (u > 0) & (u < 1)
        x[foot] = np.where(t >= land, prints[i + 2], x[foot])
        x[foot] = np.where(moving, prints[i] + (prints[i + 2] - prints[i]) * _ease(u), x[foot])
        phase[foot] = np.where(moving, np.sin(np.pi * np.clip(u, 0, 1)), phase[foot])
    heels = []
    for foot, side in ((0, 1.0), (1, -1.0)):
        h = np.zeros((n_frames, 3))
        h[:, 0] = x[foot]
        h[:, 1] = HEEL_HEIGHT + lift * phase[foot]
        # swinging foot arcs out sideways to pass the planted one
        h[:, 2] = side * 0.07 * phase[foot]
        heels.append(h)
    return heels, phase


def _child(cfg: SynthConfig, index: int, rng: np.random.Generator):
    n = cfg.frames_per_recording
    gaps = _draw_gaps(cfg, rng)
    labels = [bool(g * 1000.0 <= cfg.valid_threshold_mm) for g in gaps]

    height = rng.uniform(1.15, 1.45)
    foot_len = 0.15 * height * rng.uniform(0.95, 1.05)
    lift = rng.uniform(0.04, 0.09)
    (l_heel, r_heel), (l_ph, r_ph) = _foot_tracks(n, gaps, foot_len, lift, rng, cfg.timing_jitter)
    fwd = np.array([1.0, 0.0, 0.0])
    l_toe = l_heel + foot_len * fwd
    r_toe = r_heel + foot_len * fwd

    t = np.arange(n) / cfg.fps
    sway_amp = rng.uniform(0.005, 0.04)
    sway_freq = rng.uniform(0.3, 1.2)
    sway = sway_amp * np.sin(2 * np.pi * sway_freq * t + rng.uniform(0, 2 * np.pi))
    arm_amp = rng.uniform(0.01, 0.06)
    arm_out = rng.uniform(0.0, 0.25)  # arms held out for balance
    lean = rng.uniform(-0.03, 0.06)

    frames = np.zeros((n, N_JOINTS, 3))
    hip = np.zeros((n, 3))
    hip[:, 0] = 0.25 * (l_heel[:, 0] + r_heel[:, 0] + l_toe[:, 0] + r_toe[:, 0])
    hip[:, 1] = 0.53 * height + 0.01 * np.maximum(l_ph, r_ph)
    hip[:, 2] = sway
    neck = hip + np.stack([np.full(n, lean), np.full(n, 0.29 * height), 0.5 * sway], axis=1)
    head = neck + np.array([0.01, 0.11 * height, 0.0])
    frames[:, J["hip_center"]] = hip
    frames[:, J["neck"]] = neck
    frames[:, J["head"]] = head
    swing_sig = l_ph - r_ph
    for side, s in (("l", 1.0), ("r", -1.0)):
        shoulder = neck + np.array([0.0, -0.02 * height, s * 0.11 * height])
        out = s * arm_out * height
        elbow = shoulder + np.stack(
            [-s * arm_amp * swing_sig, np.full(n, -0.17 * height), np.full(n, 0.4 * out)], axis=1
        )
        hand = elbow + np.stack(
            [-1.5 * s * arm_amp * swing_sig, np.full(n, -0.15 * height), np.full(n, 0.6 * out)], axis=1
        )
        hip_j = hip + np.array([0.0, -0.01 * height, s * 0.05 * height])
        heel = l_heel if side == "l" else r_heel
        toe = l_toe if side == "l" else r_toe
        phase = l_ph if side == "l" else r_ph
        knee = 0.5 * (hip_j + heel) + np.stack(
            [0.03 + 0.08 * phase, 0.02 * phase, np.zeros(n)], axis=1
        )
        frames[:, J[f"{side}_shoulder"]] = shoulder
        frames[:, J[f"{side}_elbow"]] = elbow
        frames[:, J[f"{side}_hand"]] = hand
        frames[:, J[f"{side}_hip"]] = hip_j
        frames[:, J[f"{side}_knee"]] = knee
        frames[:, J[f"{side}_foot"]] = heel
        frames[:, J[f"{side}_toe"]] = toe

    # place the walkway somewhere in front of the camera with a small heading error
    yaw = np.deg2rad(rng.uniform(-15.0, 15.0))
    c, s_ = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, 0.0, s_], [0.0, 1.0, 0.0], [-s_, 0.0, c]])
    offset = np.array([rng.uniform(-1.0, 1.0), 0.0, rng.uniform(2.0, 4.0)])
    frames = frames @ rot.T + offset
    if cfg.noise_std_mm > 0:
        frames = frames + rng.normal(0.0, cfg.noise_std_mm / 1000.0, size=frames.shape)
    return Recording(f"{cfg.subject_prefix}{index:03d}", frames, cfg.fps, labels)


def generate(cfg: SynthConfig) -> list[Recording]:
    """``cfg.n_recordings`` labelled recordings, deterministic in ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_recordings)
    return [_child(cfg, i, np.random.default_rng(s)) for i, s in enumerate(seeds)]


def oracle_score(rec: Recording) -> int:
    """Number of valid steps according to the recording's labels."""
    if rec.step_labels is None:
        raise ValueError(f"{rec.subject_id}: recording has no step labels")
    return int(sum(bool(v) for v in rec.step_labels))


def measure_step_gaps(rec: Recording) -> np.ndarray:
    """Heel-to-toe distance in mm at the centre of each step's double support.

    Step ``i`` lands the left foot when ``i`` is even. The median over the
    three frames nearest the phase centre is reported.
    """
    centres = step_centres(rec.n_frames)
    gaps = np.empty(N_STEPS)
    for i, c in enumerate(centres):
        lo = max(0, int(round(c)) - 1)
        idx = np.arange(lo, min(rec.n_frames, lo + 3))
        front, rear = ("l", "r") if i % 2 == 0 else ("r", "l")
        d = np.linalg.norm(rec.frames[idx, J[f"{front}_foot"]] - rec.frames[idx, J[f"{rear}_toe"]], axis=1)
        gaps[i] = 1000.0 * np.median(d)
    return gaps
