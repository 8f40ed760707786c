"""Keypoint recordings: JSONL format, NTU-style skeleton files, normalization.

Canonical joint order (17 joints, x/y/z each, y is vertical)::

     0 head          1 neck          2 hip_center
     3 l_shoulder    4 r_shoulder    5 l_elbow      6 r_elbow
     7 l_hand        8 r_hand        9 l_hip       10 r_hip
    11 l_knee       12 r_knee       13 l_foot      14 r_foot
    15 l_toe        16 r_toe

``*_foot`` is the heel/ankle point used by the step-validity rule.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

JOINTS = (
    "head", "neck", "hip_center",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_hand", "r_hand", "l_hip", "r_hip",
    "l_knee", "r_knee", "l_foot", "r_foot",
    "l_toe", "r_toe",
)
N_JOINTS = len(JOINTS)
N_FEATURES = 3 * N_JOINTS
N_STEPS = 8
MIN_FRAMES = 32
J = {name: i for i, name in enumerate(JOINTS)}
SCALE_EPS = 1e-6


class FormatError(ValueError):
    """Malformed input file. ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:" if path is not None else ""
        where += f"{line}: " if line is not None else (" " if where else "")
        super().__init__(f"{where}{message}")
        self.path = path
        self.line = line


@dataclass
class Recording:
    subject_id: str
    frames: np.ndarray  # T x 17 x 3, float64
    fps: float = 30.0
    step_labels: list[bool] | None = None
    times: np.ndarray | None = None  # per-frame timestamps; defaults to index / fps
    group: str | None = None  # optional positive-pair grouping key

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (N_JOINTS, 3):
            raise ValueError(f"frames: expected T x {N_JOINTS} x 3, got shape {self.frames.shape}")
        if self.times is None:
            self.times = np.arange(len(self.frames), dtype=np.float64) / self.fps
        else:
            self.times = np.asarray(self.times, dtype=np.float64)
        if self.step_labels is not None:
            self.step_labels = [bool(v) for v in self.step_labels]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def validate(self) -> "Recording":
        if not (isinstance(self.fps, (int, float)) and math.isfinite(self.fps) and self.fps > 0):
            raise ValueError(f"fps must be a positive number, got {self.fps!r}")
        if self.n_frames < MIN_FRAMES:
            raise ValueError(f"recording has {self.n_frames} frames, need at least {MIN_FRAMES}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain NaN or Inf")
        if self.step_labels is not None and len(self.step_labels) != N_STEPS:
            raise ValueError(f"step_labels must have {N_STEPS} entries, got {len(self.step_labels)}")
        return self

    def replace_frames(self, frames: np.ndarray) -> "Recording":
        return Recording(
            self.subject_id, frames, self.fps,
            None if self.step_labels is None else list(self.step_labels),
            self.times.copy(), self.group,
        )


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _finite_number(value) -> bool:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return False
    try:
        return math.isfinite(float(value))
    except OverflowError:
        return False


def parse_recording_jsonl(text: str, path=None) -> Recording:
    """Parse the JSONL layout: one header object, then one object per frame."""
    header = None
    rows: list[tuple[float, int, list[float]]] = []
    lineno = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except (json.JSONDecodeError, RecursionError) as exc:
            raise FormatError(f"invalid JSON ({exc})", path, lineno) from None
        if not isinstance(obj, dict):
            raise FormatError("expected a JSON object", path, lineno)
        if header is None:
            header = _parse_header(obj, path, lineno)
            continue
        t = obj.get("t")
        joints = obj.get("joints")
        if not _finite_number(t):
            raise FormatError("frame field 't' must be a finite number", path, lineno)
        if not isinstance(joints, list) or len(joints) != N_FEATURES:
            n = len(joints) if isinstance(joints, list) else "no"
            raise FormatError(f"frame must have {N_FEATURES} joint values, got {n}", path, lineno)
        if not all(_finite_number(v) for v in joints):
            raise FormatError("joint values must be finite numbers", path, lineno)
        rows.append((float(t), lineno, [float(v) for v in joints]))
    if header is None:
        raise FormatError("empty file, missing header line", path, 1)
    if len(rows) < MIN_FRAMES:
        raise FormatError(f"recording has {len(rows)} frames, need at least {MIN_FRAMES}", path, lineno)
    rows.sort(key=lambda r: r[0])
    frames = np.array([r[2] for r in rows], dtype=np.float64).reshape(-1, N_JOINTS, 3)
    times = np.array([r[0] for r in rows], dtype=np.float64)
    return Recording(header["subject_id"], frames, header["fps"], header.get("step_labels"), times,
                     header.get("group"))


def _parse_header(obj: dict, path, lineno: int) -> dict:
    known = {"subject_id", "fps", "step_labels", "group"}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise FormatError(f"unknown header field(s) {unknown}", path, lineno)
    sid = obj.get("subject_id")
    if not isinstance(sid, str) or not sid:
        raise FormatError("header field 'subject_id' must be a non-empty string", path, lineno)
    fps = obj.get("fps", 30.0)
    if not _finite_number(fps) or fps <= 0:
        raise FormatError("header field 'fps' must be a positive number", path, lineno)
    labels = obj.get("step_labels")
    if labels is not None:
        if not isinstance(labels, list) or len(labels) != N_STEPS:
            n = len(labels) if isinstance(labels, list) else "non-list"
            raise FormatError(f"step_labels must list exactly {N_STEPS} values, got {n}", path, lineno)
        if not all(isinstance(v, bool) or v in (0, 1) for v in labels):
            raise FormatError("step_labels entries must be booleans or 0/1", path, lineno)
    group = obj.get("group")
    if group is not None and not isinstance(group, str):
        raise FormatError("header field 'group' must be a string", path, lineno)
    return {"subject_id": sid, "fps": float(fps), "step_labels": labels, "group": group}


def read_recording_jsonl(path) -> Recording:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"not valid UTF-8 ({exc.reason})", path) from None
    return parse_recording_jsonl(text, path)


def format_recording_jsonl(rec: Recording) -> str:
    header: dict = {"subject_id": rec.subject_id, "fps": rec.fps}
    if rec.step_labels is not None:
        header["step_labels"] = [bool(v) for v in rec.step_labels]
    if rec.group is not None:
        header["group"] = rec.group
    lines = [json.dumps(header)]
    for t, frame in zip(rec.times, rec.frames):
        lines.append(json.dumps({"t": float(t), "joints": [float(v) for v in frame.reshape(-1)]}))
    return "\n".join(lines) + "\n"


def write_recording_jsonl(rec: Recording, path) -> None:
    Path(path).write_text(format_recording_jsonl(rec), encoding="utf-8")


def read_recording_dir(directory) -> list[Recording]:
    """All ``*.jsonl`` recordings in a directory, in file-name order."""
    return [read_recording_jsonl(p) for p in sorted(Path(directory).glob("*.jsonl"))]


# ---------------------------------------------------------------------------
# NTU-style skeleton text files
# ---------------------------------------------------------------------------


@dataclass
class JointMap:
    """Source joint index for each canonical slot, ``pairs[i] = (source, slot)``."""

    source_joints: int
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        slots = sorted(slot for _, slot in self.pairs)
        if slots != list(range(N_JOINTS)):
            raise ValueError(f"joint map must cover each of the {N_JOINTS} slots exactly once")
        for src, slot in self.pairs:
            if not 0 <= src < self.source_joints:
                raise ValueError(
                    f"slot {slot} ({JOINTS[slot]}) maps to source joint {src}, "
                    f"outside 0..{self.source_joints - 1}"
                )

    @property
    def source_index(self) -> np.ndarray:
        idx = np.empty(N_JOINTS, dtype=np.int64)
        for src, slot in self.pairs:
            idx[slot] = src
        return idx

    @property
    def max_source(self) -> int:
        return max(src for src, _ in self.pairs)


# Kinect v2 / NTU RGB+D 25-joint layout, 0-based.
NTU_DEFAULT_MAP = JointMap(25, [
    (3, J["head"]), (2, J["neck"]), (0, J["hip_center"]),
    (4, J["l_shoulder"]), (8, J["r_shoulder"]), (5, J["l_elbow"]), (9, J["r_elbow"]),
    (7, J["l_hand"]), (11, J["r_hand"]), (12, J["l_hip"]), (16, J["r_hip"]),
    (13, J["l_knee"]), (17, J["r_knee"]), (14, J["l_foot"]), (18, J["r_foot"]),
    (15, J["l_toe"]), (19, J["r_toe"]),
])


class _Lines:
    def __init__(self, text: str, path):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def next(self, what: str) -> tuple[list[str], int]:
        while self.pos < len(self.lines):
            self.pos += 1
            fields = self.lines[self.pos - 1].split()
            if fields:
                return fields, self.pos
        raise FormatError(f"unexpected end of file, expected {what}", self.path, self.pos + 1)

    def count(self, what: str) -> tuple[int, int]:
        fields, lineno = self.next(what)
        if len(fields) != 1:
            raise FormatError(f"expected a single integer {what}, got {len(fields)} fields", self.path, lineno)
        return self.integer(fields[0], what, lineno), lineno

    def integer(self, token: str, what: str, lineno: int) -> int:
        try:
            value = int(token)
        except ValueError:
            raise FormatError(f"{what} must be an integer, got {token[:20]!r}", self.path, lineno) from None
        if value < 0:
            raise FormatError(f"{what} must be non-negative, got {value}", self.path, lineno)
        return value


def parse_ntu_skeleton(text: str, joint_map: JointMap = NTU_DEFAULT_MAP, path=None,
                       subject_id: str | None = None, fps: float = 30.0) -> Recording:
    """Parse an NTU-style skeleton file, keeping body 0 of each frame.

    Each body block may start with a multi-field body-info line (as in the
    released NTU files) before its joint count; both layouts are accepted.
    """
    lines = _Lines(text, path)
    n_frames, _ = lines.count("frame count")
    idx = joint_map.source_index
    frames = []
    for f in range(n_frames):
        n_bodies, body_line = lines.count(f"body count for frame {f}")
        first = None
        for b in range(n_bodies):
            fields, lineno = lines.next(f"joint count for body {b}")
            if len(fields) > 1:  # body-info line
                fields, lineno = lines.next(f"joint count for body {b}")
            if len(fields) != 1:
                raise FormatError(f"expected joint count for body {b}, got {len(fields)} fields", path, lineno)
            n_joints = lines.integer(fields[0], "joint count", lineno)
            if n_joints > len(lines.lines) - lines.pos:
                raise FormatError(f"joint count {n_joints} exceeds the remaining lines", path, lineno)
            if n_joints <= joint_map.max_source:
                raise FormatError(
                    f"body has {n_joints} joints but the joint map needs index {joint_map.max_source}",
                    path, lineno,
                )
            coords = np.empty((n_joints, 3))
            for j in range(n_joints):
                jf, jline = lines.next(f"joint {j} of body {b}")
                if len(jf) < 3:
                    raise FormatError(f"joint line needs at least x y z, got {len(jf)} fields", path, jline)
                try:
                    xyz = [float(v) for v in jf[:3]]
                except ValueError:
                    raise FormatError("joint coordinates must be decimal numbers", path, jline) from None
                if not all(math.isfinite(v) for v in xyz):
                    raise FormatError("joint coordinates must be finite", path, jline)
                coords[j] = xyz
            if b == 0:
                first = coords[idx]
        if first is None:
            logger.warning("%s:%d: frame %d has no bodies, dropped", path, body_line, f)
            continue
        frames.append(first)
    if len(frames) < MIN_FRAMES:
        raise FormatError(f"only {len(frames)} usable frames, need at least {MIN_FRAMES}", path, None)
    if subject_id is None:
        subject_id = Path(path).stem if path is not None else "ntu"
    return Recording(subject_id, np.stack(frames), fps)


NTU_NAME = re.compile(r"^(S\d{3})C\d{3}(P\d{3}R\d{3}A\d{3})")


def read_ntu_skeleton(path, joint_map: JointMap = NTU_DEFAULT_MAP, fps: float = 30.0) -> Recording:
    """Read one file; NTU-style names ``SsssCcccPpppRrrrAaaa`` get a camera-free group id."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"not valid UTF-8 ({exc.reason})", path) from None
    rec = parse_ntu_skeleton(text, joint_map, path, fps=fps)
    m = NTU_NAME.match(path.stem)
    if m:
        rec.group = m.group(1) + m.group(2)
    return rec


def read_ntu_dir(directory, joint_map: JointMap = NTU_DEFAULT_MAP, fps: float = 30.0) -> list[Recording]:
    """All ``*.skeleton`` files in a directory, in file-name order."""
    return [read_ntu_skeleton(p, joint_map, fps) for p in sorted(Path(directory).glob("*.skeleton"))]


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize_recording(rec: Recording) -> Recording:
    """Root-center on the hip and divide by the median hip-to-neck distance."""
    rec.validate()
    centered = rec.frames - rec.frames[:, J["hip_center"] : J["hip_center"] + 1, :]
    scale = float(np.median(np.linalg.norm(centered[:, J["neck"]], axis=1)))
    if not scale > SCALE_EPS:
        raise ValueError(f"degenerate skeleton: hip-to-neck scale {scale:.3g} <= {SCALE_EPS}")
    return rec.replace_frames(centered / scale)
