"""Run configuration: a TOML document with one table per module plus a mandatory seed."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .contrastive import AugmentConfig, ContrastiveConfig
from .data_io import NTU_DEFAULT_MAP, N_JOINTS, JointMap
from .optim import OptimConfig
from .pipeline import METHODS
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    format: str = "jsonl"  # "jsonl" or "ntu"
    ntu_source_joints: int = 25
    # source joint index for each of the 17 slots; defaults to the Kinect v2 mapping
    ntu_joint_map: list[int] | None = None
    ntu_fps: float = 30.0
    pair_by_group: bool = False  # contrastive positives from recordings sharing a group id

    def __post_init__(self):
        if self.format not in ("jsonl", "ntu"):
            raise ConfigError(f"data.format must be 'jsonl' or 'ntu', got {self.format!r}")
        if self.ntu_joint_map is not None and len(self.ntu_joint_map) != N_JOINTS:
            raise ConfigError(f"data.ntu_joint_map needs {N_JOINTS} entries, got {len(self.ntu_joint_map)}")
        self.joint_map()

    def joint_map(self) -> JointMap:
        if self.ntu_joint_map is None:
            return NTU_DEFAULT_MAP
        try:
            return JointMap(self.ntu_source_joints, [(src, slot) for slot, src in enumerate(self.ntu_joint_map)])
        except ValueError as exc:
            raise ConfigError(f"data.ntu_joint_map: {exc}") from exc


@dataclass
class EvalConfig:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    fractions: list[float] = field(default_factory=lambda: [0.8, 0.5, 0.1])
    folds: int = 5
    freeze_encoder: bool = False

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"eval.methods: unknown method {m!r}; choose from {METHODS}")
        for f in self.fractions:
            if not 0.0 < f < 1.0:
                raise ConfigError(f"eval.fractions: {f} is outside (0, 1)")
        if self.folds < 1:
            raise ConfigError("eval.folds must be >= 1")


@dataclass
class RunConfig:
    seed: int
    optim: OptimConfig = field(default_factory=OptimConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seed field set from the top-level seed."""
        return RunConfig(
            seed,
            self.optim,
            dataclasses.replace(self.contrastive, seed=seed),
            self.data,
            dataclasses.replace(self.synth, seed=seed),
            self.eval,
        )


SECTIONS = {
    "optim": OptimConfig,
    "contrastive": ContrastiveConfig,
    "data": DataConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
}


def _build(cls, table: dict, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")
    kwargs = dict(table)
    if cls is ContrastiveConfig:
        if "seed" in kwargs:
            raise ConfigError("[contrastive] seed comes from the top-level seed")
        if "augment" in kwargs:
            kwargs["augment"] = _build(AugmentConfig, kwargs["augment"], "contrastive.augment")
    if cls is SynthConfig and "seed" in kwargs:
        raise ConfigError("[synth] seed comes from the top-level seed")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def parse_config(text: str, seed_override: int | None = None) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key(s) or section(s): {', '.join(unknown)}")
    seed = doc.get("seed") if seed_override is None else seed_override
    if seed is None:
        raise ConfigError("'seed' is mandatory")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    parts = {name: _build(cls, doc.get(name, {}), name) for name, cls in SECTIONS.items()}
    return RunConfig(seed, **parts).with_seed(seed)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), seed_override)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def lock_text(cfg: RunConfig) -> str:
    """Fully resolved configuration as TOML; unset optional fields are omitted."""
    doc = _plain(cfg)
    doc["contrastive"].pop("seed")
    doc["synth"].pop("seed")
    return tomli_w.dumps(doc)


def write_lock(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.lock"
    path.write_text(lock_text(cfg), encoding="utf-8")
    return path
