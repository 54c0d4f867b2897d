"""Experiment configuration: INI sections per module, canonical text, stable hash."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace

from .errors import ParameterError, StorageError, TensorFormatError
from .instance_decode import InstanceDecodeConfig
from .loss import LossParams
from .pose_decode import DecodeConfig
from .synth import SceneConfig
from .train import TrainConfig


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 0.1
    # the instance pull term has curvature 4 * sample_count; stay below 1 / (2 * sample_count)
    instance_learning_rate: float = 0.01
    steps: int = 500
    init_std: float = 3.0


@dataclass(frozen=True)
class RunSection:
    kind: str = "pose"
    count: int = 1
    seed: int = 0
    gradcheck_cases: int = 100
    gradcheck_eps: float = 1e-4
    gradcheck_tolerance: float = 1e-4
    # 0 means: derive from the scene keypoint sigma
    dist_threshold_px: float = 0.0

    def __post_init__(self):
        if self.kind not in ("pose", "instance"):
            raise ParameterError(f"run.kind must be 'pose' or 'instance', got {self.kind!r}")
        if self.count < 1:
            raise ParameterError("run.count must be >= 1")


_SECTIONS = {
    "run": RunSection,
    "scene": SceneConfig,
    "decode": DecodeConfig,
    "instance": InstanceDecodeConfig,
    "loss": LossParams,
    "train": TrainSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    scene: SceneConfig = field(default_factory=SceneConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    instance: InstanceDecodeConfig = field(default_factory=InstanceDecodeConfig)
    loss: LossParams = field(default_factory=LossParams)
    train: TrainSection = field(default_factory=TrainSection)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=seed), scene=replace(self.scene, seed=seed))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.train.learning_rate if self.run.kind == "pose" else self.train.instance_learning_rate,
            steps=self.train.steps,
            params=self.loss,
            seed=self.run.seed,
            init_std=self.train.init_std,
        )

    def to_text(self) -> str:
        lines = []
        for name in _SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in sorted(fields(section), key=lambda f: f.name):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise TensorFormatError(f"unreadable config: {exc}") from exc
        unknown = set(parser.sections()) - set(_SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            defaults = klass()
            values = {}
            if parser.has_section(name):
                known = {f.name: f for f in fields(klass)}
                for key, raw in parser.items(name):
                    if key not in known:
                        raise ParameterError(f"unknown key [{name}] {key}")
                    values[key] = _parse(raw, getattr(defaults, key), f"{name}.{key}")
            kwargs[name] = replace(defaults, **values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            return None
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        if isinstance(default, str):
            return raw
        # tuple-valued or None-defaulted fields (joint_order)
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ParameterError(f"bad value for {where}: {raw!r}") from exc


def round_floats(obj, digits: int = 9):
    """Recursively round floats to ``digits`` significant digits for stable JSON."""
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    if dataclasses.is_dataclass(obj):
        return round_floats(dataclasses.asdict(obj), digits)
    return obj


def dumps(obj) -> str:
    return json.dumps(round_floats(obj), indent=2) + "\n"
