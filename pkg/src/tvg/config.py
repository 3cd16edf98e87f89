"""Run configuration and its INI representation.

Each section of the file maps onto one dataclass; keys are the dataclass field
names. Tuples are written as comma-separated numbers and booleans as
true/false. Unknown sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geom import CameraIntrinsics
from .mapping import KeyframePolicy, RefineConfig, TugiConfig
from .sim import NoiseModel, SceneSpec, TrajectoryParams
from .splat.gaussians import atomic_write_text
from .tracking import TrackerConfig


@dataclass
class RunSection:
    seed: int = 0
    source: str = "simulate"  # simulate | dataset
    dataset_dir: str = ""
    trajectory: str = "line_low_parallax"
    n_frames: int = 60
    fps: float = 30.0
    plots: bool = True


@dataclass
class CameraSection:
    width: int = 64
    height: int = 48
    focal: float = 58.0

    def intrinsics(self):
        return CameraIntrinsics.centered(self.width, self.height, self.focal)


@dataclass
class MatchingSection:
    join_tol: float = 1.0
    min_parallax: float = 1.0
    min_confidence: float = 0.3
    key_parallax: bool = True  # also gate the I_{k-1} / I_k ray angle


@dataclass
class MappingSection:
    mode: str = "sync"  # sync | deferred
    batch: int = 8


@dataclass
class AblationSection:
    disable_l2d: bool = False
    disable_l3d: bool = False
    disable_dart: bool = False
    disable_tugi: bool = False


SECTIONS = {
    "run": RunSection, "camera": CameraSection, "scene": SceneSpec, "trajectory": TrajectoryParams,
    "noise": NoiseModel, "matching": MatchingSection, "tracker": TrackerConfig, "keyframe": KeyframePolicy,
    "tugi": TugiConfig, "refine": RefineConfig, "mapping": MappingSection, "ablation": AblationSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    camera: CameraSection = field(default_factory=CameraSection)
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectoryParams = field(default_factory=TrajectoryParams)
    noise: NoiseModel = field(default_factory=NoiseModel)
    matching: MatchingSection = field(default_factory=MatchingSection)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    keyframe: KeyframePolicy = field(default_factory=KeyframePolicy)
    tugi: TugiConfig = field(default_factory=TugiConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    mapping: MappingSection = field(default_factory=MappingSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self):
        if self.run.source not in ("simulate", "dataset"):
            raise ConfigError(f"run.source must be 'simulate' or 'dataset', got {self.run.source!r}")
        if self.run.source == "dataset" and not Path(self.run.dataset_dir).is_dir():
            raise ConfigError(f"dataset directory {self.run.dataset_dir!r} does not exist")
        if self.mapping.mode not in ("sync", "deferred"):
            raise ConfigError(f"mapping.mode must be 'sync' or 'deferred', got {self.mapping.mode!r}")
        if self.mapping.batch < 1:
            raise ConfigError("mapping.batch must be >= 1")
        if self.run.n_frames < 2:
            raise ConfigError("run.n_frames must be >= 2")
        self.tracker.validate()
        return self

    def tracker_config(self):
        """TrackerConfig with the ablation toggles applied."""
        return dataclasses.replace(self.tracker, use_2d=self.tracker.use_2d and not self.ablation.disable_l2d,
                                   use_3d=self.tracker.use_3d and not self.ablation.disable_l3d,
                                   use_dart=self.tracker.use_dart and not self.ablation.disable_dart)

    def tugi_config(self):
        return dataclasses.replace(self.tugi, enabled=self.tugi.enabled and not self.ablation.disable_tugi)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, default, where):
    t = text.strip()
    if default is None and not t:
        return None  # derived default
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float) or default is None:
            return float(t)
        if isinstance(default, tuple):
            parts = [p.strip() for p in t.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return tuple(float(p) for p in parts)
        return t
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r} ({exc})") from None


def to_ini(cfg):
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for f in dataclasses.fields(getattr(cfg, name)):
            lines.append(f"{f.name} = {_format(getattr(getattr(cfg, name), f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    atomic_write_text(path, to_ini(cfg))


def _line_of(text, section, key):
    cur = None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return no
    return None


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    parts = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls = SECTIONS[section]
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        optional = {f.name for f in dataclasses.fields(cls) if f.default is None}
        kwargs = {}
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line} [{section}] {key}" if line else f"{source} [{section}] {key}"
            if key not in names:
                raise ConfigError(f"{where}: unknown key {key!r}")
            kwargs[key] = _parse(raw, None if key in optional else getattr(defaults, key), where)
        try:
            parts[section] = cls(**kwargs)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source} [{section}]: {exc}") from None
    return RunConfig(**parts)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))
