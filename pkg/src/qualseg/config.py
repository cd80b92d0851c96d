"""Run configuration: defaults, TOML-style config files, and the resolved echo.

A config file is a flat key-value text file with one section per module:

    [data]
    manifest = "stacks/manifest.csv"   # or omit and use [synthetic]
    image_size = 256

    [synthetic]
    n_stacks = 3
    slices_per_stack = 60
    ...

Values are TOML scalars (strings, ints, floats, booleans) or two-element
arrays for ranges. Flag overrides beat file values; every field below has a
documented default, and the fully resolved set is echoed into each run
directory as ``config.resolved`` so a run can be reproduced exactly.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SyntheticSpec
from .errors import ConfigError, LoadError
from .model import ModelConfig
from .training import TrainConfig

OUTPUT_ROOT_ENV = "QUALSEG_OUTPUT_ROOT"
THREADS_ENV = "QUALSEG_NUM_THREADS"


@dataclass
class QualityConfig:
    median_kernel: int = 5
    eps0: float = 0.25
    cap: int = 10


@dataclass
class SelectionConfig:
    q0: float = 0.9
    mode: str = "oracle"      # oracle | flag
    iterate: bool = False     # re-run the gate after each fine-tune round
    max_rounds: int = 5

    def validate(self) -> None:
        if self.mode not in ("oracle", "flag"):
            raise ConfigError(f"mode must be 'oracle' or 'flag', got {self.mode!r}")
        if self.max_rounds < 1:
            raise ConfigError("max_rounds must be positive")


@dataclass
class RunConfig:
    manifest: str | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    use_synthetic: bool = True
    source_set: bool = False   # a dataset source was named explicitly
    image_size: int | None = None      # defaults to the source's native size
    quality: QualityConfig = field(default_factory=QualityConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    test_fraction: float = 0.25
    out_root: str = "runs"
    seed: int = 0
    warm_start: str | None = None

    def resolved_image_size(self) -> int:
        if self.image_size is not None:
            return self.image_size
        if self.use_synthetic:
            return self.synthetic.image_size
        return 256

    def resolve(self) -> "RunConfig":
        """Propagate the global seed and image size into the sub-configs."""
        size = self.resolved_image_size()
        self.model.input_size = size
        if self.use_synthetic:
            self.synthetic.image_size = size
            self.synthetic.seed = self.seed
        self.train.seed = self.seed + 1
        self.selection.validate()
        self.model.validate()
        self.train.validate()
        if self.use_synthetic:
            self.synthetic.validate()
        elif not self.manifest:
            raise ConfigError("either a manifest path or the synthetic source must be configured")
        return self


# seeds inside [synthetic]/[train] are accepted so a resolved echo reloads
# cleanly, but resolve() re-derives them from the global run seed.
_SECTION_FIELDS = {
    "data": ("manifest", "image_size"),
    "synthetic": tuple(f.name for f in fields(SyntheticSpec)),
    "quality": tuple(f.name for f in fields(QualityConfig)),
    "model": ("base_channels", "dropout_rate"),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "selection": tuple(f.name for f in fields(SelectionConfig)),
    "run": ("test_fraction", "out_root", "seed", "warm_start"),
}

_RANGE_FIELDS = {"lesion_count_range", "lesion_radius_range", "blur_sigma_range", "contrast_range"}


def _apply(config: RunConfig, section: str, key: str, value: Any) -> None:
    if section not in _SECTION_FIELDS:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in _SECTION_FIELDS[section]:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    if key in _RANGE_FIELDS:
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"{section}.{key} must be a two-element array, got {value!r}")
        value = tuple(value)
    if section == "data":
        if key == "manifest":
            config.manifest = str(value)
            config.use_synthetic = False
            config.source_set = True
        else:
            setattr(config, key, value)
    elif section == "synthetic":
        setattr(config.synthetic, key, value)
        if config.manifest is None:   # an explicit manifest wins over [synthetic]
            config.use_synthetic = True
        config.source_set = True
    elif section == "quality":
        setattr(config.quality, key, value)
    elif section == "model":
        setattr(config.model, key, value)
    elif section == "train":
        setattr(config.train, key, value)
    elif section == "selection":
        setattr(config.selection, key, value)
    elif section == "run":
        setattr(config, key, value)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus ``section.key=value`` overrides."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise LoadError(f"missing config file: {path}")
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section, entries in data.items():
            if not isinstance(entries, dict):
                raise ConfigError(f"top-level keys must live in a section, got {section!r}")
            for key, value in entries.items():
                _apply(config, section, key, value)
    for item in overrides or []:
        config_set(config, item)
    return config


def config_set(config: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` override with a TOML-parsed value."""
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    target, raw = assignment.split("=", 1)
    section, key = target.strip().split(".", 1)
    try:
        parsed = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        parsed = raw.strip()
    _apply(config, section.strip(), key.strip(), parsed)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def dump_config(config: RunConfig) -> str:
    """Serialize the fully resolved config in the same file format."""
    holders = {
        "data": {"manifest": config.manifest, "image_size": config.resolved_image_size()},
        "synthetic": config.synthetic.__dict__,
        "quality": config.quality.__dict__,
        "model": {"base_channels": config.model.base_channels, "dropout_rate": config.model.dropout_rate},
        "train": config.train.__dict__,
        "selection": config.selection.__dict__,
        # out_root is where artifacts land, not part of what the run computes,
        # so it stays out of the echo and identical runs stay byte-identical.
        "run": {
            "test_fraction": config.test_fraction,
            "seed": config.seed,
            "warm_start": config.warm_start,
        },
    }
    lines = []
    for section in ("data", "synthetic", "quality", "model", "train", "selection", "run"):
        lines.append(f"[{section}]")
        source = holders[section]
        keys = tuple(k for k in _SECTION_FIELDS[section] if k != "out_root")
        for key in keys:
            value = source.get(key) if isinstance(source, dict) else getattr(source, key)
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)
