"""Declarative experiment configuration: TOML in, resolved TOML out.

A config file is a set of flat sections of scalar/list keys. Every key
has an explicit default; unknown sections or keys are rejected so typos
cannot silently fall back to defaults. The fully resolved config (all
defaults made explicit) can be re-emitted as deterministic TOML text,
and loading that text reproduces the same configuration exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .denoiser import DenoiserConfig
from .errors import DataError
from .phantom import PhantomSpec
from .training import TrainerConfig
from .volume import GridHeader

_GRID = {
    "dims": (16, 16, 16),
    "spacing": (2.0, 2.0, 2.0),
    "origin": (0.0, 0.0, 0.0),
}
_PHANTOM = {
    "r_white": 6.0,
    "r_pial": 9.0,
    "amplitude": 0.4,
    "pial_shrink_max": 1.5,
    "bump_count": 12,
    "bump_length": 0.35,
    "subdivisions": 3,
    "mu_white": 0.8,
    "mu_gray": 0.5,
    "mu_csf": 0.15,
    "mu_skull": 0.95,
    "noise_sigma": 0.03,
    "skull_radii": (12.5, 14.0),
    "skull_amplitude": 0.4,
    "surface_seed": 0,
    "skull_seed": 1,
    "d_max": 0.0,  # 0 selects the default truncation for the grid
}
_DATASET = {
    "n_items": 90,
    "ratios": (60, 10, 20),
    "seed": 2024,
}
_SCHEDULE = {
    "steps": 200,
}
_SAMPLING = {
    "plan_steps": 10,
    "eta": 1.0,
    "samples_per_item": 1,
    "seed": 0,
}
_MODEL = {
    "base_channels": 16,
    "channel_mults": (1, 2),
    "condition_channels": ("s_pial", "s_white", "edge", "ribbon"),
    "time_width": 64,
    "groups": 8,
    "attention": False,
}
_TRAINER = {
    "learning_rate": 1e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "batch_size": 2,
    "ema_decay": 0.995,
    "plateau_factor": 0.5,
    "plateau_patience": 5,
    "plateau_min_delta": 1e-4,
    "seed": 0,
}
_TRAINING = {
    "process": "bridge",
    "epochs": 50,
    "model_seed": 0,
}
_PATHS = {
    "dataset_dir": "dataset",
    "run_dir": "run",
}

SECTIONS = {
    "grid": _GRID,
    "phantom": _PHANTOM,
    "dataset": _DATASET,
    "schedule": _SCHEDULE,
    "sampling": _SAMPLING,
    "model": _MODEL,
    "trainer": _TRAINER,
    "training": _TRAINING,
    "paths": _PATHS,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """All experiment knobs, one flat dict per section."""

    sections: dict = field(default_factory=dict)

    def __post_init__(self):
        resolved = {}
        for section, defaults in SECTIONS.items():
            given = self.sections.get(section, {})
            resolved[section] = {**defaults, **given}
        object.__setattr__(self, "sections", resolved)
        # materialize the derived objects eagerly so validation runs on load
        self.grid_header()
        self.phantom_spec()
        self.model_config()
        self.trainer_config()
        training = self["training"]
        if training["process"] not in ("bridge", "gaussian"):
            raise DataError(f"unknown training.process {training['process']!r}")
        if training["epochs"] < 1:
            raise DataError("training.epochs must be >= 1")
        sampling = self["sampling"]
        if sampling["samples_per_item"] < 1:
            raise DataError("sampling.samples_per_item must be >= 1")
        schedule = self["schedule"]
        if schedule["steps"] < 2:
            raise DataError("schedule.steps must be >= 2")
        dataset = self["dataset"]
        if len(dataset["ratios"]) != 3:
            raise DataError("dataset.ratios needs three entries")

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    def grid_header(self) -> GridHeader:
        grid = self["grid"]
        return GridHeader(
            dims=tuple(grid["dims"]),
            spacing=tuple(grid["spacing"]),
            origin=tuple(grid["origin"]),
        )

    def phantom_spec(self) -> PhantomSpec:
        fields = dict(self["phantom"])
        d_max = fields.pop("d_max")
        return PhantomSpec(
            header=self.grid_header(),
            d_max=None if d_max == 0.0 else d_max,
            **fields,
        )

    def model_config(self) -> DenoiserConfig:
        model = self["model"]
        return DenoiserConfig(
            base_channels=model["base_channels"],
            channel_mults=tuple(model["channel_mults"]),
            condition_channels=tuple(model["condition_channels"]),
            time_width=model["time_width"],
            groups=model["groups"],
            attention=model["attention"],
        )

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(**self["trainer"])

    def truncation(self) -> float:
        return self.phantom_spec().truncation


def _coerce(section: str, key: str, value, default):
    """Type-check a parsed TOML value against its default's shape."""
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise DataError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise DataError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DataError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise DataError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise DataError(f"{where} must be a list, got {value!r}")
        if isinstance(default[0], str):
            if not all(isinstance(v, str) for v in value):
                raise DataError(f"{where} must be a list of strings")
            return tuple(value)
        if isinstance(default[0], int):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise DataError(f"{where} must be a list of integers")
            return tuple(int(v) for v in value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise DataError(f"{where} must be a list of numbers")
        return tuple(float(v) for v in value)
    raise DataError(f"unsupported config field type for {where}")


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Validate a parsed TOML mapping into an ExperimentConfig."""
    sections = {}
    for section, content in mapping.items():
        if section not in SECTIONS:
            raise DataError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise DataError(f"config section [{section}] must hold key/value pairs")
        defaults = SECTIONS[section]
        keys = {}
        for key, value in content.items():
            if key not in defaults:
                raise DataError(f"unknown config key {section}.{key}")
            keys[key] = _coerce(section, key, value, defaults[key])
        sections[section] = keys
    return ExperimentConfig(sections=sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file {path} does not exist")
    try:
        mapping = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise DataError(f"config file {path} is not valid TOML: {err}") from err
    return config_from_mapping(mapping)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, tuple):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise DataError(f"cannot format config value {value!r}")


def resolved_toml(config: ExperimentConfig) -> str:
    """Deterministic TOML text with every key explicit."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key in SECTIONS[section]:
            lines.append(f"{key} = {_format_value(config[section][key])}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(config: ExperimentConfig, path) -> None:
    Path(path).write_text(resolved_toml(config))
