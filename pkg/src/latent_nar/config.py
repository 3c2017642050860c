"""Experiment configuration: dataclasses, INI files and built-in profiles.

An INI file holds flat ``key = value`` pairs in the sections ``[data]``,
``[teacher]``, ``[model]``, ``[schedule]``, ``[inference]``,
``[evaluation]`` and ``[output]``. Keys left out keep the profile default.

Example
-------
    [model]
    latent_dim = 8

    [inference]
    steps = 1
    candidates = 10
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .config_paths import RUNS_DIR, resolve_path
from .corpus import TASK_KINDS, SyntheticTaskSpec
from .errors import ConfigError
from .model import LatentNARConfig
from .teacher import TeacherConfig
from .training import ScheduleConfig

PROFILES = ("desk", "full")


@dataclass
class DataConfig:
    """Where the corpora come from.

    With ``train_path`` unset the splits are generated from the synthetic
    task named by ``task``.
    """

    task: str = "expand-contract"
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    min_len: int = 2
    max_len: int = 12
    train_size: int = 5000
    valid_size: int = 500
    test_size: int = 1000
    seed: int = 1234
    min_count: int = 1

    def __post_init__(self):
        if self.train_path is None and self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASK_KINDS}")
        for name in ("train_size", "valid_size", "test_size", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")

    @property
    def synthetic(self) -> bool:
        return self.train_path is None

    @property
    def source_paths(self) -> dict[str, Path]:
        """Configured corpus files by split, resolved against the project root."""
        named = {"train": self.train_path, "valid": self.valid_path, "test": self.test_path}
        return {split: resolve_path(p) for split, p in named.items() if p is not None}

    def task_spec(self, split_offset: int = 0) -> SyntheticTaskSpec:
        """Synthetic task parameters; each split gets its own seed offset."""
        return SyntheticTaskSpec(self.task, self.min_len, self.max_len, seed=self.seed + split_offset)


@dataclass
class InferenceConfig:
    steps: int = 1
    candidates: int = 10
    temperature: float = 0.5
    seed: int = 0
    beam_size: int = 3

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.candidates < 1:
            raise ValueError("candidates must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.beam_size < 1:
            raise ValueError("beam_size must be at least 1")


@dataclass
class EvalConfig:
    elbo_samples: int = 20
    candidate_counts: tuple[int, ...] = (1, 5, 10, 20)
    report_steps: int = 4
    latency_warmup: int = 5
    latency_repeats: int = 1
    # 0 benchmarks every test sentence
    latency_sentences: int = 200

    def __post_init__(self):
        if self.elbo_samples < 1:
            raise ValueError("elbo_samples must be at least 1")
        if not self.candidate_counts or min(self.candidate_counts) < 1:
            raise ValueError("candidate_counts must be non-empty positive counts")
        if self.latency_repeats < 1:
            raise ValueError("latency_repeats must be at least 1")
        if self.latency_warmup < 0 or self.latency_sentences < 0 or self.report_steps < 0:
            raise ValueError("latency_warmup, latency_sentences and report_steps must be non-negative")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    model: LatentNARConfig = field(default_factory=LatentNARConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = str(RUNS_DIR / "desk")
    profile: str = "desk"

    @property
    def output_path(self) -> Path:
        """The output directory; relative values are taken from the project root."""
        return resolve_path(self.output_dir)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {
    "data": DataConfig,
    "teacher": TeacherConfig,
    "model": LatentNARConfig,
    "schedule": ScheduleConfig,
    "inference": InferenceConfig,
    "evaluation": EvalConfig,
}


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def desk_profile() -> ExperimentConfig:
    return ExperimentConfig()


def full_profile() -> ExperimentConfig:
    """Full-size hyperparameters; never exercised at desk scale."""
    return ExperimentConfig(
        teacher=TeacherConfig.full(),
        model=LatentNARConfig.full(),
        schedule=ScheduleConfig(max_steps=200_000, warmup=4000, batch_size=256),
        output_dir=str(RUNS_DIR / "full"),
        profile="full",
    )


def profile_config(name: str) -> ExperimentConfig:
    if name == "desk":
        return desk_profile()
    if name == "full":
        return full_profile()
    raise ConfigError("profile", f"unknown profile {name!r}; expected one of {PROFILES}")


# ---------------------------------------------------------------------------
# INI loading
# ---------------------------------------------------------------------------

def _coerce(raw: str, hint, name: str):
    """Convert an INI string to the annotated field type."""
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if type(None) in args:
        if text == "" or text.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(text, inner, name)
    if origin is tuple:
        items = [part for part in text.replace(",", " ").split() if part]
        return tuple(_coerce(part, args[0], name) for part in items)
    if hint is bool:
        lowered = text.lower()
        if lowered in configparser.ConfigParser.BOOLEAN_STATES:
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        raise ConfigError(name, f"expected a boolean, got {raw!r}")
    if hint in (int, float):
        try:
            return hint(text)
        except ValueError:
            raise ConfigError(name, f"expected {hint.__name__}, got {raw!r}") from None
    if hint is dict:
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(name, f"expected a JSON object: {exc}") from None
    return text


def _apply_section(current, section: str, values: dict):
    cls = type(current)
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw in values.items():
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError(name, "unknown key")
        updates[key] = _coerce(raw, hints[key], name)
    try:
        return dataclasses.replace(current, **updates)
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def load_config(path: Path | None = None, profile: str = "desk") -> ExperimentConfig:
    """Profile defaults overlaid with the values of an INI file.

    Raises
    ------
    FileNotFoundError
        If ``path`` is given but missing.
    ConfigError
        On unknown sections or keys, or values that fail validation.
    """
    config = profile_config(profile)
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(str(path), f"unreadable config: {exc}") from None

    for section in parser.sections():
        values = dict(parser.items(section))
        if section == "output":
            for key, raw in values.items():
                if key != "dir":
                    raise ConfigError(f"output.{key}", "unknown key")
                config.output_dir = raw.strip()
            continue
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        setattr(config, section, _apply_section(getattr(config, section), section, values))
    return config


def apply_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """Apply command-line overrides; ``None`` leaves a value unchanged.

    Recognized keys: ``seed``, ``steps``, ``candidates``, ``temperature``,
    ``beam``, ``output_dir``.
    """
    inference = {}
    mapping = {"steps": "steps", "candidates": "candidates", "temperature": "temperature", "beam": "beam_size"}
    for key, target in mapping.items():
        if overrides.get(key) is not None:
            inference[target] = overrides[key]
    if overrides.get("seed") is not None:
        inference["seed"] = overrides["seed"]
        config.schedule = dataclasses.replace(config.schedule, seed=overrides["seed"])
    if inference:
        try:
            config.inference = dataclasses.replace(config.inference, **inference)
        except ValueError as exc:
            raise ConfigError("inference", str(exc)) from None
    if overrides.get("output_dir") is not None:
        # typed on the command line, so relative to the working directory
        config.output_dir = str(Path(overrides["output_dir"]).resolve())
    return config


def check_paths(config: ExperimentConfig) -> dict[str, Path]:
    """Fail early unless every configured corpus file exists.

    Returns the resolved corpus files (empty for synthetic data).

    Raises
    ------
    ConfigError
        If only some of the three split paths are set, or one is missing.
    """
    data = config.data
    found = data.source_paths
    if data.synthetic:
        if found:
            raise ConfigError(f"data.{next(iter(found))}_path", "set train_path too, or leave all paths unset")
        return found
    for split in ("train", "valid", "test"):
        if split not in found:
            raise ConfigError(f"data.{split}_path", "required when train_path is set")
        if not found[split].is_file():
            raise ConfigError(f"data.{split}_path", f"file not found: {found[split]}")
    return found


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
