"""Run configuration: one TOML file plus ``section.key=value`` overrides.

Every artifact a command writes is stamped with ``RunConfig.hash()``. The hash
covers everything that changes what the pipeline computes; paths and the
inference-time answer source are excluded so that one trained run can be
queried with oracle, model or external answers.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .checkpoint import config_hash
from .grounding.stage import GrounderTrainConfig
from .synth import SceneParams
from .tubelet import SamplingConfig
from .vqa import VQATrainConfig

DATA_ROOT_ENV = "TUBEQA_DATA_ROOT"
ANSWER_SOURCES = ("model", "oracle", "external")
PROMPT_MODES = ("composed", "question_only")
WEIGHTS = ("raw", "ema")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    train_samples: int = 200
    val_samples: int = 150
    test_samples: int = 60
    train_seed: int = 1000
    val_seed: int = 2000
    test_seed: int = 3000

    def sizes(self) -> dict[str, int]:
        return {"train": self.train_samples, "val": self.val_samples, "test": self.test_samples}

    def seeds(self) -> dict[str, int]:
        return {"train": self.train_seed, "val": self.val_seed, "test": self.test_seed}


@dataclass(frozen=True)
class EMAConfig:
    enabled: bool = True
    decay: float = 0.999


@dataclass(frozen=True)
class InferConfig:
    answers: str = "model"
    weights: str = "ema"
    confidence_threshold: float = 0.5
    external_url: str = "http://127.0.0.1:8080/answer"
    external_timeout: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    root: str = "runs/default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    vqa: VQATrainConfig = field(default_factory=lambda: VQATrainConfig(lr=0.5))
    # the stage defaults keep the reference optimizer settings; at 200 samples the
    # grounder needs per-sample steps and a larger learning rate
    grounder: GrounderTrainConfig = field(default_factory=lambda: GrounderTrainConfig(lr=3e-4, batch_size=1))
    ema: EMAConfig = field(default_factory=EMAConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    # grounding query used for training and inference; question_only is the ablation
    prompt_mode: str = "composed"
    color_augment: bool = True

    def __post_init__(self):
        if self.infer.answers not in ANSWER_SOURCES:
            raise ConfigError(f"infer.answers must be one of {ANSWER_SOURCES}, got {self.infer.answers!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.infer.weights not in WEIGHTS:
            raise ConfigError(f"infer.weights must be one of {WEIGHTS}, got {self.infer.weights!r}")
        if not 0.0 <= self.ema.decay <= 1.0:
            raise ConfigError("ema.decay must lie in [0, 1]")
        if self.infer.weights == "ema" and not self.ema.enabled:
            raise ConfigError("infer.weights = 'ema' needs ema.enabled")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("root")
        d["infer"] = {k: v for k, v in d["infer"].items() if not k.startswith(("answers", "external"))}
        return config_hash(d)

    @property
    def root_path(self) -> Path:
        return Path(self.root)

    def data_dir(self, split: str) -> Path:
        return self.root_path / "data" / split

    def checkpoint_path(self, stage: str, tag: str = "raw") -> Path:
        return self.root_path / "checkpoints" / f"{stage}_{tag}.ckpt"

    def predictions_path(self, split: str, answers: str) -> Path:
        return self.root_path / "predictions" / f"{split}_{answers}.json"

    def report_path(self, split: str, answers: str) -> Path:
        return self.root_path / "reports" / f"{split}_{answers}.json"


_SECTIONS = {
    "data": DataConfig,
    "scene": SceneParams,
    "sampling": SamplingConfig,
    "vqa": VQATrainConfig,
    "grounder": GrounderTrainConfig,
    "ema": EMAConfig,
    "infer": InferConfig,
}


def _coerce(cls, name: str, value):
    known = {f.name: f for f in fields(cls)}
    if name not in known:
        raise ConfigError(f"unknown key {name!r} for {cls.__name__}")
    default = getattr(cls(), name)
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    top = {}
    for key, value in d.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = getattr(cfg, key)
            try:
                section = replace(section, **{k: _coerce(_SECTIONS[key], k, v) for k, v in value.items()})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{key}]: {exc}") from exc
            top[key] = section
        elif key in ("root", "seed", "prompt_mode", "color_augment"):
            top[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return replace(cfg, **top)


def parse_override(text: str) -> dict:
    """``"grounder.lr=3e-4"`` -> ``{"grounder": {"lr": 3e-4}}``; the value is parsed as TOML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()  # bare strings
    parts = key.strip().split(".")
    if len(parts) > 2:
        raise ConfigError(f"override key {key!r} nests too deep")
    return {parts[0]: {parts[1]: value}} if len(parts) == 2 else {parts[0]: value}


def load_config(path=None, overrides=(), root: str | None = None) -> RunConfig:
    """Defaults, then the TOML file, then overrides.

    The run root is taken from ``root`` if given, else from the data-root
    environment variable, else from the file.
    """
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, "rb") as f:
                cfg = from_dict(tomli.load(f), cfg)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for text in overrides:
        cfg = from_dict(parse_override(text), cfg)
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV)
    if root is not None:
        cfg = replace(cfg, root=root)
    return cfg

