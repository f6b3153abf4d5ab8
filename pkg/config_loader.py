import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, List, Mapping, Optional

import yaml

from attention_core import ModelConfig
from baselines import BaselineKind
from errors import ConfigurationError
from regdedup import PruneConfig
from videogen import SceneSpec, SyntheticSpec

logger = logging.getLogger(__name__)

SECTIONS = ("model", "data", "prune", "run")
DATA_SOURCES = ("synthetic", "homogeneous", "file")
SHARP_COMPONENTS = ("segm", "posc", "regd")
PRUNER_ALIASES = {
    "fastv": BaselineKind.RAW_TOPK,
    BaselineKind.RAW_TOPK.value: BaselineKind.RAW_TOPK,
    BaselineKind.UNIFORM.value: BaselineKind.UNIFORM,
    BaselineKind.RANDOM.value: BaselineKind.RANDOM,
}


@dataclass
class DataConfig:
    source: str = "synthetic"
    scenes: int = 3
    frames_per_scene: int = 4
    tokens_per_frame: int = 4
    noise: float = 0.01
    text_len: int = 4
    data_seed: int = 0
    common_fraction: float = 0.4
    needles: int = 0
    needle_strength: float = 1.0
    align_needles: bool = True
    path: str = ""

    @property
    def frames(self) -> int:
        return self.scenes * self.frames_per_scene

    def validate(self):
        if self.source not in DATA_SOURCES:
            raise ConfigurationError(f"must be one of {', '.join(DATA_SOURCES)}", field="data.source")
        if self.source == "file" and not self.path:
            raise ConfigurationError("a sequence file is required when data.source is 'file'", field="data.path")
        if self.needles < 0:
            raise ConfigurationError("must be non-negative", field="data.needles")
        if self.source != "file":
            self.synthetic_spec(self.data_seed).validate()
            if self.needles > self.middle_slots():
                raise ConfigurationError(f"only {self.middle_slots()} middle-frame slots for {self.needles} needles",
                                         field="data.needles")

    def middle_frames(self) -> range:
        return range(self.frames // 4, max(self.frames // 4 + 1, (3 * self.frames) // 4))

    def middle_slots(self) -> int:
        return len(self.middle_frames()) * self.tokens_per_frame

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            scenes=[SceneSpec(frame_count=self.frames_per_scene, center_seed=k) for k in range(self.scenes)],
            tokens_per_frame=self.tokens_per_frame,
            noise=self.noise,
            text_len=self.text_len,
            data_seed=seed,
            common_fraction=self.common_fraction,
            needle_strength=self.needle_strength,
        )


@dataclass(frozen=True)
class PrunerSpec:
    name: str
    baseline: Optional[BaselineKind] = None
    components: FrozenSet[str] = frozenset(SHARP_COMPONENTS)

    def prune_config(self, base: PruneConfig) -> PruneConfig:
        return dataclasses.replace(base, use_segmask="segm" in self.components,
                                   use_debias="posc" in self.components, use_dedup="regd" in self.components)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    pruners: List[str] = field(default_factory=lambda: ["sharp"])
    trials: int = 1
    output_dir: str = ""
    workers: int = 1
    plots: bool = False
    profile_cache: str = ""

    def pruner_specs(self) -> List[PrunerSpec]:
        return [parse_pruner_id(p) for p in self.pruners]

    def validate(self):
        self.model.validate()
        self.data.validate()
        self.prune.validate(self.model.num_layers)
        if self.trials < 1:
            raise ConfigurationError("must be at least 1", field="run.trials")
        if self.workers < 1:
            raise ConfigurationError("must be at least 1", field="run.workers")
        if not self.pruners:
            raise ConfigurationError("at least one pruner is required", field="run.pruner")
        names = [spec.name for spec in self.pruner_specs()]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate pruner in {self.pruners}", field="run.pruner")


def parse_pruner_id(text: str) -> PrunerSpec:
    """`sharp`, `fastv`, `uniform`, `random` or an ablation such as `sharp:segm+regd`."""
    name = text.strip().lower()
    if name in PRUNER_ALIASES:
        kind = PRUNER_ALIASES[name]
        return PrunerSpec(name="fastv" if kind is BaselineKind.RAW_TOPK else name, baseline=kind, components=frozenset())
    if name == "sharp":
        return PrunerSpec(name="sharp")
    if name.startswith("sharp:"):
        parts = [p for p in name[len("sharp:"):].split("+") if p]
        unknown = [p for p in parts if p not in SHARP_COMPONENTS]
        if unknown or not parts:
            raise ConfigurationError(f"unknown components {unknown or parts} in '{text}'; use {'+'.join(SHARP_COMPONENTS)}",
                                     field="run.pruner")
        ordered = [c for c in SHARP_COMPONENTS if c in parts]
        return PrunerSpec(name="sharp:" + "+".join(ordered), components=frozenset(ordered))
    raise ConfigurationError(f"unknown pruner '{text}'", field="run.pruner")


def _coerce(key: str, value: Any, expected: type) -> Any:
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigurationError(f"expected {expected.__name__}, got {type(value).__name__} ({value!r})", field=key)
    return value


def _section_values(cls, section: str, raw: Mapping[str, Any], exclude=()) -> Dict[str, Any]:
    types = {f.name: f.type for f in dataclasses.fields(cls) if f.name not in exclude}
    values = {}
    for name, value in raw.items():
        key = f"{section}.{name}"
        if name not in types:
            raise ConfigurationError("unknown key", field=key)
        values[name] = _coerce(key, value, types[name])
    return values


def _run_values(raw: Mapping[str, Any]) -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for name, value in raw.items():
        key = f"run.{name}"
        if name == "pruner":
            items = value if isinstance(value, list) else str(value).split(",")
            values["pruners"] = [str(p).strip() for p in items if str(p).strip()]
        elif name in ("trials", "workers"):
            values[name] = _coerce(key, value, int)
        elif name == "plots":
            values[name] = _coerce(key, value, bool)
        elif name in ("output_dir", "profile_cache"):
            values[name] = _coerce(key, value, str)
        else:
            raise ConfigurationError("unknown key", field=key)
    return values


def config_from_mapping(mapping: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Builds an ExperimentConfig from flat dotted keys; overrides win over the mapping."""
    merged = dict(mapping or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    sections: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in merged.items():
        if isinstance(value, dict):
            raise ConfigurationError("nested mappings are not supported; use dotted keys", field=str(key))
        section, _, name = str(key).partition(".")
        if section not in sections or not name:
            raise ConfigurationError("keys must look like model.*, data.*, prune.* or run.*", field=str(key))
        sections[section][name] = value

    model = ModelConfig(**_section_values(ModelConfig, "model", sections["model"]))
    data = DataConfig(**_section_values(DataConfig, "data", sections["data"]))
    prune_values = _section_values(PruneConfig, "prune", sections["prune"])
    prune_values.setdefault("prune_layer", model.prune_layer)
    prune = PruneConfig(**prune_values)
    config = ExperimentConfig(model=model, data=data, prune=prune, **_run_values(sections["run"]))
    config.validate()
    return config


def load_config(path: str, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config file: {e}", field="config")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"invalid config syntax: {e}", field="config")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("top level must be a mapping of dotted keys", field="config")
    config = config_from_mapping(raw, overrides)
    logger.info(f"Loaded config {path}: pruners={config.pruners} trials={config.trials} R={config.prune.retention}")
    return config
