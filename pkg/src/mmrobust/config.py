"""Experiment configuration: INI text with one section per component.

Grammar (``configparser``, ``key = value``, ``#`` comments)::

    [run]       mode = baseline | multitask | multitask_search ; seed ; name
    [data]      n_classes task_type n_samples len1 len2 vocab1 vocab2
                dominance xor_mode label_noise splits [seed]
    [model]     layers heads d_model d_ff
    [weights]   lambda1 lambda2 lambda3
    [training]  epochs batch_size lr weight_decay beta1 beta2 eps
                modality_dropout dropout_modality fusion_layer
    [search]    inner_steps gamma inner_optimizer inner_weight_decay beta
                policy_weight_decay max_outer_steps min_outer_steps patience
                batch_size alpha_init_std
    [eval]      etas target_modality threshold metrics

Every key is optional; omitted keys take the dataclass defaults. ``splits``
and ``etas`` are comma-separated. ``data.seed`` pins the dataset across run
seeds; without it the dataset is regenerated from the run seed.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .data import SyntheticSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .metrics import DEFAULT_ETAS, METRIC_NAMES, PRIMARY_METRIC
from .model import ModelConfig
from .multitask import TaskWeights
from .search import SearchConfig
from .training import TrainConfig

MODES = ("baseline", "multitask", "multitask_search")


@dataclass(frozen=True)
class ModelSection:
    layers: int = 4
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-5
    weight_decay: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    modality_dropout: float = 0.0
    dropout_modality: int = 0
    fusion_layer: int = 1


@dataclass(frozen=True)
class SearchSection:
    inner_steps: int = 4
    gamma: float = 3e-5
    inner_optimizer: str = "adam"
    inner_weight_decay: float = 0.0
    beta: float = 3e-3
    policy_weight_decay: float = 3e-5
    max_outer_steps: int = 300
    min_outer_steps: int = 100
    patience: int = 20
    batch_size: int = 64
    alpha_init_std: float = 0.0


@dataclass(frozen=True)
class EvalSection:
    etas: tuple = DEFAULT_ETAS
    target_modality: int = 2
    threshold: float = 0.5
    metrics: str = ""  # comma list written to results.csv; empty = the task's primary metric


@dataclass(frozen=True)
class DataSection:
    n_classes: int = 4
    task_type: str = "multiclass"
    n_samples: int = 5000
    len1: int = 6
    len2: int = 6
    vocab1: int = 32
    vocab2: int = 32
    dominance: float = 0.9
    xor_mode: bool = False
    label_noise: float = 0.0
    splits: tuple = (0.7, 0.15, 0.15)
    seed: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "multitask"
    seed: int = 0
    name: str = "experiment"
    data: DataSection = field(default_factory=DataSection)
    model_section: ModelSection = field(default_factory=ModelSection)
    weights: TaskWeights = field(default_factory=TaskWeights)
    training_section: TrainingSection = field(default_factory=TrainingSection)
    search_section: SearchSection = field(default_factory=SearchSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- derived component configs

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.n_classes, d.task_type, d.n_samples, d.len1, d.len2, d.vocab1,
                             d.vocab2, d.dominance, d.xor_mode, d.label_noise,
                             self.seed if d.seed is None else d.seed, tuple(d.splits))

    @property
    def model(self) -> ModelConfig:
        m, d = self.model_section, self.data
        n_logits = 1 if d.task_type == "binary" else d.n_classes
        return ModelConfig(m.layers, m.heads, m.d_model, m.d_ff, n_logits, d.task_type)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.model_section.d_model, self.data.vocab1, self.data.vocab2,
                             self.data.len1, self.data.len2)

    @property
    def training(self) -> TrainConfig:
        t = self.training_section
        return TrainConfig(t.epochs, t.batch_size, t.lr, t.weight_decay, t.beta1, t.beta2, t.eps,
                           t.modality_dropout, t.dropout_modality, self.seed)

    @property
    def search(self) -> SearchConfig:
        s = self.search_section
        return SearchConfig(s.inner_steps, s.gamma, s.inner_optimizer, s.inner_weight_decay,
                            s.beta, s.policy_weight_decay, s.max_outer_steps, s.min_outer_steps,
                            s.patience, s.batch_size, self.data.splits[1], s.alpha_init_std,
                            self.seed)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("run.mode", f"must be one of {MODES}, got {self.mode!r}")
        checks = [
            ("data", self.synthetic_spec().validate),
            ("model", lambda: self.model),
            ("model", lambda: self.encoder),
            ("training", lambda: self.training),
            ("search", lambda: self.search),
        ]
        for section, check in checks:
            try:
                check()
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from None
        t = self.training_section
        if t.epochs < 0 or t.batch_size < 1:
            raise ConfigError("training.batch_size", "epochs >= 0 and batch_size >= 1 required")
        if not 1 <= t.fusion_layer <= self.model_section.layers:
            raise ConfigError("training.fusion_layer",
                              f"must lie in [1, {self.model_section.layers}] (model.layers)")
        if not 0.0 <= t.modality_dropout <= 1.0:
            raise ConfigError("training.modality_dropout", "must lie in [0, 1]")
        if t.dropout_modality not in (0, 1, 2):
            raise ConfigError("training.dropout_modality", "must be 0, 1 or 2")
        e = self.eval
        if not e.etas or any(not 0.0 <= v <= 1.0 for v in e.etas):
            raise ConfigError("eval.etas", "need one or more values in [0, 1]")
        if e.target_modality not in (1, 2):
            raise ConfigError("eval.target_modality", "must be 1 or 2")
        unknown = set(self.result_metrics()) - set(METRIC_NAMES[self.data.task_type])
        if unknown:
            raise ConfigError("eval.metrics", f"unknown for {self.data.task_type}: {sorted(unknown)}")
        return self

    def result_metrics(self):
        names = [m.strip() for m in self.eval.metrics.split(",") if m.strip()]
        return tuple(names) or (PRIMARY_METRIC[self.data.task_type],)


_SECTIONS = {
    "data": ("data", DataSection),
    "model": ("model_section", ModelSection),
    "weights": ("weights", TaskWeights),
    "training": ("training_section", TrainingSection),
    "search": ("search_section", SearchSection),
    "eval": ("eval", EvalSection),
}


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw, default, where):
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if default is None:
            return None if raw.strip().lower() in ("", "none") else int(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(where, f"cannot parse {raw!r} as {kind.__name__}") from None


def loads(text) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    kwargs = {}
    if parser.has_section("run"):
        run = parser["run"]
        for key in run:
            if key not in ("mode", "seed", "name"):
                raise ConfigError(f"run.{key}", "unknown key")
        kwargs["mode"] = run.get("mode", "multitask").strip()
        kwargs["seed"] = _parse(run.get("seed", "0"), 0, "run.seed")
        kwargs["name"] = run.get("name", "experiment").strip()
    for section, (attr, cls) in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser[section].items():
            if key not in known:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[key] = _parse(raw, getattr(defaults, key), f"{section}.{key}")
        try:
            kwargs[attr] = cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **values})
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None
    return ExperimentConfig(**kwargs).validate()


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"mode": cfg.mode, "seed": str(cfg.seed), "name": cfg.name}
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(cls)
                           if getattr(obj, f.name) is not None}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("mmrobust.presets").iterdir()
                  if p.name.endswith(".ini"))


def load_preset(name) -> ExperimentConfig:
    res = resources.files("mmrobust.presets") / f"{name}.ini"
    if not res.is_file():
        raise ConfigError("preset", f"unknown preset {name!r}; have {preset_names()}")
    return loads(res.read_text())
