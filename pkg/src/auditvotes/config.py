"""Experiment configuration: INI file with ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    edges: str = ""
    features: str = ""
    labels: str = ""
    id_map: str = ""
    binarize: bool = False
    # SBM fixture, used when no edge file is given
    sbm_classes: int = 3
    sbm_nodes_per_class: int = 200
    sbm_p_in: float = 0.05
    sbm_p_out: float = 0.0005
    sbm_feature_dim: int = 60
    sbm_feature_signal: float = 0.8


@dataclass(frozen=True)
class SplitSection:
    per_class_labeled: int = 50
    test_fraction: float = 0.2
    split_file: str = ""


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    hidden: int = 128
    noise_training: bool = True
    checkpoint: str = ""


@dataclass(frozen=True)
class AugmentSection:
    kind: str = "none"
    learning_rate: float = 1e-3
    epochs: int = 250
    hidden: int = 256
    embed: int = 64
    heads: int = 4
    candidate_k: int = 200
    dense_limit: int = 4000
    population: str = "sample"
    checkpoint: str = ""
    cache_dir: str = ""


@dataclass(frozen=True)
class SmoothingSection:
    scheme: str = "sparse"
    p_plus: float = 0.2
    p_minus: float = 0.6
    t_s: int = 30
    sigma: float = 0.25


@dataclass(frozen=True)
class FilterSection:
    kind: str = "none"
    theta: float = 0.5


@dataclass(frozen=True)
class CertifySection:
    n_samples: int = 10000
    alpha: float = 0.001
    max_ra: int = 20
    max_rd: int = 20
    max_m: int = 20
    bonferroni: bool = True


@dataclass(frozen=True)
class GaussianSection:
    points_per_class: int = 200
    dim: int = 2
    classes: int = 2
    separation: float = 1.0
    spread: float = 0.5
    test_points: int = 100
    radii: str = "0,0.1,0.2,0.3,0.4,0.5"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1


SECTIONS = {
    "data": DataSection,
    "split": SplitSection,
    "train": TrainSection,
    "augment": AugmentSection,
    "smoothing": SmoothingSection,
    "filter": FilterSection,
    "certify": CertifySection,
    "gaussian": GaussianSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    smoothing: SmoothingSection = field(default_factory=SmoothingSection)
    filter: FilterSection = field(default_factory=FilterSection)
    certify: CertifySection = field(default_factory=CertifySection)
    gaussian: GaussianSection = field(default_factory=GaussianSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        if self.smoothing.scheme not in ("sparse", "partition", "gaussian"):
            raise ConfigError("smoothing.scheme must be sparse, partition or gaussian")
        if self.augment.kind not in ("none", "jaccard", "fae", "sim"):
            raise ConfigError(f"augment.kind {self.augment.kind!r} unknown")
        if self.augment.population not in ("sample", "pairs"):
            raise ConfigError("augment.population must be sample or pairs")
        if self.filter.kind not in ("none", "confidence", "homophily", "jsd"):
            raise ConfigError(f"filter.kind {self.filter.kind!r} unknown")
        if self.certify.n_samples < 1:
            raise ConfigError("certify.n_samples must be >= 1")
        if not 0 < self.certify.alpha < 1:
            raise ConfigError("certify.alpha must lie in (0, 1)")
        if not (0 <= self.smoothing.p_plus <= 1 and 0 <= self.smoothing.p_minus <= 1):
            raise ConfigError("noise probabilities must lie in [0, 1]")
        if self.smoothing.t_s < 1:
            raise ConfigError("smoothing.t_s must be >= 1")
        if not self.smoothing.sigma > 0:
            raise ConfigError("smoothing.sigma must be > 0")
        if self.data.edges and not self.data.features:
            raise ConfigError("data.edges needs data.features")
        return self

    def with_overrides(self, overrides: dict[str, dict[str, str]]) -> "ExperimentConfig":
        out = self
        for sec, kv in overrides.items():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            cur = getattr(out, sec)
            types = {f.name: f.type for f in fields(cur)}
            vals = {}
            for k, v in kv.items():
                if k not in types:
                    raise ConfigError(f"unknown key {sec}.{k}")
                vals[k] = _coerce(v, getattr(cur, k), f"{sec}.{k}")
            out = replace(out, **{sec: replace(cur, **vals)})
        return out

    def set(self, dotted: str, value) -> "ExperimentConfig":
        sec, _, key = dotted.partition(".")
        return self.with_overrides({sec: {key: str(value)}})

    def to_ini(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            for f in fields(getattr(self, sec)):
                v = getattr(getattr(self, sec), f.name)
                lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def _coerce(text: str, default, name: str):
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        sec, dot, k = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        out.setdefault(sec, {})[k] = value
    return out


def load_config(path=None, overrides=None, env=None) -> ExperimentConfig:
    """Defaults, then the INI file, then ``overrides``, then environment variables.

    ``AUDITVOTES_OUTPUT_DIR`` and ``AUDITVOTES_THREADS`` override
    ``run.output_dir`` and ``run.threads``.
    """
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        cfg = cfg.with_overrides({s: dict(parser.items(s)) for s in parser.sections()})
    if overrides:
        cfg = cfg.with_overrides(overrides)
    env = os.environ if env is None else env
    if env.get("AUDITVOTES_OUTPUT_DIR"):
        cfg = cfg.set("run.output_dir", env["AUDITVOTES_OUTPUT_DIR"])
    if env.get("AUDITVOTES_THREADS"):
        cfg = cfg.set("run.threads", env["AUDITVOTES_THREADS"])
    return cfg.validate()
