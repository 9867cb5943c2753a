"""Run configuration: INI-style file (``[section]`` + ``key = value``), strict keys, flag overrides.

Lists are comma-separated. Booleans accept true/false/yes/no/1/0. Every key below
has a default, so an empty file is valid; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .backbone import MIXERS, VARIANTS
from .numerics import DTYPES, ConfigurationError
from .transport import SHAPES

TRANSPORT_MODELS = ("vgamba-tiny", "conv-tiny", "attention-tiny")


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "f32"
    out: str = "out"


@dataclass
class ModelSection:
    variant: str = "vgamba-b"
    mixer: str = ""  # empty: the variant's own mixer
    use_rpe: bool = True
    use_asc: bool = True
    num_classes: int = 1000
    image_size: int = 0  # 0: the variant's own resolution


@dataclass
class TrainSection:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    loss: str = "mse"


@dataclass
class DataSection:
    size: int = 64
    n_samples: int = 200
    shape_kinds: list[str] = field(default_factory=lambda: list(SHAPES))
    val_fraction: float = 0.2


@dataclass
class TransportSection:
    models: list[str] = field(default_factory=lambda: list(TRANSPORT_MODELS))
    preview: int = 4  # validation samples rendered per prediction image


@dataclass
class BenchSection:
    lengths: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    mixers: list[str] = field(default_factory=lambda: ["ssm", "attention"])
    repeats: int = 15
    width: int = 32
    state: int = 16


@dataclass
class ErfSection:
    models: list[str] = field(default_factory=lambda: list(TRANSPORT_MODELS))
    extent: int = 64
    n_samples: int = 32
    thresholds: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.2])
    checkpoint_dir: str = ""  # empty: fresh initialisation


@dataclass
class GradcheckSection:
    seeds: int = 20
    tol: float = 1e-4
    steps: list[float] = field(default_factory=lambda: [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8])
    order: int = 4
    max_probes: int = 6


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    transport: TransportSection = field(default_factory=TransportSection)
    bench: BenchSection = field(default_factory=BenchSection)
    erf: ErfSection = field(default_factory=ErfSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def sections(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, section in self.sections().items():
            parser[name] = {k: _format(v) for k, v in dataclasses.asdict(section).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_scalar(kind, text: str, key: str):
    text = text.strip()
    try:
        if kind is bool:
            return _BOOLS[text.lower()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except (KeyError, ValueError):
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _parse(kind, text: str, key: str):
    if getattr(kind, "__origin__", None) is list:
        (inner,) = kind.__args__
        return [_parse_scalar(inner, part, key) for part in text.split(",") if part.strip()]
    return _parse_scalar(kind, text, key)


def _set(section_obj, section: str, key: str, text: str) -> None:
    hints = get_type_hints(type(section_obj))
    if key not in hints:
        raise ConfigurationError(f"unknown key {section}.{key}")
    setattr(section_obj, key, _parse(hints[key], text, f"{section}.{key}"))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}".splitlines()[0]) from None
    cfg = RunConfig()
    known = cfg.sections()
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"unknown section [{section}]")
        for key, value in parser[section].items():
            _set(known[section], section, key, value)
    if parser.defaults():
        raise ConfigurationError(f"unknown key DEFAULT.{next(iter(parser.defaults()))}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_config(p.read_text())


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """``overrides`` maps ``section.key`` to the raw text value, as if written in the file."""
    known = cfg.sections()
    for dotted, text in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in known:
            raise ConfigurationError(f"unknown section [{section}]")
        _set(known[section], section, key, text)
    return cfg


def _check(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigurationError(f"{key}: {msg}")


def validate(cfg: RunConfig) -> RunConfig:
    """Semantic checks; the first failure raises with the offending ``section.key``."""
    _check(cfg.run.precision in DTYPES, "run.precision", f"must be one of {sorted(DTYPES)}")
    _check(cfg.run.seed >= 0, "run.seed", "must be >= 0")
    _check(bool(cfg.run.out), "run.out", "must be non-empty")
    _check(cfg.model.variant in VARIANTS, "model.variant", f"unknown variant; known: {sorted(VARIANTS)}")
    _check(cfg.model.mixer in ("",) + MIXERS, "model.mixer", f"must be one of {MIXERS}")
    _check(cfg.model.num_classes >= 1, "model.num_classes", "must be >= 1")
    _check(cfg.model.image_size >= 0 and cfg.model.image_size % 32 == 0, "model.image_size", "must be a multiple of 32")
    _check(cfg.train.lr > 0, "train.lr", "must be positive")
    _check(cfg.train.epochs >= 1, "train.epochs", "must be >= 1")
    _check(cfg.train.batch_size >= 1, "train.batch_size", "must be >= 1")
    _check(cfg.train.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    _check(0 <= cfg.train.beta1 < 1, "train.beta1", "must be in [0, 1)")
    _check(0 <= cfg.train.beta2 < 1, "train.beta2", "must be in [0, 1)")
    _check(cfg.train.loss == "mse", "train.loss", "only mse is supported")
    _check(cfg.data.size >= 32 and cfg.data.size % 32 == 0, "data.size", "must be a multiple of 32")
    _check(cfg.data.n_samples >= 2, "data.n_samples", "must be >= 2")
    _check(bool(cfg.data.shape_kinds) and set(cfg.data.shape_kinds) <= set(SHAPES), "data.shape_kinds", f"subset of {SHAPES}")
    _check(0 < cfg.data.val_fraction < 1, "data.val_fraction", "must be in (0, 1)")
    _check(bool(cfg.transport.models) and set(cfg.transport.models) <= set(VARIANTS), "transport.models", "unknown variant")
    _check(cfg.transport.preview >= 0, "transport.preview", "must be >= 0")
    lengths = cfg.bench.lengths
    _check(len(set(lengths)) >= 4, "bench.lengths", "needs at least 4 distinct lengths")
    _check(all(m >= 1 for m in lengths) and lengths == sorted(lengths), "bench.lengths", "must be positive and increasing")
    _check(bool(cfg.bench.mixers) and set(cfg.bench.mixers) <= {"ssm", "attention"}, "bench.mixers", "subset of ssm,attention")
    _check(cfg.bench.repeats >= 1, "bench.repeats", "must be >= 1")
    _check(cfg.bench.width >= 1 and cfg.bench.state >= 1, "bench.width", "width and state must be >= 1")
    _check(bool(cfg.erf.models) and set(cfg.erf.models) <= set(VARIANTS), "erf.models", "unknown variant")
    _check(cfg.erf.extent >= 32 and cfg.erf.extent % 32 == 0, "erf.extent", "must be a multiple of 32")
    _check(cfg.erf.n_samples >= 1, "erf.n_samples", "must be >= 1")
    _check(bool(cfg.erf.thresholds) and all(0 < t <= 1 for t in cfg.erf.thresholds), "erf.thresholds", "must be in (0, 1]")
    _check(cfg.gradcheck.seeds >= 1, "gradcheck.seeds", "must be >= 1")
    _check(cfg.gradcheck.tol > 0, "gradcheck.tol", "must be positive")
    steps = cfg.gradcheck.steps
    _check(bool(steps) and all(h > 0 for h in steps), "gradcheck.steps", "must be positive")
    _check(all(a > b for a, b in zip(steps, steps[1:])), "gradcheck.steps", "must be strictly decreasing")
    _check(cfg.gradcheck.order in (2, 4), "gradcheck.order", "must be 2 or 4")
    _check(cfg.gradcheck.max_probes >= 1, "gradcheck.max_probes", "must be >= 1")
    return cfg
