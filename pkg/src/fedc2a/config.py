"""Experiment configuration: INI files with ``section.key=value`` overrides.

Every field lives in exactly one section.  :func:`echo` writes a complete
file (defaults included) that reproduces the run when parsed again.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, fields
from typing import Iterable, Mapping

from .data import CorpusSpec
from .errors import ValidationError
from .model import ModelConfig

METHODS = (
    "c2a",
    "c2a_unfactorized",
    "c2a_no_le",
    "c2a_no_ce",
    "c2a_no_norm",
    "adapter",
    "lora",
    "bitfit",
    "full",
)
PARTITIONS = ("dirichlet", "group")
LR_GRID = (5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2)

# best final accuracy over LR_GRID at beta=1.0, R=20 on the default corpus
DEFAULT_LR = {
    "c2a": 2e-2,
    "c2a_unfactorized": 1e-2,
    "c2a_no_le": 1e-2,
    "c2a_no_ce": 2e-2,
    "c2a_no_norm": 1e-2,
    "adapter": 1e-2,
    "lora": 2e-2,
    "bitfit": 2e-2,
    "full": 1e-3,
}


@dataclass(frozen=True)
class ExperimentConfig:
    # [experiment]
    method: str = "c2a"
    seed: int = 0
    targets: tuple[float, ...] = (0.5,)
    # [corpus]
    dataset: str = ""
    vocab_size: int = 256
    n_classes: int = 8
    n_groups: int = 5
    train_per_cell: int = 200
    test_per_cell: int = 50
    seq_len: int = 16
    signal: float = 0.35
    group_divergence: float = 0.9
    class_tokens: int = 4
    pretrain_size: int = 4000
    corpus_seed: int = 0
    test_fraction: float = 0.2
    # [partition]
    partition: str = "dirichlet"
    beta: float = 0.1
    n_clients: int = 20
    # [model]
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    r: int = 4
    t: int = 8
    s: int = 8
    pretrain_steps: int = 2000
    # [training]
    lr: float = 0.0  # 0 selects DEFAULT_LR[method]
    batch_size: int = 0  # 0 selects 16 (dirichlet) or 64 (group)
    local_epochs: int = 1
    rounds: int = 40
    fraction: float = 0.25
    weight_decay: float = 0.01
    workers: int = 1

    def __post_init__(self):
        validate(self)

    @property
    def effective_lr(self) -> float:
        return self.lr or DEFAULT_LR[self.method]

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or (64 if self.partition == "group" else 16)

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(
            vocab_size=self.vocab_size,
            n_classes=self.n_classes,
            n_groups=self.n_groups,
            train_per_cell=self.train_per_cell,
            test_per_cell=self.test_per_cell,
            seq_len=self.seq_len,
            signal=self.signal,
            group_divergence=self.group_divergence,
            class_tokens=self.class_tokens,
            pretrain_size=self.pretrain_size,
            seed=self.corpus_seed,
        )

    def model_config(self) -> ModelConfig:
        return method_model_config(self.method, self.backbone_config())

    def backbone_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            max_seq_len=self.seq_len,
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            r=self.r,
            n_classes=self.n_classes,
            t=self.t,
            s=self.s,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "experiment": ("method", "seed", "targets"),
    "corpus": (
        "dataset",
        "vocab_size",
        "n_classes",
        "n_groups",
        "train_per_cell",
        "test_per_cell",
        "seq_len",
        "signal",
        "group_divergence",
        "class_tokens",
        "pretrain_size",
        "corpus_seed",
        "test_fraction",
    ),
    "partition": ("partition", "beta", "n_clients"),
    "model": ("d", "n_layers", "n_heads", "d_ff", "r", "t", "s", "pretrain_steps"),
    "training": ("lr", "batch_size", "local_epochs", "rounds", "fraction", "weight_decay", "workers"),
}
_SECTION_OF = {k: sec for sec, keys in SECTIONS.items() for k in keys}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def method_model_config(method: str, base: ModelConfig) -> ModelConfig:
    """Model switches for each method name (ablations are c2a variants)."""
    mode = "c2a" if method.startswith("c2a") else method
    cfg = dataclasses.replace(base, peft_mode=mode)
    if method == "c2a_unfactorized":
        return dataclasses.replace(cfg, factorized=False, tied=False, normalized=False)
    if method == "c2a_no_le":
        return dataclasses.replace(cfg, use_label=False)
    if method == "c2a_no_ce":
        return dataclasses.replace(cfg, use_context=False)
    if method == "c2a_no_norm":
        return dataclasses.replace(cfg, normalized=False)
    return cfg


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ValidationError(name, msg)


def validate(c: ExperimentConfig) -> None:
    _require(c.method in METHODS, "method", f"unknown method {c.method!r}; expected one of {METHODS}")
    _require(c.partition in PARTITIONS, "partition", f"expected one of {PARTITIONS}, got {c.partition!r}")
    _require(c.beta > 0, "beta", f"must be positive, got {c.beta}")
    _require(c.n_clients >= 2, "n_clients", f"need at least two clients, got {c.n_clients}")
    _require(0 < c.fraction <= 1, "fraction", f"must lie in (0, 1], got {c.fraction}")
    _require(c.lr >= 0, "lr", f"must be non-negative (0 = method default), got {c.lr}")
    _require(c.batch_size >= 0, "batch_size", f"must be non-negative (0 = default), got {c.batch_size}")
    _require(c.local_epochs >= 0, "local_epochs", "must be non-negative")
    _require(c.rounds >= 0, "rounds", "must be non-negative")
    _require(c.workers >= 1, "workers", "must be at least 1")
    _require(c.pretrain_steps >= 0, "pretrain_steps", "must be non-negative")
    _require(0 < c.test_fraction < 1, "test_fraction", "must lie in (0, 1)")
    _require(all(0 <= x <= 1 for x in c.targets), "targets", "accuracy targets must lie in [0, 1]")
    for name in ("d", "n_layers", "n_heads", "d_ff", "r", "t", "s", "seq_len"):
        _require(getattr(c, name) >= 1, name, "must be positive")
    try:
        c.model_config()
    except Exception as exc:  # noqa: BLE001 - re-raised as a named-field error
        raise ValidationError("model", str(exc)) from None


def _coerce(name: str, raw: str):
    typ = _TYPES[name]
    raw = raw.strip()
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if typ == "str":
            return raw
        # targets
        return tuple(float(x) for x in raw.replace(",", " ").split()) if raw else ()
    except ValueError:
        raise ValidationError(name, f"cannot parse {raw!r} as {typ}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    """``["training.lr=1e-3", "beta=0.5"]`` -> {"lr": "1e-3", "beta": "0.5"}."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValidationError(item, "override must look like section.key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        section, _, name = key.rpartition(".")
        if name not in _SECTION_OF:
            raise ValidationError(key, "unknown configuration key")
        if section and _SECTION_OF[name] != section:
            raise ValidationError(key, f"{name!r} belongs to section [{_SECTION_OF[name]}]")
        out[name] = value
    return out


def parse_text(text: str, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError("config", str(exc).splitlines()[0]) from None
    values: dict[str, str] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValidationError(section, "unknown section")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ValidationError(f"{section}.{key}", "unknown configuration key")
            values[key] = value
    values.update(overrides or {})
    if "method" not in values:
        raise ValidationError("method", "required field is missing")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})


def parse_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_text(text, parse_overrides(overrides))


def materialize(c: ExperimentConfig) -> ExperimentConfig:
    """Replace the "pick a default" sentinels by the values actually used."""
    return c.replace(lr=c.effective_lr, batch_size=c.effective_batch_size)


def echo(c: ExperimentConfig) -> str:
    """Complete INI text for ``c``; parsing it gives back an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    c = materialize(c)
    for section, keys in SECTIONS.items():
        parser[section] = {k: _format(getattr(c, k)) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(c: ExperimentConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(c).items()}
