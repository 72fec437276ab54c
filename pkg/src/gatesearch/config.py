"""Experiment configuration: schema, text parser, and canonical serializer.

The on-disk format is sectioned ``key = value`` text. Unknown keys are
rejected with their line number and full key path; the serializer emits a
canonical form that round-trips byte-identically through the parser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = [
    "SearchSpace", "DatasetConfig", "StageConfig", "SearchStageConfig",
    "SearchConfig", "parse_config", "parse_config_text", "serialize_config",
]

_KERNELS = (1, 3, 5, 7, 9, 11)
_ACTIVATIONS = ("relu", "prelu", "tanh")
_CONV_TYPES = ("normal", "depthwise")
_BACKBONES = ("plain-cnn", "vgg16-cifar")
_RESOURCES = ("parameters", "flops", "latency")
_OPTIMIZERS = ("sgd", "adam")
_DATASET_KINDS = ("synthetic-blobs", "mnist-idx")


@dataclass
class SearchSpace:
    conv_types: tuple = ("normal",)
    kernels: tuple = (3,)
    activations: tuple = ("relu",)
    norm: str = "bn"


@dataclass
class DatasetConfig:
    kind: str = "synthetic-blobs"
    n_classes: int = 4
    train_samples: int = 2048
    test_samples: int = 512
    image_size: int = 16
    channels: int = 1
    noise: float = 0.05
    seed: int | None = None
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None


@dataclass
class StageConfig:
    epochs: int = 5
    lr: float = 0.01
    optimizer: str = "sgd"
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class SearchStageConfig(StageConfig):
    epochs: int = 40
    gate_lr: float = 1.0
    lambda_: float = 1e-9
    resource: str = "flops"
    target: float | None = None
    target_fraction: float | None = None
    latency_profile: str | None = None


@dataclass
class SearchConfig:
    seed: int = 0
    backbone: str = "plain-cnn"
    gate_gradient: str = "binary"
    search_space: SearchSpace = field(default_factory=SearchSpace)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    search: SearchStageConfig = field(default_factory=SearchStageConfig)
    finetune: StageConfig = field(default_factory=lambda: StageConfig(epochs=5, lr=0.001))


# -- field codecs ------------------------------------------------------------

def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _opt(parse):
    def inner(s):
        return None if s == "none" else parse(s)
    return inner


def _str(s):
    return s


def _choice(options):
    def inner(s):
        if s not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}, got {s!r}")
        return s
    return inner


def _int_list(s):
    if not s.strip():
        return ()
    return tuple(int(v.strip()) for v in s.split(","))


def _str_list(s):
    if not s.strip():
        return ()
    return tuple(v.strip() for v in s.split(","))


def _fmt(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (attr, parse)
_SCHEMA = {
    "": {
        "seed": ("seed", _int),
        "backbone": ("backbone", _choice(_BACKBONES)),
        "gate_gradient": ("gate_gradient", _choice(("binary", "surrogate"))),
    },
    "search_space": {
        "conv_types": ("conv_types", _str_list),
        "kernels": ("kernels", _int_list),
        "activations": ("activations", _str_list),
        "norm": ("norm", _choice(("bn", "none"))),
    },
    "dataset": {
        "kind": ("kind", _choice(_DATASET_KINDS)),
        "n_classes": ("n_classes", _int),
        "train_samples": ("train_samples", _int),
        "test_samples": ("test_samples", _int),
        "image_size": ("image_size", _int),
        "channels": ("channels", _int),
        "noise": ("noise", _float),
        "seed": ("seed", _opt(_int)),
        "train_images": ("train_images", _opt(_str)),
        "train_labels": ("train_labels", _opt(_str)),
        "test_images": ("test_images", _opt(_str)),
        "test_labels": ("test_labels", _opt(_str)),
        "train_limit": ("train_limit", _opt(_int)),
        "test_limit": ("test_limit", _opt(_int)),
    },
    "pretrain": {
        "epochs": ("epochs", _int),
        "lr": ("lr", _float),
        "optimizer": ("optimizer", _choice(_OPTIMIZERS)),
        "batch_size": ("batch_size", _int),
        "momentum": ("momentum", _float),
        "weight_decay": ("weight_decay", _float),
    },
    "search": {
        "epochs": ("epochs", _int),
        "lr": ("lr", _float),
        "optimizer": ("optimizer", _choice(_OPTIMIZERS)),
        "batch_size": ("batch_size", _int),
        "momentum": ("momentum", _float),
        "weight_decay": ("weight_decay", _float),
        "gate_lr": ("gate_lr", _float),
        "lambda": ("lambda_", _float),
        "resource": ("resource", _choice(_RESOURCES)),
        "target": ("target", _opt(_float)),
        "target_fraction": ("target_fraction", _opt(_float)),
        "latency_profile": ("latency_profile", _opt(_str)),
    },
    "finetune": {
        "epochs": ("epochs", _int),
        "lr": ("lr", _float),
        "optimizer": ("optimizer", _choice(_OPTIMIZERS)),
        "batch_size": ("batch_size", _int),
        "momentum": ("momentum", _float),
        "weight_decay": ("weight_decay", _float),
    },
}

_SECTION_ATTR = {"": None, "search_space": "search_space", "dataset": "dataset",
                 "pretrain": "pretrain", "search": "search", "finetune": "finetune"}


def parse_config_text(text: str, source: str = "<config>") -> SearchConfig:
    config = SearchConfig()
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA or section == "":
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        path = f"{section}.{key}" if section else key
        table = _SCHEMA[section]
        if key not in table:
            raise ConfigError(f"{source}:{lineno}: unknown key {path!r}")
        attr, parse = table[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {path}: {exc}") from exc
        target = config if section == "" else getattr(config, _SECTION_ATTR[section])
        setattr(target, attr, parsed)
    validate_config(config)
    return config


def parse_config(path) -> SearchConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def validate_config(config: SearchConfig) -> None:
    sp = config.search_space
    if not sp.kernels:
        raise ConfigError("search_space.kernels: must not be empty")
    for k in sp.kernels:
        if k not in _KERNELS:
            raise ConfigError(f"search_space.kernels: kernel must be one of 1,3,5,7,9,11, got {k}")
    if not sp.activations:
        raise ConfigError("search_space.activations: must not be empty")
    for a in sp.activations:
        if a not in _ACTIVATIONS:
            raise ConfigError(
                f"search_space.activations: must be a subset of {', '.join(_ACTIVATIONS)}, got {a!r}")
    if not sp.conv_types:
        raise ConfigError("search_space.conv_types: must not be empty")
    for c in sp.conv_types:
        if c not in _CONV_TYPES:
            raise ConfigError(
                f"search_space.conv_types: must be a subset of {', '.join(_CONV_TYPES)}, got {c!r}")

    ds = config.dataset
    if ds.kind == "synthetic-blobs":
        if ds.n_classes < 2:
            raise ConfigError(f"dataset.n_classes: need at least 2 classes, got {ds.n_classes}")
        if ds.train_samples < 1 or ds.test_samples < 1:
            raise ConfigError("dataset: train_samples and test_samples must be >= 1")
        if ds.image_size < 8:
            raise ConfigError(f"dataset.image_size: must be >= 8, got {ds.image_size}")
        if ds.channels not in (1, 3):
            raise ConfigError(f"dataset.channels: must be 1 or 3, got {ds.channels}")
        if ds.noise < 0:
            raise ConfigError(f"dataset.noise: must be >= 0, got {ds.noise}")
    else:
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if getattr(ds, name) is None:
                raise ConfigError(f"dataset.{name}: required for kind mnist-idx")

    for name in ("pretrain", "search", "finetune"):
        st = getattr(config, name)
        if st.epochs < 0:
            raise ConfigError(f"{name}.epochs: must be >= 0, got {st.epochs}")
        if st.lr <= 0:
            raise ConfigError(f"{name}.lr: must be > 0, got {st.lr}")
        if st.batch_size < 1:
            raise ConfigError(f"{name}.batch_size: must be >= 1, got {st.batch_size}")
        if st.weight_decay < 0 or st.momentum < 0:
            raise ConfigError(f"{name}: momentum and weight_decay must be >= 0")

    se = config.search
    if se.lambda_ < 0:
        raise ConfigError(f"search.lambda: must be >= 0, got {se.lambda_}")
    if se.gate_lr <= 0:
        raise ConfigError(f"search.gate_lr: must be > 0, got {se.gate_lr}")
    if se.target is not None and se.target_fraction is not None:
        raise ConfigError("search.target and search.target_fraction are mutually exclusive")
    if se.target is not None and se.target <= 0:
        raise ConfigError(f"search.target: must be > 0, got {se.target}")
    if se.target_fraction is not None and not (0 < se.target_fraction <= 1):
        raise ConfigError(f"search.target_fraction: must be in (0, 1], got {se.target_fraction}")
    if se.resource == "latency" and se.latency_profile is None:
        raise ConfigError("search.latency_profile: required when search.resource = latency")


def serialize_config(config: SearchConfig) -> str:
    """Canonical text form; parsing it yields an equal config byte-for-byte."""
    lines = []
    for section, table in _SCHEMA.items():
        if section:
            lines.append("")
            lines.append(f"[{section}]")
        holder = config if section == "" else getattr(config, _SECTION_ATTR[section])
        for key, (attr, _) in table.items():
            lines.append(f"{key} = {_fmt(getattr(holder, attr))}")
    return "\n".join(lines) + "\n"
