"""Run configuration: nested dataclasses with a strict JSON schema.

Precedence is command-line flags over file values over the defaults below.
Unknown keys and wrongly typed values raise :class:`ConfigError` carrying the
dotted path of the offending field.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    kind: str = "frequency"
    n: int = 512
    n_classes: int = 4
    size: int = 16
    channels: int | None = None
    noise: float = 0.08
    seed: int = 0
    images: str | None = None
    labels: str | None = None
    limit: int | None = None


@dataclass
class NetworkSection:
    search_cells: int = 4
    eval_cells: int = 8
    init_channels: int = 8
    stem: str = "single"
    dual_kernels: list[int] = field(default_factory=lambda: [3, 5])
    attention: bool = True
    se_reduction: int = 16
    aux_hidden: int = 128


@dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 16
    val_fraction: float = 0.5
    order: str = "second"
    xi: float = 0.025
    gamma: float = 3e-4
    arch_beta1: float = 0.5
    arch_beta2: float = 0.999
    arch_weight_decay: float = 1e-3
    lr_max: float = 0.025
    lr_min: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float | None = None


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    val_fraction: float = 0.15
    genotype: str | None = None
    lr_max: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    auxiliary: bool = True
    aux_weight: float = 0.4
    path_dropout_p: float = 0.2
    cutout_length: int | None = None  # None: 8 for 28x28, 16 for 32x32, size // 4 otherwise
    random_erasing_p: float = 0.0
    grad_clip: float | None = 5.0


@dataclass
class EvalConfig:
    checkpoint: str | None = None
    genotype: str | None = None
    batch_size: int = 64


@dataclass
class GradcheckConfig:
    eps: float = 1e-3
    threshold: float = 1e-4
    inject_fault: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        checks = [
            ("data.source", self.data.source in ("synthetic", "idx"), "must be 'synthetic' or 'idx'"),
            ("data.kind", self.data.kind in ("frequency", "channel"), "must be 'frequency' or 'channel'"),
            ("data.n", self.data.n > 0, "must be positive"),
            ("data.n_classes", self.data.n_classes >= 2, "must be at least 2"),
            ("network.stem", self.network.stem in ("single", "dual"), "must be 'single' or 'dual'"),
            ("network.dual_kernels", len(self.network.dual_kernels) == 2, "needs exactly two kernel sizes"),
            ("search.order", self.search.order in ("first", "second"), "must be 'first' or 'second'"),
            ("search.epochs", self.search.epochs >= 1, "must be at least 1"),
            ("search.batch_size", self.search.batch_size >= 1, "must be at least 1"),
            ("search.val_fraction", 0 < self.search.val_fraction < 1, "must lie in (0, 1)"),
            ("search.xi", self.search.xi >= 0, "must be non-negative"),
            ("search.gamma", self.search.gamma >= 0, "must be non-negative"),
            ("train.epochs", self.train.epochs >= 1, "must be at least 1"),
            ("train.batch_size", self.train.batch_size >= 1, "must be at least 1"),
            ("train.val_fraction", 0 < self.train.val_fraction < 1, "must lie in (0, 1)"),
            ("train.path_dropout_p", 0 <= self.train.path_dropout_p < 1, "must lie in [0, 1)"),
            ("train.random_erasing_p", 0 <= self.train.random_erasing_p <= 1, "must lie in [0, 1]"),
            ("gradcheck.eps", self.gradcheck.eps > 0, "must be positive"),
        ]
        if self.data.source == "idx":
            checks.append(("data.images", bool(self.data.images and self.data.labels),
                           "idx source needs both data.images and data.labels"))
        for path, ok, msg in checks:
            if not ok:
                raise ConfigError(path, msg)
        return self


_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _check_type(value, hint, path):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _check_type(value, inner, path)
    if origin is list:
        (inner,) = typing.get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    allowed = _SCALARS[hint]
    # bool is a subclass of int; refuse it for numeric fields
    if not isinstance(value, allowed) or (hint is not bool and isinstance(value, bool)):
        raise ConfigError(path, f"expected {hint.__name__}, got {type(value).__name__} {value!r}")
    return float(value) if hint is float else value


def from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        hint = hints[f.name]
        if is_dataclass(hint):
            kwargs[f.name] = from_dict(hint, data[f.name], sub)
        else:
            kwargs[f.name] = _check_type(data[f.name], hint, sub)
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then dotted-key ``overrides``."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        except OSError as exc:
            raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from exc
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(RunConfig, data).validate()


def auto_cutout_length(size: int) -> int:
    return {28: 8, 32: 16}.get(size, max(1, size // 4))


# Full-scale settings, constructible but far beyond desk budgets.
PRESETS = {
    "cifar10": {
        "network": {"search_cells": 8, "eval_cells": 20, "init_channels": 16},
        "search": {"epochs": 50, "batch_size": 32, "val_fraction": 0.5},
        "train": {"epochs": 600, "batch_size": 56, "auxiliary": True, "path_dropout_p": 0.2,
                  "cutout_length": 16},
    },
    "fashion_mnist": {
        "data": {"size": 28, "n_classes": 10},
        "network": {"search_cells": 8, "eval_cells": 20, "init_channels": 16},
        "search": {"epochs": 50, "batch_size": 32, "val_fraction": 0.4},
        "train": {"epochs": 600, "batch_size": 72, "val_fraction": 0.15, "path_dropout_p": 0.2,
                  "cutout_length": 8, "random_erasing_p": 0.5},
    },
    "compcars": {
        "network": {"search_cells": 6, "eval_cells": 16, "init_channels": 16},
        "search": {"epochs": 80, "batch_size": 32, "val_fraction": 0.4, "lr_max": 0.1},
        "train": {"epochs": 250, "batch_size": 72, "val_fraction": 0.3, "lr_max": 0.1},
    },
    "mio_tcd": {
        "network": {"search_cells": 6, "eval_cells": 14, "init_channels": 16},
        "search": {"batch_size": 32, "val_fraction": 0.35},
        "train": {"batch_size": 72, "val_fraction": 0.2},
    },
}
