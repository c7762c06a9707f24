"""Run configuration: a JSON document with strict key checking.

Every section and key is optional; missing keys take the defaults below.
Unknown sections or keys raise :class:`ConfigError`.

.. code-block:: json

    {
      "data":  {"input": "", "format": "csv", "min_session_len": 2, "min_item_freq": 5,
                "top_k_items": 0, "split": "last-fraction:0.2", "validation_fraction": 0.2},
      "model": {"d": 256, "L": 3, "H": 4, "sigma": 12.0, "p": 4.0, "variant": "full"},
      "train": {"lr": 0.001, "batch_size": 100, "max_epochs": 30, "patience": 3, "seed": 0,
                "weight_decay": 0.0},
      "eval":  {"cutoffs": [5, 10, 20], "buckets": "1-3,4-6,7+", "batch_size": 500},
      "probe": {"lam": 0.0, "threshold": 0.01, "matrices": ["merge", "head_query", "head_key"],
                "epochs": 10, "noise_dims": 0},
      "sweep": {"L": [1, 2, 3], "H": [1], "lr": []}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataSection:
    input: str = ""
    format: str = "csv"
    min_session_len: int = 2
    min_item_freq: int = 5
    top_k_items: int = 0
    split: str = "last-fraction:0.2"
    validation_fraction: float = 0.2


@dataclass
class ModelSection:
    d: int = 256
    L: int = 3
    H: int = 4
    sigma: float = 12.0
    p: float = 4.0
    variant: str = "full"


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 100
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0
    weight_decay: float = 0.0


@dataclass
class EvalSection:
    cutoffs: list = field(default_factory=lambda: [5, 10, 20])
    buckets: str = "1-3,4-6,7+"
    batch_size: int = 500


@dataclass
class ProbeSection:
    lam: float = 0.0
    threshold: float = 0.01
    matrices: list = field(default_factory=lambda: ["merge", "head_query", "head_key"])
    epochs: int = 10
    noise_dims: int = 0


@dataclass
class SweepSection:
    L: list = field(default_factory=lambda: [1, 2, 3])
    H: list = field(default_factory=lambda: [1])
    lr: list = field(default_factory=list)


SECTIONS = {
    "data": DataSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "probe": ProbeSection,
    "sweep": SweepSection,
}


def _coerce(value, default, where):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


@dataclass
class Config:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @classmethod
    def from_dict(cls, doc: dict) -> "Config":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls()
        for section, values in doc.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            target = getattr(cfg, section)
            known = {f.name for f in fields(target)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown key {section}.{key}")
                setattr(target, key, _coerce(value, getattr(target, key), f"{section}.{key}"))
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def set(self, dotted: str, raw: str) -> None:
        """Apply a ``section.key=value`` override; ``value`` is parsed as JSON when possible."""
        try:
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"override {dotted!r} must look like section.key") from None
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        merged = self.to_dict()
        merged.setdefault(section, {})[key] = value
        new = Config.from_dict(merged)
        self.__dict__.update(new.__dict__)


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return Config.from_dict(doc)
