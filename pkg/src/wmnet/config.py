"""Experiment configuration as plain ``key=value`` text."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from wmnet.bench import DatasetSpec, parse_key_values
from wmnet.validation import ValidationError


@dataclass(frozen=True)
class ExperimentConfig:
    # component flags; ``attention`` selects the transformer core when cfm is off
    wunet: bool = True
    sawf: bool = True
    cfm: bool = True
    attention: bool = True
    w1: float = 0.1
    w2: float = 1.0
    widths: Tuple[int, ...] = (16, 32, 48, 64)
    head_width: int = 32
    epochs: int = 60
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    seeds: Tuple[int, ...] = (0, 1, 2)
    spec: str = "heavy"
    n_train: int = 0  # 0 keeps the dataset spec's count
    n_val: int = 0
    data_dir: str = ""
    output_dir: str = "runs/default"
    eval_every: int = 0  # 0 evaluates only after the last epoch

    def __post_init__(self):
        if self.sawf and self.core is None:
            raise ValidationError("sawf=on needs an interaction core: enable cfm or attention")
        if len(self.widths) != 4:
            raise ValidationError("the backbone has exactly 4 stages; widths needs 4 entries")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValidationError("epochs, batch_size and lr must be positive")

    @property
    def core(self) -> Optional[str]:
        if self.cfm:
            return "cfm"
        return "attention" if self.attention else None

    def dataset_spec(self) -> DatasetSpec:
        dspec = DatasetSpec.load(self.spec)
        if self.n_train:
            dspec = replace(dspec, n_train=self.n_train)
        if self.n_val:
            dspec = replace(dspec, n_val=self.n_val)
        return dspec

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "on" if value else "off"
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw = parse_key_values(text)
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {key: _coerce(key, value, known[key].default) for key, value in raw.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _coerce(key: str, value: str, default):
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in ("on", "true", "1", "yes"):
                return True
            if lowered in ("off", "false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ValidationError(f"bad value for {key}: {value!r}") from exc
