"""Run configuration: defaults, flat ``key = value`` files, and flag overrides.

Precedence is flags > config file > defaults. A config file holds one
``key = value`` pair per line with keys named exactly as the fields of
:class:`RunConfig`; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    d_model: int = 512
    img_dim: int | None = None  # taken from the dataset header when unset
    txt_dim: int | None = None
    fusion_layers: int = 4
    fusion_heads: int = 8
    encoder_layers: int = 4
    encoder_heads: int = 4
    num_identities: int | None = None
    ablation_mode: str = "full"
    # training
    lr: float = 3.5e-4
    weight_decay: float = 1e-5
    bias_decay: float = 1e-7
    iterations: int = 180
    batch_size: int = 64
    p_identities: int = 16
    k_instances: int = 4
    margin: float = 0.3
    id_weight: float = 1.0
    triplet_weight: float = 1.0
    seed: int = 0
    # paths
    data: str | None = None
    checkpoint: str | None = None
    query: str | None = None
    gallery: str | None = None
    report: str | None = None
    loss_log: str | None = None
    # evaluation
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    # keys that came from a file or flag rather than the defaults
    explicit: frozenset = field(default=frozenset(), repr=False, compare=False)

    def validate(self) -> None:
        if not self.ks or any(k < 1 for k in self.ks) or any(
            a >= b for a, b in zip(self.ks, self.ks[1:])
        ):
            raise ConfigFileError(f"ks must be strictly increasing positive ints, got {self.ks}")

    def model_config(self, img_dim: int, txt_dim: int, num_identities: int) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            img_dim=img_dim if self.img_dim is None else self.img_dim,
            txt_dim=txt_dim if self.txt_dim is None else self.txt_dim,
            fusion_layers=self.fusion_layers,
            fusion_heads=self.fusion_heads,
            encoder_layers=self.encoder_layers,
            encoder_heads=self.encoder_heads,
            num_identities=num_identities if self.num_identities is None else self.num_identities,
            ablation_mode=self.ablation_mode,
        )

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        values = {n: getattr(self, n) for n in names}
        values.update(overrides)
        return TrainConfig(**values)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig) if f.name != "explicit")


def _field_type(name: str) -> str:
    return str(next(f.type for f in fields(RunConfig) if f.name == name))


def parse_value(name: str, raw: str) -> Any:
    kind = _field_type(name)
    raw = raw.strip()
    try:
        if kind.startswith("list[int]"):
            return [int(x) for x in raw.replace(",", " ").split()]
        if raw.lower() in ("none", "null", "") and "None" in kind:
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigFileError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def read_config_file(path) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_NAMES:
            raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def write_config_file(cfg: RunConfig, path) -> None:
    lines = []
    for name in FIELD_NAMES:
        value = getattr(cfg, name)
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_run_config(file_path=None, **flags) -> RunConfig:
    """Layer defaults, then ``file_path`` values, then non-None ``flags``."""
    values: dict[str, Any] = {}
    if file_path is not None:
        values.update(read_config_file(file_path))
    for key, value in flags.items():
        if key not in FIELD_NAMES:
            raise ConfigFileError(f"unknown setting {key!r}")
        if value is not None:
            values[key] = value
    cfg = dataclasses.replace(RunConfig(), **values, explicit=frozenset(values))
    cfg.validate()
    return cfg
