"""Run configuration: model, training and search settings with named presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .architecture import ModelConfig
from .data import MASK_SCHEMES
from .search import SearchConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 10_000
    steps: int = 1_000_000
    batch_size: int = 128
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    mask_rate: float = 0.15
    mask_scheme: str = "pure_mask"
    log_every: int = 50

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise ConfigError("steps, batch_size and log_every must be positive")
        if not 0 <= self.warmup_steps < self.steps:
            raise ConfigError(f"warmup_steps must lie in [0, steps), got {self.warmup_steps}")
        if not 0.0 <= self.weight_decay < 1.0:
            raise ConfigError(f"weight_decay must lie in [0, 1), got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("Adam eps must be positive")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.mask_scheme not in MASK_SCHEMES:
            raise ConfigError(f"mask_scheme must be one of {MASK_SCHEMES}, got {self.mask_scheme!r}")


@dataclass(frozen=True)
class RunConfig:
    name: str
    model: ModelConfig
    supernet: TrainConfig
    train: TrainConfig
    search: SearchConfig
    val_fraction: float = 0.02

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(
                name=str(d.get("name", "custom")),
                model=ModelConfig.from_dict(d["model"]),
                supernet=_build(TrainConfig, d["supernet"], "supernet"),
                train=_build(TrainConfig, d["train"], "train"),
                search=_build(SearchConfig, d["search"], "search"),
                val_fraction=d.get("val_fraction", 0.02),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config section {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **sections) -> "RunConfig":
        return replace(self, **sections)


def _build(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    return cls(**d)


PAPER_SMALL = RunConfig(
    name="paper-small",
    model=ModelConfig(),
    supernet=TrainConfig(lr=2e-4, warmup_steps=10_000, steps=2_000_000, batch_size=128),
    train=TrainConfig(lr=5e-4, warmup_steps=10_000, steps=1_000_000, batch_size=128),
    search=SearchConfig(),
)

DESK = RunConfig(
    name="desk",
    model=ModelConfig(
        vocab_size=64, word_emb_size=64, hidden_size=64, num_heads=4, head_dim=16,
        ff_ratio=2, kernel_size=9, seq_len=64, max_position=64, dropout=0.1, num_layers=12,
    ),
    supernet=TrainConfig(lr=1e-3, warmup_steps=500, steps=5_000, batch_size=16),
    train=TrainConfig(lr=1e-3, warmup_steps=300, steps=3_000, batch_size=16),
    search=SearchConfig(population=20, iterations=8, n_crossover=10, n_mutation=10, mutation_prob=0.1, top_k=5),
    val_fraction=0.1,  # 2% of 2,000 sequences would leave only 40 for scoring candidates
)

PRESETS = {c.name: c for c in (PAPER_SMALL, DESK)}


def load_run_config(name_or_path: str) -> RunConfig:
    """A preset name (``paper-small``, ``desk``) or a JSON file in :meth:`RunConfig.to_dict` form."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"no preset or config file named {name_or_path!r}; presets: {', '.join(PRESETS)}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(d)
