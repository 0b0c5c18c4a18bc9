"""Genome encoding of layer type and order, presets, and parameter accounting."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_NUM_LAYERS = 24
BERT_VOCAB_SIZE = 30522


class LayerKind(enum.IntEnum):
    DC = 0
    SA = 1
    FF = 2

    @property
    def letter(self) -> str:
        return _LETTERS[self]

    @property
    def slot(self) -> str:
        return self.name.lower()


_LETTERS = {LayerKind.DC: "c", LayerKind.SA: "s", LayerKind.FF: "f"}
_FROM_CHAR = {
    "c": LayerKind.DC, "s": LayerKind.SA, "f": LayerKind.FF,
    "0": LayerKind.DC, "1": LayerKind.SA, "2": LayerKind.FF,
}
ALL_KINDS = frozenset(LayerKind)


class GenomeError(ValueError):
    pass


@dataclass(frozen=True, order=False)
class Genome:
    """A fixed-length sequence of layer kinds, bottom layer first."""

    kinds: tuple[LayerKind, ...]

    def __init__(self, kinds: Iterable[int | LayerKind]):
        object.__setattr__(self, "kinds", tuple(LayerKind(k) for k in kinds))

    def __len__(self) -> int:
        return len(self.kinds)

    def __iter__(self) -> Iterator[LayerKind]:
        return iter(self.kinds)

    def __getitem__(self, i: int) -> LayerKind:
        return self.kinds[i]

    def __str__(self) -> str:
        return render_genome(self)

    def __repr__(self) -> str:
        return f"Genome('{render_genome(self)}')"

    def codes(self) -> list[int]:
        return [int(k) for k in self.kinds]

    def count(self, kind: LayerKind) -> int:
        return self.kinds.count(kind)


def render_genome(g: Genome) -> str:
    return "".join(k.letter for k in g.kinds)


def parse_genome(text: str, n_layers: int | None = DEFAULT_NUM_LAYERS) -> Genome:
    """Read a genome from letters ``c/s/f`` (any case) or digits ``0/1/2``.

    Commas, spaces and brackets are ignored so Table-style lists such as
    ``"[0, 0, 1, ...]"`` parse too.  ``n_layers=None`` accepts any length.
    """
    kinds = []
    for pos, ch in enumerate(text):
        if ch in " ,[]\t\n":
            continue
        kind = _FROM_CHAR.get(ch.lower())
        if kind is None:
            raise GenomeError(f"invalid layer code {ch!r} at position {pos}")
        kinds.append(kind)
    if n_layers is not None and len(kinds) != n_layers:
        raise GenomeError(f"genome has {len(kinds)} layers, expected {n_layers}")
    return Genome(kinds)


_TABLE6 = {
    "sandwich": [1, 1, 1, 1, 1, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 2, 2, 2, 2, 2],
    "lv_bert_small": [0, 0, 1, 2, 2, 1, 0, 2, 2, 1, 0, 0, 1, 2, 0, 2, 1, 0, 2, 0, 1, 1, 2, 1],
}
PRESETS = ("interleaved", "sandwich", "lv_bert_small", "dynamicconv")


def preset_genome(name: str, n_layers: int = DEFAULT_NUM_LAYERS) -> Genome:
    """Named architectures. The alternating ones stretch to any even depth."""
    key = name.lower().replace("-", "_")
    if key in ("interleaved", "dynamicconv"):
        if n_layers % 2:
            raise GenomeError(f"{name} needs an even number of layers, got {n_layers}")
        first = LayerKind.SA if key == "interleaved" else LayerKind.DC
        return Genome([first, LayerKind.FF] * (n_layers // 2))
    if key in _TABLE6:
        if n_layers != DEFAULT_NUM_LAYERS:
            raise GenomeError(f"{name} is only defined for {DEFAULT_NUM_LAYERS} layers")
        return Genome(_TABLE6[key])
    raise GenomeError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")


def random_genome(
    rng: np.random.Generator, n_layers: int, allowed: Iterable[LayerKind] = ALL_KINDS
) -> Genome:
    choices = sorted(LayerKind(k) for k in set(allowed))
    if not choices:
        raise GenomeError("allowed layer-kind set is empty")
    idx = rng.integers(0, len(choices), size=n_layers)
    return Genome(choices[i] for i in idx)


@dataclass(frozen=True)
class ModelConfig:
    """Model dimensions. Defaults follow the small pre-training setup."""

    vocab_size: int = BERT_VOCAB_SIZE
    word_emb_size: int = 128
    hidden_size: int = 256
    num_heads: int = 4
    head_dim: int = 64
    ff_ratio: int = 4
    kernel_size: int = 9
    seq_len: int = 128
    max_position: int = 128
    dropout: float = 0.1
    num_layers: int = DEFAULT_NUM_LAYERS

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "dropout":
                continue
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {getattr(self, f.name)}")
        if self.num_heads * self.head_dim != self.hidden_size:
            raise ValueError(
                f"num_heads*head_dim ({self.num_heads}*{self.head_dim}) must equal hidden_size {self.hidden_size}"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.seq_len > self.max_position:
            raise ValueError(f"seq_len {self.seq_len} exceeds max_position {self.max_position}")

    @property
    def factorized(self) -> bool:
        return self.word_emb_size != self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


# --------------------------------------------------------------------------- #
# Parameter accounting
# --------------------------------------------------------------------------- #
def layer_param_count(kind: LayerKind, cfg: ModelConfig) -> int:
    c, k, h, r = cfg.hidden_size, cfg.kernel_size, cfg.num_heads, cfg.ff_ratio
    norm = 2 * c
    if kind is LayerKind.SA:
        return 4 * (c * c + c) + norm
    if kind is LayerKind.FF:
        return (c * r * c + r * c) + (r * c * c + c) + norm
    # GLU (two c×c with bias) + depthwise + pointwise + kernel generator + output
    return 2 * (c * c + c) + k * c + c * c + c * h * k + (c * c + c) + norm


def embedding_param_count(cfg: ModelConfig) -> int:
    """The vocabulary table, shared between input lookup and output logits."""
    return cfg.vocab_size * cfg.word_emb_size


def _non_layer_backbone(cfg: ModelConfig) -> int:
    e, c = cfg.word_emb_size, cfg.hidden_size
    n = cfg.max_position * e + 2 * e  # positions + embedding norm
    if cfg.factorized:
        n += e * c + c
    n += c * e + e + 2 * e + cfg.vocab_size  # head projection, head norm, output bias
    return n


def count_params(g: Genome | Sequence[LayerKind], cfg: ModelConfig, scope: str = "total") -> int:
    """Exact trainable-parameter count.

    ``embeddings`` is the word-embedding table; ``backbone`` is everything
    else (positions, projections, norms, layers, head); ``total`` is both.
    """
    if scope == "embeddings":
        return embedding_param_count(cfg)
    backbone = _non_layer_backbone(cfg) + sum(layer_param_count(LayerKind(k), cfg) for k in g)
    if scope == "backbone":
        return backbone
    if scope == "total":
        return backbone + embedding_param_count(cfg)
    raise ValueError(f"unknown scope {scope!r}; expected backbone, embeddings or total")
