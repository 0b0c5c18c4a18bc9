"""Weight-sharing supernet trained by uniform single-path sampling."""

from __future__ import annotations

import copy

import numpy as np

from .architecture import ALL_KINDS, Genome, LayerKind, ModelConfig, random_genome
from .data import MaskedBatch
from .layers import Layer, LayerConfig, build_layer
from .model import Embeddings, MlmHead, Model, StepResult, masked_accuracy, mlm_step
from .optim import Adam
from .tensor import Parameter


class PathError(ValueError):
    pass


class Supernet:
    """Every position holds a DC, an SA and an FF layer; embeddings and head are shared.

    Parameters are named ``pos{i}.{dc|sa|ff}.{param}``, ``emb.*`` and ``head.*``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embeddings = Embeddings(cfg, rng)
        lcfg = LayerConfig.from_model(cfg)
        self.slots: list[dict[LayerKind, Layer]] = [
            {kind: build_layer(kind, lcfg, rng) for kind in LayerKind} for _ in range(cfg.num_layers)
        ]
        self.head = MlmHead(cfg, rng)

    @property
    def num_layers(self) -> int:
        return len(self.slots)

    def named_parameters(self) -> dict[str, Parameter]:
        out = {f"emb.{k}": p for k, p in self.embeddings.params.items()}
        for i, slot in enumerate(self.slots):
            for kind in LayerKind:
                out.update({f"pos{i}.{kind.slot}.{k}": p for k, p in slot[kind].params.items()})
        out.update({f"head.{k}": p for k, p in self.head.params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def _check_path(self, path: Genome) -> None:
        if len(path) != self.num_layers:
            raise PathError(f"path has {len(path)} layers, supernet has {self.num_layers}")

    def path_model(self, path: Genome) -> Model:
        """A Model view whose parameters *are* the selected slots (no copy)."""
        self._check_path(path)
        layers = [slot[LayerKind(k)] for slot, k in zip(self.slots, path)]
        return Model(path, self.cfg, embeddings=self.embeddings, layers=layers, head=self.head)

    def forward(self, path: Genome, tokens, *, rng=None) -> np.ndarray:
        return self.path_model(path).forward(tokens, rng=rng)


def sample_path(rng: np.random.Generator, n_layers: int) -> Genome:
    """Each position independently uniform over {DC, SA, FF}."""
    if n_layers < 1:
        raise PathError("path length must be at least 1")
    return random_genome(rng, n_layers, ALL_KINDS)


def supernet_forward(sn: Supernet, path: Genome, tokens) -> np.ndarray:
    return sn.forward(path, tokens)


def supernet_train_step(
    sn: Supernet,
    path_rng: np.random.Generator,
    batch: MaskedBatch,
    optimizer: Adam,
    *,
    dropout_rng: np.random.Generator | None = None,
    path: Genome | None = None,
) -> tuple[StepResult, Genome]:
    """Sample one path (unless given), backprop through it and update only its parameters."""
    if path is None:
        path = sample_path(path_rng, sn.num_layers)
    model = sn.path_model(path)
    result = mlm_step(model, batch, rng=dropout_rng)
    optimizer.step(model.named_parameters().keys())
    return result, path


def inherit_weights(sn: Supernet, g: Genome) -> Model:
    """Deep copy of the selected slots plus shared embeddings and head."""
    view = sn.path_model(g)
    return Model(
        g, sn.cfg,
        embeddings=copy.deepcopy(view.embeddings),
        layers=copy.deepcopy(view.layers),
        head=copy.deepcopy(view.head),
    )


def evaluate_mlm_accuracy(model: Model, val: MaskedBatch, batch_size: int = 64) -> float:
    """Masked-token accuracy on a pre-masked validation set (eval mode)."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    correct, total = masked_accuracy(model, val, batch_size)
    if total == 0:
        raise ValueError("validation set has no masked positions")
    return correct / total


def evaluate_path(sn: Supernet, path: Genome, val: MaskedBatch, batch_size: int = 64) -> float:
    return evaluate_mlm_accuracy(sn.path_model(path), val, batch_size)
