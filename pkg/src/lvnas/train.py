"""Training loops, validation masking and model/supernet persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from .architecture import Genome, ModelConfig, parse_genome, render_genome
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Corpus, MaskedBatch, apply_mlm_masking
from .model import Model
from .optim import Adam, lr_at
from .supernet import Supernet, supernet_train_step
from .model import mlm_step
from .config import TrainConfig
from .tensor import make_rng, spawn_rngs


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    paths: list[str] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(json.dumps(r) + "\n" for r in self.records), encoding="utf-8")


def mask_validation(val: Corpus, seed: int, cfg: TrainConfig) -> MaskedBatch:
    """The fixed masked validation set every candidate in a run is scored on."""
    rng = make_rng([seed, 0x56414C])
    return apply_mlm_masking(rng, val.sequences, cfg.mask_rate, cfg.mask_scheme, len(val.vocab))


def make_optimizer(params, cfg: TrainConfig) -> Adam:
    def schedule(t: int) -> float:
        return lr_at(t, cfg.lr, cfg.warmup_steps, cfg.steps)

    return Adam(params, schedule, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)


def _loop(step_fn, corpus: Corpus, cfg: TrainConfig, rngs, dropout: bool, log: TrainLog,
          stream: TextIO | None, steps: int | None):
    batch_rng, mask_rng, drop_rng = rngs
    n = len(corpus)
    window_loss, window_acc = [], []
    total = cfg.steps if steps is None else steps
    for step in range(1, total + 1):
        idx = batch_rng.integers(0, n, size=cfg.batch_size)
        batch = apply_mlm_masking(mask_rng, corpus.sequences[idx], cfg.mask_rate, cfg.mask_scheme, len(corpus.vocab))
        res = step_fn(batch, drop_rng if dropout else None)
        window_loss.append(res.loss)
        window_acc.append(res.accuracy)
        if step % cfg.log_every == 0 or step == total:
            rec = {"step": step, "loss": float(np.mean(window_loss)), "accuracy": float(np.mean(window_acc))}
            log.records.append(rec)
            if stream is not None:
                print(json.dumps(rec), file=stream, flush=True)
            window_loss.clear()
            window_acc.clear()
    return log


def train_model(
    model: Model, corpus: Corpus, cfg: TrainConfig, seed: int, *,
    stream: TextIO | None = None, steps: int | None = None,
) -> TrainLog:
    """Train a standalone model from its current weights with Adam and the warmup/decay schedule."""
    params = model.named_parameters()
    opt = make_optimizer(params, cfg)
    batch_rng, mask_rng, drop_rng = spawn_rngs(seed, 3)

    def step(batch, drop):
        res = mlm_step(model, batch, rng=drop)
        opt.step()
        return res

    return _loop(step, corpus, cfg, (batch_rng, mask_rng, drop_rng), model.cfg.dropout > 0, TrainLog(), stream, steps)


def pretrain_supernet(
    sn: Supernet, corpus: Corpus, cfg: TrainConfig, seed: int, *,
    stream: TextIO | None = None, steps: int | None = None,
    on_path: Callable[[Genome], None] | None = None,
) -> TrainLog:
    """Single-path training: one uniformly sampled path per step."""
    opt = make_optimizer(sn.named_parameters(), cfg)
    batch_rng, mask_rng, drop_rng, path_rng = spawn_rngs(seed, 4)
    log = TrainLog()

    def step(batch, drop):
        res, path = supernet_train_step(sn, path_rng, batch, opt, dropout_rng=drop)
        log.paths.append(render_genome(path))
        if on_path is not None:
            on_path(path)
        return res

    return _loop(step, corpus, cfg, (batch_rng, mask_rng, drop_rng), sn.cfg.dropout > 0, log, stream, steps)


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #
def _tensors(params) -> dict[str, np.ndarray]:
    return {name: p.value for name, p in params.items()}


def save_model(path, model: Model, extra: dict | None = None) -> None:
    meta = {"kind": "model", "genome": render_genome(model.genome), "model": model.cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, json.dumps(meta, sort_keys=True), _tensors(model.named_parameters()))


def save_supernet(path, sn: Supernet, extra: dict | None = None) -> None:
    meta = {"kind": "supernet", "model": sn.cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, json.dumps(meta, sort_keys=True), _tensors(sn.named_parameters()))


def _restore(params, tensors: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(tensors)
    extra = set(tensors) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, p in params.items():
        if tensors[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape} != {p.value.shape}")
        p.value[...] = tensors[name]


def load_model(path) -> tuple[Model, dict]:
    text, tensors = load_checkpoint(path)
    meta = json.loads(text)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a model")
    cfg = ModelConfig.from_dict(meta["model"])
    genome = parse_genome(meta["genome"], None)
    model = Model(genome, cfg, make_rng(0))
    _restore(model.named_parameters(), tensors)
    return model, meta


def load_supernet(path) -> tuple[Supernet, dict]:
    text, tensors = load_checkpoint(path)
    meta = json.loads(text)
    if meta.get("kind") != "supernet":
        raise CheckpointError(f"{path} holds a {meta.get('kind')!r}, not a supernet")
    sn = Supernet(ModelConfig.from_dict(meta["model"]), make_rng(0))
    _restore(sn.named_parameters(), tensors)
    return sn, meta
