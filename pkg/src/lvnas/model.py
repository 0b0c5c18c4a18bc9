"""Masked-language model assembled from a genome.

Pipeline: token + position embeddings, LayerNorm, an input projection when
the word-embedding width differs from the hidden width, the genome's layer
stack bottom-up, then an MLM head whose vocabulary logits reuse the token
table (weight tying).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .architecture import Genome, LayerKind, ModelConfig
from .layers import Layer, LayerConfig, build_layer
from .tensor import (
    Parameter,
    cross_entropy_masked,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    make_rng,
    truncated_normal,
)


class TokenRangeError(ValueError):
    pass


class Embeddings:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        e, c = cfg.word_emb_size, cfg.hidden_size
        self.params = {
            "token_table": Parameter(truncated_normal(rng, (cfg.vocab_size, e))),
            "position_table": Parameter(truncated_normal(rng, (cfg.max_position, e))),
            "ln_gamma": Parameter(np.ones(e)),
            "ln_beta": Parameter(np.zeros(e)),
        }
        if cfg.factorized:
            self.params["w_in"] = Parameter(truncated_normal(rng, (e, c)))
            self.params["b_in"] = Parameter(np.zeros(c))

    def forward(self, tokens: np.ndarray):
        p = self.params
        s = tokens.shape[-1]
        x = p["token_table"].value[tokens] + p["position_table"].value[:s]
        y, ln = layer_norm(x, p["ln_gamma"].value, p["ln_beta"].value)
        out = linear(y, p["w_in"].value, p["b_in"].value) if self.cfg.factorized else y
        return out, (tokens, y, ln)

    def backward(self, dout, cache) -> None:
        tokens, y, ln = cache
        p = self.params
        if self.cfg.factorized:
            dout = linear_backward(y, p["w_in"].value, dout, p["w_in"].grad, p["b_in"].grad)
        dx = layer_norm_backward(dout, ln, p["ln_gamma"].value, p["ln_gamma"].grad, p["ln_beta"].grad)
        e = dx.shape[-1]
        s = tokens.shape[-1]
        p["position_table"].grad[:s] += dx.reshape(-1, s, e).sum(axis=0)
        np.add.at(p["token_table"].grad, tokens.reshape(-1), dx.reshape(-1, e))


class MlmHead:
    """hidden -> emb projection, GELU, LayerNorm, then logits against the token table."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        e, c = cfg.word_emb_size, cfg.hidden_size
        self.params = {
            "w_proj": Parameter(truncated_normal(rng, (c, e))),
            "b_proj": Parameter(np.zeros(e)),
            "ln_gamma": Parameter(np.ones(e)),
            "ln_beta": Parameter(np.zeros(e)),
            "out_bias": Parameter(np.zeros(cfg.vocab_size)),
        }

    def forward(self, x, table: Parameter):
        p = self.params
        a = linear(x, p["w_proj"].value, p["b_proj"].value)
        g, cdf = gelu(a)
        hn, ln = layer_norm(g, p["ln_gamma"].value, p["ln_beta"].value)
        logits = hn @ table.value.T + p["out_bias"].value
        return logits, (x, a, cdf, hn, ln)

    def backward(self, dlogits, cache, table: Parameter) -> np.ndarray:
        x, a, cdf, hn, ln = cache
        p = self.params
        v = dlogits.shape[-1]
        flat = dlogits.reshape(-1, v)
        p["out_bias"].grad += flat.sum(axis=0)
        table.grad += flat.T @ hn.reshape(-1, hn.shape[-1])
        dhn = dlogits @ table.value
        dg = layer_norm_backward(dhn, ln, p["ln_gamma"].value, p["ln_gamma"].grad, p["ln_beta"].grad)
        da = gelu_backward(a, cdf, dg)
        return linear_backward(x, p["w_proj"].value, da, p["w_proj"].grad, p["b_proj"].grad)


@dataclass
class StepResult:
    loss: float
    accuracy: float
    n_masked: int
    n_correct: int


class Model:
    """A standalone network for one genome.

    Parameters are named ``emb.*``, ``head.*`` and ``pos{i}.{dc|sa|ff}.*``,
    which is also the supernet's naming for the same slots.
    """

    def __init__(
        self,
        genome: Genome,
        cfg: ModelConfig,
        rng: np.random.Generator | int | None = None,
        *,
        embeddings: Embeddings | None = None,
        layers: Sequence[Layer] | None = None,
        head: MlmHead | None = None,
    ):
        self.genome = genome
        self.cfg = cfg
        if not isinstance(rng, np.random.Generator):
            rng = make_rng(0 if rng is None else rng)
        self.embeddings = embeddings or Embeddings(cfg, rng)
        lcfg = LayerConfig.from_model(cfg)
        self.layers = list(layers) if layers is not None else [build_layer(k, lcfg, rng) for k in genome]
        self.head = head or MlmHead(cfg, rng)
        if len(self.layers) != len(genome):
            raise ValueError("layer list does not match genome length")
        for i, (kind, layer) in enumerate(zip(genome, self.layers)):
            if layer.kind is not LayerKind(kind):
                raise ValueError(f"layer {i} is {layer.kind.name}, genome says {LayerKind(kind).name}")

    def named_parameters(self) -> dict[str, Parameter]:
        out = {f"emb.{k}": p for k, p in self.embeddings.params.items()}
        for i, layer in enumerate(self.layers):
            out.update({f"pos{i}.{layer.kind.slot}.{k}": p for k, p in layer.params.items()})
        out.update({f"head.{k}": p for k, p in self.head.params.items()})
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.shape[-1] > self.cfg.max_position:
            raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_position {self.cfg.max_position}")
        bad = np.argwhere((tokens < 0) | (tokens >= self.cfg.vocab_size))
        if bad.size:
            where = tuple(int(i) for i in bad[0])
            raise TokenRangeError(
                f"token id {int(tokens[where])} at position {where} outside vocabulary of {self.cfg.vocab_size}"
            )
        return tokens

    def forward_with_cache(self, tokens, *, rng: np.random.Generator | None = None):
        """Logits and the backward cache. Passing ``rng`` switches on dropout (train mode)."""
        tokens = self._check_tokens(tokens)
        x, emb_cache = self.embeddings.forward(tokens)
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, rng=rng)
            caches.append(c)
        logits, head_cache = self.head.forward(x, self.embeddings.params["token_table"])
        return logits, (emb_cache, caches, head_cache)

    def forward(self, tokens, *, rng: np.random.Generator | None = None) -> np.ndarray:
        return self.forward_with_cache(tokens, rng=rng)[0]

    __call__ = forward

    def backward(self, dlogits: np.ndarray, cache) -> None:
        emb_cache, caches, head_cache = cache
        table = self.embeddings.params["token_table"]
        dx = self.head.backward(dlogits, head_cache, table)
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dx = layer.backward(dx, c)
        self.embeddings.backward(dx, emb_cache)


def mlm_step(model: Model, batch, *, rng: np.random.Generator | None = None) -> StepResult:
    """Zero gradients, run forward/backward on a masked batch, leave gradients in the parameters."""
    model.zero_grad()
    logits, cache = model.forward_with_cache(batch.inputs, rng=rng)
    ce = cross_entropy_masked(logits, batch.targets, batch.mask)
    model.backward(ce.dlogits, cache)
    n = int(ce.correct.size)
    k = int(ce.correct.sum())
    return StepResult(ce.loss, k / n, n, k)


def masked_accuracy(model: Model, batch, batch_size: int = 64) -> tuple[int, int]:
    """``(correct, total)`` over the masked positions of ``batch`` in eval mode."""
    correct = total = 0
    for start in range(0, batch.inputs.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        m = batch.mask[sl]
        if not m.any():
            continue
        logits = model.forward(batch.inputs[sl])
        pred = logits.argmax(axis=-1)
        correct += int((pred[m] == batch.targets[sl][m]).sum())
        total += int(m.sum())
    return correct, total
