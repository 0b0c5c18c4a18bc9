"""Finite-difference gradient checks for each layer kind and for a whole tiny model."""

from __future__ import annotations

from .architecture import LayerKind, ModelConfig, parse_genome
from .data import apply_mlm_masking
from .layers import LayerConfig, build_layer
from .model import Model
from .tensor import GradCheckReport, Parameter, cross_entropy_masked, grad_check, make_rng

TINY_LAYER = LayerConfig(hidden_size=8, num_heads=2, head_dim=4, ff_ratio=2, kernel_size=3, seq_len=5)
TINY_MODEL = ModelConfig(
    vocab_size=11, word_emb_size=6, hidden_size=8, num_heads=2, head_dim=4, ff_ratio=2,
    kernel_size=3, seq_len=6, max_position=6, dropout=0.0, num_layers=4,
)
LAYER_NAMES = {"sa": LayerKind.SA, "ff": LayerKind.FF, "dc": LayerKind.DC}


def check_layer(kind: LayerKind | str, seed: int = 0, tol: float = 1e-4, h: float = 1e-5,
                cfg: LayerConfig = TINY_LAYER, batch: int = 2) -> GradCheckReport:
    """Check parameter and input gradients of one layer under a random linear read-out."""
    if isinstance(kind, str):
        kind = LAYER_NAMES[kind]
    rng = make_rng(seed)
    layer = build_layer(kind, cfg, rng)
    # larger weights than the 0.02 init so every path carries signal
    for p in layer.params.values():
        p.value[...] = rng.normal(0.0, 0.5, p.shape)
    x = Parameter(rng.normal(size=(batch, cfg.seq_len, cfg.hidden_size)))
    probe = rng.normal(size=x.shape)

    def objective() -> float:
        out, cache = layer.forward(x.value)
        x.grad += layer.backward(probe, cache)
        return float((out * probe).sum())

    return grad_check(objective, {"input": x, **layer.params}, h=h, tol=tol)


def check_model(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, genome: str = "csfs",
                cfg: ModelConfig = TINY_MODEL, batch: int = 2) -> GradCheckReport:
    """Check every parameter of a small model (embeddings, all three layer kinds, tied head) through the masked loss."""
    rng = make_rng(seed)
    model = Model(parse_genome(genome, cfg.num_layers), cfg, rng)
    for name, p in model.named_parameters().items():
        if not name.endswith(("ln_gamma", "ln_beta")):
            p.value[...] = rng.normal(0.0, 0.5, p.shape)
    tokens = rng.integers(3, cfg.vocab_size, size=(batch, cfg.seq_len))
    batch_ = apply_mlm_masking(rng, tokens, 0.5)

    def objective() -> float:
        logits, cache = model.forward_with_cache(batch_.inputs)
        ce = cross_entropy_masked(logits, batch_.targets, batch_.mask)
        model.backward(ce.dlogits, cache)
        return ce.loss

    return grad_check(objective, model.named_parameters(), h=h, tol=tol)
