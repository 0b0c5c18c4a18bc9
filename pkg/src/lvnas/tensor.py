"""Dense float64 kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` values of dtype float64.  Every forward
primitive here has a matching ``*_backward`` that maps an upstream gradient
to gradients of its inputs; layers compose them explicitly.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np
from scipy.special import expit, ndtr

DTYPE = np.float64
LAYER_NORM_EPS = 1e-12
INIT_STD = 0.02

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_allocator_tuned = False


def tune_allocator() -> bool:
    """Keep freed activation buffers in the glibc heap instead of unmapping them.

    Training allocates and frees the same few-hundred-kilobyte temporaries
    every step; with the default thresholds each one is a fresh mmap whose
    page faults cost more than the arithmetic.  Idempotent; a no-op off glibc.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024) == 1
    ok &= mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024) == 1
    _allocator_tuned = bool(ok)
    return _allocator_tuned


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class NondeterministicError(RuntimeError):
    """A function under gradient check returned different values for the same input."""


@dataclass(eq=False)
class Parameter:
    """A trainable tensor together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def copy(self) -> "Parameter":
        return Parameter(self.value.copy())


# --------------------------------------------------------------------------- #
# Randomness
# --------------------------------------------------------------------------- #
def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """PCG64 generator; the same seed yields the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent child generators derived from ``seed``."""
    return [make_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def truncated_normal(
    rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0
) -> np.ndarray:
    """Normal(0, std) draws with every value rejected-and-redrawn outside ±bound·std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


# --------------------------------------------------------------------------- #
# Linear algebra
# --------------------------------------------------------------------------- #
def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    # one flat GEMM is much faster than a stack of small ones
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[1])


def matmul_backward(
    a: np.ndarray, b: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(dA, dB)`` of ``A @ B``; leading batch axes of ``A`` are summed into dB."""
    d2 = dout.reshape(-1, dout.shape[-1])
    da = (d2 @ b.T).reshape(a.shape)
    db = a.reshape(-1, a.shape[-1]).T @ d2
    return da, db


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = matmul(x, w)
    if b is not None:
        y += b
    return y


def linear_backward(x, w, dout, wgrad: np.ndarray, bgrad: np.ndarray | None = None):
    """Accumulate weight/bias gradients in place and return dx."""
    dx, dw = matmul_backward(x, w, dout)
    wgrad += dw
    if bgrad is not None:
        bgrad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx


# --------------------------------------------------------------------------- #
# Nonlinearities
# --------------------------------------------------------------------------- #
def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact GELU ``x·Φ(x)``; also returns Φ(x), which the backward pass reuses."""
    cdf = ndtr(x)
    return x * cdf, cdf


def gelu_backward(x: np.ndarray, cdf: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


class LayerNormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LAYER_NORM_EPS
) -> tuple[np.ndarray, LayerNormCache]:
    """Normalise over the last axis with population variance."""
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, LayerNormCache(xhat, inv_std)


def layer_norm_backward(
    dy: np.ndarray, cache: LayerNormCache, gamma: np.ndarray, dgamma: np.ndarray, dbeta: np.ndarray
) -> np.ndarray:
    xhat, inv_std = cache
    c = xhat.shape[-1]
    flat_dy = dy.reshape(-1, c)
    dgamma += (flat_dy * xhat.reshape(-1, c)).sum(axis=0)
    dbeta += flat_dy.sum(axis=0)
    dxhat = dy * gamma
    return inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns the output and the scaled keep-mask (None when inactive)."""
    if rate <= 0.0 or rng is None:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= np.float32(rate)
    keep = keep * (1.0 / (1.0 - rate))
    return x * keep, keep


# --------------------------------------------------------------------------- #
# Loss
# --------------------------------------------------------------------------- #
class CrossEntropyResult(NamedTuple):
    loss: float
    correct: np.ndarray  # bool, one flag per masked position in row-major order
    dlogits: np.ndarray


def cross_entropy_masked(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> CrossEntropyResult:
    """Mean negative log-likelihood over masked positions only.

    ``logits`` is ``(..., s, v)``; ``targets`` and ``mask`` share its leading
    shape.  ``dlogits`` is the gradient of the returned loss.
    """
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(
            f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy_masked: no masked positions to score")
    v = logits.shape[-1]
    sel = logits.reshape(-1, v)[mask.reshape(-1)]
    tgt = targets.reshape(-1)[mask.reshape(-1)]
    z = sel - sel.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    loss = float((logz - z[rows, tgt]).sum() / n)
    probs = np.exp(z - logz[:, None])
    probs[rows, tgt] -= 1.0
    dlogits = np.zeros_like(logits).reshape(-1, v)
    dlogits[mask.reshape(-1)] = probs / n
    correct = sel.argmax(axis=-1) == tgt
    return CrossEntropyResult(loss, correct, dlogits.reshape(logits.shape))


# --------------------------------------------------------------------------- #
# Gradient checking
# --------------------------------------------------------------------------- #
@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple[str, tuple[int, ...]] | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    fn: Callable[[], float],
    params: dict[str, Parameter] | Iterable[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn`` must return the scalar objective and accumulate its gradient into
    the parameters' ``grad`` fields.  The relative error of one element is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps elements whose true
    gradient is ~0 from turning round-off into a failure.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.zero_grad()
    f0 = fn()
    analytic = {k: p.grad.copy() for k, p in named.items()}
    for p in named.values():
        p.zero_grad()
    if fn() != f0:
        raise NondeterministicError("objective changed between two evaluations at the same point")

    worst, worst_at, count = 0.0, None, 0
    for name, p in named.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = analytic[name].reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_at = err, (name, np.unravel_index(i, p.shape))
    for p in named.values():
        p.zero_grad()
    return GradCheckReport(worst, worst_at, count, tol)
