"""Self-attention, feed-forward and dynamic-convolution layers.

Every layer maps ``(s, c)`` or ``(batch, s, c)`` activations to the same
shape and ends in ``Norm(sublayer(I) + I)``.  Forward passes return a cache
that the matching ``backward`` consumes; parameter gradients accumulate
into each :class:`~lvnas.tensor.Parameter`.

Sequence windows are zero-padded: positions outside ``[0, s)`` contribute
zero vectors to both the depthwise and the lightweight convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .architecture import LayerKind, ModelConfig
from .tensor import (
    Parameter,
    ShapeError,
    dropout,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    linear,
    linear_backward,
    sigmoid,
    softmax_backward,
    softmax_lastdim,
    truncated_normal,
)


@dataclass(frozen=True)
class LayerConfig:
    hidden_size: int = 256
    num_heads: int = 4
    head_dim: int = 64
    ff_ratio: int = 4
    kernel_size: int = 9
    seq_len: int = 128
    dropout: float = 0.0

    def __post_init__(self) -> None:
        for name in ("hidden_size", "num_heads", "head_dim", "ff_ratio", "kernel_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_heads * self.head_dim != self.hidden_size:
            raise ValueError("num_heads * head_dim must equal hidden_size")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "LayerConfig":
        return cls(
            cfg.hidden_size, cfg.num_heads, cfg.head_dim, cfg.ff_ratio,
            cfg.kernel_size, cfg.seq_len, cfg.dropout,
        )


# --------------------------------------------------------------------------- #
# Convolution primitives
# --------------------------------------------------------------------------- #
def _pad_seq(x: np.ndarray, half: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[-2] = (half, half)
    return np.pad(x, pad)


def depthwise_conv(v: np.ndarray, w_dep: np.ndarray) -> np.ndarray:
    """``U[i] = sum_j w_dep[j] * v[i + j - (k-1)/2]`` over the sequence axis (-2)."""
    k, s = w_dep.shape[0], v.shape[-2]
    vp = _pad_seq(v, k // 2)
    out = w_dep[0] * vp[..., 0:s, :]
    for j in range(1, k):
        out += w_dep[j] * vp[..., j : j + s, :]
    return out


def depthwise_conv_backward(v, w_dep, du, dw_dep) -> np.ndarray:
    k, s = w_dep.shape[0], v.shape[-2]
    half = k // 2
    vp = _pad_seq(v, half)
    dvp = np.zeros_like(vp)
    c = v.shape[-1]
    du2 = du.reshape(-1, s, c)
    vp2 = vp.reshape(-1, s + 2 * half, c)
    for j in range(k):
        dw_dep[j] += np.einsum("bsc,bsc->c", vp2[:, j : j + s], du2)
        dvp[..., j : j + s, :] += w_dep[j] * du
    return dvp[..., half : half + s, :]


def separable_conv(v: np.ndarray, w_dep: np.ndarray, w_poi: np.ndarray) -> np.ndarray:
    """Depthwise convolution over positions followed by a pointwise projection."""
    return depthwise_conv(v, w_dep) @ w_poi


def lightweight_conv(vh: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Per-head, per-position weighted window sum.

    ``vh`` is ``(..., h, s, d)`` and ``kernels`` is ``(..., h, s, k)``;
    ``C[p, i] = sum_j kernels[p, i, j] * vh[p, i + j - (k-1)/2]``.
    """
    if vh.shape[:-1] != kernels.shape[:-1]:
        raise ShapeError(f"lightweight_conv: values {vh.shape} vs kernels {kernels.shape}")
    k = kernels.shape[-1]
    win = sliding_window_view(_pad_seq(vh, k // 2), k, axis=-2)  # (..., s, d, k)
    return np.matmul(win, kernels[..., None])[..., 0]


def lightweight_conv_backward(vh, kernels, dc) -> tuple[np.ndarray, np.ndarray]:
    k, s = kernels.shape[-1], vh.shape[-2]
    half = k // 2
    vp = _pad_seq(vh, half)
    dk = np.matmul(dc[..., None, :], sliding_window_view(vp, k, axis=-2))[..., 0, :]
    dvp = np.zeros_like(vp)
    for j in range(k):
        dvp[..., j : j + s, :] += kernels[..., j : j + 1] * dc
    return dvp[..., half : half + s, :], dk


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, s, c = x.shape
    return x.reshape(b, s, h, c // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * d)


def _as_batch(x: np.ndarray, c: int) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        x = x[None]
        squeeze = True
    elif x.ndim == 3:
        squeeze = False
    else:
        raise ShapeError(f"layer input must be (s, c) or (batch, s, c), got {x.shape}")
    if x.shape[-1] != c:
        raise ShapeError(f"layer input width {x.shape[-1]} != hidden size {c}")
    if x.shape[-2] == 0:
        raise ShapeError("layer input has zero positions")
    return x, squeeze


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #
class Layer:
    kind: LayerKind
    params: dict[str, Parameter]

    def __init__(self, cfg: LayerConfig):
        self.cfg = cfg

    def named_parameters(self) -> dict[str, Parameter]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x, *, rng: np.random.Generator | None = None) -> tuple[np.ndarray, Any]:
        """Apply the layer; dropout is active only when ``rng`` is given."""
        xb, squeeze = _as_batch(x, self.cfg.hidden_size)
        out, cache = self._forward(xb, rng)
        return (out[0] if squeeze else out), (cache, squeeze)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        inner, squeeze = cache
        dx = self._backward(dout[None] if squeeze else dout, inner)
        return dx[0] if squeeze else dx

    def _residual_norm(self, z, x, rng):
        z, keep = dropout(z, self.cfg.dropout, rng)
        p = self.params
        y, ln = layer_norm(z + x, p["ln_gamma"].value, p["ln_beta"].value)
        return y, (keep, ln)

    def _residual_norm_backward(self, dout, res):
        keep, ln = res
        p = self.params
        dpre = layer_norm_backward(dout, ln, p["ln_gamma"].value, p["ln_gamma"].grad, p["ln_beta"].grad)
        dz = dpre if keep is None else dpre * keep
        return dz, dpre

    def _init_norm(self) -> dict[str, Parameter]:
        c = self.cfg.hidden_size
        return {"ln_gamma": Parameter(np.ones(c)), "ln_beta": Parameter(np.zeros(c))}


def _weight(rng, *shape) -> Parameter:
    return Parameter(truncated_normal(rng, shape))


def _bias(n) -> Parameter:
    return Parameter(np.zeros(n))


class SelfAttention(Layer):
    """Multi-head scaled dot-product attention; each query row normalises over keys."""

    kind = LayerKind.SA

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator):
        super().__init__(cfg)
        c = cfg.hidden_size
        self.params = {
            "w_k": _weight(rng, c, c), "b_k": _bias(c),
            "w_q": _weight(rng, c, c), "b_q": _bias(c),
            "w_v": _weight(rng, c, c), "b_v": _bias(c),
            "w_o": _weight(rng, c, c), "b_o": _bias(c),
            **self._init_norm(),
        }

    def _forward(self, x, rng):
        p, h = self.params, self.cfg.num_heads
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        k = _split_heads(linear(x, p["w_k"].value, p["b_k"].value), h)
        q = _split_heads(linear(x, p["w_q"].value, p["b_q"].value), h)
        v = _split_heads(linear(x, p["w_v"].value, p["b_v"].value), h)
        m = softmax_lastdim((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(m @ v)
        z = linear(ctx, p["w_o"].value, p["b_o"].value)
        out, res = self._residual_norm(z, x, rng)
        return out, (x, k, q, v, m, ctx, res)

    def _backward(self, dout, cache):
        x, k, q, v, m, ctx, res = cache
        p, h = self.params, self.cfg.num_heads
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        dz, dx = self._residual_norm_backward(dout, res)
        dctx = linear_backward(ctx, p["w_o"].value, dz, p["w_o"].grad, p["b_o"].grad)
        dctx = _split_heads(dctx, h)
        dm = dctx @ v.transpose(0, 1, 3, 2)
        dv = m.transpose(0, 1, 3, 2) @ dctx
        dscores = softmax_backward(m, dm) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        for name, d in (("k", dk), ("q", dq), ("v", dv)):
            dx = dx + linear_backward(x, p[f"w_{name}"].value, _merge_heads(d), p[f"w_{name}"].grad, p[f"b_{name}"].grad)
        return dx


class FeedForward(Layer):
    """Two projections with an exact GELU in between."""

    kind = LayerKind.FF

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator):
        super().__init__(cfg)
        c, r = cfg.hidden_size, cfg.ff_ratio
        self.params = {
            "w_1": _weight(rng, c, r * c), "b_1": _bias(r * c),
            "w_2": _weight(rng, r * c, c), "b_2": _bias(c),
            **self._init_norm(),
        }

    def _forward(self, x, rng):
        p = self.params
        a = linear(x, p["w_1"].value, p["b_1"].value)
        g, cdf = gelu(a)
        z = linear(g, p["w_2"].value, p["b_2"].value)
        out, res = self._residual_norm(z, x, rng)
        return out, (x, a, cdf, g, res)

    def _backward(self, dout, cache):
        x, a, cdf, g, res = cache
        p = self.params
        dz, dx = self._residual_norm_backward(dout, res)
        dg = linear_backward(g, p["w_2"].value, dz, p["w_2"].grad, p["b_2"].grad)
        da = gelu_backward(a, cdf, dg)
        return dx + linear_backward(x, p["w_1"].value, da, p["w_1"].grad, p["b_1"].grad)


class DynamicConv(Layer):
    """GLU, separable convolution, softmax kernel generation, lightweight convolution.

    The kernel logits ``S @ w_dyn`` are laid out head-major: column
    ``p*k + j`` is tap ``j`` of head ``p``.
    """

    kind = LayerKind.DC

    def __init__(self, cfg: LayerConfig, rng: np.random.Generator):
        super().__init__(cfg)
        c, k, h = cfg.hidden_size, cfg.kernel_size, cfg.num_heads
        self.params = {
            "w_glu_a": _weight(rng, c, c), "b_glu_a": _bias(c),
            "w_glu_b": _weight(rng, c, c), "b_glu_b": _bias(c),
            "w_dep": _weight(rng, k, c),
            "w_poi": _weight(rng, c, c),
            "w_dyn": _weight(rng, c, h * k),
            "w_out": _weight(rng, c, c), "b_out": _bias(c),
            **self._init_norm(),
        }

    def glu_gate(self, x):
        p = self.params
        content = linear(x, p["w_glu_a"].value, p["b_glu_a"].value)
        gate = sigmoid(linear(x, p["w_glu_b"].value, p["b_glu_b"].value))
        return content * gate, content, gate

    def dynamic_kernels(self, s_out):
        """Softmax-normalised kernels of shape ``(..., h, s, k)``."""
        h, k = self.cfg.num_heads, self.cfg.kernel_size
        logits = s_out @ self.params["w_dyn"].value
        logits = logits.reshape(*s_out.shape[:-1], h, k)
        logits = np.moveaxis(logits, -2, -3)
        return softmax_lastdim(logits)

    def _forward(self, x, rng):
        p, h = self.params, self.cfg.num_heads
        v, content, gate = self.glu_gate(x)
        u = depthwise_conv(v, p["w_dep"].value)
        s_out = u @ p["w_poi"].value
        kern = self.dynamic_kernels(s_out)
        vh = _split_heads(v, h)
        conv = _merge_heads(lightweight_conv(vh, kern))
        z = linear(conv, p["w_out"].value, p["b_out"].value)
        out, res = self._residual_norm(z, x, rng)
        return out, (x, v, content, gate, u, s_out, kern, vh, conv, res)

    def _backward(self, dout, cache):
        x, v, content, gate, u, s_out, kern, vh, conv, res = cache
        p, h = self.params, self.cfg.num_heads
        b, s, c = x.shape
        dz, dx = self._residual_norm_backward(dout, res)
        dconv = linear_backward(conv, p["w_out"].value, dz, p["w_out"].grad, p["b_out"].grad)
        dvh, dkern = lightweight_conv_backward(vh, kern, _split_heads(dconv, h))
        dv = _merge_heads(dvh)
        dlogits = np.moveaxis(softmax_backward(kern, dkern), -3, -2).reshape(b, s, -1)
        ds = linear_backward(s_out, p["w_dyn"].value, dlogits, p["w_dyn"].grad)
        du = linear_backward(u, p["w_poi"].value, ds, p["w_poi"].grad)
        dv = dv + depthwise_conv_backward(v, p["w_dep"].value, du, p["w_dep"].grad)
        dcontent = dv * gate
        dgate_pre = dv * content * gate * (1.0 - gate)
        dx = dx + linear_backward(x, p["w_glu_a"].value, dcontent, p["w_glu_a"].grad, p["b_glu_a"].grad)
        dx = dx + linear_backward(x, p["w_glu_b"].value, dgate_pre, p["w_glu_b"].grad, p["b_glu_b"].grad)
        return dx


LAYER_TYPES: dict[LayerKind, type[Layer]] = {
    LayerKind.DC: DynamicConv,
    LayerKind.SA: SelfAttention,
    LayerKind.FF: FeedForward,
}


def build_layer(kind: LayerKind, cfg: LayerConfig, rng: np.random.Generator) -> Layer:
    return LAYER_TYPES[LayerKind(kind)](cfg, rng)


# Functional entry points -------------------------------------------------- #
def sa_forward(x: np.ndarray, layer: SelfAttention) -> np.ndarray:
    return layer(x)


def ff_forward(x: np.ndarray, layer: FeedForward) -> np.ndarray:
    return layer(x)


def dc_forward(x: np.ndarray, layer: DynamicConv) -> np.ndarray:
    return layer(x)


def glu_gate(x: np.ndarray, layer: DynamicConv) -> np.ndarray:
    return layer.glu_gate(x)[0]


def generate_dynamic_kernels(s_out: np.ndarray, layer: DynamicConv) -> np.ndarray:
    return layer.dynamic_kernels(s_out)
