"""Scaled dot-product, differential and differential gated multi-head attention.

Head layout shared by the differential variants: with ``h`` heads and
``d_half = d_model / (2h)``, the d_model columns of ``X @ W_Q`` are read as
``(h, 2, d_half)``.  Head ``i`` owns columns ``[2i*d_half, (2i+2)*d_half)``,
the first half being the excitatory stream and the second the inhibitory one.
Values are read as ``(h, 2*d_half)``.  Concatenating the head outputs gives
back ``d_model`` columns, so ``W_O`` is square.

All functions accept ``X`` with arbitrary leading batch axes: ``(..., N, d_model)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

RMS_EPS = 1e-6


def lambda_init_schedule(l: int) -> float:
    """Layer-indexed lambda constant, 0.8 - 0.6 exp(-0.3 (l - 1)), for l >= 1."""
    if int(l) != l or l < 1:
        raise ConfigError(f"layer index must be an integer >= 1, got {l}")
    # written as 0.2 + 0.6 (1 - e^x) so that l = 1 gives exactly 0.2 in floating point
    return 0.2 + 0.6 * -math.expm1(-0.3 * (l - 1))


@dataclass(frozen=True)
class HeadLayout:
    d_model: int
    h: int

    def __post_init__(self):
        if self.h < 1 or self.d_model < 1 or self.d_model % (2 * self.h):
            raise ConfigError(f"d_model={self.d_model} must be divisible by 2*h={2 * self.h}")

    @property
    def d_half(self) -> int:
        return self.d_model // (2 * self.h)

    @property
    def value_width(self) -> int:
        return 2 * self.d_half


@dataclass
class AttentionParams:
    """Learnable tensors of one attention layer.

    Which fields are populated depends on the variant: the gate (``W_g``,
    ``b_g``) belongs to M-DGSA, the four lambda vectors to the differential
    baseline, ``norm_gain`` to both.  ``lambda_init`` is a fixed float.
    """

    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    W_g: Tensor | None = None
    b_g: Tensor | None = None
    norm_gain: Tensor | None = None
    lambda_q1: Tensor | None = None
    lambda_k1: Tensor | None = None
    lambda_q2: Tensor | None = None
    lambda_k2: Tensor | None = None
    lambda_init: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.lambda_init < 1.0:
            raise ConfigError(f"lambda_init must lie in (0, 1), got {self.lambda_init}")

    def named(self):
        """(name, tensor) pairs for the populated fields, in declaration order."""
        for key in ("W_Q", "W_K", "W_V", "W_O", "W_g", "b_g", "norm_gain",
                    "lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
            t = getattr(self, key)
            if t is not None:
                yield key, t


@dataclass
class AttentionMaps:
    """Detached maps from one forward pass, leading batch axes preserved.

    ``a_plus``/``a_minus``/``fused`` are (..., h, N, N); ``gate`` is (..., N, h).
    The vanilla and differential variants fill ``fused`` (and ``a_plus`` /
    ``a_minus`` where meaningful) and leave ``gate`` as None.
    """

    fused: np.ndarray
    a_plus: np.ndarray | None = None
    a_minus: np.ndarray | None = None
    gate: np.ndarray | None = None


def _heads_first(x: Tensor) -> Tensor:
    """(..., N, h, w) -> (..., h, N, w)."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return ag.transpose(x, axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, N, w) -> (..., N, h*w)."""
    y = _heads_first(x)
    return ag.reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def split_streams(X: Tensor, params: AttentionParams, layout: HeadLayout):
    """Project and reshape into (Q+, Q-, K+, K-, V, Q_full).

    Stream tensors are (..., h, N, d_half); V is (..., h, N, 2 d_half); Q_full
    is the unsplit (..., N, d_model) projection used by the residual.
    """
    if X.shape[-1] != layout.d_model:
        raise DimensionError(f"input width {X.shape[-1]} != d_model {layout.d_model}")
    lead_n = X.shape[:-1]
    h, dh = layout.h, layout.d_half
    Q = X @ params.W_Q
    K = X @ params.W_K
    V = X @ params.W_V

    def pair(P):
        # (..., N, d) -> (..., N, h, 2, dh) -> (2, ..., h, N, dh)
        P = ag.reshape(P, lead_n + (h, 2, dh))
        n = P.ndim
        axes = (n - 2,) + tuple(range(n - 4)) + (n - 3, n - 4, n - 1)
        P = ag.transpose(P, axes)
        return P[0], P[1]

    q_plus, q_minus = pair(Q)
    k_plus, k_minus = pair(K)
    V = _heads_first(ag.reshape(V, lead_n + (h, 2 * dh)))
    return q_plus, q_minus, k_plus, k_minus, V, Q


def scaled_softmax_scores(Q: Tensor, K: Tensor, key_bias: Tensor | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(width)) over the key axis.

    ``key_bias``, if given, is a constant added to the scores (used to push
    padding keys to -inf-like values); it must already have the score shape.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    s = ag.scale(Q @ ag.swap_last(K), 1.0 / math.sqrt(Q.shape[-1]))
    if key_bias is not None:
        s = s + key_bias
    return ag.softmax_rows(s)


def token_head_gate(X: Tensor, W_g: Tensor, b_g: Tensor) -> Tensor:
    """sigmoid(X W_g + b_g): one gate per (token, head), shape (..., N, h)."""
    if W_g.shape[0] != X.shape[-1] or b_g.shape != (W_g.shape[1],):
        raise DimensionError(f"gate weights {W_g.shape}/{b_g.shape} do not fit input {X.shape}")
    return ag.sigmoid(ag.add_bias(X @ W_g, b_g))


def _gate_per_row(gate: Tensor, n_keys: int) -> Tensor:
    """(..., N, h) -> (..., h, N, N_keys) with the gate constant along keys."""
    n = gate.ndim
    g = ag.transpose(gate, tuple(range(n - 2)) + (n - 1, n - 2))
    g = ag.reshape(g, g.shape + (1,))
    return ag.expand(g, g.shape[:-1] + (n_keys,))


def fuse_gated_maps(a_plus: Tensor, a_minus: Tensor, gate: Tensor) -> Tensor:
    """g * A+ - (1 - g) * A-, with the per-(token, head) gate broadcast over keys."""
    if a_plus.shape != a_minus.shape:
        raise DimensionError(f"map shapes differ: {a_plus.shape} vs {a_minus.shape}")
    expected = a_plus.shape[:-3] + (a_plus.shape[-2], a_plus.shape[-3])
    if gate.shape != expected:
        raise DimensionError(f"gate shape {gate.shape} does not match maps {a_plus.shape}")
    g = _gate_per_row(gate, a_plus.shape[-1])
    return g * a_plus - (1.0 - g) * a_minus


def diff_lambda_value(params: AttentionParams) -> Tensor:
    """exp(<lq1, lk1>) - exp(<lq2, lk2>) + lambda_init, as a 0-d tensor."""
    vecs = (params.lambda_q1, params.lambda_k1, params.lambda_q2, params.lambda_k2)
    if any(v is None for v in vecs) or len({v.shape for v in vecs}) != 1:
        raise DimensionError("the four lambda vectors must be present and share one length")
    first = ag.exp(ag.tsum(params.lambda_q1 * params.lambda_k1))
    second = ag.exp(ag.tsum(params.lambda_q2 * params.lambda_k2))
    return first - second + params.lambda_init


def headwise_groupnorm(hv: Tensor, norm_gain: Tensor, lambda_l: float) -> Tensor:
    """RMS-normalise each head's features per token, then scale by (1 - lambda_l)."""
    if not 0.0 < lambda_l < 1.0:
        raise ConfigError(f"lambda must lie in (0, 1), got {lambda_l}")
    return ag.scale(ag.rmsnorm(hv, norm_gain, RMS_EPS), 1.0 - lambda_l)


def _key_bias(key_mask, shape, dtype):
    """Constant additive bias of ``shape`` (..., h, N, N) from a (..., N) keep-mask."""
    if key_mask is None:
        return None
    km = np.asarray(key_mask, dtype=bool)
    bias = np.where(km, 0.0, -1e9).astype(dtype)
    bias = bias[..., None, None, :]
    return Tensor(np.broadcast_to(bias, shape).copy())


def mdgsa_forward(X: Tensor, params: AttentionParams, layout: HeadLayout, l: int = 1,
                  residual: bool = False, residual_source: str = "xwq",
                  lambda_l: float | None = None, key_mask=None):
    """Multihead differential gated self-attention.

    Returns ``(Y, maps)``.  ``lambda_l`` defaults to the layer schedule; pass a
    constant to override it.  With ``residual`` set, ``Y`` additionally gets
    the full query projection ``X W_Q`` (``residual_source="xwq"``) or ``X``
    itself (``"x"``).
    """
    lam = lambda_init_schedule(l) if lambda_l is None else lambda_l
    q_p, q_m, k_p, k_m, V, Q = split_streams(X, params, layout)
    n = X.shape[-2]
    bias = _key_bias(key_mask, q_p.shape[:-1] + (n,), X.dtype)
    a_plus = scaled_softmax_scores(q_p, k_p, bias)
    a_minus = scaled_softmax_scores(q_m, k_m, bias)
    gate = token_head_gate(X, params.W_g, params.b_g)
    fused = fuse_gated_maps(a_plus, a_minus, gate)
    H = headwise_groupnorm(fused @ V, params.norm_gain, lam)
    Y = merge_heads(H) @ params.W_O
    if residual:
        if residual_source == "xwq":
            Y = Y + Q
        elif residual_source == "x":
            Y = Y + X
        else:
            raise ConfigError(f"unknown residual source {residual_source!r}")
    maps = AttentionMaps(fused=fused.data, a_plus=a_plus.data, a_minus=a_minus.data, gate=gate.data)
    return Y, maps


def diff_attn_forward(X: Tensor, params: AttentionParams, layout: HeadLayout, l: int = 1,
                      key_mask=None):
    """Differential attention baseline: (A1 - lambda A2) V per head, GroupNorm, W_O.

    The (1 - lambda) GroupNorm scale uses the fixed ``params.lambda_init``.
    Returns ``(Y, maps)``.
    """
    q1, q2, k1, k2, V, _ = split_streams(X, params, layout)
    n = X.shape[-2]
    bias = _key_bias(key_mask, q1.shape[:-1] + (n,), X.dtype)
    a1 = scaled_softmax_scores(q1, k1, bias)
    a2 = scaled_softmax_scores(q2, k2, bias)
    lam = diff_lambda_value(params)
    fused = a1 - lam * a2
    H = headwise_groupnorm(fused @ V, params.norm_gain, params.lambda_init)
    Y = merge_heads(H) @ params.W_O
    return Y, AttentionMaps(fused=fused.data, a_plus=a1.data, a_minus=a2.data)


def vanilla_mha_forward(X: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor, W_O: Tensor, h: int,
                        key_mask=None):
    """Standard multi-head attention, per-head width d_model / h. Returns ``(Y, maps)``."""
    d = X.shape[-1]
    if d % h:
        raise ConfigError(f"d_model={d} not divisible by h={h}")
    lead_n = X.shape[:-1]

    def heads(P):
        return _heads_first(ag.reshape(P, lead_n + (h, d // h)))

    q, k, v = heads(X @ W_Q), heads(X @ W_K), heads(X @ W_V)
    bias = _key_bias(key_mask, q.shape[:-1] + (X.shape[-2],), X.dtype)
    A = scaled_softmax_scores(q, k, bias)
    Y = merge_heads(A @ v) @ W_O
    return Y, AttentionMaps(fused=A.data)


def lateral_inhibition_reference(e, alpha, neighborhood, phi=None):
    """Rate-model response r_i = phi(e_i - alpha * sum_{j in N(i)} e_j).

    Reference only; not used by any model.  ``neighborhood[i]`` is an iterable
    of indices, ``phi`` defaults to the identity.
    """
    if alpha < 0:
        raise ConfigError("alpha must be non-negative")
    e = np.asarray(e, dtype=float)
    drive = np.array([e[i] - alpha * sum(e[j] for j in neighborhood[i]) for i in range(len(e))])
    return drive if phi is None else np.asarray(phi(drive), dtype=float)
