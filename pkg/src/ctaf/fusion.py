"""Bidirectional cross-temporal attention, masked pooling, fusion gate and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import _dense, init_mha, multi_head_attention
from .numerics import Tensor, ops


@dataclass
class AlignmentMatrices:
    """Head-averaged soft alignments. Rows of windows whose opposite stream is
    empty carry no attention and are flagged in ``undefined_*``."""

    e2p: np.ndarray  # (B, S_e, S_p)
    p2e: np.ndarray  # (B, S_p, S_e)
    undefined_e2p: np.ndarray  # (B,) bool
    undefined_p2e: np.ndarray


def cross_attend(
    params: dict[str, Tensor],
    H_e: Tensor,
    H_p: Tensor,
    m_e: np.ndarray,
    m_p: np.ndarray,
    n_heads: int,
    prefix: str = "xattn",
) -> tuple[Tensor, Tensor, AlignmentMatrices]:
    """EEG queries attend to physiology keys/values and vice versa.

    The attended states keep a residual path, ``H~ = H + MHA(...)``; when a
    window has no valid key in one direction the attention term is dropped and
    the states fall back to the residual input.
    """
    has_e = (np.asarray(m_e).sum(axis=1) > 0).astype(np.float64)
    has_p = (np.asarray(m_p).sum(axis=1) > 0).astype(np.float64)
    o_e, a_e = multi_head_attention(params, f"{prefix}.e2p", H_e, H_p, m_p, n_heads)
    o_p, a_p = multi_head_attention(params, f"{prefix}.p2e", H_p, H_e, m_e, n_heads)
    Ht_e = ops.add(H_e, ops.mul(o_e, has_p[:, None, None]))
    Ht_p = ops.add(H_p, ops.mul(o_p, has_e[:, None, None]))
    A = AlignmentMatrices(
        e2p=a_e.data.mean(axis=1) * has_p[:, None, None],
        p2e=a_p.data.mean(axis=1) * has_e[:, None, None],
        undefined_e2p=has_p == 0,
        undefined_p2e=has_e == 0,
    )
    return Ht_e, Ht_p, A


def masked_mean(H: Tensor, m: np.ndarray, eps: float = 1e-8, allow_empty: bool = False) -> Tensor:
    """``sum_i m_i H_i / (sum_i m_i + eps)`` over tokens."""
    m = np.asarray(m, dtype=np.float64)
    if not allow_empty and not (m.sum(axis=-1) > 0).all():
        raise ValueError("masked_mean over a sequence with no valid token")
    return ops.masked_mean(H, m, eps)


def attention_pool(T: Tensor, m_union: np.ndarray, q: Tensor) -> Tensor:
    """Learned-query softmax pooling over valid tokens of (B, S, d) -> (B, d)."""
    m_union = np.asarray(m_union, dtype=np.float64)
    if not (m_union.sum(axis=-1) > 0).all():
        raise ValueError("attention_pool needs at least one valid union token per window")
    B, S, d = T.shape
    logits = ops.reshape(ops.matmul(T, ops.reshape(q, (d, 1))), (B, S))
    alpha = ops.softmax(ops.scale(logits, 1.0 / np.sqrt(d)), ops.mask_to_additive(m_union))
    return ops.reshape(ops.matmul(ops.reshape(alpha, (B, 1, S)), T), (B, d))


def init_gate(rng: np.random.Generator, d: int, prefix: str = "gate") -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _dense(rng, 2 * d, d),
        f"{prefix}.b1": np.zeros(d),
        f"{prefix}.w2": _dense(rng, d, d),
        f"{prefix}.b2": np.zeros(d),
    }


def fusion_gate(params: dict[str, Tensor], z_e: Tensor, z_p: Tensor, prefix: str = "gate") -> tuple[Tensor, Tensor]:
    """g = sigmoid(MLP([z_e || z_p])); z_gate = g*z_e + (1-g)*z_p."""
    h = ops.gelu(ops.linear(ops.concat([z_e, z_p], axis=-1), params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    g = ops.sigmoid(ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"]))
    return g, gate_mix(g, z_e, z_p)


def gate_mix(g: Tensor, z_e: Tensor, z_p: Tensor) -> Tensor:
    return ops.add(ops.mul(g, z_e), ops.mul(ops.sub(1.0, g), z_p))


def clip_embed(z_gate: Tensor, z_tok: Tensor) -> Tensor:
    return ops.scale(ops.add(z_gate, z_tok), 0.5)


def init_head(rng: np.random.Generator, prefix: str, d_in: int, d_out: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _dense(rng, d_in, d_in),
        f"{prefix}.b1": np.zeros(d_in),
        f"{prefix}.w2": _dense(rng, d_in, d_out),
        f"{prefix}.b2": np.zeros(d_out),
    }


def project_raw(params: dict[str, Tensor], prefix: str, x: Tensor, activation=ops.gelu) -> Tensor:
    """Two-layer MLP head output before L2 normalisation."""
    h = ops.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    if activation is not None:
        h = activation(h)
    return ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def project(params: dict[str, Tensor], prefix: str, x: Tensor, activation=ops.gelu) -> Tensor:
    """MLP head followed by L2 normalisation along the last axis."""
    return ops.l2_normalize(project_raw(params, prefix, x, activation))


__all__ = [
    "AlignmentMatrices",
    "attention_pool",
    "clip_embed",
    "cross_attend",
    "fusion_gate",
    "gate_mix",
    "init_gate",
    "init_head",
    "init_mha",
    "masked_mean",
    "project",
    "project_raw",
]
