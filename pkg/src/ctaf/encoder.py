"""Per-modality Conv-Transformer encoder with sinusoidal time features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, ops


def time_features(t: np.ndarray, n_freqs: int = 8, base_period: float = 60.0) -> np.ndarray:
    """Sin/cos features of timestamps (seconds from window start).

    Column ``2i`` is ``sin(t * w_i)`` and ``2i + 1`` is ``cos(t * w_i)`` with
    ``w_i = 2*pi / base_period * 2**i``, so the slowest pair has period
    ``base_period`` and each following pair doubles the frequency.
    """
    t = np.asarray(t, dtype=np.float64)
    omega = 2.0 * np.pi / base_period * 2.0 ** np.arange(n_freqs)
    ang = t[..., None] * omega
    out = np.empty(t.shape + (2 * n_freqs,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class EncoderConfig:
    in_dim: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    conv_kernel: int = 3
    n_freqs: int = 8
    base_period: float = 60.0
    time_mode: str = "add"  # "add": projected features added after input projection; "concat"
    ff_mult: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.time_mode not in ("add", "concat"):
            raise ValueError(f"time_mode must be 'add' or 'concat', got {self.time_mode!r}")


def _dense(rng, fan_in, fan_out):
    return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_mha(rng: np.random.Generator, prefix: str, d: int) -> dict[str, np.ndarray]:
    p = {}
    for name in ("q", "k", "v", "o"):
        p[f"{prefix}.w{name}"] = _dense(rng, d, d)
        p[f"{prefix}.b{name}"] = np.zeros(d)
    return p


def init_encoder(rng: np.random.Generator, prefix: str, cfg: EncoderConfig) -> dict[str, np.ndarray]:
    d, F2 = cfg.d_model, 2 * cfg.n_freqs
    p: dict[str, np.ndarray] = {}
    if cfg.time_mode == "add":
        p[f"{prefix}.in.w"] = _dense(rng, cfg.in_dim, d)
        p[f"{prefix}.time.w"] = _dense(rng, F2, d)
    else:
        p[f"{prefix}.in.w"] = _dense(rng, cfg.in_dim + F2, d)
    p[f"{prefix}.in.b"] = np.zeros(d)
    p[f"{prefix}.conv.w"] = rng.normal(scale=1.0 / np.sqrt(d * cfg.conv_kernel), size=(cfg.conv_kernel, d, d))
    p[f"{prefix}.conv.b"] = np.zeros(d)
    hidden = cfg.ff_mult * d
    for layer in range(cfg.n_layers):
        lp = f"{prefix}.l{layer}"
        p[f"{lp}.ln1.g"] = np.ones(d)
        p[f"{lp}.ln1.b"] = np.zeros(d)
        p.update(init_mha(rng, f"{lp}.attn", d))
        p[f"{lp}.ln2.g"] = np.ones(d)
        p[f"{lp}.ln2.b"] = np.zeros(d)
        p[f"{lp}.ff.w1"] = _dense(rng, d, hidden)
        p[f"{lp}.ff.b1"] = np.zeros(hidden)
        p[f"{lp}.ff.w2"] = _dense(rng, hidden, d) * 0.5
        p[f"{lp}.ff.b2"] = np.zeros(d)
    p[f"{prefix}.lnf.g"] = np.ones(d)
    p[f"{prefix}.lnf.b"] = np.zeros(d)
    return p


def multi_head_attention(
    params: dict[str, Tensor],
    prefix: str,
    query: Tensor,
    context: Tensor,
    key_mask: np.ndarray,
    n_heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with a key-padding mask.

    Returns the projected output (B, Sq, d) and the per-head attention
    weights (B, h, Sq, Sk); weights on invalid keys are exactly zero.
    """
    B, Sq, d = query.shape
    Sk = context.shape[1]
    dh = d // n_heads

    def heads(x, S):
        return ops.transpose(ops.reshape(x, (B, S, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ops.linear(query, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), Sq)
    k = heads(ops.linear(context, params[f"{prefix}.wk"], params[f"{prefix}.bk"]), Sk)
    v = heads(ops.linear(context, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), Sk)
    logits = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / np.sqrt(dh))
    attn = ops.softmax(logits, ops.mask_to_additive(key_mask)[:, None, None, :])
    out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, Sq, d))
    return ops.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"]), attn


def encode(
    params: dict[str, Tensor],
    prefix: str,
    cfg: EncoderConfig,
    X: np.ndarray | Tensor,
    t: np.ndarray,
    m: np.ndarray,
    use_time: bool = True,
    allow_empty: bool = False,
) -> Tensor:
    """H = Enc(X, phi(t); kpm = not m) for a padded batch (B, S, D) -> (B, S, d).

    Features at masked tokens are zeroed on entry, the conv front-end ignores
    masked neighbours and self-attention never attends to masked keys, so
    masked inputs cannot reach any valid output row. Sequences with no valid
    token raise unless ``allow_empty`` (the caller then owns the fallback).
    """
    m = np.asarray(m, dtype=np.float64)
    if not allow_empty and not (m.sum(axis=-1) > 0).all():
        raise ValueError("encode needs at least one valid token per sequence")
    X = ops.mul(X, m[..., None])
    phi = time_features(t, cfg.n_freqs, cfg.base_period)
    if not use_time:
        phi = np.zeros_like(phi)
    if cfg.time_mode == "add":
        h = ops.add(ops.linear(X, params[f"{prefix}.in.w"], params[f"{prefix}.in.b"]),
                    ops.matmul(phi, params[f"{prefix}.time.w"]))
    else:
        h = ops.linear(ops.concat([X, phi], axis=-1), params[f"{prefix}.in.w"], params[f"{prefix}.in.b"])
    h = ops.add(h, ops.gelu(ops.conv1d_tokens(h, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"], m)))
    for layer in range(cfg.n_layers):
        lp = f"{prefix}.l{layer}"
        a = ops.layer_norm(h, params[f"{lp}.ln1.g"], params[f"{lp}.ln1.b"])
        att, _ = multi_head_attention(params, f"{lp}.attn", a, a, m, cfg.n_heads)
        h = ops.add(h, att)
        f = ops.layer_norm(h, params[f"{lp}.ln2.g"], params[f"{lp}.ln2.b"])
        f = ops.gelu(ops.linear(f, params[f"{lp}.ff.w1"], params[f"{lp}.ff.b1"]))
        h = ops.add(h, ops.linear(f, params[f"{lp}.ff.w2"], params[f"{lp}.ff.b2"]))
    return ops.layer_norm(h, params[f"{prefix}.lnf.g"], params[f"{prefix}.lnf.b"])
