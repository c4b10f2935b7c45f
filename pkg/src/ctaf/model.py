"""CTAF model assembly: parameters, inputs and the full forward pass."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .datamodel import D_EEG, D_PHYS, Batch
from .encoder import EncoderConfig, encode, init_encoder
from .fusion import (
    AlignmentMatrices,
    attention_pool,
    clip_embed,
    cross_attend,
    fusion_gate,
    gate_mix,
    init_gate,
    init_head,
    init_mha,
    masked_mean,
    project_raw,
)
from .numerics import Tensor, ops, parameters


@dataclass(frozen=True)
class ModelConfig:
    d_eeg: int = D_EEG
    d_phys: int = D_PHYS
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    conv_kernel: int = 3
    n_freqs: int = 8
    base_period: float = 60.0
    time_mode: str = "add"
    ff_mult: int = 4
    proj_dim: int = 32
    use_time: bool = True

    def encoder(self, modality: str) -> EncoderConfig:
        return EncoderConfig(
            in_dim=self.d_eeg if modality == "e" else self.d_phys,
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            conv_kernel=self.conv_kernel, n_freqs=self.n_freqs, base_period=self.base_period,
            time_mode=self.time_mode, ff_mult=self.ff_mult,
        )

    def to_dict(self) -> dict:
        return asdict(self)


HEADS = ("e", "p", "f", "tok_e", "tok_p")


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    p.update(init_encoder(rng, "enc_e", cfg.encoder("e")))
    p.update(init_encoder(rng, "enc_p", cfg.encoder("p")))
    p.update(init_mha(rng, "xattn.e2p", d))
    p.update(init_mha(rng, "xattn.p2e", d))
    p["pool.q"] = rng.normal(size=d) / np.sqrt(d)
    p.update(init_gate(rng, d))
    p["null.e"] = rng.normal(scale=0.1, size=d)
    p["null.p"] = rng.normal(scale=0.1, size=d)
    for h in HEADS:
        p.update(init_head(rng, f"head.{h}", d, cfg.proj_dim))
    p.update(init_head(rng, "sup", d, 2))
    return p


@dataclass(frozen=True, eq=False)
class ModelInputs:
    """Padded arrays fed to the model; timestamps are relative to window start."""

    X_e: np.ndarray
    t_e: np.ndarray
    m_e: np.ndarray
    X_p: np.ndarray
    t_p: np.ndarray
    m_p: np.ndarray

    @classmethod
    def from_batch(cls, batch: Batch) -> "ModelInputs":
        start = batch.spans[:, :1]
        return cls(batch.X_e, batch.t_e - start, batch.m_e, batch.X_p, batch.t_p - start, batch.m_p)

    def replace(self, **changes) -> "ModelInputs":
        return replace(self, **changes)

    @property
    def present_e(self) -> np.ndarray:
        return (self.m_e.sum(axis=1) > 0).astype(np.float64)

    @property
    def present_p(self) -> np.ndarray:
        return (self.m_p.sum(axis=1) > 0).astype(np.float64)

    @property
    def m_union(self) -> np.ndarray:
        return np.maximum(self.m_e, self.m_p)

    def take(self, idx) -> "ModelInputs":
        return ModelInputs(*(getattr(self, f)[idx] for f in ("X_e", "t_e", "m_e", "X_p", "t_p", "m_p")))


@dataclass
class FusionOutput:
    H_e: Tensor
    H_p: Tensor
    Ht_e: Tensor
    Ht_p: Tensor
    align: AlignmentMatrices
    z_e: Tensor
    z_p: Tensor
    g: Tensor
    z_gate: Tensor
    z_tok: Tensor
    z_f: Tensor
    raw_e: Tensor  # projection-head outputs before L2 normalisation
    raw_p: Tensor
    raw_f: Tensor
    p_e: Tensor
    p_p: Tensor
    p_f: Tensor
    tok_e: Tensor  # (B, S, proj) L2-normalised token projections
    tok_p: Tensor
    y_hat: Tensor

    TENSOR_FIELDS = ("H_e", "H_p", "Ht_e", "Ht_p", "z_e", "z_p", "g", "z_gate", "z_tok", "z_f",
                     "p_e", "p_p", "p_f", "tok_e", "tok_p", "y_hat")


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    inputs: ModelInputs,
    use_time: bool | None = None,
) -> FusionOutput:
    """Full CTAF forward pass for a padded batch.

    A window may have one stream entirely invalid (modality dropout). The
    missing stream's summary is replaced by a learned null vector, the gate is
    pinned to the surviving stream and token pooling runs over the surviving
    stream only, so ``z_f`` is that stream's path output.
    """
    use_time = cfg.use_time if use_time is None else use_time
    has_e, has_p = inputs.present_e, inputs.present_p
    if ((has_e + has_p) == 0).any():
        raise ValueError("window with both streams invalid")

    H_e = encode(params, "enc_e", cfg.encoder("e"), inputs.X_e, inputs.t_e, inputs.m_e, use_time, allow_empty=True)
    H_p = encode(params, "enc_p", cfg.encoder("p"), inputs.X_p, inputs.t_p, inputs.m_p, use_time, allow_empty=True)
    Ht_e, Ht_p, align = cross_attend(params, H_e, H_p, inputs.m_e, inputs.m_p, cfg.n_heads)

    def summary(Ht, m, has, null):
        z = masked_mean(Ht, m, allow_empty=True)
        if has.all():
            return z
        return ops.add(ops.mul(z, has[:, None]), ops.mul(params[null], (1.0 - has)[:, None]))

    z_e = summary(Ht_e, inputs.m_e, has_e, "null.e")
    z_p = summary(Ht_p, inputs.m_p, has_p, "null.p")

    both = has_e * has_p
    if both.all():
        T = ops.scale(ops.add(Ht_e, Ht_p), 0.5)
        g, z_gate = fusion_gate(params, z_e, z_p)
    else:
        w = 1.0 / (has_e + has_p)
        T = ops.add(ops.mul(Ht_e, (has_e * w)[:, None, None]), ops.mul(Ht_p, (has_p * w)[:, None, None]))
        g_raw, _ = fusion_gate(params, z_e, z_p)
        g = ops.add(ops.mul(g_raw, both[:, None]), (has_e * (1.0 - has_p))[:, None])
        z_gate = gate_mix(g, z_e, z_p)
    z_tok = attention_pool(T, inputs.m_union, params["pool.q"])
    z_f = clip_embed(z_gate, z_tok)

    raw_e = project_raw(params, "head.e", z_e)
    raw_p = project_raw(params, "head.p", z_p)
    raw_f = project_raw(params, "head.f", z_f)
    tok_e = ops.l2_normalize(project_raw(params, "head.tok_e", Ht_e))
    tok_p = ops.l2_normalize(project_raw(params, "head.tok_p", Ht_p))
    y_hat = project_raw(params, "sup", z_f)
    return FusionOutput(
        H_e=H_e, H_p=H_p, Ht_e=Ht_e, Ht_p=Ht_p, align=align,
        z_e=z_e, z_p=z_p, g=g, z_gate=z_gate, z_tok=z_tok, z_f=z_f,
        raw_e=raw_e, raw_p=raw_p, raw_f=raw_f,
        p_e=ops.l2_normalize(raw_e), p_p=ops.l2_normalize(raw_p), p_f=ops.l2_normalize(raw_f),
        tok_e=tok_e, tok_p=tok_p, y_hat=y_hat,
    )


class CTAF:
    """Parameter container plus convenience wrappers around :func:`forward`."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    def forward(self, inputs: ModelInputs | Batch, requires_grad: bool = False, use_time: bool | None = None):
        if isinstance(inputs, Batch):
            inputs = ModelInputs.from_batch(inputs)
        leaves = parameters(self.params, requires_grad=requires_grad)
        return forward(leaves, self.cfg, inputs, use_time), leaves
