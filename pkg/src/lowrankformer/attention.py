"""Scaled dot-product, multi-head, low-rank multi-head and Linformer attention.

Parameters live in a :class:`ParamStore` under names of the form
``{stack}.{layer}.{attn|cross}.{q|k|v|o|khat|vhat}.{W|E|D}`` plus
``....ln.g`` / ``....ln.b`` for the post-residual layer norm. A projection
slot holding ``W`` is dense; one holding ``E`` and ``D`` is factorized and
applied as ``(x @ E) @ D`` without forming ``E @ D``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import ops
from .numcore.ops import MASK_VALUE
from .numcore.params import ParamStore
from .numcore.tensor import DimensionError, Tensor, as_tensor

PROJ_SLOTS = ("q", "k", "v", "o")


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class UnsupportedVariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_enc_layers: int = 2
    n_dec_layers: int = 0
    ff_bias: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for field_name in ("d_model", "n_heads", "d_ff"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    d_v = d_k


@dataclass(frozen=True)
class LowRankConfig:
    r: int

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"rank r must be >= 1, got {self.r}")

    def compresses(self, m: int, n: int) -> bool:
        """True when an m x n factorization at this rank has fewer weights than m*n."""
        return self.r * (m + n) < m * n


@dataclass(frozen=True)
class LinformerConfig:
    k: int
    n_max: int

    def __post_init__(self):
        if not 1 <= self.k <= self.n_max:
            raise ConfigError(f"need 1 <= k <= n_max, got k={self.k}, n_max={self.n_max}")


@dataclass(frozen=True)
class AttentionMask:
    kind: str = "none"
    valid_len: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("none", "causal", "padding"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "padding" and not self.valid_len:
            raise ValueError("padding mask needs valid_len per batch row")

    @classmethod
    def causal(cls) -> "AttentionMask":
        return cls("causal")

    @classmethod
    def padding(cls, valid_len) -> "AttentionMask":
        return cls("padding", tuple(int(v) for v in valid_len))

    def apply(self, scores: Tensor) -> Tensor:
        if self.kind == "none":
            return scores
        if self.kind == "causal":
            return apply_causal_mask(scores)
        n_k = scores.shape[-1]
        lens = np.asarray(self.valid_len)
        blocked = np.arange(n_k)[None, :] >= lens[:, None]  # (batch, n_k)
        shape = (len(lens),) + (1,) * (scores.ndim - 2) + (n_k,)
        return ops.masked_fill(scores, blocked.reshape(shape))


NO_MASK = AttentionMask()


def apply_causal_mask(scores) -> Tensor:
    """Set logits (t, u) with u > t to the mask sentinel."""
    scores = as_tensor(scores)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"causal mask needs square logits, got {scores.shape}")
    n = scores.shape[-1]
    return ops.masked_fill(scores, np.triu(np.ones((n, n), dtype=bool), k=1))


def sdpa(Q, K, V, mask: AttentionMask = NO_MASK) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes; leading axes are batch."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"sdpa: query width {Q.shape} differs from key width {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"sdpa: key length {K.shape} differs from value length {V.shape}")
    scores = ops.scale(ops.matmul(Q, ops.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    weights = ops.softmax_lastdim(mask.apply(scores))
    return ops.matmul(weights, V)


# -- projections and head plumbing ---------------------------------------

def project(x: Tensor, params: ParamStore, slot: str) -> Tensor:
    if f"{slot}.W" in params:
        return ops.matmul(x, params[f"{slot}.W"])
    if f"{slot}.E" in params and f"{slot}.D" in params:
        return ops.matmul(ops.matmul(x, params[f"{slot}.E"]), params[f"{slot}.D"])
    raise KeyError(f"missing projection parameters for {slot!r}")


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, n_heads, d // n_heads))
    nl = len(lead)
    return ops.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    nl = len(lead)
    x = ops.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return ops.reshape(x, (*lead, n, h * dk))


def _check_width(x: Tensor, cfg: ModelConfig, what: str) -> None:
    if x.ndim < 2 or x.shape[-1] != cfg.d_model:
        raise DimensionError(f"{what} must be (..., n, {cfg.d_model}), got {x.shape}")


def _attention_block(x_q, x_kv, params, cfg, mask, prefix, lin=None) -> Tensor:
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    _check_width(x_q, cfg, "query input")
    _check_width(x_kv, cfg, "key/value input")
    q = project(x_q, params, f"{prefix}.q")
    k = project(x_kv, params, f"{prefix}.k")
    v = project(x_kv, params, f"{prefix}.v")
    if lin is not None:
        n = x_kv.shape[-2]
        k = ops.matmul(_length_projection(params, f"{prefix}.khat", n, lin), k)
        v = ops.matmul(_length_projection(params, f"{prefix}.vhat", n, lin), v)
    ctx = sdpa(split_heads(q, cfg.n_heads), split_heads(k, cfg.n_heads),
               split_heads(v, cfg.n_heads), mask)
    out = project(merge_heads(ctx), params, f"{prefix}.o")
    return ops.layer_norm(ops.add(out, x_q), params[f"{prefix}.ln.g"],
                          params[f"{prefix}.ln.b"], cfg.ln_eps)


def _length_projection(params, slot, n, lin: LinformerConfig) -> Tensor:
    if n > lin.n_max:
        raise SequenceLengthError(f"sequence length n={n} exceeds Linformer n_max={lin.n_max}")
    w = params[f"{slot}.W"]
    if n == lin.n_max:
        return w
    # shorter inputs use the leading n columns
    return ops.getitem(w, (slice(None), slice(0, n)))


def mha_forward(x_q, x_kv, params: ParamStore, cfg: ModelConfig,
                mask: AttentionMask = NO_MASK, prefix: str = "attn") -> Tensor:
    """LayerNorm(Concat(heads) W^O + x_q) with dense projections."""
    for s in PROJ_SLOTS:
        if f"{prefix}.{s}.W" not in params:
            raise KeyError(f"missing parameter {prefix}.{s}.W")
    return _attention_block(x_q, x_kv, params, cfg, mask, prefix)


def lrmha_forward(x_q, x_kv, params: ParamStore, cfg: ModelConfig, lr: LowRankConfig,
                  mask: AttentionMask = NO_MASK, prefix: str = "attn") -> Tensor:
    """Multi-head attention with every projection factorized as E @ D."""
    for s in PROJ_SLOTS:
        E, D = params[f"{prefix}.{s}.E"], params[f"{prefix}.{s}.D"]
        if E.shape[1] != lr.r or D.shape[0] != lr.r:
            raise DimensionError(f"{prefix}.{s}: factors {E.shape} x {D.shape} do not have rank {lr.r}")
    return _attention_block(x_q, x_kv, params, cfg, mask, prefix)


def linformer_attention(x, params: ParamStore, cfg: ModelConfig, lin: LinformerConfig,
                        prefix: str = "attn", mask: AttentionMask = NO_MASK) -> Tensor:
    """Self-attention whose keys and values are projected from length n down to k."""
    if mask.kind != "none":
        raise UnsupportedVariantError(
            f"Linformer attention does not support {mask.kind} masks: the length projection mixes positions")
    return _attention_block(x, x, params, cfg, NO_MASK, prefix, lin=lin)


# -- initialization ------------------------------------------------------

def init_projection(params: ParamStore, slot: str, m: int, n: int, r: int | None = None) -> None:
    if r is None:
        params.glorot(f"{slot}.W", m, n)
    else:
        params.glorot(f"{slot}.E", m, r)
        params.glorot(f"{slot}.D", r, n)


def init_attention(params: ParamStore, prefix: str, cfg: ModelConfig,
                   lr: LowRankConfig | None = None, lin: LinformerConfig | None = None) -> None:
    d = cfg.d_model
    for s in PROJ_SLOTS:
        init_projection(params, f"{prefix}.{s}", d, d, lr.r if lr else None)
    if lin is not None:
        params.glorot(f"{prefix}.khat.W", lin.k, lin.n_max)
        params.glorot(f"{prefix}.vhat.W", lin.k, lin.n_max)
    params.ones(f"{prefix}.ln.g", (d,))
    params.zeros(f"{prefix}.ln.b", (d,))
