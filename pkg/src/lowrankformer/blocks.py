"""Network blocks and model assemblies for the three variants.

Feed-forward parameters use the slots ``{stack}.{layer}.ff.e1`` (d_model to
d_ff) and ``{stack}.{layer}.ff.e2`` (d_ff to d_model), each either dense
(``W``) or factorized (``E``, ``D``), with optional bias ``b``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    NO_MASK,
    AttentionMask,
    ConfigError,
    LinformerConfig,
    LowRankConfig,
    ModelConfig,
    SequenceLengthError,
    UnsupportedVariantError,
    init_attention,
    init_projection,
    linformer_attention,
    lrmha_forward,
    mha_forward,
    project,
)
from .numcore import ops
from .numcore.params import ParamStore
from .numcore.tensor import DimensionError, Tensor, as_tensor

VARIANTS = ("transformer", "lrt", "linformer")


@dataclass(frozen=True)
class VariantSpec:
    variant: str
    cfg: ModelConfig
    lr: LowRankConfig | None = None
    lin: LinformerConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if (self.lr is not None) != (self.variant == "lrt"):
            raise ConfigError("a LowRankConfig is required for lrt and only for lrt")
        if (self.lin is not None) != (self.variant == "linformer"):
            raise ConfigError("a LinformerConfig is required for linformer and only for linformer")
        if self.variant == "linformer" and self.cfg.n_dec_layers:
            raise UnsupportedVariantError("Linformer has no causal decoder; set n_dec_layers=0")

    @property
    def rank(self) -> int:
        if self.lr is not None:
            return self.lr.r
        if self.lin is not None:
            return self.lin.k
        return 0

    @property
    def id(self) -> str:
        if self.variant == "lrt":
            return f"lrt-r{self.lr.r}"
        if self.variant == "linformer":
            return f"linformer-k{self.lin.k}"
        return "transformer"

    def to_dict(self) -> dict:
        out = {"variant": self.variant, "model": asdict(self.cfg)}
        if self.lr is not None:
            out["lowrank"] = asdict(self.lr)
        if self.lin is not None:
            out["linformer"] = asdict(self.lin)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VariantSpec":
        lr = LowRankConfig(**d["lowrank"]) if d.get("lowrank") else None
        lin = LinformerConfig(**d["linformer"]) if d.get("linformer") else None
        return cls(d["variant"], ModelConfig(**d["model"]), lr, lin)

    @classmethod
    def build(cls, variant: str, cfg: ModelConfig, rank: int | None = None,
              n_max: int | None = None) -> "VariantSpec":
        if variant == "lrt":
            return cls(variant, cfg, lr=LowRankConfig(rank))
        if variant == "linformer":
            return cls(variant, cfg, lin=LinformerConfig(rank, n_max))
        return cls(variant, cfg)


# -- linear encoder-decoder ----------------------------------------------

@dataclass
class LedLayer:
    """Linear map x -> (x @ E) @ D (+ bias) of rank at most r."""

    E: Tensor
    D: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.E.ndim != 2 or self.D.ndim != 2 or self.E.shape[1] != self.D.shape[0]:
            raise DimensionError(f"LED factors {self.E.shape} and {self.D.shape} do not chain")
        if self.bias is not None and self.bias.shape != (self.D.shape[1],):
            raise DimensionError(f"LED bias {self.bias.shape} does not match output width {self.D.shape[1]}")

    @property
    def rank(self) -> int:
        return self.E.shape[1]

    def param_count(self) -> int:
        m, r = self.E.shape
        n = self.D.shape[1]
        return r * (m + n) + (n if self.bias is not None else 0)

    @classmethod
    def from_store(cls, params: ParamStore, slot: str) -> "LedLayer":
        bias = params[f"{slot}.b"] if f"{slot}.b" in params else None
        return cls(params[f"{slot}.E"], params[f"{slot}.D"], bias)

    def __call__(self, x) -> Tensor:
        return led_forward(x, self)


def led_forward(x, led: LedLayer) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != led.E.shape[0]:
        raise DimensionError(f"LED input width {x.shape[-1]} != {led.E.shape[0]}")
    out = ops.matmul(ops.matmul(x, led.E), led.D)
    if led.bias is not None:
        out = ops.add(out, led.bias)
    return out


# -- feed-forward ----------------------------------------------------------

def _linear(x, params, slot):
    out = project(x, params, slot)
    if f"{slot}.b" in params:
        out = ops.add(out, params[f"{slot}.b"])
    return out


def _ff_block(x, params, cfg: ModelConfig, prefix: str) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != cfg.d_model:
        raise DimensionError(f"feed-forward input width {x.shape[-1]} != d_model={cfg.d_model}")
    h = ops.relu(_linear(x, params, f"{prefix}.e1"))
    out = _linear(h, params, f"{prefix}.e2")
    return ops.layer_norm(ops.add(out, x), params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"],
                          cfg.ln_eps)


def ff_forward(x, params: ParamStore, cfg: ModelConfig, prefix: str = "ff") -> Tensor:
    """LayerNorm(relu(x W1 + b1) W2 + b2 + x)."""
    for s in ("e1", "e2"):
        if f"{prefix}.{s}.W" not in params:
            raise KeyError(f"missing parameter {prefix}.{s}.W")
    return _ff_block(x, params, cfg, prefix)


def lrff_forward(x, params: ParamStore, cfg: ModelConfig, lr: LowRankConfig,
                 prefix: str = "ff") -> Tensor:
    """LayerNorm(relu(x E1 D1) E2 D2 + x), biases included when configured."""
    for s in ("e1", "e2"):
        if params[f"{prefix}.{s}.E"].shape[1] != lr.r:
            raise DimensionError(f"{prefix}.{s}.E does not have rank {lr.r}")
    return _ff_block(x, params, cfg, prefix)


def init_ff(params: ParamStore, prefix: str, cfg: ModelConfig, lr: LowRankConfig | None = None):
    r = lr.r if lr else None
    init_projection(params, f"{prefix}.e1", cfg.d_model, cfg.d_ff, r)
    if cfg.ff_bias:
        params.zeros(f"{prefix}.e1.b", (cfg.d_ff,))
    init_projection(params, f"{prefix}.e2", cfg.d_ff, cfg.d_model, r)
    if cfg.ff_bias:
        params.zeros(f"{prefix}.e2.b", (cfg.d_model,))
    params.ones(f"{prefix}.ln.g", (cfg.d_model,))
    params.zeros(f"{prefix}.ln.b", (cfg.d_model,))


# -- layers ----------------------------------------------------------------

def self_attention_forward(x, params, spec: VariantSpec, prefix, mask):
    if spec.variant == "linformer":
        return linformer_attention(x, params, spec.cfg, spec.lin, prefix=prefix, mask=mask)
    if spec.variant == "lrt":
        return lrmha_forward(x, x, params, spec.cfg, spec.lr, mask=mask, prefix=prefix)
    return mha_forward(x, x, params, spec.cfg, mask=mask, prefix=prefix)


def feed_forward(x, params, spec: VariantSpec, prefix):
    if spec.variant == "lrt":
        return lrff_forward(x, params, spec.cfg, spec.lr, prefix=prefix)
    return ff_forward(x, params, spec.cfg, prefix=prefix)


def encoder_layer_forward(x, params: ParamStore, spec: VariantSpec, prefix: str = "enc.0",
                          mask: AttentionMask = NO_MASK) -> Tensor:
    h = self_attention_forward(x, params, spec, f"{prefix}.attn", mask)
    return feed_forward(h, params, spec, f"{prefix}.ff")


def decoder_layer_forward(y, enc_out, params: ParamStore, spec: VariantSpec,
                          prefix: str = "dec.0") -> Tensor:
    """Causal self-attention, cross-attention over ``enc_out``, then feed-forward."""
    if spec.variant == "linformer":
        raise UnsupportedVariantError("Linformer decoder layers are not supported")
    h = self_attention_forward(y, params, spec, f"{prefix}.attn", AttentionMask.causal())
    if spec.variant == "lrt":
        h = lrmha_forward(h, enc_out, params, spec.cfg, spec.lr, prefix=f"{prefix}.cross")
    else:
        h = mha_forward(h, enc_out, params, spec.cfg, prefix=f"{prefix}.cross")
    return feed_forward(h, params, spec, f"{prefix}.ff")


def init_encoder_layer(params: ParamStore, prefix: str, spec: VariantSpec) -> None:
    init_attention(params, f"{prefix}.attn", spec.cfg, spec.lr, spec.lin)
    init_ff(params, f"{prefix}.ff", spec.cfg, spec.lr)


def init_decoder_layer(params: ParamStore, prefix: str, spec: VariantSpec) -> None:
    if spec.variant == "linformer":
        raise UnsupportedVariantError("Linformer decoder layers are not supported")
    init_attention(params, f"{prefix}.attn", spec.cfg, spec.lr)
    init_attention(params, f"{prefix}.cross", spec.cfg, spec.lr)
    init_ff(params, f"{prefix}.ff", spec.cfg, spec.lr)


def init_stack(params: ParamStore, spec: VariantSpec) -> ParamStore:
    for i in range(spec.cfg.n_enc_layers):
        init_encoder_layer(params, f"enc.{i}", spec)
    for i in range(spec.cfg.n_dec_layers):
        init_decoder_layer(params, f"dec.{i}", spec)
    return params


def build_stack(spec: VariantSpec, seed: int = 0, dtype="float64") -> ParamStore:
    return init_stack(ParamStore(seed, dtype), spec)


def encode(x, params: ParamStore, spec: VariantSpec, mask: AttentionMask = NO_MASK) -> Tensor:
    h = as_tensor(x)
    for i in range(spec.cfg.n_enc_layers):
        h = encoder_layer_forward(h, params, spec, f"enc.{i}", mask)
    return h


def decode(y, enc_out, params: ParamStore, spec: VariantSpec) -> Tensor:
    h = as_tensor(y)
    for i in range(spec.cfg.n_dec_layers):
        h = decoder_layer_forward(h, enc_out, params, spec, f"dec.{i}")
    return h


def stack_forward(x, params: ParamStore, spec: VariantSpec, y=None) -> Tensor:
    """Encoder stack over ``x``; when ``spec`` has decoder layers, decode ``y`` (default ``x``)."""
    enc = encode(x, params, spec)
    if spec.cfg.n_dec_layers == 0:
        return enc
    return decode(x if y is None else y, enc, params, spec)


# -- classifier --------------------------------------------------------------

class ClassifierModel:
    """Token embedding + [CLS] prefix + learned positions, an encoder stack, and a
    linear head read at position 0."""

    def __init__(self, spec: VariantSpec, n_classes: int, max_len: int, vocab_size: int = 256,
                 seed: int = 0, dtype="float64"):
        if spec.cfg.n_dec_layers:
            raise ConfigError("classifier models are encoder-only")
        if spec.lin is not None and spec.lin.n_max < max_len + 1:
            raise SequenceLengthError(
                f"Linformer n_max={spec.lin.n_max} cannot hold {max_len} tokens plus [CLS]")
        self.spec = spec
        self.n_classes = n_classes
        self.max_len = max_len
        self.vocab_size = vocab_size
        d = spec.cfg.d_model
        self.params = ParamStore(seed, dtype)
        p = self.params
        p.glorot("emb.tok", vocab_size, d)
        p.glorot("emb.cls", 1, d)
        p.glorot("emb.pos", max_len + 1, d)
        init_stack(p, spec)
        # zero head: initial logits are uniform, so the first loss is ln(n_classes)
        p.zeros("head.W", (d, n_classes))
        p.zeros("head.b", (n_classes,))

    def logits(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, n = tokens.shape
        if n > self.max_len:
            raise SequenceLengthError(f"input length {n} exceeds max_len={self.max_len}")
        p = self.params
        d = self.spec.cfg.d_model
        tok = ops.take_rows(p["emb.tok"], tokens)
        cls = ops.broadcast_to(ops.reshape(p["emb.cls"], (1, 1, d)), (b, 1, d))
        pos = ops.getitem(p["emb.pos"], slice(0, n + 1))
        h = ops.add(ops.concat([cls, tok], axis=1), pos)
        h = encode(h, p, self.spec)
        first = ops.getitem(h, (slice(None), 0))
        return ops.add(ops.matmul(first, p["head.W"]), p["head.b"])

    __call__ = logits

    def loss(self, tokens, labels) -> Tensor:
        return ops.cross_entropy_with_logits(self.logits(tokens), labels)

    def save(self, path) -> None:
        meta = {"spec": self.spec.to_dict(), "n_classes": self.n_classes,
                "max_len": self.max_len, "vocab_size": self.vocab_size,
                "seed": self.params.rng_seed, "dtype": str(self.params.dtype)}
        save_model(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        params, meta = load_model(path)
        model = cls(VariantSpec.from_dict(meta["spec"]), meta["n_classes"], meta["max_len"],
                    meta["vocab_size"], meta["seed"], meta["dtype"])
        for name, t in params.items():
            model.params.set(name, t.data)
        return model


def save_model(path, params: ParamStore, meta: dict) -> None:
    """Write the binary parameter file at ``path`` and a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    params.save(path)
    meta = dict(meta, dtype=str(params.dtype))
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path) -> tuple[ParamStore, dict]:
    meta = json.loads(Path(str(path) + ".json").read_text())
    return ParamStore.load(path, meta["dtype"], meta.get("seed", 0)), meta


# -- parameter accounting ----------------------------------------------------

@dataclass
class ParamCount:
    attention: int = 0
    ff: int = 0
    ff_bias: int = 0
    linformer_proj: int = 0
    norms: int = 0
    embeddings: int = 0
    head: int = 0
    per_layer: dict = field(default_factory=dict)

    @property
    def weights(self) -> int:
        """Projection and feed-forward weight matrices only."""
        return self.attention + self.ff

    @property
    def total(self) -> int:
        return (self.attention + self.ff + self.ff_bias + self.linformer_proj + self.norms
                + self.embeddings + self.head)


def _proj_count(m: int, n: int, r: int | None) -> int:
    return m * n if r is None else r * (m + n)


def count_params(spec: VariantSpec, include_embeddings: bool = False, n_classes: int = 0,
                 vocab_size: int = 256, max_len: int | None = None) -> ParamCount:
    """Closed-form parameter counts; ``include_embeddings`` requires ``max_len``."""
    cfg = spec.cfg
    d, f = cfg.d_model, cfg.d_ff
    r = spec.lr.r if spec.lr else None
    attn = 4 * _proj_count(d, d, r)
    ff = _proj_count(d, f, r) + _proj_count(f, d, r)
    ff_bias = (f + d) if cfg.ff_bias else 0
    lin = 2 * spec.lin.k * spec.lin.n_max if spec.lin else 0
    out = ParamCount()
    out.attention = attn * (cfg.n_enc_layers + 2 * cfg.n_dec_layers)
    out.ff = ff * (cfg.n_enc_layers + cfg.n_dec_layers)
    out.ff_bias = ff_bias * (cfg.n_enc_layers + cfg.n_dec_layers)
    out.linformer_proj = lin * cfg.n_enc_layers
    out.norms = 2 * d * (2 * cfg.n_enc_layers + 3 * cfg.n_dec_layers)
    out.per_layer = {"encoder": attn + ff + ff_bias + lin + 4 * d,
                     "decoder": 2 * attn + ff + ff_bias + 6 * d,
                     "encoder_weights": attn + ff}
    if include_embeddings:
        if max_len is None:
            raise ValueError("max_len is required when counting embeddings")
        out.embeddings = vocab_size * d + d + (max_len + 1) * d
    if n_classes:
        out.head = d * n_classes + n_classes
    return out
