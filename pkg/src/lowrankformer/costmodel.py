"""Closed-form parameter, MAC and memory accounting for the three variants.

MACs count only matrix products (one multiply-accumulate per unit) for one
forward pass of the encoder/decoder stack. Backward is taken as twice the
forward cost.

Memory ledger, in elements per batch row (times ``element_size``):

training activations
    Every non-parameter tensor that feeds a matmul, softmax, layer norm or
    relu, counted once per tensor. Per self-attention sublayer over n
    positions: the input x, Q, K and V (n*d each), the softmax input and
    output (H*n*n each), the merged head context and the layer-norm input
    (n*d each). LRT adds the four rank-r intermediates x@E (4*n*r).
    Linformer keeps K and V before the length projection (n*d each), the
    projected K^ and V^ (k*d each) and H*n*k attention matrices. A
    cross-attention sublayer also keeps the encoder output once. Per
    feed-forward sublayer: its input (n*d), the relu input and output
    (n*d_ff each) and the layer-norm input (n*d); LRT adds 2*n*r.
inference peak
    The largest live set of any sublayer: for attention x, Q, K, V (K^, V^
    for Linformer) and both attention matrices during the softmax; for the
    feed-forward x and the two d_ff-wide tensors around the relu.

Training memory is parameters + gradients + training activations;
inference memory is parameters + inference peak.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attention import AttentionMask, SequenceLengthError
from .blocks import (
    VariantSpec,
    build_stack,
    count_params,
    decoder_layer_forward,
    encoder_layer_forward,
    feed_forward,
    self_attention_forward,
    stack_forward,
)
from .numcore.tensor import Tape, counting_macs, no_tape

BACKWARD_FACTOR = 2
CACHED_OPS = frozenset({"matmul", "softmax", "layer_norm", "relu"})


class ValidationError(AssertionError):
    def __init__(self, message: str, diff: dict):
        super().__init__(message)
        self.diff = diff


def _proj(m: int, n: int, r: int | None) -> int:
    return m * n if r is None else r * (m + n)


def _check_len(spec: VariantSpec, n: int) -> None:
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if spec.lin is not None and n > spec.lin.n_max:
        raise SequenceLengthError(f"sequence length n={n} exceeds Linformer n_max={spec.lin.n_max}")


def attention_macs(spec: VariantSpec, n_q: int, n_kv: int) -> int:
    """Projections plus score and weighted-sum products of one attention sublayer."""
    d = spec.cfg.d_model
    r = spec.lr.r if spec.lr else None
    p = _proj(d, d, r)
    total = (2 * n_q + 2 * n_kv) * p
    if spec.lin is not None:
        k = spec.lin.k
        return total + 2 * k * n_kv * d + 2 * n_q * k * d
    return total + 2 * n_q * n_kv * d


def ff_macs(spec: VariantSpec, n: int) -> int:
    d, f = spec.cfg.d_model, spec.cfg.d_ff
    r = spec.lr.r if spec.lr else None
    return n * (_proj(d, f, r) + _proj(f, d, r))


def macs_breakdown(spec: VariantSpec, n: int, n_dec: int | None = None, batch: int = 1) -> dict[str, int]:
    """Forward MACs per sublayer, keyed like the parameter prefixes."""
    _check_len(spec, n)
    t = n if n_dec is None else n_dec
    out = {}
    for i in range(spec.cfg.n_enc_layers):
        out[f"enc.{i}.attn"] = batch * attention_macs(spec, n, n)
        out[f"enc.{i}.ff"] = batch * ff_macs(spec, n)
    for i in range(spec.cfg.n_dec_layers):
        out[f"dec.{i}.attn"] = batch * attention_macs(spec, t, t)
        out[f"dec.{i}.cross"] = batch * attention_macs(spec, t, n)
        out[f"dec.{i}.ff"] = batch * ff_macs(spec, t)
    return out


def macs_forward(spec: VariantSpec, n: int, n_dec: int | None = None, batch: int = 1) -> int:
    return sum(macs_breakdown(spec, n, n_dec, batch).values())


def macs_forward_backward(spec: VariantSpec, n: int, n_dec: int | None = None, batch: int = 1) -> int:
    return (1 + BACKWARD_FACTOR) * macs_forward(spec, n, n_dec, batch)


def classifier_macs(spec: VariantSpec, n: int, n_classes: int, batch: int = 1) -> int:
    """Forward MACs of a classifier over ``n`` tokens ([CLS] adds one position)."""
    return macs_forward(spec, n + 1, batch=batch) + batch * spec.cfg.d_model * n_classes


# -- memory ----------------------------------------------------------------

def _attn_len(spec: VariantSpec, n_kv: int) -> int:
    return spec.lin.k if spec.lin is not None else n_kv


def _attention_cache(spec: VariantSpec, n_q: int, n_kv: int) -> int:
    # a cross-attention's encoder-side input is counted once per stack (enc.out)
    d, h = spec.cfg.d_model, spec.cfg.n_heads
    m = _attn_len(spec, n_kv)
    elems = n_q * d                      # query-side input
    elems += n_q * d + 2 * m * d         # Q and the K, V fed to the score/context products
    elems += 2 * h * n_q * m             # softmax input and output
    elems += 2 * n_q * d                 # merged context, layer-norm input
    if spec.lin is not None:
        elems += 2 * n_kv * d            # K and V before the length projection
    if spec.lr is not None:
        elems += (2 * n_q + 2 * n_kv) * spec.lr.r
    return elems


def _ff_cache(spec: VariantSpec, n: int) -> int:
    d, f = spec.cfg.d_model, spec.cfg.d_ff
    elems = 2 * n * d + 2 * n * f
    if spec.lr is not None:
        elems += 2 * n * spec.lr.r
    return elems


def _attention_peak(spec: VariantSpec, n_q: int, n_kv: int, cross: bool) -> int:
    d, h = spec.cfg.d_model, spec.cfg.n_heads
    m = _attn_len(spec, n_kv)
    elems = n_q * d + (n_kv * d if cross else 0) + n_q * d + 2 * m * d + 2 * h * n_q * m
    return elems


def _ff_peak(spec: VariantSpec, n: int) -> int:
    return n * spec.cfg.d_model + 2 * n * spec.cfg.d_ff


def activation_breakdown(spec: VariantSpec, n: int, n_dec: int | None = None) -> dict[str, int]:
    """Training-cache elements per sublayer for one batch row."""
    _check_len(spec, n)
    t = n if n_dec is None else n_dec
    out = {}
    for i in range(spec.cfg.n_enc_layers):
        out[f"enc.{i}.attn"] = _attention_cache(spec, n, n)
        out[f"enc.{i}.ff"] = _ff_cache(spec, n)
    if spec.cfg.n_dec_layers:
        out["enc.out"] = n * spec.cfg.d_model
    for i in range(spec.cfg.n_dec_layers):
        out[f"dec.{i}.attn"] = _attention_cache(spec, t, t)
        out[f"dec.{i}.cross"] = _attention_cache(spec, t, n)
        out[f"dec.{i}.ff"] = _ff_cache(spec, t)
    return out


def train_activation_elements(spec: VariantSpec, n: int, n_dec: int | None = None) -> int:
    return sum(activation_breakdown(spec, n, n_dec).values())


def infer_peak_elements(spec: VariantSpec, n: int, n_dec: int | None = None) -> int:
    _check_len(spec, n)
    t = n if n_dec is None else n_dec
    peaks = [0]
    if spec.cfg.n_enc_layers:
        peaks += [_attention_peak(spec, n, n, False), _ff_peak(spec, n)]
    if spec.cfg.n_dec_layers:
        peaks += [_attention_peak(spec, t, t, False), _attention_peak(spec, t, n, True),
                  _ff_peak(spec, t)]
    return max(peaks)


def attention_matrix_bytes(spec: VariantSpec, n: int, element_size: int = 4) -> int:
    """Bytes of one H x n x (n or k) attention matrix of a self-attention layer."""
    return spec.cfg.n_heads * n * _attn_len(spec, n) * element_size


def memory_estimate(spec: VariantSpec, n: int, mode: str = "train", element_size: int = 4,
                    batch: int = 1, n_dec: int | None = None) -> int:
    param_bytes = count_params(spec).total * element_size
    if mode == "infer":
        return param_bytes + batch * infer_peak_elements(spec, n, n_dec) * element_size
    if mode == "train":
        return 2 * param_bytes + batch * train_activation_elements(spec, n, n_dec) * element_size
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")


def tape_cached_elements(tape: Tape) -> int:
    """Elements of distinct non-parameter tensors feeding cached ops on ``tape``."""
    seen = {}
    for node in tape.nodes:
        if node.op not in CACHED_OPS:
            continue
        for t in node.inputs:
            if not t.param_only:
                seen[id(t)] = t.size
    return sum(seen.values())


@dataclass
class CostReport:
    variant: str
    n: int
    rank: int
    params: int
    macs_fwd: int
    macs_fwd_bwd: int
    mem_infer_bytes: int
    mem_train_bytes: int
    element_size: int

    def as_dict(self) -> dict:
        return asdict(self)


def cost_report(spec: VariantSpec, n: int, element_size: int = 4, batch: int = 1) -> CostReport:
    fwd = macs_forward(spec, n, batch=batch)
    return CostReport(
        variant=spec.variant, n=n, rank=spec.rank, params=count_params(spec).total,
        macs_fwd=fwd, macs_fwd_bwd=(1 + BACKWARD_FACTOR) * fwd,
        mem_infer_bytes=memory_estimate(spec, n, "infer", element_size, batch),
        mem_train_bytes=memory_estimate(spec, n, "train", element_size, batch),
        element_size=element_size,
    )


def linformer_crossover(lrt: VariantSpec, lin: VariantSpec) -> int | None:
    """Smallest n from which Linformer forward MACs stay below LRT's up to n_max."""
    best = None
    for n in range(lin.lin.n_max, 0, -1):
        if macs_forward(lin, n) < macs_forward(lrt, n):
            best = n
        else:
            break
    return best


# -- instrumentation check ---------------------------------------------------

@dataclass
class ValidationReport:
    spec_id: str
    n: int
    analytic: int
    measured: int
    components: dict

    @property
    def ok(self) -> bool:
        return self.analytic == self.measured and all(
            a == m for a, m in self.components.values())


def measure_macs(spec: VariantSpec, n: int, n_dec: int | None = None, batch: int = 1,
                 seed: int = 0) -> tuple[int, dict[str, int]]:
    """Run a real forward under a MAC counter; returns (total, per-sublayer counts)."""
    params = build_stack(spec, seed)
    rng = np.random.default_rng(seed)
    d = spec.cfg.d_model
    t = n if n_dec is None else n_dec
    x = rng.standard_normal((batch, n, d))
    y = rng.standard_normal((batch, t, d))
    with no_tape():
        with counting_macs() as total:
            stack_forward(x, params, spec, y=y if spec.cfg.n_dec_layers else None)
        parts = {}
        for i in range(spec.cfg.n_enc_layers):
            with counting_macs() as c:
                encoder_layer_forward(x, params, spec, f"enc.{i}")
            ff_only = _measure_ff(x, params, spec, f"enc.{i}.ff")
            parts[f"enc.{i}.attn"] = c.macs - ff_only
            parts[f"enc.{i}.ff"] = ff_only
        for i in range(spec.cfg.n_dec_layers):
            with counting_macs() as c:
                decoder_layer_forward(y, x, params, spec, f"dec.{i}")
            parts.update(_measure_decoder_parts(y, x, params, spec, f"dec.{i}", c.macs))
    return total.macs, parts


def _measure_ff(x, params, spec, prefix) -> int:
    with counting_macs() as c:
        feed_forward(x, params, spec, prefix)
    return c.macs


def _measure_decoder_parts(y, enc, params, spec, prefix, layer_total) -> dict[str, int]:
    with counting_macs() as c:
        self_attention_forward(y, params, spec, f"{prefix}.attn", AttentionMask.causal())
    ff = _measure_ff(y, params, spec, f"{prefix}.ff")
    return {f"{prefix}.attn": c.macs, f"{prefix}.cross": layer_total - c.macs - ff,
            f"{prefix}.ff": ff}


def validate_against_instrumentation(spec: VariantSpec, n: int, n_dec: int | None = None,
                                     batch: int = 1, analytic_fn=macs_breakdown) -> ValidationReport:
    """Compare analytic forward MACs with a counted forward; raise on any mismatch."""
    analytic = analytic_fn(spec, n, n_dec, batch)
    measured_total, measured = measure_macs(spec, n, n_dec, batch)
    keys = sorted(set(analytic) | set(measured))
    components = {k: (analytic.get(k, 0), measured.get(k, 0)) for k in keys}
    report = ValidationReport(spec.id, n, sum(analytic.values()), measured_total, components)
    if not report.ok:
        diff = {k: a - m for k, (a, m) in components.items() if a != m}
        raise ValidationError(
            f"{spec.id} n={n}: analytic {report.analytic} MACs vs measured {measured_total}; "
            f"per-component diff {diff}", diff)
    return report
