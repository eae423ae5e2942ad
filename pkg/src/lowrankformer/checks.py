"""Quick invariant suite run by ``lowrankformer validate``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import costmodel
from .attention import LinformerConfig, LowRankConfig, ModelConfig
from .blocks import ClassifierModel, VariantSpec, build_stack, count_params, stack_forward
from .numcore import ops
from .numcore.gradcheck import gradcheck
from .numcore.params import ParamStore
from .numcore.tensor import Tensor, no_tape

SMALL_CONFIGS = (
    (ModelConfig(32, 2, 64, 1, 0), 7),
    (ModelConfig(16, 4, 24, 2, 0), 5),
    (ModelConfig(24, 3, 40, 1, 1), 6),
)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


def _mac_checks(analytic_fn) -> list[CheckResult]:
    out = []
    for cfg, n in SMALL_CONFIGS:
        specs = [VariantSpec("transformer", cfg), VariantSpec("lrt", cfg, lr=LowRankConfig(4))]
        if cfg.n_dec_layers == 0:
            specs.append(VariantSpec("linformer", cfg, lin=LinformerConfig(3, n + 1)))
        for spec in specs:
            name = f"macs {spec.id} d={cfg.d_model} N={cfg.n_enc_layers} M={cfg.n_dec_layers} n={n}"
            try:
                rep = costmodel.validate_against_instrumentation(spec, n, analytic_fn=analytic_fn)
                out.append(CheckResult(name, True, f"{rep.measured} MACs"))
            except costmodel.ValidationError as exc:
                out.append(CheckResult(name, False, str(exc)))
    return out


def _param_checks() -> list[CheckResult]:
    out = []
    cfg = ModelConfig(16, 2, 32, 2, 0)
    for variant, rank in (("transformer", None), ("lrt", 4), ("linformer", 4)):
        spec = VariantSpec.build(variant, cfg, rank, 9)
        model = ClassifierModel(spec, n_classes=3, max_len=8, vocab_size=10)
        expect = count_params(spec, True, 3, 10, 8).total
        got = model.params.total_count()
        out.append(CheckResult(f"params {spec.id}", expect == got, f"analytic {expect} stored {got}"))
    return out


def _gradient_check() -> CheckResult:
    cfg = ModelConfig(8, 2, 12, 1, 0)
    spec = VariantSpec("lrt", cfg, lr=LowRankConfig(3))
    params = build_stack(spec, seed=1)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 8))
    weights = Tensor(rng.standard_normal((4, 8)))
    errs = gradcheck(lambda: ops.sum(ops.mul(stack_forward(x, params, spec), weights)),
                     dict(params.items()), max_coords=6)
    worst = max(errs.values())
    return CheckResult("gradient check lrt layer", worst < 1e-5, f"max rel err {worst:.2e}")


def _reduction_check() -> CheckResult:
    cfg = ModelConfig(8, 2, 12, 1, 0)
    dense = build_stack(VariantSpec("transformer", cfg), seed=2)
    lr_spec = VariantSpec("lrt", cfg, lr=LowRankConfig(8))
    fact = ParamStore(0)
    for name, t in dense.items():
        if name.endswith(".W"):
            m, n = t.shape
            # rank min(m, n) = d_model: W = I @ W or W @ I
            fact.add(name[:-1] + "E", np.eye(m) if m <= n else t.data)
            fact.add(name[:-1] + "D", t.data if m <= n else np.eye(n))
        else:
            fact.add(name, t.data)
    x = np.random.default_rng(3).standard_normal((5, 8))
    with no_tape():
        a = stack_forward(x, dense, VariantSpec("transformer", cfg)).data
        b = stack_forward(x, fact, lr_spec).data
    diff = float(np.abs(a - b).max())
    return CheckResult("lrt identity factorization == transformer", diff < 1e-12, f"max diff {diff:.1e}")


def run_quick_suite(analytic_fn: Callable = costmodel.macs_breakdown) -> list[CheckResult]:
    results = _mac_checks(analytic_fn)
    results += _param_checks()
    results.append(_gradient_check())
    results.append(_reduction_check())
    return results


def off_by_one(spec, n, n_dec=None, batch=1):
    """A deliberately wrong analytic model, for exercising the failure path."""
    out = costmodel.macs_breakdown(spec, n, n_dec, batch)
    first = next(iter(out))
    out[first] += 1
    return out
