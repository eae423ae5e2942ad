import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrankformer import costmodel as cm
from lowrankformer.attention import ModelConfig, SequenceLengthError
from lowrankformer.blocks import VariantSpec, build_stack, count_params, stack_forward
from lowrankformer.numcore import ops, recording

BASE_SIZE = ModelConfig(768, 12, 3072, 2)
SMALL = ModelConfig(32, 2, 64, 1)


def spec(variant, cfg=BASE_SIZE, rank=64, n_max=2048):
    return VariantSpec.build(variant, cfg, rank, n_max)


def test_attention_terms_at_512():
    proj = 4 * 512 * 768 * 768
    assert cm.attention_macs(spec("transformer"), 512, 512) - proj == 2 * 512 ** 2 * 768 == 402_653_184
    assert cm.attention_macs(spec("linformer"), 512, 512) - proj == 4 * 512 * 64 * 768 == 100_663_296


def test_crossover_at_twice_k():
    proj = 4 * 128 * 768 * 768
    assert cm.attention_macs(spec("transformer"), 128, 128) - proj == 25_165_824
    assert cm.attention_macs(spec("linformer"), 128, 128) - proj == 25_165_824


def test_lrt_projection_macs():
    s = spec("lrt")
    assert cm.attention_macs(s, 10, 10) == 10 * 4 * 64 * 1536 + 2 * 100 * 768
    assert cm.ff_macs(s, 10) == 10 * 2 * 64 * 3840


def test_backward_is_twice_forward():
    s = spec("lrt")
    assert cm.macs_forward_backward(s, 256) == 3 * cm.macs_forward(s, 256)


@pytest.mark.parametrize("variant,rank", [("transformer", None), ("lrt", 4), ("linformer", 3)])
def test_small_config_instrumented(variant, rank):
    s = VariantSpec.build(variant, SMALL, rank, 8)
    rep = cm.validate_against_instrumentation(s, 7)
    assert rep.ok and rep.analytic == rep.measured


@pytest.mark.parametrize("variant", ["transformer", "lrt"])
def test_decoder_and_batch_instrumented(variant):
    s = VariantSpec.build(variant, ModelConfig(16, 4, 24, 2, 2), 3)
    rep = cm.validate_against_instrumentation(s, 6, n_dec=4, batch=2)
    assert set(rep.components) >= {"enc.1.ff", "dec.0.attn", "dec.1.cross"}


def test_validation_error_carries_diff():
    def wrong(s, n, n_dec=None, batch=1):
        out = cm.macs_breakdown(s, n, n_dec, batch)
        out["enc.0.ff"] -= 5
        return out
    with pytest.raises(cm.ValidationError) as info:
        cm.validate_against_instrumentation(VariantSpec("transformer", SMALL), 5, analytic_fn=wrong)
    assert info.value.diff == {"enc.0.ff": -5}


def test_sequence_length_checks():
    with pytest.raises(ValueError):
        cm.macs_forward(spec("transformer"), 0)
    with pytest.raises(SequenceLengthError):
        cm.macs_forward(spec("linformer", n_max=100), 101)


@pytest.mark.parametrize("variant", ["transformer", "lrt", "linformer"])
def test_second_differences(variant):
    s = spec(variant, n_max=256)
    m = [cm.macs_forward(s, n) for n in (64, 128, 192, 256)]
    d2 = [m[i + 2] - 2 * m[i + 1] + m[i] for i in range(2)]
    if variant == "linformer":
        assert d2 == [0, 0]
    else:
        assert d2[0] == d2[1] > 0
        # 2 layers x 2 n^2 d with a 64 step
        assert d2[0] == 2 * 2 * 2 * 64 ** 2 * 768


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(1, 64), st.integers(1, 64), st.integers(1, 100))
def test_lrt_cheaper_when_every_matrix_compresses(dh, h, f, r, n):
    cfg = ModelConfig(dh * h, h, f, 1)
    d = cfg.d_model
    if r * 2 * d < d * d and r * (d + f) < d * f:
        assert cm.macs_forward(VariantSpec.build("lrt", cfg, r), n) < \
            cm.macs_forward(VariantSpec("transformer", cfg), n)


def test_linformer_mac_crossover_exists_and_falls_with_rank():
    points = [cm.linformer_crossover(spec("lrt", rank=r), spec("linformer", rank=r, n_max=16384))
              for r in (32, 64, 128, 256)]
    assert all(p is not None for p in points)
    assert points == sorted(points, reverse=True)
    lin = spec("linformer", rank=64, n_max=16384)
    lrt = spec("lrt", rank=64)
    n = points[1]
    assert cm.macs_forward(lin, n) < cm.macs_forward(lrt, n)
    assert cm.macs_forward(lin, n - 1) >= cm.macs_forward(lrt, n - 1)


@pytest.mark.parametrize("r", [32, 64, 128])
def test_linformer_memory_wins_from_1024(r):
    lrt = spec("lrt", rank=r)
    for n in (128, 256, 512, 1024, 2048):
        lin = spec("linformer", rank=r, n_max=n)
        wins = cm.memory_estimate(lin, n, "infer") < cm.memory_estimate(lrt, n, "infer")
        assert wins == (n >= 1024)


# -- memory ---------------------------------------------------------------------

def test_attention_matrix_bytes():
    assert cm.attention_matrix_bytes(spec("transformer"), 1024) == 12 * 1024 ** 2 * 4 == 50_331_648
    assert cm.attention_matrix_bytes(spec("linformer"), 1024) == 12 * 1024 * 64 * 4 == 3_145_728


@pytest.mark.parametrize("variant", ["transformer", "lrt", "linformer"])
@pytest.mark.parametrize("es", [4, 8])
def test_parameter_bytes_and_train_exceeds_infer(variant, es):
    s = spec(variant, cfg=SMALL, rank=4, n_max=64)
    params = count_params(s).total * es
    for n in (1, 5, 64):
        infer = cm.memory_estimate(s, n, "infer", es)
        train = cm.memory_estimate(s, n, "train", es)
        assert infer == params + cm.infer_peak_elements(s, n) * es
        assert train == 2 * params + cm.train_activation_elements(s, n) * es
        assert train > infer
    with pytest.raises(ValueError):
        cm.memory_estimate(s, 4, "both")


@pytest.mark.parametrize("variant,layers", [("transformer", (2, 0)), ("lrt", (2, 0)),
                                            ("linformer", (2, 0)), ("transformer", (1, 2)),
                                            ("lrt", (1, 1))])
def test_training_ledger_matches_recorded_tape(variant, layers):
    cfg = ModelConfig(16, 4, 24, *layers)
    s = VariantSpec.build(variant, cfg, 3, 9)
    p = build_stack(s, 0)
    x = np.random.default_rng(0).standard_normal((2, 9, 16))
    with recording() as tape:
        ops.mean(stack_forward(x, p, s))
    assert cm.tape_cached_elements(tape) == 2 * cm.train_activation_elements(s, 9)


def test_cost_report_fields():
    s = spec("lrt")
    rep = cm.cost_report(s, 128)
    assert rep.params == count_params(s).total
    assert rep.macs_fwd == cm.macs_forward(s, 128)
    assert rep.as_dict()["rank"] == 64
