"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import io
import os
import time

import numpy as np
import pytest

from lowrankformer import bench, costmodel, estimator
from lowrankformer.attention import (
    AttentionMask,
    LinformerConfig,
    LowRankConfig,
    ModelConfig,
    init_attention,
    linformer_attention,
    lrmha_forward,
    mha_forward,
)
from lowrankformer.blocks import (
    ClassifierModel,
    LedLayer,
    VariantSpec,
    build_stack,
    count_params,
    decoder_layer_forward,
    encoder_layer_forward,
    ff_forward,
    init_ff,
    lrff_forward,
)
from lowrankformer.numcore import ParamStore, Tensor, counting_macs, gradcheck, no_tape, ops
from lowrankformer.toytrain import SyntheticSpec, TrainConfig, load_mnist_idx, make_synthetic, train

from conftest import identity_factorized

BASE_SIZE = ModelConfig(768, 12, 3072, 2)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


# -- 1. gradients ---------------------------------------------------------------

def _gradient_cases(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(8, 2, 12, 1)
    x = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    enc = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    probe = Tensor(rng.standard_normal((5, 8)))

    def readout(out):
        return ops.sum(ops.mul(out, probe))

    cases = {}
    p = ParamStore(seed)
    led = LedLayer(p.glorot("E", 8, 3), p.glorot("D", 3, 8), p.add("b", rng.standard_normal(8)))
    cases["LED"] = (lambda: readout(led(x)), dict(p.items(), x=x))

    for name, lr in (("FF", None), ("LRFF", LowRankConfig(3))):
        p = ParamStore(seed)
        init_ff(p, "ff", cfg, lr)
        p.set("ff.e1.b", rng.standard_normal(12))
        fn = (lambda p=p, lr=lr: readout(lrff_forward(x, p, cfg, lr))) if lr else \
            (lambda p=p: readout(ff_forward(x, p, cfg)))
        cases[name] = (fn, dict(p.items(), x=x))

    for name, lr, lin in (("MHA", None, None), ("LRMHA", LowRankConfig(3), None),
                          ("Linformer", None, LinformerConfig(3, 6))):
        p = ParamStore(seed)
        init_attention(p, "attn", cfg, lr, lin)
        p.set("attn.ln.g", rng.standard_normal(8))
        if lin:
            fn = lambda p=p, lin=lin: readout(linformer_attention(x, p, cfg, lin))  # noqa: E731
        elif lr:
            fn = lambda p=p, lr=lr: readout(lrmha_forward(x, x, p, cfg, lr))  # noqa: E731
        else:
            fn = lambda p=p: readout(mha_forward(x, enc, p, cfg))  # noqa: E731
        cases[name] = (fn, dict(p.items(), x=x, enc=enc))

    for variant in ("transformer", "lrt", "linformer"):
        spec = VariantSpec.build(variant, cfg, 3, 5)
        p = build_stack(spec, seed)
        cases[f"encoder layer {variant}"] = (
            lambda p=p, spec=spec: readout(encoder_layer_forward(x, p, spec)), dict(p.items(), x=x))
    for variant in ("transformer", "lrt"):
        spec = VariantSpec.build(variant, ModelConfig(8, 2, 12, 0, 1), 3)
        p = build_stack(spec, seed)
        cases[f"decoder layer {variant}"] = (
            lambda p=p, spec=spec: readout(decoder_layer_forward(x, enc, p, spec)),
            dict(p.items(), x=x, enc=enc))

    tokens, labels = rng.integers(0, 7, (3, 5)), np.array([0, 2, 1])
    for variant in ("transformer", "lrt", "linformer"):
        model = ClassifierModel(VariantSpec.build(variant, cfg, 2, 6), 3, 5, 7, seed=seed)
        model.params.set("head.W", rng.standard_normal((8, 3)))
        cases[f"classifier {variant}"] = (lambda m=model: m.loss(tokens, labels), dict(model.params.items()))
    return cases


def test_criterion_01_gradients(report):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    layers = set()
    for seed in range(5):
        for name, (fn, leaves) in _gradient_cases(seed).items():
            layers.add(name)
            errs = gradcheck(fn, leaves, h=1e-5, max_coords=16, seed=seed)
            leaf, err = max(errs.items(), key=lambda kv: kv[1])
            if err > worst:
                worst, where = err, f"{name} seed {seed} {leaf}"
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-5 and elapsed < 60,
           f"{len(layers)} layers x 5 seeds, max rel err {worst:.2e} ({where}), {elapsed:.1f} s")


# -- 2. reductions --------------------------------------------------------------

def test_criterion_02_reductions(report):
    rng = np.random.default_rng(0)
    diffs = {}
    for d, h in ((8, 2), (12, 3), (16, 4)):
        cfg = ModelConfig(d, h, 2 * d, 1)
        dense = ParamStore(d)
        init_attention(dense, "attn", cfg)
        x, y = rng.standard_normal((6, d)), rng.standard_normal((5, d))
        a = mha_forward(x, y, dense, cfg).data
        b = lrmha_forward(x, y, identity_factorized(dense), cfg, LowRankConfig(d)).data
        diffs[f"lrmha d={d}"] = np.abs(a - b).max()

        n = 6
        lin = LinformerConfig(n, n)
        p = ParamStore(d)
        init_attention(p, "attn", cfg, lin=lin)
        p.set("attn.khat.W", np.eye(n))
        p.set("attn.vhat.W", np.eye(n))
        a = linformer_attention(x, p, cfg, lin).data
        diffs[f"linformer d={d}"] = np.abs(a - mha_forward(x, x, p, cfg).data).max()

        E, D = rng.standard_normal((d, 3)), rng.standard_normal((3, 2 * d))
        out = LedLayer(Tensor(E), Tensor(D))(x).data
        diffs[f"led d={d}"] = np.abs(out - x @ (E @ D)).max()
    worst = max(diffs, key=diffs.get)
    report(2, diffs[worst] < 1e-12, f"max abs diff {diffs[worst]:.1e} ({worst}) over {len(diffs)} cases")


# -- 3. parameter accounting ---------------------------------------------------------

def test_criterion_03_parameter_accounting(report):
    mismatches = []
    checked = 0
    for layers in ((2, 0), (1, 1)):
        cfg = ModelConfig(64, 4, 128, *layers)
        for variant in ("transformer", "lrt", "linformer"):
            if variant == "linformer" and layers[1]:
                continue
            for r in (1, 32, 64, 256):
                spec = VariantSpec.build(variant, cfg, r, 256)
                stored = build_stack(spec).total_count()
                if count_params(spec).total != stored:
                    mismatches.append(spec.id)
                checked += 1
                if layers[1] == 0:
                    model = ClassifierModel(spec, 4, 255, 16)
                    if count_params(spec, True, 4, 16, 255).total != model.params.total_count():
                        mismatches.append(spec.id + " classifier")
                    checked += 1
    base = count_params(VariantSpec("transformer", BASE_SIZE)).per_layer["encoder_weights"]
    lrt = count_params(VariantSpec.build("lrt", BASE_SIZE, 64)).per_layer["encoder_weights"]
    ratio = base / lrt
    report(3, not mismatches and ratio == 8.0,
           f"{checked} exact count comparisons, mismatches {mismatches}; layer ratio {base}/{lrt} = {ratio}")


# -- 4. Linformer size ---------------------------------------------------------------

def test_criterion_04_linformer_always_larger(report):
    failures = 0
    checked = 0
    for cfg, n_max in ((BASE_SIZE, 2048), (ModelConfig(64, 4, 256, 2), 128), (ModelConfig(8, 1, 8, 1), 16)):
        base = count_params(VariantSpec("transformer", cfg)).total
        for k in range(1, n_max + 1):
            checked += 1
            failures += count_params(VariantSpec.build("linformer", cfg, k, n_max)).total <= base
    report(4, failures == 0, f"{checked} (config, k) pairs, {failures} not larger than the transformer")


# -- 5. MAC oracle ----------------------------------------------------------------------

def test_criterion_05_mac_oracle(report):
    configs = [(ModelConfig(32, 2, 64, 1), 7), (ModelConfig(16, 4, 24, 2), 5),
               (ModelConfig(24, 3, 40, 1), 9), (ModelConfig(16, 2, 32, 1, 2), 6)]
    per_variant = {"transformer": 0, "lrt": 0, "linformer": 0}
    for cfg, n in configs:
        for variant in per_variant:
            if variant == "linformer" and cfg.n_dec_layers:
                continue
            spec = VariantSpec.build(variant, cfg, 4 if variant == "lrt" else 3, max(8, n))
            costmodel.validate_against_instrumentation(spec, n, batch=2 if n == 5 else 1)
            per_variant[variant] += 1

    cfg = ModelConfig(768, 12, 3072, 1)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((128, 768)).astype(np.float32)
    proj = 4 * 128 * 768 * 768
    measured = {}
    for variant in ("transformer", "linformer"):
        spec = VariantSpec.build(variant, cfg, 64, 128)
        p = ParamStore(0, "float32")
        init_attention(p, "attn", cfg, lin=spec.lin)
        with no_tape(), counting_macs() as c:
            if spec.lin:
                linformer_attention(x, p, cfg, spec.lin)
            else:
                mha_forward(x, x, p, cfg, AttentionMask())
        measured[variant] = c.macs - proj
        assert costmodel.attention_macs(spec, 128, 128) == c.macs
    ok = min(per_variant.values()) >= 3 and measured["transformer"] == measured["linformer"] == 25_165_824
    report(5, ok, f"exact oracle matches per variant {per_variant}; attention terms at n=2k {measured}")


# -- 6. complexity shape ---------------------------------------------------------------

def test_criterion_06_second_differences(report):
    ns = (64, 128, 192, 256)
    d2 = {}
    for variant in ("transformer", "lrt", "linformer"):
        spec = VariantSpec.build(variant, BASE_SIZE, 64, 256)
        m = [costmodel.macs_forward(spec, n) for n in ns]
        d2[variant] = [m[i + 2] - 2 * m[i + 1] + m[i] for i in range(2)]
    ok = all(d2[v][0] == d2[v][1] > 0 for v in ("transformer", "lrt")) and d2["linformer"] == [0, 0]
    report(6, ok, f"second differences {d2}")


# -- 7. estimator ---------------------------------------------------------------------

REFERENCE_COSTS = {
    256: (1.48, 1.52, 1406, 4686, 442.2),
    128: (1.98, 1.13, 1045, 3484, 328.8),
    64: (2.50, 0.90, 831, 2768, 261.2),
    32: (2.63, 0.85, 789, 2629, 248.1),
}


def test_criterion_07_estimator(report):
    sched = estimator.PretrainSchedule.of({128: 0.9, 512: 0.1})
    ident = [
        estimator.overall_efficiency(sched, {128: {1: 1.0}, 512: {1: 1.0}}, 1) == 1.0,
        estimator.overall_efficiency(estimator.PretrainSchedule.of({128: 1.0}), {128: {1: 2.8}}, 1) == 2.8,
        abs(estimator.overall_efficiency(sched, {128: {1: 2.8}, 512: {1: 1.1}}, 1) - 2.63) < 1e-12,
        estimator.scaled_costs(estimator.BERT_BASE, 1.0) == estimator.BERT_BASE,
    ]
    # 4 rows x 3 cost cells; the USD cell is a low-high range, so 16 numbers
    worst = 0.0
    numbers = 0
    for eff, *ref in REFERENCE_COSTS.values():
        got = estimator.scaled_costs(estimator.BERT_BASE, eff)
        for value, expect in zip((got.compute_pfs_day, got.usd_low, got.usd_high, got.co2_kg), ref):
            worst = max(worst, abs(value - expect) / expect)
            numbers += 1
    report(7, all(ident) and numbers == 16 and worst < 0.01,
           f"identities {sum(ident)}/{len(ident)}; 12 table cells ({numbers} numbers), "
           f"max rel err {worst:.4%}")


# -- 8. effectiveness ------------------------------------------------------------------

def test_criterion_08_synthetic_training(report):
    cfg = ModelConfig(64, 4, 256, 2)
    data = make_synthetic(SyntheticSpec(n_classes=4, seq_len=32, n_train=4000, n_test=1000, seed=0))
    tc = TrainConfig(epochs=200, batch_size=64, learning_rate=1e-3, target_accuracy=0.95, seed=0)
    t0 = time.process_time()
    acc = {}
    for variant in ("transformer", "lrt", "linformer"):
        spec = VariantSpec.build(variant, cfg, 16, 33)
        model = ClassifierModel(spec, 4, 32, data.vocab_size, seed=0)
        hist = train(model, data, tc)
        acc[variant] = (round(hist.best_test_accuracy, 4), hist.best_epoch)
    cpu = time.process_time() - t0
    base_w = count_params(VariantSpec("transformer", cfg)).weights
    lrt_w = count_params(VariantSpec.build("lrt", cfg, cfg.d_model // 4)).weights
    saving = 1 - lrt_w / base_w
    ok = all(a >= 0.95 for a, _ in acc.values()) and cpu < 300 and saving >= 0.30
    report(8, ok, f"test accuracy (best, epoch) {acc}; {cpu:.0f} s CPU; "
                  f"LRT r=d/4 encoder weights {lrt_w} vs {base_w} ({saving:.1%} fewer)")


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("MNIST_DIR"), reason="set MNIST_DIR to the IDX files")
def test_criterion_08_mnist_optional(report):
    data = load_mnist_idx(os.environ["MNIST_DIR"], 2)
    cfg = ModelConfig(64, 4, 256, 2)
    acc = {}
    for variant in ("transformer", "lrt", "linformer"):
        spec = VariantSpec.build(variant, cfg, 16, data.seq_len + 1)
        model = ClassifierModel(spec, 10, data.seq_len, 256, seed=0, dtype="float32")
        acc[variant] = train(model, data, TrainConfig(epochs=20, seed=0)).best_test_accuracy
    ok = min(acc.values()) >= 0.90 and acc["transformer"] - acc["lrt"] <= 0.015
    report(8, ok, f"14x14 MNIST test accuracy {acc}")


# -- 9. timing trend ---------------------------------------------------------------------

def test_criterion_09_timing_trend(report):
    speed = {}
    for n in (256, 2048):
        base = bench.run_benchmark(VariantSpec("transformer", BASE_SIZE), n, runs=30, warmup=3)
        lin = bench.run_benchmark(VariantSpec.build("linformer", BASE_SIZE, 64, n), n, runs=30, warmup=3)
        speed[n] = lin.compare_to(base).speedup_vs_baseline
        if n == 256:
            again = bench.run_benchmark(VariantSpec("transformer", BASE_SIZE), n, runs=30, warmup=3)
            self_ratio = again.compare_to(base).speedup_vs_baseline
    ok = speed[2048] > speed[256] and 0.8 <= self_ratio <= 1.25
    report(9, ok, f"Linformer speedup n=256 {speed[256]:.3f}, n=2048 {speed[2048]:.3f}; "
                  f"self ratio {self_ratio:.3f}")


# -- 10. determinism ----------------------------------------------------------------------

def test_criterion_10_determinism(report, tmp_path):
    grid = bench.SweepGrid(ModelConfig(32, 4, 64, 2), (16, 32), (4, 8), runs=2, warmup=1,
                           modes=("fwd", "fwd_bwd"), seed=7)
    timing = {"time_ms_mean", "time_ms_std", "speedup_vs_baseline"}
    sweeps, histories = [], []
    for i in range(2):
        out = tmp_path / f"sweep{i}.csv"
        bench.sweep(grid, out)
        sweeps.append([{k: v for k, v in row.items() if k not in timing} for row in bench.read_csv(out)])
        data = make_synthetic(SyntheticSpec(n_classes=3, seq_len=12, n_train=200, n_test=60, seed=7))
        model = ClassifierModel(VariantSpec.build("lrt", ModelConfig(16, 2, 32, 1), 4), 3, 12, 16, seed=7)
        hist = train(model, data, TrainConfig(epochs=3, batch_size=32, seed=7))
        buf = io.StringIO()
        hist.write_csv(buf)
        histories.append(buf.getvalue())
    ok = sweeps[0] == sweeps[1] and histories[0] == histories[1]
    report(10, ok, f"{len(sweeps[0])} sweep rows and {len(histories[0].splitlines()) - 1} metric rows "
                   f"bit-identical across two runs")

