"""Wall-clock benchmark harness and variant sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from threadpoolctl import threadpool_limits

from . import costmodel
from .attention import ModelConfig
from .blocks import VariantSpec, build_stack, count_params, stack_forward
from .numcore import ops
from .numcore.params import backward
from .numcore.tensor import finite_checks, no_tape, recording

log = logging.getLogger(__name__)

CSV_HEADER = ["variant", "n", "rank", "mode", "runs", "params", "macs_fwd", "mem_infer_bytes",
              "mem_train_bytes", "time_ms_mean", "time_ms_std", "speedup_vs_baseline",
              "mem_ratio_pct", "error"]
RATIO_HEADER = ["n", "rank", "mode", "log2_speedup_ratio", "log2_mem_ratio"]
MODES = ("fwd", "fwd_bwd")


@dataclass
class BenchResult:
    spec_id: str
    variant: str
    n: int
    rank: int
    mode: str
    runs: int
    params: int = 0
    macs_fwd: int = 0
    mem_infer_bytes: int = 0
    mem_train_bytes: int = 0
    time_ms_mean: float = math.nan
    time_ms_std: float = math.nan
    speedup_vs_baseline: float = math.nan
    mem_ratio_pct: float = math.nan
    error: str = ""
    mem_traced_peak_bytes: int | None = None
    times_ms: list[float] = field(default_factory=list, repr=False)

    @property
    def mem_bytes(self) -> int:
        return self.mem_infer_bytes if self.mode == "fwd" else self.mem_train_bytes

    def compare_to(self, baseline: "BenchResult") -> "BenchResult":
        """Fill the speedup and memory ratio against ``baseline``."""
        self.speedup_vs_baseline = baseline.time_ms_mean / self.time_ms_mean
        self.mem_ratio_pct = 100.0 * self.mem_bytes / baseline.mem_bytes
        return self

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_HEADER}


def _element_size(dtype: str) -> int:
    return 4 if dtype == "float32" else 8


def run_benchmark(spec: VariantSpec, n: int, mode: str = "fwd", runs: int = 30, warmup: int = 3,
                  seed: int = 0, batch: int = 1, dtype: str = "float32",
                  trace_memory: bool = False) -> BenchResult:
    """Time ``runs`` forward (or forward+backward) passes of the stack on one fixed input."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if runs < 1 or warmup < 0:
        raise ValueError("need runs >= 1 and warmup >= 0")
    es = _element_size(dtype)
    report = costmodel.cost_report(spec, n, element_size=es, batch=batch)
    res = BenchResult(spec.id, spec.variant, n, spec.rank, mode, runs, report.params,
                      report.macs_fwd, report.mem_infer_bytes, report.mem_train_bytes)
    params = build_stack(spec, seed, dtype)
    x = np.random.default_rng(seed + 1).standard_normal((batch, n, spec.cfg.d_model)).astype(dtype)

    def step():
        if mode == "fwd":
            with no_tape():
                return stack_forward(x, params, spec).data
        params.zero_grad()
        with recording() as tape:
            out = stack_forward(x, params, spec)
            loss = ops.mean(out)
        backward(tape, loss, params)
        return out.data

    times = []
    reference = None
    with threadpool_limits(1), finite_checks(False):
        for i in range(warmup + runs):
            t0 = time.perf_counter_ns()
            out = step()
            elapsed = (time.perf_counter_ns() - t0) / 1e6
            if i < warmup:
                continue
            times.append(elapsed)
            if reference is None:
                reference = out
            elif not np.array_equal(reference, out):
                raise RuntimeError(f"{spec.id}: forward output changed between runs")
        if trace_memory:
            tracemalloc.start()
            step()
            res.mem_traced_peak_bytes = tracemalloc.get_traced_memory()[1]
            tracemalloc.stop()
    arr = np.asarray(times)
    res.times_ms = times
    res.time_ms_mean = float(arr.mean())
    res.time_ms_std = float(arr.std())
    return res


@dataclass
class SweepGrid:
    cfg: ModelConfig
    seq_lens: tuple[int, ...]
    ranks: tuple[int, ...]
    variants: tuple[str, ...] = ("transformer", "lrt", "linformer")
    modes: tuple[str, ...] = ("fwd",)
    runs: int = 30
    warmup: int = 3
    batch: int = 1
    seed: int = 0
    dtype: str = "float32"
    n_max: int | None = None  # Linformer projection length; None uses max(n, k) per cell


def _cells(grid: SweepGrid) -> Iterable[tuple[str, int, int | None, str]]:
    for mode in grid.modes:
        for n in grid.seq_lens:
            yield "transformer", n, None, mode
            for variant in ("lrt", "linformer"):
                if variant in grid.variants:
                    for r in grid.ranks:
                        yield variant, n, r, mode


def sweep(grid: SweepGrid, out_path=None, timing: bool = True) -> list[BenchResult]:
    """Benchmark every cell against the transformer cell with the same n and mode.

    Failing cells become rows with an ``error`` message. With ``timing=False``
    only the analytic columns are filled. Writes ``out_path`` (main CSV) and
    ``<out_path stem>.ratio.csv`` (log2 LRT-vs-Linformer ratios) when given.
    """
    results: list[BenchResult] = []
    baselines: dict[tuple[int, str], BenchResult] = {}
    for variant, n, r, mode in _cells(grid):
        try:
            spec = VariantSpec.build(variant, grid.cfg, r, grid.n_max or max(n, r or 0))
            if timing:
                res = run_benchmark(spec, n, mode, grid.runs, grid.warmup, grid.seed,
                                    grid.batch, grid.dtype)
            else:
                res = _analytic_only(spec, n, mode, grid)
        except Exception as exc:  # noqa: BLE001 - recorded per row, sweep continues
            log.warning("cell %s n=%s rank=%s failed: %s", variant, n, r, exc)
            res = BenchResult(f"{variant}-{r}", variant, n, r or 0, mode, grid.runs,
                              error=f"{type(exc).__name__}: {exc}")
            results.append(res)
            continue
        if variant == "transformer":
            baselines[(n, mode)] = res
            res.speedup_vs_baseline = 1.0
            res.mem_ratio_pct = 100.0
        elif (n, mode) in baselines and timing:
            res.compare_to(baselines[(n, mode)])
        elif (n, mode) in baselines:
            res.mem_ratio_pct = 100.0 * res.mem_bytes / baselines[(n, mode)].mem_bytes
        results.append(res)
    if out_path is not None:
        write_csv(results, out_path)
        write_ratio_csv(results, ratio_path(out_path))
    return results


def _analytic_only(spec, n, mode, grid) -> BenchResult:
    rep = costmodel.cost_report(spec, n, _element_size(grid.dtype), grid.batch)
    return BenchResult(spec.id, spec.variant, n, spec.rank, mode, 0, rep.params, rep.macs_fwd,
                       rep.mem_infer_bytes, rep.mem_train_bytes)


def ratio_rows(results: list[BenchResult]) -> list[dict]:
    """log2(speedup_linformer / speedup_lrt) and log2(mem_lrt / mem_linformer).

    Negative values favour LRT, positive favour Linformer.
    """
    by_key = {(r.variant, r.n, r.rank, r.mode): r for r in results if not r.error}
    rows = []
    for (variant, n, rank, mode), lrt in by_key.items():
        if variant != "lrt":
            continue
        lin = by_key.get(("linformer", n, rank, mode))
        if lin is None:
            continue
        speed = math.log2(lin.speedup_vs_baseline / lrt.speedup_vs_baseline) \
            if lrt.speedup_vs_baseline > 0 and lin.speedup_vs_baseline > 0 else math.nan
        rows.append({"n": n, "rank": rank, "mode": mode, "log2_speedup_ratio": speed,
                     "log2_mem_ratio": math.log2(lrt.mem_bytes / lin.mem_bytes)})
    return rows


def ratio_path(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + ".ratio.csv")


def write_csv(results: list[BenchResult], dest) -> None:
    """Write the sweep CSV to a path or an open text file."""
    if hasattr(dest, "write"):
        w = csv.DictWriter(dest, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(r.row() for r in results)
        return
    with open(dest, "w", newline="") as f:
        write_csv(results, f)


def write_ratio_csv(results: list[BenchResult], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RATIO_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(ratio_rows(results))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def size_rows(cfg: ModelConfig, ranks: Iterable[int], n_max: int) -> list[dict]:
    """Parameter totals per variant and rank, with log2 columns."""
    rows = []
    for r in ranks:
        for variant in ("transformer", "lrt", "linformer"):
            spec = VariantSpec.build(variant, cfg, r, n_max)
            total = count_params(spec).total
            rows.append({"variant": variant, "rank": r, "params": total,
                         "log2_rank": math.log2(r), "log2_params": math.log2(total)})
    return rows
