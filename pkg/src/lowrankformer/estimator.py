"""Pretraining cost estimator: schedule-weighted efficiency and scaled costs."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from typing import Mapping

NORM_TOL = 1e-9


class EstimatorError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainSchedule:
    """Fraction of pretraining time spent at each sequence length."""

    segments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.segments:
            raise EstimatorError("schedule has no segments")
        if any(p <= 0 for _, p in self.segments):
            raise EstimatorError("schedule fractions must be positive")
        total = math.fsum(p for _, p in self.segments)
        if abs(total - 1.0) > NORM_TOL:
            raise EstimatorError(f"schedule fractions sum to {total}, not 1")

    @classmethod
    def of(cls, mapping: Mapping[int, float]) -> "PretrainSchedule":
        return cls(tuple((int(k), float(p)) for k, p in mapping.items()))


@dataclass(frozen=True)
class BaselineCost:
    compute_pfs_day: float
    usd_low: float
    usd_high: float
    co2_kg: float

    def __post_init__(self):
        if min(self.compute_pfs_day, self.usd_low, self.usd_high, self.co2_kg) <= 0:
            raise EstimatorError("baseline costs must be positive")
        if self.usd_low > self.usd_high:
            raise EstimatorError("usd_low exceeds usd_high")


# BERT-base pretraining reference row
BERT_BASE = BaselineCost(compute_pfs_day=2.24, usd_low=2074.0, usd_high=6912.0, co2_kg=652.3)

EfficiencyTable = Mapping[int, Mapping[int, float]]


def _lookup(table: EfficiencyTable, k: int, r: int) -> float:
    try:
        e = table[k][r]
    except KeyError:
        raise EstimatorError(f"efficiency table has no entry for seq_len={k}, rank={r}") from None
    if e <= 0:
        raise EstimatorError(f"efficiency factor for seq_len={k}, rank={r} must be positive")
    return float(e)


def overall_efficiency(sched: PretrainSchedule, table: EfficiencyTable, r: int,
                       harmonic: bool = False) -> float:
    """sum_k P_k * E[k][r].

    With ``harmonic=True`` the factors are combined as time-weighted speedups,
    1 / sum_k (P_k / E[k][r]), instead.
    """
    if harmonic:
        return 1.0 / math.fsum(p / _lookup(table, k, r) for k, p in sched.segments)
    return math.fsum(p * _lookup(table, k, r) for k, p in sched.segments)


def scaled_costs(base: BaselineCost, eff: float) -> BaselineCost:
    if not eff > 0:
        raise EstimatorError(f"efficiency must be positive, got {eff}")
    return replace(base, compute_pfs_day=base.compute_pfs_day / eff, usd_low=base.usd_low / eff,
                   usd_high=base.usd_high / eff, co2_kg=base.co2_kg / eff)


CSV_HEADER = ["model", "rank", "efficiency", "compute_pfs_day", "usd_low", "usd_high", "co2_kg"]


def cost_rows(base: BaselineCost, efficiencies: Mapping[int, float]) -> list[dict]:
    rows = [{"model": "baseline", "rank": "", "efficiency": 1.0, **_fields(base)}]
    for r, eff in efficiencies.items():
        rows.append({"model": "lrt", "rank": r, "efficiency": eff,
                     **_fields(scaled_costs(base, eff))})
    return rows


def _fields(c: BaselineCost) -> dict:
    return {"compute_pfs_day": c.compute_pfs_day, "usd_low": c.usd_low,
            "usd_high": c.usd_high, "co2_kg": c.co2_kg}


def estimate_from_document(doc: dict) -> list[dict]:
    """Evaluate ``{schedule, efficiency, baseline}`` (see README) into table rows.

    ``efficiency`` maps seq_len -> rank -> factor; every rank present for all
    schedule lengths gets a row. An optional ``"harmonic": true`` switches the
    aggregation.
    """
    sched = PretrainSchedule(tuple((int(s["seq_len"]), float(s["fraction"]))
                                   for s in doc["schedule"]))
    table = {int(k): {int(r): float(e) for r, e in row.items()}
             for k, row in doc["efficiency"].items()}
    base = BaselineCost(**doc["baseline"]) if "baseline" in doc else BERT_BASE
    harmonic = bool(doc.get("harmonic", False))
    ranks = sorted(set.intersection(*(set(table.get(k, {})) for k, _ in sched.segments)),
                   reverse=True)
    effs = {r: overall_efficiency(sched, table, r, harmonic) for r in ranks}
    return cost_rows(base, effs)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def load_document(path) -> dict:
    with open(path) as f:
        return json.load(f)
