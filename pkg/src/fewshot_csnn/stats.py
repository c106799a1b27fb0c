"""Classification metrics, summary statistics, Welch's t-test and energy/latency ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import betainc

__all__ = [
    "MetricsReport",
    "TTestResult",
    "CostModel",
    "EnergyReport",
    "compute_metrics",
    "aggregate",
    "welch_t_test",
    "percent_reduction",
    "latency_ratio",
    "energy_proxy",
]


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts plus derived rates. Undefined rates are ``None``, never 0."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def tpr(self) -> Optional[float]:
        pos = self.tp + self.fn
        return self.tp / pos if pos else None

    @property
    def tnr(self) -> Optional[float]:
        neg = self.tn + self.fp
        return self.tn / neg if neg else None

    def all_above(self, level: float) -> bool:
        rates = (self.accuracy, self.tpr, self.tnr)
        return all(r is not None and r > level for r in rates)

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "tpr": self.tpr, "tnr": self.tnr,
                "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def compute_metrics(predictions, labels) -> MetricsReport:
    predictions = np.asarray(predictions).astype(int).ravel()
    labels = np.asarray(labels).astype(int).ravel()
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("cannot score an empty prediction set")
    pos = labels == 1
    hit = predictions == labels
    return MetricsReport(
        tp=int(np.sum(pos & hit)),
        tn=int(np.sum(~pos & hit)),
        fp=int(np.sum(~pos & ~hit)),
        fn=int(np.sum(pos & ~hit)),
    )


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (``n - 1`` denominator, 0 for one value)."""
    arr = np.asarray([v for v in values], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty list")
    mean = float(arr.mean())
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, sd


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    dof: float
    p_value: float


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided unequal-variance two-sample t-test.

    The p-value is the regularized incomplete beta ``I_{dof/(dof+t^2)}(dof/2, 1/2)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if not se2 > 0:
        raise ValueError("both samples have zero variance")
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = se2**2 / ((va**2 / (a.size - 1) if va else 0.0) + (vb**2 / (b.size - 1) if vb else 0.0))
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return TTestResult(t, float(dof), min(1.0, max(0.0, p)))


def percent_reduction(baseline_energy: float, comparison_energy: float) -> float:
    if baseline_energy <= 0:
        raise ValueError("baseline energy must be positive")
    return 100.0 * (baseline_energy - comparison_energy) / baseline_energy


def latency_ratio(comparison_time: float, baseline_time: float) -> float:
    """Values above 1 mean the comparison path is slower than the baseline."""
    if baseline_time <= 0:
        raise ValueError("baseline time must be positive")
    return comparison_time / baseline_time


@dataclass(frozen=True)
class CostModel:
    """Energy units per operation. Relative values only; not joules."""

    e_mac: float = 4.6
    e_acc: float = 1.0
    e_fetch: float = 0.0

    def __post_init__(self):
        if min(self.e_mac, self.e_acc, self.e_fetch) < 0:
            raise ValueError("cost constants must be nonnegative")


@dataclass
class EnergyReport:
    dense_macs: int
    event_accumulates: int
    weight_fetches: int
    energy: float
    wall_clock: float = 0.0
    per_layer: dict = field(default_factory=dict)


def energy_proxy(ops, cost: CostModel = CostModel(), wall_clock: float = 0.0) -> EnergyReport:
    """Linear energy model over an op count.

    Layers executed densely cost ``dense_macs * e_mac``; event-driven layers cost
    ``event_accumulates * e_acc + weight_fetches * e_fetch``.
    """
    if not isinstance(cost, CostModel):
        cost = CostModel(**cost)
    per_layer = {}
    total = 0.0
    for name, layer in ops.layers.items():
        if min(layer.dense_macs, layer.event_accumulates, layer.weight_fetches) < 0:
            raise ValueError(f"negative op count in layer {name}")
        if layer.event_driven:
            e = layer.event_accumulates * cost.e_acc + layer.weight_fetches * cost.e_fetch
        else:
            e = layer.dense_macs * cost.e_mac
        per_layer[name] = e
        total += e
    return EnergyReport(ops.dense_macs, ops.event_accumulates, ops.weight_fetches, total,
                        wall_clock, per_layer)
