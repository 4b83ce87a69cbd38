"""PMU readings, pseudo-measurements and greedy PMU placement."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .loadmodel import ForecastSet
from .network import NetworkModel

# angle noise std never drops below sigma_pmu * 1 mrad
ANGLE_FLOOR_RAD = 1e-3

__all__ = [
    "PmuPlacement",
    "PmuReading",
    "MeasurementSnapshot",
    "simulate_pmu",
    "pmu_noise_std",
    "pseudo_vector",
    "greedy_placement",
    "save_placement",
    "load_placement",
]


@dataclass(frozen=True)
class PmuPlacement:
    """Monitored buses in the order they were chosen."""

    buses: tuple = ()
    sigma_pmu: float = 0.01
    # evaluator value after each greedy addition, if built greedily
    scores: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        b = tuple(int(x) for x in self.buses)
        if len(set(b)) != len(b):
            raise ValueError("duplicate PMU bus")
        if any(x < 1 for x in b):
            raise ValueError("PMUs can only sit on load buses")
        if self.sigma_pmu < 0:
            raise ValueError("sigma_pmu must be nonnegative")
        object.__setattr__(self, "buses", b)

    @property
    def sorted_buses(self) -> tuple:
        return tuple(sorted(self.buses))

    def prefix(self, k: int) -> "PmuPlacement":
        return PmuPlacement(self.buses[:k], self.sigma_pmu, self.scores[:k])

    def __len__(self):
        return len(self.buses)


@dataclass
class PmuReading:
    """Magnitudes then angles at ``buses`` (ascending), with variances."""

    buses: tuple
    values: np.ndarray
    variances: np.ndarray


@dataclass
class MeasurementSnapshot:
    pmu: PmuReading
    d: np.ndarray
    d_var: np.ndarray
    timestamp: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def z(self) -> np.ndarray:
        return self.pmu.values


def pmu_noise_std(values: np.ndarray, sigma_pmu: float) -> np.ndarray:
    """Per-entry noise std for stacked ``[V; delta]`` readings."""
    values = np.asarray(values, dtype=float)
    k = len(values) // 2
    std = sigma_pmu * np.abs(values)
    std[k:] = np.maximum(std[k:], sigma_pmu * ANGLE_FLOOR_RAD)
    return std


def simulate_pmu(truth_y: np.ndarray, placement: PmuPlacement, rng) -> PmuReading:
    """Noisy PMU readings of the polar state ``truth_y = [V; delta]``.

    Each reading is ``a (1 + sigma_pmu g)`` with ``g`` standard normal, drawn
    for every load bus so that the noise at one bus does not depend on where
    the other PMUs are. The reported variance is ``sigma_pmu^2 * reading^2``
    (angle std floored at ``sigma_pmu`` mrad).
    """
    rng = np.random.default_rng(rng)
    y = np.asarray(truth_y, dtype=float)
    n = len(y) // 2
    g = rng.standard_normal(2 * n)
    std = pmu_noise_std(y, placement.sigma_pmu)
    noisy = y + std * g
    buses = placement.sorted_buses
    if buses and max(buses) > n:
        raise ValueError("PMU bus outside the network")
    idx = np.array(buses, dtype=int) - 1
    sel = np.concatenate([idx, idx + n]) if len(idx) else np.zeros(0, dtype=int)
    values = noisy[sel]
    var = pmu_noise_std(values, placement.sigma_pmu) ** 2
    return PmuReading(buses, values, var)


def pseudo_vector(forecasts: ForecastSet) -> np.ndarray:
    """Forecast injections ``[P_f; Q_f]`` with loads negative."""
    return -np.concatenate([forecasts.p_f, forecasts.q_f])


def greedy_placement(
    net: NetworkModel,
    k: int,
    evaluator: Callable[[Sequence[int]], float],
    sigma_pmu: float = 0.01,
    candidates: Sequence[int] | None = None,
) -> PmuPlacement:
    """Add PMUs one at a time where ``evaluator(buses)`` drops the most.

    Ties go to the lowest bus index. The evaluator value after each addition
    is kept in ``scores``.
    """
    pool = sorted(int(b) for b in (candidates if candidates is not None else net.load_buses))
    if not 0 <= k <= len(pool):
        raise ValueError(f"k must be between 0 and {len(pool)}")
    chosen: list[int] = []
    scores = []
    for _ in range(k):
        best_bus, best_val = None, np.inf
        for b in pool:
            if b in chosen:
                continue
            val = float(evaluator(chosen + [b]))
            if val < best_val:
                best_bus, best_val = b, val
        if best_bus is None:
            raise RuntimeError("evaluator returned no finite value")
        chosen.append(best_bus)
        scores.append(best_val)
    return PmuPlacement(tuple(chosen), sigma_pmu, tuple(scores))


def save_placement(path, placement: PmuPlacement) -> None:
    doc = {"sigma_pmu": placement.sigma_pmu, "buses": list(placement.buses)}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_placement(path) -> PmuPlacement:
    doc = json.loads(Path(path).read_text())
    return PmuPlacement(tuple(doc["buses"]), float(doc["sigma_pmu"]))
