"""Snapshot weighted-least-squares state estimation.

The unknowns are the polar voltages ``y = [V; delta]`` at the load buses; the
slack bus is fixed at ``(V0, 0)``. Measurements are stacked as PMU
magnitudes, PMU angles, then active and reactive injection forecasts.
Injections implied by a voltage state are ``s_i = w_i conj((Y w)_i)`` with
``Y`` the bus admittance matrix including the slack bus.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .measurement import PmuReading, pmu_noise_std
from .network import NetworkModel, admittance_matrix
from .powerflow import _bus_positions

__all__ = [
    "WlsError",
    "WlsProblem",
    "WlsResult",
    "measurement_model_f",
    "build_problem",
    "wls_estimate",
    "flat_start",
]

MAG_STEP = 1e-6  # relative to V0
ANG_STEP = 1e-8  # rad
# exact PMU readings still get a finite weight
MIN_PMU_REL_STD = 1e-6


class WlsError(RuntimeError):
    """Unobservable configuration or Gauss-Newton failure."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@lru_cache(maxsize=32)
def _ybus(net: NetworkModel) -> np.ndarray:
    return admittance_matrix(net)


def flat_start(net: NetworkModel) -> np.ndarray:
    n = net.n_load
    return np.concatenate([np.full(n, net.slack_voltage), np.zeros(n)])


def measurement_model_f(y, net: NetworkModel, buses=()) -> np.ndarray:
    """``[V_S; delta_S; P(y); Q(y)]``; columns of a 2-D ``y`` are evaluated separately."""
    y = np.asarray(y, dtype=float)
    n = net.n_load
    if y.shape[0] != 2 * n:
        raise ValueError(f"expected {2 * n} state entries, got {y.shape[0]}")
    idx = _bus_positions(net, buses)
    w = y[:n] * np.exp(1j * y[n:])
    slack = np.full((1,) + w.shape[1:], net.slack_voltage, dtype=complex)
    w_full = np.concatenate([slack, w])
    s = w * np.conj(_ybus(net) @ w_full)[1:]
    return np.concatenate([y[idx], y[n + idx], s.real, s.imag])


@dataclass
class WlsProblem:
    """Stacked measurements ``z`` with diagonal variances ``variances``."""

    z: np.ndarray
    variances: np.ndarray
    net: NetworkModel
    buses: tuple = ()

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        self.buses = tuple(sorted(int(b) for b in self.buses))
        m = 2 * self.net.n_load + 2 * len(self.buses)
        if self.z.shape != (m,) or self.variances.shape != (m,):
            raise ValueError(f"expected {m} measurements for {len(self.buses)} PMUs")
        if np.any(self.variances <= 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("measurement variances must be positive and finite")

    @property
    def n_measurements(self) -> int:
        return len(self.z)

    def objective(self, y) -> float:
        r = self.z - measurement_model_f(y, self.net, self.buses)
        return float(np.sum(r**2 / self.variances))


def build_problem(net: NetworkModel, reading: PmuReading, d, d_var) -> WlsProblem:
    """Stack a PMU reading with the pseudo-measurement vector ``d``.

    PMU variances are floored at a relative std of ``MIN_PMU_REL_STD``.
    """
    z = np.concatenate([reading.values, np.asarray(d, dtype=float)])
    pmu_var = np.maximum(reading.variances, pmu_noise_std(reading.values, MIN_PMU_REL_STD) ** 2)
    var = np.concatenate([pmu_var, np.asarray(d_var, dtype=float)])
    return WlsProblem(z, var, net, reading.buses)


@dataclass
class WlsResult:
    y: np.ndarray
    objective: float
    iterations: int
    converged: bool

    @property
    def voltages(self) -> np.ndarray:
        n = len(self.y) // 2
        return self.y[:n] * np.exp(1j * self.y[n:])


def _jacobian(problem: WlsProblem, y: np.ndarray) -> np.ndarray:
    n = len(y) // 2
    h = np.concatenate([np.full(n, MAG_STEP * problem.net.slack_voltage), np.full(n, ANG_STEP)])
    # all 2 * 2n perturbed states in one vectorised call
    E = np.diag(h)
    Y = np.concatenate([y[:, None] + E, y[:, None] - E], axis=1)
    F = measurement_model_f(Y, problem.net, problem.buses)
    return (F[:, : 2 * n] - F[:, 2 * n:]) / (2 * h)


def wls_estimate(problem: WlsProblem, y0=None, tol: float = 1e-9, max_iter: int = 30,
                 cond_limit: float = 1e14) -> WlsResult:
    """Gauss-Newton on ``J(y) = (z - f(y))^T Sigma^-1 (z - f(y))``.

    ``tol`` applies to the largest update in per-unit magnitude / radians.
    A step that increases ``J`` is halved up to 10 times.
    """
    net = problem.net
    v0 = net.slack_voltage
    n = net.n_load
    y = flat_start(net) if y0 is None else np.array(y0, dtype=float)
    if y.shape != (2 * n,) or not np.all(np.isfinite(y)):
        raise ValueError("initial state must be a finite vector of length 2n")
    w = 1.0 / np.sqrt(problem.variances)
    unit = np.concatenate([np.full(n, v0), np.ones(n)])

    f = measurement_model_f(y, net, problem.buses)
    r = (problem.z - f) * w
    J = float(r @ r)
    for it in range(1, max_iter + 1):
        A = _jacobian(problem, y) * w[:, None] * unit[None, :]
        G = A.T @ A
        if np.linalg.cond(G) > cond_limit:
            raise WlsError("normal matrix is singular: configuration not observable",
                           WlsResult(y, J, it - 1, False))
        step = np.linalg.solve(G, A.T @ r)
        alpha = 1.0
        for _ in range(11):
            y_try = y + alpha * step * unit
            f_try = measurement_model_f(y_try, net, problem.buses)
            r_try = (problem.z - f_try) * w
            J_try = float(r_try @ r_try)
            if J_try <= J or not np.isfinite(J):
                break
            alpha *= 0.5
        else:
            # no descent along the Gauss-Newton direction: at the minimum up to rounding
            if np.max(np.abs(step)) < 1e3 * tol:
                return WlsResult(y, J, it, True)
            raise WlsError("line search failed", WlsResult(y, J, it, False))
        y, f, r, J = y_try, f_try, r_try, J_try
        if np.max(np.abs(alpha * step)) < tol:
            return WlsResult(y, J, it, True)
    raise WlsError(f"Gauss-Newton did not converge in {max_iter} iterations",
                   WlsResult(y, J, max_iter, False))
