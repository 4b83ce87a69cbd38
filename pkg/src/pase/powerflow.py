"""Backward/forward sweep power flow and state conversions.

States over load buses (slack excluded):

* injections ``x = [P; Q]`` in W/var, loads negative, length ``2n``;
* polar voltages ``y = [V; delta]`` in volts/radians, length ``2n``;
* complex voltages ``w`` in volts, length ``n``.

Every function accepts a single state vector or a 2-D array whose columns are
states (an ensemble), and returns the matching shape.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .network import NetworkModel, dlf_matrix, path_incidence

BFS_TOL = 1e-6
BFS_MAX_ITER = 100

__all__ = [
    "PowerFlowError",
    "solve_bfs",
    "linear_pf",
    "observe_pmu",
    "polar_to_complex",
    "complex_to_polar",
    "injections_to_complex",
    "BFS_TOL",
    "BFS_MAX_ITER",
]


class PowerFlowError(RuntimeError):
    """Sweep did not converge or collapsed; ``members`` lists failing columns."""

    def __init__(self, msg, members=()):
        super().__init__(msg)
        self.members = np.asarray(members, dtype=int)


@lru_cache(maxsize=32)
def _sweep_matrices(net: NetworkModel):
    B = path_incidence(net)
    # backward: branch current = sum of load currents downstream (B.T),
    # forward: bus voltage = V0 - sum of drops on the path (B * z)
    return np.ascontiguousarray(B.T), np.ascontiguousarray(B * net.z[1:])


def injections_to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[0] // 2
    return x[:n] + 1j * x[n:]


def solve_bfs(net: NetworkModel, x, tol: float = BFS_TOL, max_iter: int = BFS_MAX_ITER) -> np.ndarray:
    """Bus voltages (load buses) for injections ``x`` by backward/forward sweep.

    Starts from a flat profile every call. Raises :class:`PowerFlowError` if
    the largest voltage update is still above ``tol`` volts after ``max_iter``
    sweeps or if a voltage collapses to zero.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    if x.shape[0] != 2 * net.n_load:
        raise ValueError(f"expected {2 * net.n_load} injection entries, got {x.shape[0]}")
    s = injections_to_complex(x)
    down, drop = _sweep_matrices(net)
    v0 = net.slack_voltage
    v = np.full(s.shape, v0, dtype=complex)
    s_conj = np.conj(s)
    for _ in range(max_iter):
        load_current = -s_conj / np.conj(v)
        branch_current = down @ load_current
        v_new = v0 - drop @ branch_current
        delta = np.abs(v_new - v)
        v = v_new
        if not np.all(np.isfinite(v)) or np.any(np.abs(v) < 1e-9 * v0):
            bad = _bad_columns(~np.isfinite(v) | (np.abs(v) < 1e-9 * v0))
            raise PowerFlowError("voltage collapse during sweep", bad)
        if delta.max(initial=0.0) < tol:
            return v
    raise PowerFlowError(f"sweep did not converge in {max_iter} iterations", _bad_columns(delta >= tol))


def _bad_columns(mask: np.ndarray) -> np.ndarray:
    if mask.ndim == 1:
        return np.array([0]) if mask.any() else np.array([], dtype=int)
    return np.flatnonzero(mask.any(axis=0))


def linear_pf(M: np.ndarray, s, v0: float) -> np.ndarray:
    """Linearised flow ``w = V0 + M conj(s) / V0`` (first sweep from flat start)."""
    s = np.asarray(s, dtype=complex)
    return v0 + (M @ np.conj(s)) / v0


def linear_pf_net(net: NetworkModel, x) -> np.ndarray:
    return linear_pf(dlf_matrix(net), injections_to_complex(x), net.slack_voltage)


def observe_pmu(net: NetworkModel, x, buses, **bfs_kw) -> np.ndarray:
    """PMU observation ``h(x)``: magnitudes then angles at ``buses`` (sorted)."""
    idx = _bus_positions(net, buses)
    x = np.asarray(x, dtype=float)
    if idx.size == 0:
        return np.zeros((0,) + x.shape[1:])
    w = solve_bfs(net, x, **bfs_kw)[idx]
    return np.concatenate([np.abs(w), np.angle(w)])


def _bus_positions(net: NetworkModel, buses) -> np.ndarray:
    idx = np.unique(np.asarray(list(buses), dtype=int))
    if idx.size and (idx.min() < 1 or idx.max() > net.n_load):
        raise ValueError("PMU buses must be load buses (1..n)")
    return idx - 1


def polar_to_complex(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    n = y.shape[0] // 2
    mag, ang = y[:n], y[n:]
    if np.any(mag <= 0):
        raise ValueError("voltage magnitudes must be positive")
    return mag * np.exp(1j * ang)


def complex_to_polar(w) -> np.ndarray:
    w = np.asarray(w, dtype=complex)
    if np.any(w == 0):
        raise ValueError("zero voltage has no polar form")
    return np.concatenate([np.abs(w), np.angle(w)])
