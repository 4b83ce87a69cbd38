"""A-priori performance analysis in complex-voltage coordinates.

Both estimators are modelled as linear Kalman filters on the bus-voltage
phasors ``w`` via the linearised flow ``w = V0 + M conj(s) / V0``:

* WLS is a filter reset at every step: prior from the forecasts, then one PMU
  update.
* The ensemble filter is iterated to steady state: evolve, PMU update, then a
  time-differenced pseudo-measurement update.

Power-domain covariances are carried into voltage space with ``M / V0``, and
the pseudo-measurement observation matrix is its inverse ``V0 M^-1``. All
transposes are Hermitian. ARMSEV values are returned in per-unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TheoryConfig",
    "TheoryResult",
    "ConvergenceError",
    "theory_matrices",
    "wls_theory",
    "enkf_theory",
    "convergence_audit",
    "theory_armsev",
]


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residuals=()):
        super().__init__(msg)
        self.residuals = list(residuals)


@dataclass
class TheoryConfig:
    """Per-load-bus statistics (apparent power, VA) and PMU setup.

    ``pmu_buses`` uses network bus indices (1..n).
    """

    sigma_f: np.ndarray
    sigma_d: np.ndarray
    psi_f: np.ndarray
    sigma_pmu: float
    pmu_buses: tuple = ()
    slack_voltage: float = 12.66e3
    iterations: int = 50

    def __post_init__(self):
        self.sigma_f = np.asarray(self.sigma_f, dtype=float)
        self.sigma_d = np.asarray(self.sigma_d, dtype=float)
        self.psi_f = np.broadcast_to(np.asarray(self.psi_f, dtype=float), self.sigma_f.shape).copy()
        self.pmu_buses = tuple(sorted(int(b) for b in self.pmu_buses))
        if np.any(self.sigma_f < 0) or np.any(self.sigma_d < 0) or self.sigma_pmu < 0:
            raise ValueError("standard deviations must be nonnegative")
        if np.any(np.abs(self.psi_f) > 1):
            raise ValueError("forecast error correlations must lie in [-1, 1]")
        if len(set(self.pmu_buses)) != len(self.pmu_buses):
            raise ValueError("duplicate PMU bus")

    def with_pmus(self, buses) -> "TheoryConfig":
        return TheoryConfig(self.sigma_f, self.sigma_d, self.psi_f, self.sigma_pmu,
                            tuple(buses), self.slack_voltage, self.iterations)


@dataclass
class TheoryResult:
    sigma_a_ss: np.ndarray
    sigma_a_0: np.ndarray
    armsev_wls: float
    armsev_enkf: float
    iterations_used: int
    convergence_residual: float
    residuals: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)

    @property
    def gain(self) -> float:
        if self.armsev_wls == 0:
            return float("nan")  # nothing to improve on
        return (self.armsev_wls - self.armsev_enkf) / self.armsev_wls


def theory_matrices(cfg: TheoryConfig, M: np.ndarray):
    """Evolution covariance ``Q``, forecast covariance ``R_S`` (both VA^2)
    and PMU covariance ``R_PMU = 2 sigma_pmu^2 V0^2 I`` (V^2)."""
    n = M.shape[0]
    if cfg.sigma_f.shape != (n,) or cfg.sigma_d.shape != (n,):
        raise ValueError(f"per-bus statistics must have length {n}")
    Q = np.diag(cfg.sigma_d**2).astype(complex)
    R_S = np.diag(cfg.sigma_f**2).astype(complex)
    R_pmu = 2.0 * cfg.sigma_pmu**2 * cfg.slack_voltage**2 * np.eye(len(cfg.pmu_buses), dtype=complex)
    return Q, R_S, R_pmu


def _selection(n, buses):
    H = np.zeros((len(buses), n), dtype=complex)
    for r, b in enumerate(buses):
        if not 1 <= b <= n:
            raise ValueError(f"PMU bus {b} is not a load bus")
        H[r, b - 1] = 1.0
    return H


def _hermitian(A):
    return 0.5 * (A + A.conj().T)


def _solve(A, B):
    """``A^-1 B``; singular systems (exact data, no uncertainty) get the
    minimum-norm solution, i.e. the pseudo-inverse gain."""
    try:
        return np.linalg.solve(A, B)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(A, B, rcond=None)[0]


def _pmu_update(P, H, R):
    if H.shape[0] == 0:
        return P
    S = H @ P @ H.conj().T + R
    # K = P H^H S^-1, solved rather than inverted
    K = _solve(S.conj().T, (P @ H.conj().T).conj().T).conj().T
    return _hermitian(P - K @ H @ P)


def _pmu_step(P, H, R, C, R_star, cross_terms):
    """PMU update that also returns the pseudo-measurement cross terms."""
    if H.shape[0] == 0:
        return P, C, R_star
    S = H @ P @ H.conj().T + R
    K = _solve(S.conj().T, (P @ H.conj().T).conj().T).conj().T
    Pu = _hermitian(P - K @ H @ P)
    if cross_terms == "literal":
        return Pu, C, R_star
    HC = H @ C
    C_u = C - K @ HC
    R_u = _hermitian(R_star - HC.conj().T @ _solve(S, HC))
    return Pu, C_u, R_u


def _armsev_pu(P, v0):
    return float(np.sqrt(max(np.trace(P).real, 0.0) / P.shape[0]) / v0)


def wls_theory(cfg: TheoryConfig, M: np.ndarray):
    """Snapshot covariance (forecast prior + PMU update) and its ARMSEV (p.u.)."""
    v0 = cfg.slack_voltage
    _, R_S, R_pmu = theory_matrices(cfg, M)
    P0 = _hermitian(M @ R_S @ M.conj().T) / v0**2
    H = _selection(M.shape[0], cfg.pmu_buses)
    Pa = _pmu_update(P0, H, R_pmu)
    return Pa, _armsev_pu(Pa, v0)


def enkf_theory(cfg: TheoryConfig, M: np.ndarray, iterations: int | None = None,
                start: np.ndarray | None = None, keep_history: bool = False,
                cross_terms: str = "conditioned") -> TheoryResult:
    """Iterate the steady-state covariance recursion of the ensemble filter.

    Each iteration: add the evolution covariance, assimilate the PMUs, then
    the time-differenced forecasts. The differenced forecast noise shares
    the evolution noise with the prior, so after the PMU update its
    cross-covariance ``C`` and covariance ``R*`` are conditioned on the PMU
    innovation (``cross_terms="conditioned"``). This keeps the recursion
    exact and positive semidefinite; ``"literal"`` reuses the unconditioned
    ``C`` and ``R*``, which loses definiteness once the evolution noise is a
    sizeable fraction of the forecast error.

    ``start`` overrides the iteration-0 covariance (default: WLS snapshot).
    """
    if cross_terms not in ("conditioned", "literal"):
        raise ValueError("cross_terms must be 'conditioned' or 'literal'")
    iterations = cfg.iterations if iterations is None else iterations
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    v0 = cfg.slack_voltage
    n = M.shape[0]
    Q, R_S, R_pmu = theory_matrices(cfg, M)
    Pa0, armsev_wls = wls_theory(cfg, M)
    H_pmu = _selection(n, cfg.pmu_buses)

    model = _hermitian(M @ Q @ M.conj().T) / v0**2
    H = v0 * np.linalg.inv(M)
    Psi = np.diag(cfg.psi_f).astype(complex)
    H_star = H - Psi @ H
    # H model H^H collapses to Q in power coordinates
    C = model @ H.conj().T @ Psi.conj().T
    R_star = _hermitian((R_S - Psi @ R_S @ Psi.conj().T) + Psi @ Q @ Psi.conj().T)

    Pa = Pa0.copy() if start is None else np.array(start, dtype=complex)
    residuals, history = [], []
    scale = max(np.linalg.norm(Pa0), np.finfo(float).tiny)
    growth = 0
    for _ in range(iterations):
        Pp = Pa + model
        Pu, C_u, R_u = _pmu_step(Pp, H_pmu, R_pmu, C, R_star, cross_terms)
        G = Pu @ H_star.conj().T + C_u
        E = H_star @ Pu @ H_star.conj().T + R_u + H_star @ C_u + C_u.conj().T @ H_star.conj().T
        if np.trace(E).real > 0:
            K = np.linalg.solve(E.conj().T, G.conj().T).conj().T
            Pa_new = _hermitian(Pu - G @ K.conj().T)
        else:
            # no uncertainty anywhere: nothing to update
            Pa_new = Pu
        res = float(np.linalg.norm(Pa_new - Pa))
        residuals.append(res)
        if keep_history:
            history.append((Pp, Pu, Pa_new))
        growth = growth + 1 if len(residuals) > 1 and res > residuals[-2] else 0
        Pa = Pa_new
        if growth >= 10 or not np.all(np.isfinite(Pa)):
            raise ConvergenceError("covariance recursion diverging", residuals)
        if res <= 1e-15 * scale:
            break
    return TheoryResult(
        sigma_a_ss=Pa,
        sigma_a_0=Pa0,
        armsev_wls=armsev_wls,
        armsev_enkf=_armsev_pu(Pa, v0),
        iterations_used=len(residuals),
        convergence_residual=residuals[-1],
        residuals=residuals,
        history=history,
    )


def theory_armsev(cfg: TheoryConfig, M: np.ndarray) -> tuple[float, float, float]:
    """``(armsev_wls, armsev_enkf, gain)`` for one configuration."""
    r = enkf_theory(cfg, M)
    return r.armsev_wls, r.armsev_enkf, r.gain


@dataclass
class AuditReport:
    passed: bool
    relative_residual: float
    tail_monotone: bool
    residuals: list


def convergence_audit(result: TheoryResult, at: int = 50, rel_tol: float = 1e-10) -> AuditReport:
    """Check the residual at iteration ``at`` and monotone decay over the last 10.

    A run that stopped early because it reached a fixed point counts as
    converged. Raises :class:`ConvergenceError` on failure.
    """
    res = result.residuals
    norm = max(np.linalg.norm(result.sigma_a_ss), np.finfo(float).tiny)
    if len(res) < at:
        r_at = res[-1]
        if r_at > rel_tol * norm:
            raise ConvergenceError(f"stopped at iteration {len(res)} before reaching {at}", res)
    else:
        r_at = res[at - 1]
    tail = res[max(0, min(len(res), at) - 10):min(len(res), at)]
    monotone = all(b <= a or b <= rel_tol * norm * 1e-3 for a, b in zip(tail, tail[1:]))
    rel = r_at / norm
    if rel >= rel_tol or not monotone:
        raise ConvergenceError(f"residual {rel:.3e} (relative) at iteration {at}, monotone tail={monotone}", res)
    return AuditReport(True, rel, monotone, list(res))
