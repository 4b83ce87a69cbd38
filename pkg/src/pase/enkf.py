"""Ensemble Kalman filter over power injections (PASE).

Each time-step the ensemble of injection vectors is propagated with the load
evolution model, corrected with the time-differenced forecast
pseudo-measurements, and then with the PMU readings through the full power
flow. The estimate is the ensemble mean.

Time-differencing: with forecast errors ``e_k = Psi e_{k-1} + w_k`` the
differenced pseudo-measurement ``d*_k = d_k - Psi d_{k-1}`` observes
``H* x_k`` (``H* = I - Psi``) with noise ``Psi n_k + w_k``, which is
correlated with the evolution noise ``n_k`` through ``C = Q Psi``. All of
``Psi``, ``Q`` and ``R`` are diagonal, so they are stored as vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measurement import MeasurementSnapshot
from .network import NetworkModel
from .powerflow import PowerFlowError, observe_pmu, solve_bfs

log = logging.getLogger(__name__)

DEFAULT_MEMBERS = 500
COND_LIMIT = 1e12
JITTER = 1e-10

__all__ = [
    "DecorrelationMatrices",
    "ensemble_cov",
    "init_ensemble",
    "integrate",
    "assimilate_pseudo",
    "assimilate_pmu",
    "pase_step",
    "PaseFilter",
]


def _check_ensemble(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 2:
        raise ValueError("an ensemble is a 2-D array with at least two columns")
    return X


def ensemble_cov(A, B=None) -> np.ndarray:
    """Empirical (cross-)covariance of two ensembles with ``1 / (L - 1)``."""
    A = _check_ensemble(A)
    B = A if B is None else _check_ensemble(B)
    if A.shape[1] != B.shape[1]:
        raise ValueError("ensembles must have the same number of members")
    L = A.shape[1]
    Ac = A - A.mean(axis=1, keepdims=True)
    Bc = Ac if B is A else B - B.mean(axis=1, keepdims=True)
    return Ac @ Bc.T / (L - 1)


@dataclass
class DecorrelationMatrices:
    """Diagonals of ``Psi`` (error autocorrelation), ``Q`` (evolution noise
    variance) and ``R`` (forecast error variance), in state ordering."""

    psi: np.ndarray
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.psi = np.broadcast_to(np.asarray(self.psi, dtype=float), self.r.shape).copy()
        if not (self.psi.shape == self.q.shape == self.r.shape):
            raise ValueError("psi, q and r must have the same length")
        if np.any(np.abs(self.psi) > 1):
            raise ValueError("psi entries must lie in [-1, 1]")
        if np.any(self.q < 0) or np.any(self.r < 0):
            raise ValueError("q and r must be nonnegative")

    @property
    def h_star(self) -> np.ndarray:
        return 1.0 - self.psi

    @property
    def c(self) -> np.ndarray:
        return self.q * self.psi

    @property
    def w_var(self) -> np.ndarray:
        """Variance of the innovation ``w`` of the forecast-error process."""
        return np.maximum(self.r - self.psi**2 * self.r, 0.0)

    @property
    def r_star(self) -> np.ndarray:
        return self.w_var + self.psi**2 * self.q

    # dense views, for inspection and tests
    @property
    def H_star(self) -> np.ndarray:
        return np.diag(self.h_star)

    @property
    def C(self) -> np.ndarray:
        return np.diag(self.c)

    @property
    def R_star(self) -> np.ndarray:
        return np.diag(self.r_star)


def init_ensemble(d0, r, members: int = DEFAULT_MEMBERS, rng=None) -> np.ndarray:
    """``members`` columns ``d0 + N(0, R)``; ``r`` is a variance vector or a covariance matrix."""
    if members < 2:
        raise ValueError("need at least two ensemble members")
    rng = np.random.default_rng(rng)
    d0 = np.asarray(d0, dtype=float)
    r = np.asarray(r, dtype=float)
    g = rng.standard_normal((len(d0), members))
    if r.ndim == 1:
        return d0[:, None] + np.sqrt(r)[:, None] * g
    vals, vecs = np.linalg.eigh(r)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return d0[:, None] + root @ g


def integrate(X, model, rng=None, return_noise: bool = False):
    """Add one draw of evolution noise per member: ``X_p = X + [n_1 .. n_L]``.

    ``model`` only needs ``sample(rng, members) -> (dim, members)``.
    """
    X = _check_ensemble(X)
    rng = np.random.default_rng(rng)
    noise = np.asarray(model.sample(rng, X.shape[1]), dtype=float)
    if noise.shape != X.shape:
        raise ValueError(f"model noise has shape {noise.shape}, ensemble {X.shape}")
    Xp = X + noise
    return (Xp, noise) if return_noise else Xp


def _gain(S: np.ndarray, G: np.ndarray, info: dict | None, key: str) -> np.ndarray:
    """``G S^-1`` for symmetric ``S``, with diagonal scaling and jitter."""
    d = np.sqrt(np.clip(np.diag(S), np.finfo(float).tiny, None))
    Ss = S / d[:, None] / d[None, :]
    cond = np.linalg.cond(Ss)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        Ss = Ss + JITTER * np.trace(Ss) / len(Ss) * np.eye(len(Ss))
    if info is not None:
        info[f"cond_{key}"] = float(cond)
    return np.linalg.solve(Ss, (G / d[None, :]).T).T / d[None, :]


def assimilate_pseudo(X_p, d, d_prev, mats: DecorrelationMatrices, rng=None,
                      model_noise=None, info: dict | None = None) -> np.ndarray:
    """Update with the time-differenced pseudo-measurements ``d - Psi d_prev``.

    Observation perturbations are ``w_l - Psi n_l`` with ``w_l ~ N(0, R - Psi R Psi)``
    and ``n_l`` the evolution noise member ``l`` just received. They have
    covariance ``R*``, and their cross-covariance with the prior is ``-C``:
    a perturbation plays the role of minus the observation noise, so the
    analysed ensemble has exactly the Kalman posterior covariance. Without
    ``model_noise`` they are drawn from ``N(0, R*)``.
    """
    X_p = _check_ensemble(X_p)
    rng = np.random.default_rng(rng)
    dim, L = X_p.shape
    d = np.asarray(d, dtype=float)
    d_prev = np.asarray(d_prev, dtype=float)
    if d.shape != (dim,) or d_prev.shape != (dim,) or mats.r.shape != (dim,):
        raise ValueError("pseudo-measurements and matrices must match the state dimension")
    psi, hs = mats.psi, mats.h_star
    g = rng.standard_normal((dim, L))
    if model_noise is None:
        V = np.sqrt(mats.r_star)[:, None] * g
    else:
        V = np.sqrt(mats.w_var)[:, None] * g - psi[:, None] * model_noise
    D_star = (d - psi * d_prev)[:, None] + V

    P = ensemble_cov(X_p)
    c = mats.c
    E = hs[:, None] * P * hs[None, :] + np.diag(mats.r_star + 2.0 * hs * c)
    G = P * hs[None, :] + np.diag(c)
    K = _gain(E, G, info, "pseudo")
    innov = D_star - hs[:, None] * X_p
    if info is not None:
        info["innov_pseudo"] = float(np.linalg.norm(innov.mean(axis=1) / np.sqrt(np.diag(E))))
    return X_p + K @ innov


def _observe(h, X, redraw):
    try:
        return X, h(X)
    except PowerFlowError as exc:
        bad = exc.members
        if bad.size == 0:
            raise
    X = X.copy()
    if redraw is not None:
        X[:, bad] = redraw(bad)
        try:
            return X, h(X)
        except PowerFlowError as exc:
            bad = exc.members
            if bad.size == 0:
                raise
    keep = np.setdiff1d(np.arange(X.shape[1]), bad)
    log.warning("power flow failed for %d ensemble member(s); clamped to the ensemble mean", bad.size)
    X[:, bad] = X[:, keep].mean(axis=1, keepdims=True)
    return X, h(X)


def assimilate_pmu(X_u, z, z_var, h: Callable[[np.ndarray], np.ndarray], rng=None,
                   redraw: Callable[[np.ndarray], np.ndarray] | None = None,
                   info: dict | None = None) -> np.ndarray:
    """Update with PMU readings ``z`` through the nonlinear observation ``h``.

    ``h`` maps the ensemble to predicted readings column by column. Members
    whose power flow fails are replaced by ``redraw(members)`` once and
    clamped to the ensemble mean if that fails too. Rows are scaled by their
    total spread before the gain is formed (the gain is scale-invariant).
    """
    X_u = _check_ensemble(X_u)
    z = np.asarray(z, dtype=float)
    z_var = np.asarray(z_var, dtype=float)
    if z.size == 0:
        return X_u.copy()
    if z_var.shape != z.shape or np.any(z_var < 0):
        raise ValueError("z_var must be a nonnegative vector matching z")
    rng = np.random.default_rng(rng)
    L = X_u.shape[1]
    X_u, Y = _observe(h, X_u, redraw)
    Z = z[:, None] + np.sqrt(z_var)[:, None] * rng.standard_normal((len(z), L))
    scale = np.sqrt(Y.var(axis=1) + z_var)
    scale[scale == 0] = 1.0
    Ys, Zs = Y / scale[:, None], Z / scale[:, None]
    S = ensemble_cov(Ys) + ensemble_cov(Zs)
    K = _gain(S, ensemble_cov(X_u, Ys), info, "pmu")
    innov = Zs - Ys
    if info is not None:
        info["innov_pmu"] = float(np.linalg.norm(innov.mean(axis=1)))
    return X_u + K @ innov


def pase_step(X, snapshot: MeasurementSnapshot, model, mats: DecorrelationMatrices,
              d_prev, h, rng=None, info: dict | None = None):
    """One filter step: integrate, pseudo update, PMU update.

    Returns the post-PMU ensemble (the state carried to the next step) and
    its mean.
    """
    rng = np.random.default_rng(rng)
    X_p, N = integrate(X, model, rng, return_noise=True)
    X_u = assimilate_pseudo(X_p, snapshot.d, d_prev, mats, rng, model_noise=N, info=info)

    def redraw(bad):
        return X_u[:, bad] - N[:, bad] + model.sample(rng, len(bad))

    X_a = assimilate_pmu(X_u, snapshot.pmu.values, snapshot.pmu.variances, h, rng, redraw, info)
    x = X_a.mean(axis=1)
    if info is not None:
        info["spread"] = float(X_a.std(axis=1, ddof=1).mean())
    return X_a, x


@dataclass
class PaseFilter:
    """Stateful wrapper that runs :func:`pase_step` over a snapshot stream."""

    net: NetworkModel
    model: object
    mats: DecorrelationMatrices
    d0: np.ndarray
    members: int = DEFAULT_MEMBERS
    seed: object = None
    ensemble: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.d0 = np.asarray(self.d0, dtype=float)
        self.ensemble = init_ensemble(self.d0, self.mats.r, self.members, self.rng)
        self.d_prev = self.d0
        self.last_info: dict = {}

    def step(self, snapshot: MeasurementSnapshot) -> np.ndarray:
        """Assimilate one snapshot and return the injection estimate."""
        buses = snapshot.pmu.buses
        info: dict = {}
        self.ensemble, x = pase_step(
            self.ensemble, snapshot, self.model, self.mats, self.d_prev,
            lambda X: observe_pmu(self.net, X, buses), self.rng, info,
        )
        self.d_prev = np.asarray(snapshot.d, dtype=float)
        self.last_info = info
        return x

    def voltages(self, x) -> np.ndarray:
        """Complex load-bus voltages implied by an injection estimate."""
        return solve_bfs(self.net, x)
