"""Independent reference implementations used only by the tests.

None of these reuse package internals beyond reading network data, so a bug
in the package cannot hide in its own oracle.
"""

from __future__ import annotations

import numpy as np


def ybus_from_branches(net):
    """Bus admittance matrix assembled from the branch list."""
    n = net.n_buses
    Y = np.zeros((n, n), dtype=complex)
    for f, t, z in net.branches:
        y = 1.0 / z
        Y[f, f] += y
        Y[t, t] += y
        Y[f, t] -= y
        Y[t, f] -= y
    return Y


def newton_raphson(net, p_inj, q_inj, tol=1e-12, max_iter=30):
    """Polar Newton-Raphson load flow with an analytic Jacobian.

    ``p_inj``/``q_inj`` are injections (W/var, loads negative) at the load
    buses. Returns complex voltages at the load buses.
    """
    Y = ybus_from_branches(net)
    G, B = Y.real, Y.imag
    n = net.n_buses
    V = np.full(n, float(net.slack_voltage))
    th = np.zeros(n)
    pq = np.arange(1, n)
    P_spec = np.concatenate([[0.0], p_inj])
    Q_spec = np.concatenate([[0.0], q_inj])
    for _ in range(max_iter):
        Vc = V * np.exp(1j * th)
        S = Vc * np.conj(Y @ Vc)
        mis = np.concatenate([(P_spec - S.real)[pq], (Q_spec - S.imag)[pq]])
        if np.max(np.abs(mis)) < tol * net.base_power:
            break
        dth = th[:, None] - th[None, :]
        VV = V[:, None] * V[None, :]
        # off-diagonal partials
        dP_dth = VV * (G * np.sin(dth) - B * np.cos(dth))
        dQ_dth = -VV * (G * np.cos(dth) + B * np.sin(dth))
        dP_dV = V[:, None] * (G * np.cos(dth) + B * np.sin(dth))
        dQ_dV = V[:, None] * (G * np.sin(dth) - B * np.cos(dth))
        # diagonal corrections
        P, Q = S.real, S.imag
        np.fill_diagonal(dP_dth, -Q - B.diagonal() * V**2)
        np.fill_diagonal(dQ_dth, P - G.diagonal() * V**2)
        np.fill_diagonal(dP_dV, P / V + G.diagonal() * V)
        np.fill_diagonal(dQ_dV, Q / V - B.diagonal() * V)
        J = np.block([
            [dP_dth[np.ix_(pq, pq)], dP_dV[np.ix_(pq, pq)]],
            [dQ_dth[np.ix_(pq, pq)], dQ_dV[np.ix_(pq, pq)]],
        ])
        dx = np.linalg.solve(J, mis)
        th[pq] += dx[: len(pq)]
        V[pq] += dx[len(pq):]
    else:
        raise RuntimeError("Newton-Raphson did not converge")
    return (V * np.exp(1j * th))[1:]


def kalman_update(m, P, H, R, y, C=None):
    """Exact linear update for ``y = H x + v`` with ``cov(x, v) = C``."""
    C = np.zeros((len(m), len(y))) if C is None else C
    S = H @ P @ H.T + R + H @ C + C.T @ H.T
    G = P @ H.T + C
    K = G @ np.linalg.inv(S)
    return m + K @ (y - H @ m), P - K @ G.T


def scalar_riccati_fixed_point(p_model, r_pmu, r_pseudo, h_pseudo, lo=0.0, hi=None, iters=200):
    """Steady-state posterior variance of a scalar filter with two
    independent measurements (``psi = 0``), solved by bisection on
    ``g(p) = update(p + p_model) - p``."""

    def update(p):
        p = p * r_pmu / (p + r_pmu) if np.isfinite(r_pmu) else p
        return p * r_pseudo / (h_pseudo**2 * p + r_pseudo)

    hi = hi if hi is not None else 10.0 * (p_model + r_pseudo / max(h_pseudo**2, 1e-300)) + 1.0
    g = lambda p: update(p + p_model) - p
    if g(lo) < 0:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def armsev_reference(truth, est, v0):
    """Loop-based ARMSEV: sqrt(mean over steps and buses of |err|^2) / V0."""
    total, count = 0.0, 0
    for row_t, row_e in zip(truth, est):
        for a, b in zip(row_t, row_e):
            d = complex(b) - complex(a)
            total += d.real * d.real + d.imag * d.imag
            count += 1
    return (total / count) ** 0.5 / v0


def textbook_cov(A):
    return np.cov(A, ddof=1)


class GaussianModel:
    """Evolution noise ``N(0, diag(q))`` with the ``sample`` interface of the load model."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=float)

    def sample(self, rng, members):
        return np.sqrt(self.q)[:, None] * rng.standard_normal((len(self.q), members))


# 3-dimensional linear-Gaussian toy shared by the filter tests
TOY_MEAN = np.array([1.0, -2.0, 0.5])
TOY_COV = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 1.5]])
TOY_Q = np.array([0.3, 0.5, 0.2])
TOY_R = np.array([1.0, 0.8, 2.0])
TOY_D = np.array([2.0, -1.0, 0.0])
TOY_D_PREV = np.array([1.5, -1.2, 0.3])
TOY_A = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, -1.0]])
TOY_Z = np.array([0.4, -1.5])
TOY_Z_VAR = np.array([0.5, 0.3])


def toy_pseudo_posterior(psi):
    """Exact posterior of ``x_k = x_{k-1} + n`` observed through ``d_k - Psi d_{k-1}``.

    With ``d_k = x_k + e_k`` and ``e_k = Psi e_{k-1} + w_k`` the differenced
    observation is ``(I - Psi) x_k + Psi n + w``; its noise covariance is
    ``Psi Q Psi + R - Psi R Psi`` and its covariance with the prior ``Q Psi``.
    """
    Psi = np.diag(np.broadcast_to(psi, TOY_Q.shape).astype(float))
    Q, R = np.diag(TOY_Q), np.diag(TOY_R)
    I = np.eye(len(TOY_Q))
    P = TOY_COV + Q
    R_star = Psi @ Q @ Psi + R - Psi @ R @ Psi
    return kalman_update(TOY_MEAN, P, I - Psi, R_star, TOY_D - Psi @ TOY_D_PREV, Q @ Psi)


def toy_pmu_posterior():
    """Exact posterior of ``N(TOY_MEAN, TOY_COV)`` observed through ``z = A x + noise``."""
    return kalman_update(TOY_MEAN, TOY_COV, TOY_A, np.diag(TOY_Z_VAR), TOY_Z)


def relative_error(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
