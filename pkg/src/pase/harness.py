"""Scenario construction, time-loop simulation, metrics and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .enkf import DEFAULT_MEMBERS, DecorrelationMatrices, PaseFilter
from .loadmodel import (
    DAY,
    ForecastSet,
    LoadEvolutionModel,
    ProfileParams,
    TracePool,
    aggregate_profile,
    error_autocorrelation,
    fit_evolution_model,
    forecast_from_profile,
    house_count,
)
from .measurement import MeasurementSnapshot, PmuPlacement, greedy_placement, pseudo_vector, simulate_pmu
from .network import NetworkModel, dlf_matrix, load_network
from .powerflow import PowerFlowError, complex_to_polar, solve_bfs
from .theory import TheoryConfig, enkf_theory
from .wls import WlsError, build_problem, wls_estimate

log = logging.getLogger(__name__)

ESTIMATORS = ("wls", "pase")
RESULT_COLUMNS = [
    "n_pmus", "dt_s", "sigma_pmu", "armsev_wls", "armsev_enkf", "gain",
    "armsev_sim_wls", "armsev_sim_pase", "gain_sim",
]
THEORY_COLUMNS = RESULT_COLUMNS[:6]

# fixed sub-stream ids for the master seed fan-out
_STREAMS = {"assign": 1, "pmu": 2, "ensemble": 3, "training": 4}

__all__ = [
    "SimulationConfig",
    "Scenario",
    "RunResult",
    "build_scenario",
    "run",
    "armsev",
    "sweep",
    "min_pmus_for_target",
    "theory_config",
    "write_results_csv",
]


def stream(seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for one purpose, derived from the master seed."""
    return np.random.default_rng([int(seed), _STREAMS[purpose]])


@dataclass
class SimulationConfig:
    network: str | None = None
    dt_s: float = 6.0
    horizon_s: float = DAY
    refresh_s: float | None = None
    members: int = DEFAULT_MEMBERS
    sigma_pmu: float = 0.01
    sigma0: float = 0.30
    n_ref: int = 10
    ref_bus: int = 10
    n_pmus: int | None = None
    pmu_buses: list | None = None
    estimators: str = "both"
    seed: int | None = None
    pool_seed: int = 0
    pool_size: int = 2000
    fit_samples: int = 12
    resolution_s: float = 6.0
    profile: dict | None = None

    def __post_init__(self):
        if self.dt_s <= 0 or self.horizon_s <= 0:
            raise ValueError("dt_s and horizon_s must be positive")
        if abs(self.horizon_s / self.dt_s - round(self.horizon_s / self.dt_s)) > 1e-9:
            raise ValueError("dt_s must divide horizon_s")
        if abs(self.dt_s / self.resolution_s - round(self.dt_s / self.resolution_s)) > 1e-9:
            raise ValueError("dt_s must be a multiple of the trace resolution")
        if self.horizon_s > DAY:
            raise ValueError("horizon_s is limited to one day of traces")
        if self.members < 2 or self.n_ref < 1 or self.pool_size < 1 or self.fit_samples < 1:
            raise ValueError("counts must be positive (members >= 2)")
        if self.sigma_pmu < 0 or self.sigma0 < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.estimators not in ("wls", "pase", "both"):
            raise ValueError("estimators must be 'wls', 'pase' or 'both'")
        if self.n_pmus is not None and self.pmu_buses is not None:
            raise ValueError("give either n_pmus or pmu_buses, not both")
        if self.n_pmus is not None and self.n_pmus < 0:
            raise ValueError("n_pmus must be nonnegative")

    @property
    def steps(self) -> int:
        return int(round(self.horizon_s / self.dt_s))

    @property
    def active(self) -> tuple:
        return ESTIMATORS if self.estimators == "both" else (self.estimators,)

    def replace(self, **kw) -> "SimulationConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_json(cls, path, **overrides) -> "SimulationConfig":
        doc = json.loads(Path(path).read_text())
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Scenario:
    """Everything a run needs besides the random streams of the estimators."""

    net: NetworkModel
    houses: np.ndarray
    p_profiles: np.ndarray
    q_profiles: np.ndarray
    forecasts: ForecastSet
    model: LoadEvolutionModel
    placement: PmuPlacement
    greedy_order: tuple

    def theory_config(self, sigma_pmu: float, buses=None) -> TheoryConfig:
        return theory_config(self.forecasts, self.model, sigma_pmu,
                             self.placement.buses if buses is None else buses, self.net.slack_voltage)

    def to_dict(self) -> dict:
        return {
            "houses": self.houses.tolist(),
            "p_f": self.forecasts.p_f.tolist(),
            "q_f": self.forecasts.q_f.tolist(),
            "psi_p": self.forecasts.psi_p.tolist(),
            "psi_q": self.forecasts.psi_q.tolist(),
            "b_p": self.model.b_p.tolist(),
            "b_q": self.model.b_q.tolist(),
            "sigma0": self.forecasts.sigma0,
            "placement": {"sigma_pmu": self.placement.sigma_pmu, "buses": list(self.placement.buses)},
            "greedy_order": list(self.greedy_order),
        }


def theory_config(forecasts: ForecastSet, model: LoadEvolutionModel, sigma_pmu: float,
                  buses=(), slack_voltage: float = 12.66e3) -> TheoryConfig:
    """Theory scalars from simulation parameters (apparent-power statistics)."""
    return TheoryConfig(
        sigma_f=forecasts.sigma_f,
        sigma_d=model.apparent_std,
        psi_f=forecasts.psi_p,
        sigma_pmu=sigma_pmu,
        pmu_buses=tuple(buses),
        slack_voltage=slack_voltage,
    )


@lru_cache(maxsize=4)
def _training_samples(pool: TracePool, count: int) -> np.ndarray:
    return pool.samples(list(pool.training())[:count])


@lru_cache(maxsize=256)
def relative_scale(pool: TracePool, n: int, dt: float, fit_samples: int, seed: int) -> float:
    """Laplace scale of the ``dt`` load change of an ``n``-house aggregate
    normalised to unit mean, fitted on ``fit_samples`` training aggregates."""
    count = min(pool.size, 400 if 4 * n <= 400 else pool.size)
    base = _training_samples(pool, count)
    rng = np.random.default_rng([seed, n])
    profiles = [aggregate_profile(base, n, 1.0, rng) for _ in range(fit_samples)]
    return fit_evolution_model(profiles, dt, pool.resolution).b


def _assign_houses(rng, candidates, counts):
    order = rng.permutation(np.asarray(candidates))
    if counts.sum() > len(order):
        raise ValueError(f"testing pool holds {len(order)} traces, scenario needs {counts.sum()}")
    cuts = np.cumsum(counts)[:-1]
    return np.split(order[: counts.sum()], cuts)


def build_scenario(cfg: SimulationConfig, seed: int | None = None, net: NetworkModel | None = None) -> Scenario:
    """Profiles, forecasts, evolution model and PMU placement for one realization.

    Every load bus gets its own houses from the testing half of the pool,
    separately for active and reactive power; the houses are drawn without
    replacement so no trace feeds two profiles.
    """
    seed = cfg.seed if seed is None else seed
    if seed is None:
        raise ValueError("a seed is required")
    net = net if net is not None else load_network(cfg.network)
    pool = TracePool(seed=cfg.pool_seed, params=ProfileParams(**(cfg.profile or {})), resolution=cfg.resolution_s,
                     duration=DAY, size=cfg.pool_size)
    houses = house_count(net, cfg.n_ref, cfg.ref_bus)
    rng = stream(seed, "assign")
    groups = _assign_houses(rng, pool.testing(), np.concatenate([houses, houses]))
    n = net.n_load
    profiles = np.empty((2 * n, pool.n_samples))
    targets = np.concatenate([net.p_load[1:], net.q_load[1:]])
    for k, idx in enumerate(groups):
        if targets[k] == 0:
            profiles[k] = 0.0
            continue
        profiles[k] = aggregate_profile(pool.samples(idx), len(idx), targets[k], rng)
    p_prof, q_prof = profiles[:n], profiles[n:]

    forecasts = ForecastSet(
        p_f=np.array([forecast_from_profile(p) for p in p_prof]),
        q_f=np.array([forecast_from_profile(q) for q in q_prof]),
        sigma0=cfg.sigma0,
        psi_p=np.array([_psi(p, cfg) for p in p_prof]),
        psi_q=np.array([_psi(q, cfg) for q in q_prof]),
        refresh_s=cfg.refresh_s or cfg.horizon_s,
    )
    rel = np.array([relative_scale(pool, int(h), float(cfg.dt_s), cfg.fit_samples, cfg.pool_seed) for h in houses])
    model = LoadEvolutionModel(rel * forecasts.p_f, rel * forecasts.q_f)

    M = dlf_matrix(net)
    base = theory_config(forecasts, model, cfg.sigma_pmu, (), net.slack_voltage)
    full = greedy_placement(net, n, lambda b: enkf_theory(base.with_pmus(b), M).armsev_enkf, cfg.sigma_pmu)
    if cfg.pmu_buses is not None:
        placement = PmuPlacement(tuple(cfg.pmu_buses), cfg.sigma_pmu)
    else:
        placement = full.prefix(n if cfg.n_pmus is None else cfg.n_pmus)
    return Scenario(net, houses, p_prof, q_prof, forecasts, model, placement, full.buses)


def _psi(profile, cfg):
    if np.ptp(profile) == 0:
        return 0.0
    return error_autocorrelation(profile, cfg.dt_s, cfg.resolution_s)


def armsev(true_states, estimates, v0: float = 1.0) -> float:
    """Root mean square of complex voltage errors over steps and buses, divided by ``v0``."""
    a = np.asarray(true_states, dtype=complex)
    b = np.asarray(estimates, dtype=complex)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("no samples")
    return float(np.sqrt(np.mean(np.abs(b - a) ** 2)) / v0)


@dataclass
class RunResult:
    truth: np.ndarray
    estimates: dict
    armsev: dict
    theory: tuple
    n_pmus: int
    dt_s: float
    sigma_pmu: float
    failures: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list, repr=False)
    runtime_s: dict = field(default_factory=dict)

    @property
    def gain(self) -> float:
        if "wls" not in self.armsev or "pase" not in self.armsev or self.armsev["wls"] == 0:
            return float("nan")
        return (self.armsev["wls"] - self.armsev["pase"]) / self.armsev["wls"]

    @property
    def errors_pu(self) -> dict:
        v0 = np.abs(self.truth).max() if self.truth.size else 1.0
        return {k: np.abs(v - self.truth) / v0 for k, v in self.estimates.items()}

    def row(self) -> dict:
        wls_t, enkf_t, gain_t = self.theory
        return {
            "n_pmus": self.n_pmus, "dt_s": self.dt_s, "sigma_pmu": self.sigma_pmu,
            "armsev_wls": wls_t, "armsev_enkf": enkf_t, "gain": gain_t,
            "armsev_sim_wls": self.armsev.get("wls", float("nan")),
            "armsev_sim_pase": self.armsev.get("pase", float("nan")),
            "gain_sim": self.gain,
        }


class EstimatorAborted(RuntimeError):
    pass


def _truth_trajectory(scn: Scenario, cfg: SimulationConfig):
    lag = int(round(cfg.dt_s / cfg.resolution_s))
    idx = np.arange(cfg.steps) * lag
    X = -np.concatenate([scn.p_profiles[:, idx], scn.q_profiles[:, idx]])
    W = solve_bfs(scn.net, X, tol=1e-9).T
    return idx * cfg.resolution_s, X.T, W


def _pseudo(scn: Scenario, cfg: SimulationConfig, t: np.ndarray):
    """Pseudo-measurement vector per step; forecasts are window means when refreshed."""
    refresh = cfg.refresh_s or cfg.horizon_s
    if refresh >= cfg.horizon_s:
        d = pseudo_vector(scn.forecasts)
        return np.broadcast_to(d, (len(t), len(d)))
    lag = int(round(refresh / cfg.resolution_s))
    out = np.empty((len(t), 2 * scn.net.n_load))
    prof = np.concatenate([scn.p_profiles, scn.q_profiles])
    for k, tk in enumerate(t):
        start = int(tk // refresh) * lag
        out[k] = -prof[:, start:start + lag].mean(axis=1)
    return out


def run(cfg: SimulationConfig, scenario: Scenario | None = None, keep_diagnostics: bool = True) -> RunResult:
    """Simulate the configured estimators over the horizon.

    The truth trajectory and the PMU noise depend only on the scenario and
    the master seed, so runs with different ensemble sizes or estimator
    sets see identical data.
    """
    if cfg.seed is None:
        raise ValueError("a seed is required")
    scn = scenario if scenario is not None else build_scenario(cfg)
    net = scn.net
    v0 = net.slack_voltage
    placement = scn.placement
    t, _, W = _truth_trajectory(scn, cfg)
    D = _pseudo(scn, cfg, t)
    fc = scn.forecasts
    d_var = np.concatenate([fc.sigma_fp, fc.sigma_fq]) ** 2
    d_var = np.maximum(d_var, (1e-6 * net.base_power) ** 2)

    pmu_rng = stream(cfg.seed, "pmu")
    pase = None
    if "pase" in cfg.active:
        mats = DecorrelationMatrices(fc.psi, scn.model.covariance_diag, d_var)
        pase = PaseFilter(net, scn.model, mats, D[0], cfg.members, stream(cfg.seed, "ensemble"))

    K = len(t)
    est = {name: np.empty((K, net.n_load), dtype=complex) for name in cfg.active}
    failures = {name: 0 for name in cfg.active}
    streak = {name: 0 for name in cfg.active}
    runtime = {name: 0.0 for name in cfg.active}
    diag = []
    for k in range(K):
        y_true = complex_to_polar(W[k])
        reading = simulate_pmu(y_true, placement, pmu_rng)
        snap = MeasurementSnapshot(reading, D[k], d_var, float(t[k]))
        rec = {"step": k, "t_s": float(t[k])}
        if "wls" in est:
            t0 = time.perf_counter()
            try:
                res = wls_estimate(build_problem(net, reading, D[k], d_var))
                ok = True
            except WlsError as exc:
                res, ok = exc.result, False
            runtime["wls"] += time.perf_counter() - t0
            _tally("wls", ok, failures, streak, k)
            est["wls"][k] = res.voltages if res is not None else est["wls"][k - 1] if k else v0
            rec.update(wls_iterations=res.iterations if res else -1,
                       wls_objective=res.objective if res else float("nan"))
        if pase is not None:
            t0 = time.perf_counter()
            try:
                x = pase.step(snap)
                est["pase"][k] = solve_bfs(net, x)
                ok = True
            except (PowerFlowError, np.linalg.LinAlgError) as exc:
                log.warning("PASE step %d failed: %s", k, exc)
                est["pase"][k] = est["pase"][k - 1] if k else v0
                ok = False
            runtime["pase"] += time.perf_counter() - t0
            _tally("pase", ok, failures, streak, k)
            rec.update({f"pase_{key}": val for key, val in pase.last_info.items()})
        for name in est:
            rec[f"err_{name}"] = armsev(W[k], est[name][k], v0)
        if keep_diagnostics:
            diag.append(rec)

    scores = {name: armsev(W, est[name], v0) for name in est}
    theory = enkf_theory(scn.theory_config(placement.sigma_pmu), dlf_matrix(net))
    return RunResult(
        truth=W, estimates=est, armsev=scores,
        theory=(theory.armsev_wls, theory.armsev_enkf, theory.gain),
        n_pmus=len(placement), dt_s=cfg.dt_s, sigma_pmu=placement.sigma_pmu,
        failures=failures, diagnostics=diag, runtime_s=runtime,
    )


def _tally(name, ok, failures, streak, k):
    if ok:
        streak[name] = 0
        return
    failures[name] += 1
    streak[name] += 1
    if streak[name] >= 3:
        raise EstimatorAborted(f"{name} failed on 3 consecutive steps (last: step {k})")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_results_csv(path, rows, columns=RESULT_COLUMNS) -> None:
    """Write rows with a fixed column order and round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def write_diagnostics_csv(path, records) -> None:
    if not records:
        Path(path).write_text("")
        return
    columns = list(dict.fromkeys(k for r in records for k in r))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_fmt(r[c]) if c in r else "" for c in columns])
    Path(path).write_text(buf.getvalue())


def sweep(cfg: SimulationConfig, n_pmus=(None,), dt_s=(None,), sigma_pmu=(None,), seeds=(None,),
          simulate: bool = True, out=None) -> list[dict]:
    """Run theory (and simulation) over a grid; rows average over ``seeds``.

    The CSV at ``out`` is rewritten after every grid point, so partial
    results survive a failure.
    """
    rows = []
    grid = [(k, dt, sp) for dt in dt_s for sp in sigma_pmu for k in n_pmus]
    if not grid:
        raise ValueError("empty grid")
    for k, dt, sp in grid:
        point = cfg.replace(**{a: v for a, v in (("n_pmus", k), ("dt_s", dt), ("sigma_pmu", sp)) if v is not None})
        per_seed = []
        for s in seeds:
            c = point.replace(seed=s if s is not None else point.seed)
            scn = build_scenario(c)
            if simulate:
                per_seed.append(run(c, scn, keep_diagnostics=False).row())
            else:
                th = enkf_theory(scn.theory_config(c.sigma_pmu), dlf_matrix(scn.net))
                per_seed.append({
                    "n_pmus": len(scn.placement), "dt_s": c.dt_s, "sigma_pmu": c.sigma_pmu,
                    "armsev_wls": th.armsev_wls, "armsev_enkf": th.armsev_enkf, "gain": th.gain,
                    "armsev_sim_wls": float("nan"), "armsev_sim_pase": float("nan"), "gain_sim": float("nan"),
                })
        row = {c: per_seed[0][c] for c in ("n_pmus", "dt_s", "sigma_pmu")}
        for col in RESULT_COLUMNS[3:]:
            vals = np.array([r[col] for r in per_seed], dtype=float)
            row[col] = float(vals.mean())
        rows.append(row)
        if out is not None:
            write_results_csv(out, rows)
    return rows


def min_pmus_for_target(evaluate, target: float, max_pmus: int) -> int | None:
    """Smallest prefix length ``k`` with ``evaluate(k) <= target`` (linear scan)."""
    for k in range(0, max_pmus + 1):
        if evaluate(k) <= target:
            return k
    return None
