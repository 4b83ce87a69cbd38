"""Household traces, bus profile aggregation and load-statistics fitting.

The synthetic generator stands in for metered household data. Each trace is
one day of instantaneous active power built from

* a base load with a slow random wander,
* a refrigerator-like thermostatic cycle,
* an occupancy regime (idle/active) switching with a diurnal propensity,
* appliance events (Poisson, rate driven by the regime and the time of day)
  with random power and duration,
* a small white jitter.

All houses share one diurnal propensity curve, shifted per house by a few
hours, which makes day-ahead forecast errors of aggregated loads persistent
while load changes at different buses stay practically uncorrelated.

Traces are addressed by integer index inside a seeded pool, so a pool never
has to be held in memory and the training and testing pools are disjoint
index ranges of the same generator.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .network import NetworkModel

DAY = 86400.0

__all__ = [
    "HouseholdTrace",
    "ApplianceClass",
    "ProfileParams",
    "TracePool",
    "LaplaceFit",
    "LoadEvolutionModel",
    "ForecastSet",
    "house_count",
    "synth_traces",
    "aggregate_profile",
    "fit_evolution_model",
    "forecast_from_profile",
    "error_autocorrelation",
    "read_traces_csv",
    "write_traces_csv",
    "save_fitted_model",
    "load_fitted_model",
]


@dataclass
class HouseholdTrace:
    samples: np.ndarray
    resolution: float = 6.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if np.any(self.samples < 0):
            raise ValueError("household power must be nonnegative")

    @property
    def duration(self) -> float:
        return len(self.samples) * self.resolution


@dataclass(frozen=True)
class ApplianceClass:
    name: str
    events_per_day: float
    power_w: float
    duration_s: float
    power_spread: float = 0.3
    activity_driven: bool = True


DEFAULT_APPLIANCES = (
    ApplianceClass("lighting_media", 6.0, 180.0, 5400.0, 0.5),
    ApplianceClass("kettle_microwave", 6.0, 1500.0, 180.0, 0.25),
    ApplianceClass("cooking", 1.2, 1500.0, 2400.0, 0.3),
    ApplianceClass("laundry_dish", 0.7, 800.0, 4500.0, 0.4),
    ApplianceClass("space_conditioning", 5.0, 800.0, 1500.0, 0.3),
    ApplianceClass("small_misc", 12.0, 300.0, 900.0, 0.6, activity_driven=False),
)


@dataclass(frozen=True)
class ProfileParams:
    """Knobs of the synthetic household generator."""

    base_w: tuple = (40.0, 120.0)
    base_wander_w: float = 40.0
    base_wander_tau_s: float = 3600.0
    fridge_w: float = 130.0
    fridge_on_s: float = 900.0
    fridge_off_s: float = 1800.0
    # diurnal propensity: 1 + a1 cos(w(h - peak)) + a2 cos(2w(h - peak))
    diurnal_a1: float = 0.70
    diurnal_a2: float = 0.35
    diurnal_peak_h: float = 19.0
    # per-house shift of the daily routine (std, hours)
    house_shift_h: float = 4.0
    active_share: float = 0.30
    regime_tau_s: float = 3600.0
    idle_rate_factor: float = 0.05
    house_scale_spread: float = 0.35
    jitter_w: float = 12.0
    # appliance use shared by all houses of a day: lognormal AR(1) factor
    common_sigma: float = 0.0
    common_tau_s: float = 600.0
    appliances: tuple = DEFAULT_APPLIANCES

    def __post_init__(self):
        # JSON configs deliver lists
        object.__setattr__(self, "base_w", tuple(self.base_w))
        object.__setattr__(self, "appliances", tuple(self.appliances))

    def propensity(self, hours) -> np.ndarray:
        w = 2 * np.pi / 24.0
        h = np.asarray(hours, dtype=float) - self.diurnal_peak_h
        return 1 + self.diurnal_a1 * np.cos(w * h) + self.diurnal_a2 * np.cos(2 * w * h)


def _lognormal(rng, mean, spread, size=None):
    # lognormal with the given mean and log-std
    return mean * rng.lognormal(-0.5 * spread**2, spread, size)


def common_factor(seed, day: int, n: int, resolution: float, p: ProfileParams) -> np.ndarray:
    """Unit-mean multiplier on appliance power shared by every house of ``day``."""
    if p.common_sigma == 0:
        return np.ones(n)
    rng = np.random.default_rng([int(seed), 1_000_000 + int(day)])
    phi = math.exp(-resolution / p.common_tau_s)
    g = rng.normal(0.0, math.sqrt(1 - phi * phi), n)
    g[0] = rng.normal()
    f = _ar1_filter(g, phi)
    return np.exp(p.common_sigma * f - 0.5 * p.common_sigma**2)


def _generate_one(rng: np.random.Generator, n: int, resolution: float, p: ProfileParams,
                  common: np.ndarray | None = None) -> np.ndarray:
    duration = n * resolution
    shift = rng.normal(0.0, p.house_shift_h)
    scale = _lognormal(rng, 1.0, p.house_scale_spread)

    # base load with an AR(1) wander
    phi = math.exp(-resolution / p.base_wander_tau_s)
    g = rng.normal(0.0, p.base_wander_w * math.sqrt(1 - phi * phi), n)
    g[0] = rng.normal(0.0, p.base_wander_w)
    wander = _ar1_filter(g, phi)
    power = rng.uniform(*p.base_w) + wander

    delta = np.zeros(n + 1)

    # thermostatic cycle
    t0 = -rng.uniform(0, p.fridge_on_s + p.fridge_off_s)
    cycles = int(duration / (p.fridge_on_s + p.fridge_off_s) * 2) + 8
    on = rng.exponential(p.fridge_on_s, cycles) * 0.5 + 0.5 * p.fridge_on_s
    off = rng.exponential(p.fridge_off_s, cycles) * 0.5 + 0.5 * p.fridge_off_s
    starts = t0 + np.concatenate([[0.0], np.cumsum(on + off)[:-1]])
    _add_blocks(delta, starts, starts + on, np.full(cycles, p.fridge_w), resolution, n)

    # occupancy regime: alternating idle/active sojourns
    prop = lambda s: np.clip(p.active_share * p.propensity(s / 3600.0 - shift), 0.02, 0.98)
    # switching rates pi/tau (idle->active) and (1-pi)/tau, realised by
    # thinning candidate instants at rate 1/tau
    k = int(3 * duration / p.regime_tau_s) + 20
    cand = np.cumsum(rng.exponential(p.regime_tau_s, k))
    cand = cand[cand < duration]
    pi_c = prop(cand)
    u = rng.random(len(cand))
    state = rng.random() < prop(0.0)
    active = np.zeros(n, dtype=bool)
    last = 0.0
    for s, pi, ui in zip(cand, pi_c, u):
        switch = ui < (1 - pi) if state else ui < pi
        if switch:
            if state:
                active[int(last // resolution):int(s // resolution)] = True
            state, last = not state, s
    if state:
        active[int(last // resolution):] = True

    # appliance events by thinning a homogeneous Poisson stream
    for app in p.appliances:
        lam_max = app.events_per_day / DAY * (1.0 / max(p.active_share, 1e-9) if app.activity_driven else 1.0)
        k = rng.poisson(lam_max * duration)
        if k == 0:
            continue
        st = rng.uniform(0, duration, k)
        if app.activity_driven:
            idx = np.minimum((st // resolution).astype(int), n - 1)
            accept = np.where(active[idx], 1.0, p.idle_rate_factor)
            st = st[rng.random(k) < accept]
        m = len(st)
        dur = rng.exponential(app.duration_s, m)
        pw = _lognormal(rng, app.power_w, app.power_spread, m)
        _add_blocks(delta, st, st + dur, pw, resolution, n)

    appliances = np.cumsum(delta[:n])
    if common is not None:
        appliances = appliances * common
    power = power + appliances
    power = scale * power + rng.normal(0.0, p.jitter_w, n)
    return np.maximum(power, 0.0)


def _ar1_filter(g, phi):
    return lfilter([1.0], [1.0, -phi], g)


def _add_blocks(delta, start, stop, power, resolution, n):
    a = np.clip(np.ceil(start / resolution).astype(int), 0, n)
    b = np.clip(np.ceil(stop / resolution).astype(int), 0, n)
    keep = b > a
    np.add.at(delta, a[keep], power[keep])
    np.add.at(delta, b[keep], -power[keep])


def synth_traces(count: int, duration: float = DAY, resolution: float = 6.0,
                 params: ProfileParams | None = None, seed=0) -> list[HouseholdTrace]:
    """Generate ``count`` synthetic household traces, deterministic in ``seed``."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if duration < DAY:
        raise ValueError("traces must cover at least 24 h")
    if resolution <= 0 or duration % resolution:
        raise ValueError("duration must be a positive multiple of the resolution")
    pool = TracePool(seed=seed, params=params or ProfileParams(), resolution=resolution, duration=duration)
    return [pool.trace(i) for i in range(count)]


@dataclass(frozen=True)
class TracePool:
    """Seeded, index-addressed pool of synthetic traces.

    ``split`` partitions indices into a training half ``[0, size)`` and a
    testing half ``[size, 2 size)``.
    """

    seed: int = 0
    params: ProfileParams = field(default_factory=ProfileParams)
    resolution: float = 6.0
    duration: float = DAY
    size: int = 2000

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.resolution))

    def trace(self, index: int) -> HouseholdTrace:
        rng = np.random.default_rng([self.seed, int(index)])
        common = self._common(int(index) // self.size)
        return HouseholdTrace(_generate_one(rng, self.n_samples, self.resolution, self.params, common),
                              self.resolution)

    def _common(self, day: int) -> np.ndarray:
        # training and testing halves are two different days
        return _cached_common(self.seed, day, self.n_samples, self.resolution, self.params)

    def samples(self, indices) -> np.ndarray:
        return np.stack([self.trace(i).samples for i in indices]) if len(indices) else np.zeros((0, self.n_samples))

    def training(self) -> range:
        return range(0, self.size)

    def testing(self) -> range:
        return range(self.size, 2 * self.size)


@lru_cache(maxsize=8)
def _cached_common(seed, day, n, resolution, params):
    f = common_factor(seed, day, n, resolution, params)
    f.setflags(write=False)
    return f


def house_count(net: NetworkModel, n_ref: int = 10, ref_bus: int = 10) -> np.ndarray:
    """Houses per load bus, proportional to the static active load.

    ``n_i = round(n_ref * P_i / P_ref)`` with at least one house per bus.
    Returned array is indexed over load buses (bus ``i`` at position ``i-1``).
    """
    p_ref = net.p_load[ref_bus]
    if p_ref <= 0:
        raise ValueError(f"reference bus {ref_bus} has no active load")
    n = np.floor(n_ref * net.p_load[1:] / p_ref + 0.5).astype(int)
    return np.maximum(n, 1)


def aggregate_profile(traces, n: int, target_mean_w: float, rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Sum ``n`` randomly chosen traces and rescale to ``target_mean_w``.

    ``traces`` may be a list of :class:`HouseholdTrace`, a 2-D array of
    samples (one row per trace) or a ``(TracePool, indices)`` pair.
    """
    rng = np.random.default_rng(rng)
    if isinstance(traces, tuple) and isinstance(traces[0], TracePool):
        pool, candidates = traces
        candidates = list(candidates)
        if len(candidates) < n:
            raise ValueError(f"need {n} traces, pool has {len(candidates)}")
        pick = rng.choice(len(candidates), size=n, replace=False)
        total = pool.samples([candidates[k] for k in pick]).sum(axis=0)
    else:
        rows = [t.samples if isinstance(t, HouseholdTrace) else np.asarray(t) for t in traces]
        if len(rows) < n:
            raise ValueError(f"need {n} traces, got {len(rows)}")
        pick = rng.choice(len(rows), size=n, replace=False)
        total = np.sum([rows[k] for k in pick], axis=0)
    mean = total.mean()
    if mean <= 0:
        raise ValueError("selected traces have zero mean power")
    return total * (target_mean_w / mean)


@dataclass(frozen=True)
class LaplaceFit:
    b: float
    degenerate: bool = False

    @property
    def variance(self) -> float:
        return 2.0 * self.b**2


def _lag(dt: float, resolution: float) -> int:
    lag = int(round(dt / resolution))
    if lag < 0 or abs(lag * resolution - dt) > 1e-9 * max(dt, 1.0):
        raise ValueError(f"time-step {dt} s is not a multiple of the {resolution} s resolution")
    return lag


def _differences(profiles, lag):
    out = []
    for prof in profiles:
        prof = np.asarray(prof, dtype=float)
        if len(prof) < 2 * lag or lag == 0:
            raise ValueError("profile must cover at least two time-steps")
        out.append(prof[lag:] - prof[:-lag])
    return np.concatenate(out)


def fit_evolution_model(profile, dt: float, resolution: float = 6.0) -> LaplaceFit:
    """Zero-mean Laplace fit of the load change over ``dt`` seconds.

    ``profile`` is one series or a list of series (e.g. several days, never
    differenced across their boundaries). The scale is the maximum-likelihood
    estimate ``mean |x(t) - x(t - dt)|``.
    """
    profiles = [profile] if np.ndim(profile) == 1 else list(profile)
    diffs = _differences(profiles, _lag(dt, resolution))
    b = float(np.mean(np.abs(diffs)))
    if b == 0.0:
        warnings.warn("constant profile: Laplace scale is zero", RuntimeWarning, stacklevel=2)
        return LaplaceFit(0.0, degenerate=True)
    return LaplaceFit(b)


def forecast_from_profile(profile) -> float:
    profile = np.asarray(profile, dtype=float)
    if profile.size == 0:
        raise ValueError("empty profile")
    return float(profile.mean())


def error_autocorrelation(profile, dt: float, resolution: float = 6.0) -> float:
    """Autocorrelation at lag ``dt`` of the deviation from the profile mean.

    Uses the biased estimator ``sum e_t e_{t+k} / sum e_t^2``; several
    profiles are pooled by summing numerators and denominators.
    """
    lag = _lag(dt, resolution)
    profiles = [profile] if np.ndim(profile) == 1 else list(profile)
    num = den = 0.0
    for prof in profiles:
        e = np.asarray(prof, dtype=float)
        if len(e) <= lag:
            raise ValueError("profile must be longer than the lag")
        e = e - e.mean()
        num += float(e[lag:] @ e[: len(e) - lag])
        den += float(e @ e)
    if den == 0.0:
        raise ValueError("zero-variance profile has no autocorrelation")
    return float(np.clip(num / den, -1.0, 1.0))


@dataclass
class LoadEvolutionModel:
    """Per-bus Laplace scales (W / var) of the load change over one step."""

    b_p: np.ndarray
    b_q: np.ndarray

    def __post_init__(self):
        self.b_p = np.asarray(self.b_p, dtype=float)
        self.b_q = np.asarray(self.b_q, dtype=float)
        if self.b_p.shape != self.b_q.shape:
            raise ValueError("b_p and b_q must have the same length")
        if np.any(self.b_p < 0) or np.any(self.b_q < 0):
            raise ValueError("Laplace scales must be nonnegative")

    @property
    def var_p(self) -> np.ndarray:
        return 2.0 * self.b_p**2

    @property
    def var_q(self) -> np.ndarray:
        return 2.0 * self.b_q**2

    @property
    def scales(self) -> np.ndarray:
        return np.concatenate([self.b_p, self.b_q])

    @property
    def covariance_diag(self) -> np.ndarray:
        return np.concatenate([self.var_p, self.var_q])

    @property
    def apparent_std(self) -> np.ndarray:
        return np.sqrt(self.var_p + self.var_q)

    def sample(self, rng: np.random.Generator, members: int) -> np.ndarray:
        """``(2n, members)`` matrix of independent zero-mean Laplace draws."""
        b = self.scales[:, None]
        return rng.laplace(0.0, 1.0, (b.shape[0], members)) * b


@dataclass
class ForecastSet:
    """Constant per-bus forecasts (consumption, W / var) and error statistics."""

    p_f: np.ndarray
    q_f: np.ndarray
    sigma0: float = 0.30
    psi_p: np.ndarray | float = 0.0
    psi_q: np.ndarray | float = 0.0
    refresh_s: float = DAY

    def __post_init__(self):
        self.p_f = np.asarray(self.p_f, dtype=float)
        self.q_f = np.asarray(self.q_f, dtype=float)
        self.psi_p = np.broadcast_to(np.asarray(self.psi_p, dtype=float), self.p_f.shape).copy()
        self.psi_q = np.broadcast_to(np.asarray(self.psi_q, dtype=float), self.q_f.shape).copy()
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        if np.any(np.abs(self.psi_p) > 1) or np.any(np.abs(self.psi_q) > 1):
            raise ValueError("error autocorrelations must lie in [-1, 1]")

    @property
    def sigma_fp(self) -> np.ndarray:
        return self.sigma0 * np.abs(self.p_f)

    @property
    def sigma_fq(self) -> np.ndarray:
        return self.sigma0 * np.abs(self.q_f)

    @property
    def s_f(self) -> np.ndarray:
        return np.abs(self.p_f + 1j * self.q_f)

    @property
    def sigma_f(self) -> np.ndarray:
        return self.sigma0 * self.s_f

    @property
    def psi(self) -> np.ndarray:
        return np.concatenate([self.psi_p, self.psi_q])

    @property
    def error_variance(self) -> np.ndarray:
        return np.concatenate([self.sigma_fp, self.sigma_fq]) ** 2


def read_traces_csv(path) -> list[HouseholdTrace]:
    """Read ``timestamp_s,<house columns...>`` at a fixed resolution."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0].strip() != "timestamp_s" or len(header) < 2:
            raise ValueError(f"{path}: expected header 'timestamp_s,<house>...'")
        rows = [[float(v) for v in r] for r in reader if r]
    data = np.asarray(rows)
    if data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two samples")
    steps = np.diff(data[:, 0])
    if not np.allclose(steps, steps[0]):
        raise ValueError(f"{path}: samples are not uniformly spaced")
    return [HouseholdTrace(data[:, k], float(steps[0])) for k in range(1, data.shape[1])]


def write_traces_csv(path, traces: list[HouseholdTrace]) -> None:
    if not traces:
        raise ValueError("no traces to write")
    res = traces[0].resolution
    n = len(traces[0].samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s"] + [f"house_{k}" for k in range(len(traces))])
        for i in range(n):
            w.writerow([f"{i * res:g}"] + [f"{t.samples[i]:.3f}" for t in traces])


def save_fitted_model(path, model: LoadEvolutionModel, forecasts: ForecastSet) -> None:
    """Write per-bus ``{b_p, b_q, psi_p, psi_q, p_f, q_f}`` records as JSON."""
    buses = []
    for i in range(len(model.b_p)):
        buses.append({
            "bus": i + 1,
            "b_p": float(model.b_p[i]), "b_q": float(model.b_q[i]),
            "psi_p": float(forecasts.psi_p[i]), "psi_q": float(forecasts.psi_q[i]),
            "p_f": float(forecasts.p_f[i]), "q_f": float(forecasts.q_f[i]),
        })
    doc = {"sigma0": forecasts.sigma0, "refresh_s": forecasts.refresh_s, "buses": buses}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_fitted_model(path) -> tuple[LoadEvolutionModel, ForecastSet]:
    doc = json.loads(Path(path).read_text())
    buses = sorted(doc["buses"], key=lambda r: r["bus"])
    col = lambda k: np.array([r[k] for r in buses], dtype=float)
    model = LoadEvolutionModel(col("b_p"), col("b_q"))
    fc = ForecastSet(col("p_f"), col("q_f"), doc.get("sigma0", 0.30), col("psi_p"), col("psi_q"),
                     doc.get("refresh_s", DAY))
    return model, fc
