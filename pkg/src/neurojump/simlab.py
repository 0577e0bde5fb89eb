"""Synthetic price paths from a known state-dependent jump-diffusion.

A scalar AR(1) state ``s_t`` drives annualized drift, volatility and jump
intensity maps.  Each day is split into ``intraday_steps`` Euler steps; each
step carries at most one jump, drawn with probability
``intensity(s_t) * dt / intraday_steps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .density import HorizonParams, JumpLaw, draw_jumps, sample_with
from .errors import ConfigError


@dataclass(frozen=True)
class StateDynamics:
    """AR(1) law ``s_t = mean + persistence (s_{t-1} - mean) + noise * e_t``."""

    mean: float = 0.0
    persistence: float = 0.9
    noise: float = 0.3

    def __post_init__(self):
        if not -1.0 < self.persistence < 1.0:
            raise ConfigError("state persistence must lie in (-1, 1)")
        if self.noise < 0:
            raise ConfigError("state noise must be nonnegative")


@dataclass(frozen=True)
class GroundTruthMaps:
    """Annualized drift, volatility and intensity as functions of the state."""

    drift_map: Callable[[float], float]
    vol_map: Callable[[float], float]
    intensity_map: Callable[[float], float]
    jump_law: JumpLaw
    state_dynamics: StateDynamics = field(default_factory=StateDynamics)


def constant_maps(drift, vol, intensity, jump_law, dynamics=None):
    return GroundTruthMaps(
        lambda s: drift,
        lambda s: vol,
        lambda s: intensity,
        jump_law,
        dynamics or StateDynamics(0.0, 0.0, 0.0),
    )


def logistic_maps(jump_law, drift=0.05, vol_base=0.16, vol_slope=0.05, lam_low=12.6, lam_high=100.8,
                  dynamics=None):
    """Default regime-switching maps: intensity moves smoothly between two levels.

    Intensities are annual expected jump counts, so ``lam_low = 0.05 * 252``
    gives 0.05 expected jumps per day.
    """

    def intensity(s):
        return lam_low + (lam_high - lam_low) / (1.0 + math.exp(-2.0 * s))

    return GroundTruthMaps(
        lambda s: drift,
        lambda s: vol_base * math.exp(vol_slope * s),
        intensity,
        jump_law,
        dynamics or StateDynamics(0.0, 0.95, 0.3),
    )


@dataclass(frozen=True)
class SimConfig:
    n_days: int
    truth: GroundTruthMaps
    seed: int = 0
    intraday_steps: int = 78
    dt: float = 1.0 / 252.0

    def __post_init__(self):
        if self.n_days < 2:
            raise ConfigError("n_days must be >= 2")
        if self.intraday_steps < 2:
            raise ConfigError("intraday_steps must be >= 2")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")


@dataclass
class SimPath:
    log_prices: np.ndarray  # length n_days + 1, starting at 0
    daily_returns: np.ndarray
    intraday_returns: np.ndarray  # (n_days, steps)
    jump_times: np.ndarray  # flat intraday index day * steps + step
    jump_sizes: np.ndarray
    state_series: np.ndarray
    continuous_returns: np.ndarray  # per-day diffusion part
    drift: np.ndarray  # annualized maps evaluated on the state
    vol: np.ndarray
    intensity: np.ndarray

    @property
    def n_days(self):
        return self.daily_returns.shape[0]

    @property
    def steps(self):
        return self.intraday_returns.shape[1]

    def jump_days(self):
        return self.jump_times // self.steps

    def jump_sum(self):
        return np.bincount(self.jump_days(), weights=self.jump_sizes, minlength=self.n_days)

    def jump_flag(self):
        return np.bincount(self.jump_days(), minlength=self.n_days) > 0


def simulate_path(cfg: SimConfig) -> SimPath:
    """Simulate ``cfg.n_days`` days; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    n, m, dt = cfg.n_days, cfg.intraday_steps, cfg.dt
    sub = dt / m
    dyn = cfg.truth.state_dynamics
    state = np.empty(n)
    s = dyn.mean
    drift = np.empty(n)
    vol = np.empty(n)
    lam = np.empty(n)
    for t in range(n):
        s = dyn.mean + dyn.persistence * (s - dyn.mean) + dyn.noise * rng.standard_normal()
        state[t] = s
        drift[t] = cfg.truth.drift_map(s)
        vol[t] = cfg.truth.vol_map(s)
        lam[t] = cfg.truth.intensity_map(s)
    if np.any(vol < 0) or not np.all(np.isfinite(vol)):
        raise ConfigError("vol_map produced a negative or non-finite value")
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ConfigError("intensity_map produced a negative or non-finite value")
    prob = lam * sub
    if np.any(prob > 1.0):
        raise ConfigError("intensity too large for one jump per intraday step")

    eps = rng.standard_normal((n, m))
    continuous = (drift * sub)[:, None] + (vol * math.sqrt(sub))[:, None] * eps
    hits = rng.random((n, m)) < prob[:, None]
    jump_times = np.flatnonzero(hits.ravel())
    jump_sizes = draw_jumps(rng, cfg.truth.jump_law, jump_times.size) if jump_times.size else np.zeros(0)
    intraday = continuous.copy()
    intraday.ravel()[jump_times] += jump_sizes
    daily = intraday.sum(axis=1)
    log_prices = np.concatenate([[0.0], np.cumsum(daily)])
    return SimPath(
        log_prices=log_prices,
        daily_returns=daily,
        intraday_returns=intraday,
        jump_times=jump_times,
        jump_sizes=jump_sizes,
        state_series=state,
        continuous_returns=continuous.sum(axis=1),
        drift=drift,
        vol=vol,
        intensity=lam,
    )


class EmpiricalDistribution:
    """Sorted Monte-Carlo draws with an empirical cdf."""

    def __init__(self, samples):
        self.samples = np.sort(np.asarray(samples, dtype=float))

    def __len__(self):
        return self.samples.size

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.searchsorted(self.samples, x, side="right") / self.samples.size
        return float(out) if out.ndim == 0 else out

    def mean(self):
        return float(self.samples.mean())

    def var(self):
        return float(self.samples.var(ddof=1))

    def dkw_band(self, alpha=0.01):
        """Half-width of the Dvoretzky-Kiefer-Wolfowitz band at level ``1 - alpha``."""
        return math.sqrt(math.log(2.0 / alpha) / (2.0 * self.samples.size))


def mc_density_oracle(law: HorizonParams, n_samples: int, seed) -> EmpiricalDistribution:
    """Exact draws of ``mu + sigma eps + sum of Poisson(lam) jumps``."""
    if n_samples < 100_000:
        raise ConfigError("the Monte-Carlo oracle needs at least 1e5 samples")
    return EmpiricalDistribution(sample_with(np.random.default_rng(seed), law, n_samples))


def write_csv(path: SimPath, daily_file, intraday_file):
    """Write the daily and intraday CSV files of a simulated path."""
    daily = np.column_stack(
        [
            np.arange(path.n_days),
            path.log_prices[1:],
            path.daily_returns,
            path.state_series,
            path.jump_flag().astype(int),
            path.jump_sum(),
        ]
    )
    np.savetxt(
        daily_file,
        daily,
        delimiter=",",
        header="date_index,log_price,daily_return,state,jump_flag,jump_sum",
        comments="",
        fmt=["%d", "%.17g", "%.17g", "%.17g", "%d", "%.17g"],
    )
    days, steps = np.indices(path.intraday_returns.shape)
    intraday = np.column_stack([days.ravel(), steps.ravel(), path.intraday_returns.ravel()])
    np.savetxt(
        intraday_file,
        intraday,
        delimiter=",",
        header="day,step,return",
        comments="",
        fmt=["%d", "%d", "%.17g"],
    )
