"""Risk-neutral re-centering of horizon laws and static option-grid checks.

Two measure changes are offered.  The drift shift moves only ``mu`` so that

    mu_Q = R - sigma^2 / 2 - lam (M_Z(1) - 1),

and the Esscher tilt reweights the whole increment law by ``e^{alpha y}``
with ``alpha`` chosen so that ``psi(1 + alpha) - psi(alpha) = R``, where
``psi`` is the log mgf of the untruncated increment.  Both use the exact
compound mgf, so they do not depend on the density truncation level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .density import DEFAULT_CONFIG, DensityConfig, HorizonParams, cdf, log_truncated_mass
from .errors import DomainError, GridError, NumericalError, StripError, TiltInfeasibleError

DRIFT_SHIFT = "drift-shift"
ESSCHER = "esscher"
STRIP_FRACTION = 0.95


@dataclass(frozen=True)
class RatesInput:
    """Accumulated short rate over a horizon, optionally net of a dividend yield."""

    rate: float
    dividend: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.rate) and math.isfinite(self.dividend)):
            raise DomainError("rates must be finite")

    @property
    def carry(self):
        return self.rate - self.dividend


@dataclass(frozen=True)
class TiltResult:
    mode: str
    q_params: HorizonParams
    esscher_alpha: float
    martingale_residual: float


def _carry(R):
    return R.carry if isinstance(R, RatesInput) else float(R)


def _jump_mgf_at_one(jump):
    try:
        return float(jump.mgf(1.0))
    except StripError as exc:
        raise StripError(f"{exc}; M_Z(1) is infinite, use the Esscher tilt instead", bound=exc.bound) from None


def _log_mgf_at_one(params: HorizonParams):
    m1 = _jump_mgf_at_one(params.jump) if params.lam > 0 else 1.0
    return params.mu + 0.5 * params.sigma**2 + params.lam * (m1 - 1.0)


def martingale_residual(q: HorizonParams, R) -> float:
    """``log E_Q[e^{dY}] - R`` computed from the closed-form mgf."""
    return _log_mgf_at_one(q) - _carry(R)


def drift_shift(p: HorizonParams, R) -> TiltResult:
    """Minimal measure change: replace the drift, keep every other parameter."""
    R = _carry(R)
    m1 = _jump_mgf_at_one(p.jump) if p.lam > 0 else 1.0
    q = p.replace(mu=R - 0.5 * p.sigma**2 - p.lam * (m1 - 1.0))
    return TiltResult(DRIFT_SHIFT, q, 0.0, martingale_residual(q, R))


def _log_jump_mgf(jump, u):
    if jump.family == "gmm":
        a = math.log(jump.p) + jump.mu1 * u + 0.5 * (jump.tau1 * u) ** 2 if jump.p > 0 else -math.inf
        b = math.log1p(-jump.p) + jump.mu2 * u + 0.5 * (jump.tau2 * u) ** 2 if jump.p < 1 else -math.inf
        return float(np.logaddexp(a, b))
    return math.log(float(jump.mgf(u)))


def _alpha_domain(jump):
    lo, hi = jump.strip
    return lo, hi - 1.0


def _limit(start, bound):
    return bound if not math.isfinite(bound) else start + STRIP_FRACTION * (bound - start)


def _bracket(g, lo, hi):
    """Expand geometrically from the start point until ``g`` changes sign."""
    start = 0.0 if lo < 0.0 < hi else (0.5 * (lo + hi) if math.isfinite(lo + hi) else None)
    if start is None:
        start = hi - 1.0 if math.isfinite(hi) else lo + 1.0
    g0 = g(start)
    if g0 == 0.0:
        return start, start
    direction = -1.0 if g0 > 0 else 1.0
    cap = _limit(start, lo if direction < 0 else hi)
    cap = cap if math.isfinite(cap) else direction * 1e8
    step = 1e-3
    prev = start
    while True:
        x = start + direction * step
        if direction * (x - cap) >= 0:
            x = cap
        gx = g(x)
        if math.isfinite(gx) and (gx > 0) != (g0 > 0):
            return (prev, x) if prev < x else (x, prev)
        if x == cap:
            raise TiltInfeasibleError(
                f"no sign change of the martingale condition in alpha up to {cap:.6g} (strip {lo:.6g}, {hi:.6g})"
            )
        prev = x
        step *= 2.0


def esscher_tilt(p: HorizonParams, R, tol: float = 1e-10) -> TiltResult:
    """Esscher-tilt the whole law so that the discounted price is a martingale."""
    R = _carry(R)
    lo, hi = _alpha_domain(p.jump) if p.lam > 0 else (-math.inf, math.inf)
    if not lo < hi:
        raise TiltInfeasibleError(f"empty admissible strip for alpha: ({lo}, {hi})")

    def g(a):
        jump = 0.0
        if p.lam > 0:
            l1, l0 = _log_jump_mgf(p.jump, 1.0 + a), _log_jump_mgf(p.jump, a)
            top = max(l1, l0)
            with np.errstate(over="ignore"):
                jump = p.lam * math.copysign(float(np.exp(top)), l1 - l0) * -math.expm1(-abs(l1 - l0))
        return p.mu + p.sigma**2 * (a + 0.5) + jump - R

    a_lo, a_hi = _bracket(g, lo, hi)
    if a_lo == a_hi:
        alpha = a_lo
    else:
        alpha = brentq(g, a_lo, a_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if alpha == 0.0 or abs(g(0.0)) <= 1e-15:
        alpha, q = 0.0, p
    elif p.lam == 0:
        q = p.replace(mu=p.mu + p.sigma**2 * alpha)
    else:
        lam_q = p.lam * float(p.jump.mgf(alpha))
        if not math.isfinite(lam_q):
            raise TiltInfeasibleError(f"tilted intensity overflows at alpha={alpha:.6g}")
        q = p.replace(mu=p.mu + p.sigma**2 * alpha, lam=lam_q, jump=p.jump.tilt(alpha))
    res = martingale_residual(q, R)
    if not abs(res) <= tol:
        raise NumericalError(f"Esscher residual {res:.3g} exceeds tolerance {tol:.3g}")
    return TiltResult(ESSCHER, q, float(alpha), res)


def risk_neutralize(p: HorizonParams, R, mode=DRIFT_SHIFT, tol=1e-10) -> TiltResult:
    if mode == DRIFT_SHIFT:
        res = drift_shift(p, R)
        if not abs(res.martingale_residual) <= tol:
            raise NumericalError(f"drift-shift residual {res.martingale_residual:.3g} exceeds {tol:.3g}")
        return res
    if mode == ESSCHER:
        return esscher_tilt(p, R, tol)
    raise DomainError(f"unknown risk-neutralization mode {mode!r}")


def rn_chain_factor(p: HorizonParams, R, y):
    """One-step density ratio ``e^{-R} e^{y} / E_P[e^{-R} e^{dY}]``; positive with unit mean."""
    R = _carry(R)
    log_norm = -R + _log_mgf_at_one(p)
    return np.exp(-R + np.asarray(y, dtype=float) - log_norm)


# ---------------------------------------------------------------------------
# Call grids and static arbitrage checks
# ---------------------------------------------------------------------------


def call_prices(q: HorizonParams, strikes, R, spot=1.0, cfg: DensityConfig = DEFAULT_CONFIG):
    """Discounted calls ``e^{-R} E[(S e^{dY} - K)^+]`` under the truncated law of ``cfg``.

    The stock leg uses the identity ``E[e^Y 1{Y > k}] = E[e^Y] P_1(Y > k)``
    where ``P_1`` is the same truncated law tilted by ``e^y``.
    """
    R = _carry(R)
    strikes = np.asarray(strikes, dtype=float)
    if np.any(strikes <= 0) or spot <= 0:
        raise DomainError("spot and strikes must be positive")
    k = np.log(strikes / spot)
    m1 = _jump_mgf_at_one(q.jump)
    log_mass = float(log_truncated_mass(q.lam, cfg.k_max)[0])
    log_mass_tilted = float(log_truncated_mass(q.lam * m1, cfg.k_max)[0])
    # E[e^Y] of the truncated law, renormalized or not
    log_ey = q.mu + 0.5 * q.sigma**2 + q.lam * (m1 - 1.0) + log_mass_tilted
    if cfg.renormalize:
        log_ey -= log_mass
    tilted = q.replace(mu=q.mu + q.sigma**2, lam=q.lam * m1, jump=q.jump.tilt(1.0))
    renorm_tilted = DensityConfig(cfg.k_max, cfg.quad_points, cfg.quantile_tol, True)
    stock = math.exp(log_ey) * (1.0 - np.atleast_1d(cdf(tilted, renorm_tilted, k)))
    cash = 1.0 - np.atleast_1d(cdf(q, cfg, k))
    return math.exp(-R) * np.maximum(spot * stock - strikes * cash, 0.0)


@dataclass(frozen=True)
class Violation:
    kind: str  # slope | butterfly | density | calendar
    maturity: int
    strike: int
    magnitude: float


@dataclass
class NoArbReport:
    violations: list = field(default_factory=list)
    notices: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def cells(self, kind):
        return [(v.maturity, v.strike) for v in self.violations if v.kind == kind]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "maturity_index", "strike_index", "magnitude"])
            for v in self.violations:
                w.writerow([v.kind, v.maturity, v.strike, repr(v.magnitude)])


def static_noarb_check(call_grid, strikes, discounts=None, tol=1e-8) -> NoArbReport:
    """Finite-difference slope, butterfly, implied-density and calendar checks.

    ``call_grid`` has one row per maturity (increasing) and one column per
    strike.  ``strikes`` is either shared (1-D) or given per maturity (2-D).
    Cells are indexed by ``(maturity, strike)``; a butterfly cell is the
    middle strike of its three-point stencil.
    """
    C = np.atleast_2d(np.asarray(call_grid, dtype=float))
    n_t, n_k = C.shape
    K = np.asarray(strikes, dtype=float)
    K = np.broadcast_to(K, C.shape) if K.ndim == 1 else K
    if K.shape != C.shape:
        raise GridError(f"strike array {K.shape} does not match price grid {C.shape}")
    if n_k < 3:
        raise GridError("at least 3 strikes per maturity are required")
    if not np.all(np.isfinite(C)):
        raise GridError("non-finite call prices")
    if np.any(np.diff(K, axis=1) <= 0):
        raise GridError("strikes must be strictly increasing within each maturity")
    d = np.ones(n_t) if discounts is None else np.asarray(discounts, dtype=float)
    if d.shape != (n_t,) or np.any(d <= 0):
        raise GridError("one positive discount factor per maturity is required")

    report = NoArbReport()
    for i in range(n_t):
        dk = np.diff(K[i])
        slope = np.diff(C[i]) / dk
        for j in np.flatnonzero(slope > tol):
            report.violations.append(Violation("slope", i, int(j), float(slope[j])))
        for j in np.flatnonzero(slope < -d[i] - tol):
            report.violations.append(Violation("slope", i, int(j), float(-d[i] - slope[j])))
        # weighted second difference: nonuniform three-point convexity stencil
        w_left = dk[1:] / (dk[:-1] + dk[1:])
        second = w_left * C[i, :-2] + (1.0 - w_left) * C[i, 2:] - C[i, 1:-1]
        for j in np.flatnonzero(second < -tol):
            report.violations.append(Violation("butterfly", i, int(j + 1), float(-second[j])))
        density = 2.0 * np.diff(slope) / (dk[:-1] + dk[1:]) / d[i]
        for j in np.flatnonzero(density < -tol):
            report.violations.append(Violation("density", i, int(j + 1), float(-density[j])))
    if n_t < 2:
        report.notices.append("single maturity: calendar check skipped")
    else:
        for i in range(n_t - 1):
            common, a, b = np.intersect1d(K[i], K[i + 1], return_indices=True)
            if common.size == 0:
                report.notices.append(f"maturities {i} and {i + 1} share no strikes: calendar check skipped")
                continue
            gap = C[i + 1, b] - C[i, a]
            for j, g in zip(b, gap):
                if g < -tol:
                    report.violations.append(Violation("calendar", i + 1, int(j), float(-g)))
    return report
