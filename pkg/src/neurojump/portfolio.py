"""Signals, constrained weight optimization, no-trade band and intensity gate.

The allocation problem is

    maximize   w'alpha - risk_aversion * w'Sigma w - cost * |w - w_prev|_1
    subject to sum(w) = 1, 0 <= w <= weight_cap, |w - w_prev|_1 <= turnover_max,
               optional group exposures e_g'w = target_g.

The l1 term is split as ``w - w_prev = up - down`` with ``up, down >= 0``,
which turns the problem into a smooth convex QP in ``(w, up, down, slack)``.
That QP is solved by a Mehrotra predictor-corrector interior-point method
followed by an active-set polish that lands exactly on the optimal face.
Cash is an implicit zero-return asset holding ``1 - sum(w)`` after gating.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .density import HorizonParams, moments
from .errors import ConfigError, DomainError, InfeasibleProblemError, NumericalError, ShapeError

GATE_MODES = ("hard", "scale", "off")
FEASIBILITY_TOL = 1e-8
ACTIVE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------


def signal_isj(params: HorizonParams) -> float:
    """Drift over the total (diffusion plus jump) volatility."""
    _, _, ez2, _ = moments(params)
    return params.mu / math.sqrt(params.sigma**2 + params.lam * ez2)


def signal_downside(params: HorizonParams, c: float) -> float:
    """Drift minus ``c`` times the expected downside jump loss per period."""
    if c < 0:
        raise DomainError(f"downside aversion must be nonnegative, got {c}")
    _, _, _, eneg = moments(params)
    return params.mu - c * params.lam * eneg


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PortfolioConfig:
    """Optimizer, band and gate settings.

    Parameters
    ----------
    risk_aversion : float
        Weight on the quadratic risk term, positive.
    cost : float
        Linear cost per unit of turnover.
    turnover_max : float
        Turnover budget per rebalance; ``inf`` disables it.
    weight_cap : float
        Per-asset upper bound in (0, 1].
    band : float
        No-trade band width.
    downside_aversion : float
        ``c`` in the downside-jump signal.
    gate_percentile : float
        Training-sample quantile of the intensity forecast used as the gate.
    gate_mode : str
        ``"hard"`` moves to cash, ``"scale"`` shrinks weights, ``"off"``.
    sector_groups : tuple of tuple of int
        Optional asset groups whose exposure is pinned.
    sector_targets : tuple of float
        Exposure per group; defaults to the group's share of an equal-weight book.
    """

    risk_aversion: float = 1.0
    cost: float = 0.0005
    turnover_max: float = 0.5
    weight_cap: float = 1.0
    band: float = 0.0
    downside_aversion: float = 1.0
    gate_percentile: float = 0.95
    gate_mode: str = "hard"
    sector_groups: tuple = ()
    sector_targets: tuple = ()

    def __post_init__(self):
        if not self.risk_aversion > 0:
            raise ConfigError("risk_aversion must be positive")
        if not self.cost >= 0:
            raise ConfigError("cost must be nonnegative")
        if not self.turnover_max > 0:
            raise ConfigError("turnover_max must be positive")
        if not 0 < self.weight_cap <= 1:
            raise ConfigError("weight_cap must lie in (0, 1]")
        if not self.band >= 0:
            raise ConfigError("band must be nonnegative")
        if not self.downside_aversion >= 0:
            raise ConfigError("downside_aversion must be nonnegative")
        if not 0 < self.gate_percentile < 1:
            raise ConfigError("gate_percentile must lie in (0, 1)")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}")
        if self.sector_targets and len(self.sector_targets) != len(self.sector_groups):
            raise ConfigError("sector_targets must match sector_groups")
        seen = set()
        for g in self.sector_groups:
            if not g or seen.intersection(g):
                raise ConfigError("sector groups must be nonempty and disjoint")
            seen.update(g)

    def group_targets(self, n):
        if self.sector_targets:
            return np.asarray(self.sector_targets, dtype=float)
        return np.array([len(g) / n for g in self.sector_groups])


@dataclass
class OptimizationResult:
    weights: np.ndarray
    objective: float
    turnover: float
    active: dict = field(default_factory=dict)
    iterations: int = 0
    kkt_residual: float = math.nan
    polished: bool = False


def objective_value(w, alpha, cov, prev, cfg: PortfolioConfig):
    w = np.asarray(w, dtype=float)
    return float(w @ alpha - cfg.risk_aversion * w @ cov @ w - cfg.cost * np.abs(w - prev).sum())


# ---------------------------------------------------------------------------
# Standard-form QP: min 1/2 x'Qx + c'x, Ax = b, 0 <= x <= upper
# ---------------------------------------------------------------------------


@dataclass
class _QP:
    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    upper: np.ndarray  # inf where unbounded
    n_assets: int
    has_slack: bool


def _build_qp(alpha, cov, prev, cfg):
    n = len(alpha)
    finite_budget = math.isfinite(cfg.turnover_max)
    m = 3 * n + (1 if finite_budget else 0)
    Q = np.zeros((m, m))
    Q[:n, :n] = 2.0 * cfg.risk_aversion * 0.5 * (cov + cov.T)
    c = np.zeros(m)
    c[:n] = -alpha
    c[n:3 * n] = cfg.cost
    rows, rhs = [], []
    budget = np.zeros(m)
    budget[:n] = 1.0
    rows.append(budget)
    rhs.append(1.0)
    eye = np.eye(n)
    link = np.zeros((n, m))
    link[:, :n] = eye
    link[:, n:2 * n] = -eye
    link[:, 2 * n:3 * n] = eye
    rows.extend(link)
    rhs.extend(prev)
    if finite_budget:
        tb = np.zeros(m)
        tb[n:] = 1.0
        rows.append(tb)
        rhs.append(cfg.turnover_max)
    for g, target in zip(cfg.sector_groups, cfg.group_targets(n)):
        row = np.zeros(m)
        row[list(g)] = 1.0
        rows.append(row)
        rhs.append(target)
    upper = np.full(m, np.inf)
    if cfg.weight_cap < 1.0:
        upper[:n] = cfg.weight_cap
    return _QP(Q, c, np.array(rows), np.array(rhs, dtype=float), upper, n, finite_budget)


def _solve_kkt(H, A, r1, r2):
    m, k = H.shape[0], A.shape[0]
    K = np.zeros((m + k, m + k))
    K[:m, :m] = H
    K[:m, m:] = A.T
    K[m:, :m] = A
    rhs = np.concatenate([r1, r2])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:m], -sol[m:]


def _max_step(x, dx):
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-x[neg] / dx[neg])))


def _interior_point(qp: _QP, tol=1e-12, max_iter=200):
    """Mehrotra predictor-corrector for the bounded standard-form QP.

    Returns ``(x, y, z, v, iterations)`` where ``z`` are the multipliers of
    ``x >= 0`` and ``v`` those of the finite upper bounds.
    """
    Q, c, A, b, upper = qp.Q, qp.c, qp.A, qp.b, qp.upper
    m = len(c)
    ub = np.isfinite(upper)
    x = np.full(m, 1.0 / qp.n_assets)
    x[ub] = np.minimum(x[ub], 0.5 * upper[ub])
    t = upper[ub] - x[ub]
    z = np.ones(m)
    v = np.ones(int(ub.sum()))
    y = np.zeros(len(b))
    n_comp = m + len(v)
    scale_c = 1.0 + np.max(np.abs(c))
    scale_b = 1.0 + np.max(np.abs(b))
    it = 0
    for it in range(1, max_iter + 1):
        vfull = np.zeros(m)
        vfull[ub] = v
        r_d = Q @ x + c - A.T @ y - z + vfull
        r_p = A @ x - b
        r_u = x[ub] + t - upper[ub]
        mu = (x @ z + t @ v) / n_comp
        err = max(
            np.max(np.abs(r_d)) / scale_c,
            np.max(np.abs(r_p)) / scale_b,
            np.max(np.abs(r_u), initial=0.0),
            mu,
        )
        if err <= tol:
            break
        diag = z / x
        diag_u = np.zeros(m)
        diag_u[ub] = v / t
        H = Q + np.diag(diag + diag_u)

        def direction(r_xz, r_tv):
            extra = np.zeros(m)
            extra[ub] = (-r_tv + v * r_u) / t
            rhs1 = -r_d - r_xz / x - extra
            dx, dy = _solve_kkt(H, A, rhs1, -r_p)
            dz = (-r_xz - z * dx) / x
            dt = -r_u - dx[ub]
            dv = (-r_tv - v * dt) / t
            return dx, dy, dz, dt, dv

        aff = direction(x * z, t * v)
        dx, dy, dz, dt, dv = aff
        a_aff = min(_max_step(x, dx), _max_step(t, dt), _max_step(z, dz), _max_step(v, dv))
        mu_aff = ((x + a_aff * dx) @ (z + a_aff * dz) + (t + a_aff * dt) @ (v + a_aff * dv)) / n_comp
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, dt, dv = direction(x * z + dx * dz - sigma * mu, t * v + dt * dv - sigma * mu)
        step = min(_max_step(x, dx), _max_step(t, dt), _max_step(z, dz), _max_step(v, dv))
        step = min(1.0, 0.995 * step)
        x = x + step * dx
        y = y + step * dy
        z = z + step * dz
        t = t + step * dt
        v = v + step * dv
        # keep strictly interior against round-off
        x = np.maximum(x, 1e-300)
        z = np.maximum(z, 1e-300)
        t = np.maximum(t, 1e-300)
        v = np.maximum(v, 1e-300)
    vfull = np.zeros(m)
    vfull[ub] = v
    return x, y, z, vfull, it


def _kkt_residual(qp: _QP, x, y, z, v):
    """Max-norm of stationarity, feasibility, sign and complementarity violations."""
    ub = np.isfinite(qp.upper)
    stat = qp.Q @ x + qp.c - qp.A.T @ y - z + v
    gap_u = np.where(ub, qp.upper - x, 0.0)
    parts = [
        np.max(np.abs(stat)),
        np.max(np.abs(qp.A @ x - qp.b)),
        max(0.0, -np.min(x)),
        max(0.0, -np.min(gap_u)),
        max(0.0, -np.min(z)),
        max(0.0, -np.min(v)),
        np.max(np.abs(x * z)),
        np.max(np.abs(np.where(ub, gap_u * v, 0.0))),
    ]
    return float(max(parts))


def _canonical_split(qp: _QP, x, prev):
    """Replace (up, down) by the minimal split of ``w - prev``; slack absorbs the saving."""
    n = qp.n_assets
    x = x.copy()
    d = x[:n] - prev
    x[n:2 * n] = np.maximum(d, 0.0)
    x[2 * n:3 * n] = np.maximum(-d, 0.0)
    if qp.has_slack:
        x[3 * n] = qp.b[1 + n] - x[n:3 * n].sum()
    return x


def _polish(qp: _QP, x, y_ip, z, v):
    """Fix near-active bounds exactly and re-solve the equality-constrained QP.

    Returns ``(x, y, z, v)`` or ``None`` when the guessed active set is wrong.
    When fixing bounds leaves redundant equality rows the multipliers are not
    unique; the interior-point multipliers are then kept if the least-squares
    ones are not dual feasible.
    """
    z_ip, v_ip = z, v
    ub = np.isfinite(qp.upper)
    # a bound is taken as active when its multiplier dominates the gap
    at_lower = (x <= ACTIVE_TOL) | (x < z)
    at_upper = ub & ((qp.upper - x <= ACTIVE_TOL) | (qp.upper - x < v)) & ~at_lower
    fixed = at_lower | at_upper
    free = ~fixed
    x_fixed = np.where(at_upper, qp.upper, 0.0)
    A_free = qp.A[:, free]
    rhs2 = qp.b - qp.A[:, fixed] @ x_fixed[fixed]
    H = qp.Q[np.ix_(free, free)]
    rhs1 = -(qp.c[free] + qp.Q[np.ix_(free, fixed)] @ x_fixed[fixed])
    x_free, y = _solve_kkt(H, A_free, rhs1, rhs2)
    out = x_fixed.copy()
    out[free] = x_free
    grad = qp.Q @ out + qp.c - qp.A.T @ y
    z = np.where(at_lower, grad, 0.0)
    v = np.where(at_upper, -grad, 0.0)
    primal_ok = (
        np.all(out[free] > -FEASIBILITY_TOL)
        and np.all(np.where(ub & free, qp.upper - out, 0.0) > -FEASIBILITY_TOL)
        and np.max(np.abs(qp.A @ out - qp.b)) <= FEASIBILITY_TOL
    )
    if not primal_ok:
        return None
    out[free] = np.clip(out[free], 0.0, qp.upper[free])
    if np.all(z >= -FEASIBILITY_TOL) and np.all(v >= -FEASIBILITY_TOL):
        return out, y, np.maximum(z, 0.0), np.maximum(v, 0.0)
    if np.linalg.matrix_rank(A_free) < A_free.shape[0]:
        return out, y_ip, z_ip, v_ip
    return None


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------


def _check_feasible(prev, cfg: PortfolioConfig):
    """Name the binding constraint when the feasible set is empty."""
    n = len(prev)
    if cfg.weight_cap * n < 1.0 - 1e-12:
        raise InfeasibleProblemError(
            f"weight_cap {cfg.weight_cap} times {n} assets is below the full-investment budget",
            constraint="weight_cap",
        )
    # minimum turnover needed to reach {budget, bounds, groups}: LP over (w, up, down)
    cost = np.concatenate([np.zeros(n), np.ones(2 * n)])
    eye = np.eye(n)
    A_eq = [np.concatenate([np.ones(n), np.zeros(2 * n)])]
    b_eq = [1.0]
    A_eq.extend(np.hstack([eye, -eye, eye]))
    b_eq.extend(prev)
    for g, target in zip(cfg.sector_groups, cfg.group_targets(n)):
        row = np.zeros(3 * n)
        row[list(g)] = 1.0
        A_eq.append(row)
        b_eq.append(target)
    bounds = [(0.0, cfg.weight_cap)] * n + [(0.0, None)] * (2 * n)
    res = linprog(cost, A_eq=np.array(A_eq), b_eq=np.array(b_eq), bounds=bounds, method="highs")
    if res.status == 2:
        name = "sector" if cfg.sector_groups else "budget"
        raise InfeasibleProblemError(f"{name} constraints cannot be met with 0 <= w <= weight_cap", constraint=name)
    if res.status != 0:
        raise InfeasibleProblemError(f"feasibility phase failed: {res.message}", constraint="unknown")
    if res.fun > cfg.turnover_max + FEASIBILITY_TOL:
        raise InfeasibleProblemError(
            f"reaching a feasible portfolio needs turnover {res.fun:.6g} > turnover_max {cfg.turnover_max:.6g}",
            constraint="turnover_max",
        )


# ---------------------------------------------------------------------------
# Public solver
# ---------------------------------------------------------------------------


def optimize(alpha, cov, prev, cfg: PortfolioConfig, tol=1e-8) -> OptimizationResult:
    """Solve the cost-aware allocation problem.

    Parameters
    ----------
    alpha : array_like, shape (n,)
        Expected-return signal per asset.
    cov : array_like, shape (n, n)
        Symmetric positive semidefinite risk matrix.
    prev : array_like, shape (n,)
        Previous weights.
    cfg : PortfolioConfig
    tol : float
        Required KKT residual of the split QP.

    Returns
    -------
    OptimizationResult

    Raises
    ------
    InfeasibleProblemError
        If no portfolio satisfies every constraint; ``constraint`` names the binding one.
    NumericalError
        If neither the interior-point iterate nor its polish meets ``tol``.
    """
    alpha = np.asarray(alpha, dtype=float)
    cov = np.asarray(cov, dtype=float)
    prev = np.asarray(prev, dtype=float)
    n = alpha.shape[0]
    if alpha.ndim != 1 or cov.shape != (n, n) or prev.shape != (n,):
        raise ShapeError(f"dimension mismatch: alpha {alpha.shape}, cov {cov.shape}, prev {prev.shape}")
    if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(cov)) and np.all(np.isfinite(prev))):
        raise DomainError("optimizer inputs must be finite")
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * (1.0 + np.max(np.abs(cov))):
        raise DomainError("covariance must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) < -1e-10 * (1.0 + np.max(np.abs(cov))):
        raise DomainError("covariance must be positive semidefinite")
    for g in cfg.sector_groups:
        if max(g) >= n or min(g) < 0:
            raise ShapeError(f"sector group {g} refers to assets outside 0..{n - 1}")
    _check_feasible(prev, cfg)

    qp = _build_qp(alpha, cov, prev, cfg)
    # solve a rescaled copy so large costs do not swamp the unit starting duals
    scale = max(1.0, float(np.max(np.abs(qp.Q))), float(np.max(np.abs(qp.c))))
    scaled = dataclasses.replace(qp, Q=qp.Q / scale, c=qp.c / scale)
    x, y, z, v, iters = _interior_point(scaled)
    y, z, v = y * scale, z * scale, v * scale
    x = _canonical_split(qp, x, prev)
    best = (x, y, z, v)
    residual = _kkt_residual(qp, *best)
    candidate = _polish(qp, x, y, z, v)
    polished = False
    if candidate is not None:
        r = _kkt_residual(qp, *candidate)
        if r <= max(residual, tol):
            best, residual, polished = candidate, r, True
    if not residual <= tol:
        raise NumericalError(f"optimizer stopped with KKT residual {residual:.3g} > {tol:.3g}")
    x = best[0]
    w = x[:n].copy()
    if polished:
        # assets pinned at the kink hold their previous weight exactly
        kink = (x[n:2 * n] == 0.0) & (x[2 * n:3 * n] == 0.0)
        w[kink] = prev[kink]
    turnover = float(np.abs(w - prev).sum())
    active = {
        "budget": True,
        "long_only": w <= ACTIVE_TOL,
        "weight_cap": w >= cfg.weight_cap - ACTIVE_TOL,
        "turnover": bool(turnover >= cfg.turnover_max - ACTIVE_TOL),
        "sector": bool(cfg.sector_groups),
    }
    return OptimizationResult(
        weights=w,
        objective=objective_value(w, alpha, cov, prev, cfg),
        turnover=turnover,
        active=active,
        iterations=iters,
        kkt_residual=residual,
        polished=polished,
    )


# ---------------------------------------------------------------------------
# Post-processing rules
# ---------------------------------------------------------------------------


def no_trade_band(w_new, prev, band):
    """Keep ``prev`` when every weight moves by less than ``band``."""
    w_new = np.asarray(w_new, dtype=float)
    prev = np.asarray(prev, dtype=float)
    if w_new.shape != prev.shape:
        raise ShapeError(f"weight shapes differ: {w_new.shape} vs {prev.shape}")
    if band > 0 and np.max(np.abs(w_new - prev), initial=0.0) < band:
        return prev.copy()
    return w_new.copy()


def intensity_gate(w, lam_forecast, threshold, mode="hard"):
    """Cut exposure when the forecast jump intensity exceeds ``threshold``."""
    w = np.asarray(w, dtype=float)
    if mode not in GATE_MODES:
        raise ConfigError(f"gate mode must be one of {GATE_MODES}")
    if mode == "off" or not lam_forecast > threshold:
        return w.copy()
    if mode == "hard":
        return np.zeros_like(w)
    return w * min(max(threshold / lam_forecast, 0.0), 1.0)


def gate_threshold(lam_train, percentile):
    """Empirical quantile of in-sample intensity forecasts."""
    lam_train = np.asarray(lam_train, dtype=float)
    if lam_train.size == 0:
        raise DomainError("gate threshold needs at least one training intensity")
    return float(np.quantile(lam_train, percentile))


def diagonal_risk(variances):
    """Diagonal risk matrix from per-asset variance forecasts."""
    return np.diag(np.asarray(variances, dtype=float))


# ---------------------------------------------------------------------------
# Walk-forward strategy
# ---------------------------------------------------------------------------


@dataclass
class StrategyRun:
    weights: np.ndarray  # (T, n) post band and gate
    returns: np.ndarray  # (T,) net of linear costs
    equity: np.ndarray  # (T,)
    turnover: np.ndarray  # (T,)
    gated: np.ndarray  # (T,) bool
    held: np.ndarray  # (T,) bool, band kept previous weights


def run_strategy(alphas, variances, lam_forecasts, realized, cfg: PortfolioConfig, threshold, start=None):
    """Rebalance at every row and book simple returns net of costs.

    Parameters
    ----------
    alphas, variances, lam_forecasts : ndarray, shape (T, n)
        Signals, variance forecasts and intensity forecasts per date and asset.
    realized : ndarray, shape (T, n)
        Realized simple returns over the following holding period.
    threshold : float
        Gate threshold applied to the cross-sectional mean intensity.
    start : ndarray, optional
        Initial weights; equal weight by default.
    """
    alphas = np.atleast_2d(np.asarray(alphas, dtype=float))
    T, n = alphas.shape
    variances = np.asarray(variances, dtype=float).reshape(T, n)
    lam_forecasts = np.asarray(lam_forecasts, dtype=float).reshape(T, n)
    realized = np.asarray(realized, dtype=float).reshape(T, n)
    prev = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=float)
    W = np.zeros((T, n))
    rets = np.zeros(T)
    turn = np.zeros(T)
    gated = np.zeros(T, dtype=bool)
    held = np.zeros(T, dtype=bool)
    for t in range(T):
        # the optimizer sees the invested book rescaled to full investment
        invested = prev.sum()
        base = prev / invested if invested > 0 else np.full(n, 1.0 / n)
        res = optimize(alphas[t], diagonal_risk(variances[t]), base, cfg)
        w = no_trade_band(res.weights, base, cfg.band)
        held[t] = np.array_equal(w, base) and not np.array_equal(res.weights, base)
        lam_t = float(np.mean(lam_forecasts[t]))
        w_g = intensity_gate(w, lam_t, threshold, cfg.gate_mode)
        gated[t] = not np.array_equal(w_g, w)
        turn[t] = float(np.abs(w_g - prev).sum())
        rets[t] = float(w_g @ realized[t]) - cfg.cost * turn[t]
        W[t] = w_g
        prev = w_g
    return StrategyRun(W, rets, np.cumprod(1.0 + rets), turn, gated, held)
