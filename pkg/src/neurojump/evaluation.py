"""Forecast scoring and risk backtests.

Tail convention: a VaR "at level 95%" is the 5% lower-tail quantile of the
return law, and ES at that level is the mean return below it.  Breaches are
realized returns strictly below the VaR.  Log scores are mean
log-likelihoods, so higher is better.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtri

from .density import (
    DEFAULT_CONFIG,
    DensityConfig,
    HorizonParams,
    ParamBatch,
    cdf_batch,
    crps,
    log_density_batch,
    partial_expectation_batch,
    quantile_batch,
    sample_truncated,
)
from .errors import DegenerateComparisonError, DomainError, InsufficientDataError

PIT_CLAMP = 1e-10


@dataclass(frozen=True)
class ForecastRecord:
    t: int
    horizon: str
    params: HorizonParams
    realized: float

    def __post_init__(self):
        if not math.isfinite(self.realized):
            raise DomainError(f"realized value at t={self.t} is not finite")


def _groups(records):
    """Index groups of records sharing a jump family, with their batches."""
    by_family = {}
    for i, r in enumerate(records):
        by_family.setdefault(r.params.family, []).append(i)
    for idx in by_family.values():
        yield np.array(idx), ParamBatch.from_params([records[i].params for i in idx])


def _realized(records):
    return np.array([r.realized for r in records], dtype=float)


def _per_record(records, fn):
    out = np.empty(len(records))
    y = _realized(records)
    for idx, batch in _groups(records):
        out[idx] = fn(batch, y[idx])
    return out


# ---------------------------------------------------------------------------
# Scores and calibration
# ---------------------------------------------------------------------------


def log_scores(records, cfg: DensityConfig = DEFAULT_CONFIG):
    return _per_record(records, lambda b, y: log_density_batch(b, y, cfg)[0])


def crps_scores(records, cfg: DensityConfig = DEFAULT_CONFIG, method="auto"):
    return np.array([crps(r.params, cfg, r.realized, method) for r in records])


def pit(records, cfg: DensityConfig = DEFAULT_CONFIG):
    """``u_t = F_t(realized_t)`` under each record's (renormalized) truncated law."""
    return _per_record(records, lambda b, y: cdf_batch(b, y, cfg))


def autocorrelations(x, max_lag=20):
    x = np.asarray(x, dtype=float) - np.mean(x)
    denom = float(np.dot(x, x))
    if denom == 0:
        return np.zeros(max_lag)
    return np.array([np.dot(x[:-k], x[k:]) / denom for k in range(1, max_lag + 1)])


def ks_uniform(u):
    """Kolmogorov-Smirnov statistic and p-value against U(0, 1)."""
    res = stats.kstest(np.asarray(u, dtype=float), "uniform")
    return float(res.statistic), float(res.pvalue)


def _lr_pvalue(lr, df=1):
    return float(stats.chi2.sf(max(lr, 0.0), df))


def berkowitz(u):
    """Likelihood-ratio tests on ``z = Phi^{-1}(u)`` under a Gaussian AR(1).

    The AR(1) ``z_t = c + rho z_{t-1} + e_t`` is fitted by conditional
    maximum likelihood.  Three one-degree-of-freedom restrictions are tested
    separately: zero intercept, unit innovation variance and ``rho = 0``.
    Returns ``(p_mu, p_var, p_lb)``.
    """
    u = np.asarray(u, dtype=float)
    if u.size < 30:
        raise InsufficientDataError("the Berkowitz test needs at least 30 observations")
    z = ndtri(np.clip(u, PIT_CLAMP, 1.0 - PIT_CLAMP))
    y, x = z[1:], z[:-1]
    n = y.size

    def rss(design):
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        r = y - design @ coef
        return float(r @ r)

    full = rss(np.column_stack([np.ones(n), x]))
    no_intercept = rss(x[:, None])
    no_ar = rss(np.ones((n, 1)))

    def profile_lr(restricted):
        if full <= 0.0:
            return 0.0 if restricted <= 0.0 else math.inf
        return n * math.log(restricted / full)

    s2 = full / n
    lr_var = math.inf if s2 <= 0 else n * (s2 - 1.0 - math.log(s2))
    return _lr_pvalue(profile_lr(no_intercept)), _lr_pvalue(lr_var), _lr_pvalue(profile_lr(no_ar))


# ---------------------------------------------------------------------------
# VaR / ES backtests
# ---------------------------------------------------------------------------


def var_es(records, level=0.95, cfg: DensityConfig = DEFAULT_CONFIG):
    """VaR and ES series at ``level`` (lower tail of probability ``1 - level``)."""
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    tail = 1.0 - level
    var = np.empty(len(records))
    es = np.empty(len(records))
    for idx, batch in _groups(records):
        q = quantile_batch(batch, tail, cfg)
        var[idx] = q
        # divide by the mass actually below q so quantile rounding cancels
        mass = np.maximum(cdf_batch(batch, q, cfg), np.finfo(float).tiny)
        es[idx] = np.minimum(partial_expectation_batch(batch, q, cfg) / mass, q)
    return var, es


def _xlogy(x, y):
    return 0.0 if x == 0 else x * math.log(y)


def kupiec(breaches, p_nominal):
    """Unconditional coverage likelihood ratio and chi-square(1) p-value."""
    b = np.asarray(breaches, dtype=bool)
    n, x = b.size, int(b.sum())
    if n < 1:
        raise InsufficientDataError("empty breach series")
    pi = x / n
    null = _xlogy(n - x, 1.0 - p_nominal) + _xlogy(x, p_nominal)
    alt = _xlogy(n - x, 1.0 - pi) + _xlogy(x, pi)
    lr = max(-2.0 * (null - alt), 0.0)
    return lr, _lr_pvalue(lr)


def transition_counts(breaches):
    b = np.asarray(breaches, dtype=int)
    prev, cur = b[:-1], b[1:]
    return (
        int(np.sum((prev == 0) & (cur == 0))),
        int(np.sum((prev == 0) & (cur == 1))),
        int(np.sum((prev == 1) & (cur == 0))),
        int(np.sum((prev == 1) & (cur == 1))),
    )


def christoffersen(breaches, p_nominal=0.05):
    """Markov independence and conditional coverage tests.

    Returns ``(lr_ind, p_ind, lr_cc, p_cc)``.  Series without both states
    carry no information on clustering and get ``lr_ind = 0, p_ind = 1``.
    """
    b = np.asarray(breaches, dtype=bool)
    if b.size < 2:
        raise InsufficientDataError("the independence test needs at least 2 observations")
    n00, n01, n10, n11 = transition_counts(b)
    if b.all() or not b.any():
        lr_ind = 0.0
    else:
        pi = (n01 + n11) / (n00 + n01 + n10 + n11)
        p01 = n01 / (n00 + n01) if n00 + n01 else 0.0
        p11 = n11 / (n10 + n11) if n10 + n11 else 0.0
        null = _xlogy(n00 + n10, 1.0 - pi) + _xlogy(n01 + n11, pi)
        alt = _xlogy(n00, 1.0 - p01) + _xlogy(n01, p01) + _xlogy(n10, 1.0 - p11) + _xlogy(n11, p11)
        lr_ind = max(-2.0 * (null - alt), 0.0)
    p_ind = _lr_pvalue(lr_ind)
    lr_uc, _ = kupiec(b, p_nominal)
    lr_cc = lr_uc + lr_ind
    return lr_ind, p_ind, lr_cc, _lr_pvalue(lr_cc, 2)


def _acerbi_stat(y, var, es, tail):
    hit = y < var
    return float(np.mean(np.where(hit, y / (es * tail), 0.0)) - 1.0), int(hit.sum())


def acerbi_es(records, level=0.95, cfg: DensityConfig = DEFAULT_CONFIG, reps=2000, seed=0, var=None, es=None):
    """Unconditional ES backtest with a parametric-bootstrap p-value.

    ``Z = mean(y_t 1{y_t < VaR_t} / (ES_t (1 - level))) - 1`` is zero in
    expectation when the forecasts are right and positive when realized tail
    losses exceed the forecast ES.  The p-value is the upper-tail frequency
    of ``Z`` recomputed on draws from each record's own forecast law, using
    that law's VaR and ES.  Supplied ``var``/``es`` replace the law-implied
    values in the observed statistic only, which is how a reported risk
    figure that disagrees with the law is put to the test.
    Returns ``{"z_stat", "p_boot", "breaches", "inconclusive"}``.
    """
    tail = 1.0 - level
    law_var, law_es = var_es(records, level, cfg)
    var = law_var if var is None else np.asarray(var, dtype=float)
    es = law_es if es is None else np.asarray(es, dtype=float)
    y = _realized(records)
    z, hits = _acerbi_stat(y, var, es, tail)
    if hits == 0:
        return {"z_stat": None, "p_boot": None, "breaches": 0, "inconclusive": True}
    if reps < 1:
        raise DomainError("reps must be positive")
    rng = np.random.default_rng(seed)
    groups = list(_groups(records))
    k_max = cfg.k_max if cfg.renormalize else 10 * cfg.k_max + 50
    n = len(records)
    block = max(1, min(reps, 1_000_000 // n))
    exceed = 0
    done = 0
    while done < reps:
        m = min(block, reps - done)
        sims = np.empty((m, n))
        for idx, batch in groups:
            tiled = batch.take(np.tile(np.arange(len(batch)), m))
            sims[:, idx] = sample_truncated(rng, tiled, k_max).reshape(m, idx.size)
        hit = sims < law_var
        zs = np.mean(np.where(hit, sims / (law_es * tail), 0.0), axis=1) - 1.0
        exceed += int(np.sum(zs >= z))
        done += m
    return {"z_stat": z, "p_boot": (1 + exceed) / (reps + 1), "breaches": hits, "inconclusive": False}


# ---------------------------------------------------------------------------
# Model comparison and trading statistics
# ---------------------------------------------------------------------------


def diebold_mariano(loss_a, loss_b, max_lag=None):
    """DM statistic with a Bartlett-weighted Newey-West variance; negative favours ``a``."""
    a = np.asarray(loss_a, dtype=float)
    b = np.asarray(loss_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("loss series must be 1-D with equal lengths")
    n = a.size
    if n < 30:
        raise InsufficientDataError("the DM test needs at least 30 paired losses")
    d = a - b
    max_lag = int(n ** (1.0 / 3.0)) if max_lag is None else int(max_lag)
    c = d - d.mean()
    lrv = float(c @ c) / n
    for k in range(1, max_lag + 1):
        lrv += 2.0 * (1.0 - k / (max_lag + 1.0)) * float(c[k:] @ c[:-k]) / n
    if not lrv > 1e-300:
        raise DegenerateComparisonError("zero long-run variance: the loss series are indistinguishable")
    dm = float(d.mean() / math.sqrt(lrv / n))
    return dm, float(2.0 * stats.norm.sf(abs(dm)))


def drawdown_stats(equity):
    """Maximum relative peak-to-trough decline and the longest underwater spell.

    The duration counts consecutive observations strictly below the running
    peak; an unrecovered final spell counts to the end of the series.
    """
    e = np.asarray(equity, dtype=float)
    if e.size == 0 or np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise DomainError("equity must be a non-empty positive series")
    peak = np.maximum.accumulate(e)
    dd = (peak - e) / peak
    under = e < peak
    longest = run = 0
    for flag in under:
        run = run + 1 if flag else 0
        longest = max(longest, run)
    return float(dd.max()), int(longest)


def turnover(weights, initial=None):
    """Per-period l1 weight changes; the first change is from ``initial`` (zeros by default)."""
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    start = np.zeros(w.shape[1]) if initial is None else np.asarray(initial, dtype=float)
    return np.abs(np.diff(np.vstack([start, w]), axis=0)).sum(axis=1)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class BacktestResult:
    level: float
    breaches: list
    breach_rate: float
    kupiec_lr: float
    kupiec_p: float
    indep_lr: float
    indep_p: float
    cc_lr: float
    cc_p: float
    var: list
    es: list
    es_test: dict


def backtest(records, level=0.95, cfg: DensityConfig = DEFAULT_CONFIG, reps=2000, seed=0):
    var, es = var_es(records, level, cfg)
    hits = _realized(records) < var
    lr_uc, p_uc = kupiec(hits, 1.0 - level)
    lr_ind, p_ind, lr_cc, p_cc = christoffersen(hits, 1.0 - level)
    es_test = acerbi_es(records, level, cfg, reps=reps, seed=seed)
    return BacktestResult(
        level, hits.tolist(), float(hits.mean()), lr_uc, p_uc, lr_ind, p_ind, lr_cc, p_cc,
        var.tolist(), es.tolist(), es_test,
    )


@dataclass
class RiskReport:
    log_score: float  # mean log-likelihood, higher is better
    crps: float
    pit: list
    ks_stat: float
    ks_p: float
    pit_acf: list
    berkowitz: dict
    backtests: list = field(default_factory=list)
    max_drawdown: float | None = None
    drawdown_duration: int | None = None
    turnover: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def risk_report(records, cfg: DensityConfig = DEFAULT_CONFIG, levels=(0.95, 0.99), equity=None, weights=None,
                reps=2000, seed=0, crps_method="auto"):
    u = pit(records, cfg)
    ks, ks_p = ks_uniform(u)
    try:
        p_mu, p_var, p_lb = berkowitz(u)
        bk = {"p_mu": p_mu, "p_var": p_var, "p_lb": p_lb, "inconclusive": False}
    except InsufficientDataError:
        bk = {"p_mu": None, "p_var": None, "p_lb": None, "inconclusive": True}
    report = RiskReport(
        log_score=float(np.mean(log_scores(records, cfg))),
        crps=float(np.mean(crps_scores(records, cfg, crps_method))),
        pit=u.tolist(),
        ks_stat=ks,
        ks_p=ks_p,
        pit_acf=autocorrelations(u, 20).tolist(),
        berkowitz=bk,
        backtests=[backtest(records, lv, cfg, reps, seed) for lv in levels],
    )
    if equity is not None:
        report.max_drawdown, report.drawdown_duration = drawdown_stats(equity)
    if weights is not None:
        report.turnover = float(turnover(weights).sum())
    return report
