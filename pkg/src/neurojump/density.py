"""Distribution of an h-period log-return increment.

The increment is ``mu + sigma * eps + Z_1 + ... + Z_K`` with ``eps ~ N(0, 1)``,
``K ~ Poisson(lam)`` and i.i.d. jumps ``Z_i`` drawn from a two-component
Gaussian mixture or a double-exponential (Kou) law.  Densities sum the
Poisson mixture up to ``k_max`` jumps; by default the truncated mixture is
renormalized by its Poisson mass so that pdf, cdf and quantile describe a
proper distribution.

Every density evaluation is vectorized over a :class:`ParamBatch` so the
training loop can evaluate thousands of observations, with gradients, in one
call.  The scalar helpers (:func:`pdf`, :func:`cdf`, ...) wrap the batch
kernels.

Double-exponential convolutions
-------------------------------
A sum of ``j`` upward and ``i`` downward exponential jumps is a finite
mixture of one-sided Gamma laws with integer shape (partial fractions of the
moment generating function).  The Gaussian core convolved with a Gamma of
shape ``r`` and scale ``b`` has density

    h_r(z) = sigma**(r-1) K_{r-1}(z/sigma - sigma/b) phi(z/sigma) / ((r-1)! b**r)

with ``K_k(c) = int_0^inf x**k exp(c x - x**2 / 2) dx``, evaluated in log
space.  Derivatives follow from ``h_r' = (h_{r-1} - h_r) / b`` and the heat
equation ``d h / d sigma = sigma h''``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import ClassVar, Sequence, Union

import numpy as np
from scipy import integrate, optimize
from scipy.special import gammaln, log_ndtr, logsumexp, ndtr, roots_laguerre, xlogy

from .errors import DomainError, NumericalError, StripError

LOG_2PI = math.log(2.0 * math.pi)
SQRT_PI = math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# Parameter types
# ---------------------------------------------------------------------------


def _finite(name, value):
    if not np.isfinite(value):
        raise DomainError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class GaussianMixture2:
    """Jump size law ``p N(mu1, tau1^2) + (1 - p) N(mu2, tau2^2)``."""

    p: float
    mu1: float
    mu2: float
    tau1: float
    tau2: float

    family: ClassVar[str] = "gmm"
    names: ClassVar[tuple] = ("p", "mu1", "mu2", "tau1", "tau2")

    def __post_init__(self):
        for name in self.names:
            _finite(name, getattr(self, name))
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"mixture weight p={self.p} outside [0, 1]")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise DomainError("mixture scales tau1, tau2 must be positive")

    def to_array(self):
        return np.array([self.p, self.mu1, self.mu2, self.tau1, self.tau2], dtype=float)

    @property
    def strip(self):
        return (-math.inf, math.inf)

    def mgf(self, u):
        u = np.asarray(u, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            a = np.log(self.p) + self.mu1 * u + 0.5 * self.tau1**2 * u**2
            b = np.log1p(-self.p) + self.mu2 * u + 0.5 * self.tau2**2 * u**2
            return np.exp(np.logaddexp(a, b))

    def moments(self):
        """Return ``(E[Z], E[Z^2], E[|Z| 1{Z<0}])``."""
        p, q = self.p, 1.0 - self.p
        ez = p * self.mu1 + q * self.mu2
        ez2 = p * (self.mu1**2 + self.tau1**2) + q * (self.mu2**2 + self.tau2**2)
        eneg = p * _gauss_neg_part(self.mu1, self.tau1) + q * _gauss_neg_part(self.mu2, self.tau2)
        return ez, ez2, eneg

    def tilt(self, alpha):
        """Exponentially tilted law ``e^{alpha z} g(z) / M(alpha)``."""
        if alpha == 0.0:
            return self
        l1 = math.log(self.p) + self.mu1 * alpha + 0.5 * self.tau1**2 * alpha**2 if self.p > 0 else -math.inf
        l2 = (
            math.log1p(-self.p) + self.mu2 * alpha + 0.5 * self.tau2**2 * alpha**2
            if self.p < 1
            else -math.inf
        )
        p_new = math.exp(l1 - np.logaddexp(l1, l2))
        return GaussianMixture2(
            p_new,
            self.mu1 + alpha * self.tau1**2,
            self.mu2 + alpha * self.tau2**2,
            self.tau1,
            self.tau2,
        )


@dataclass(frozen=True)
class DoubleExponential:
    """Kou jump law: up-jumps ``Exp(mean=beta_up)`` with probability ``eta``,
    down-jumps ``-Exp(mean=beta_down)`` otherwise."""

    eta: float
    beta_up: float
    beta_down: float

    family: ClassVar[str] = "dexp"
    names: ClassVar[tuple] = ("eta", "beta_up", "beta_down")

    def __post_init__(self):
        for name in self.names:
            _finite(name, getattr(self, name))
        if not 0.0 <= self.eta <= 1.0:
            raise DomainError(f"up-probability eta={self.eta} outside [0, 1]")
        if self.beta_up <= 0 or self.beta_down <= 0:
            raise DomainError("exponential scales must be positive")

    def to_array(self):
        return np.array([self.eta, self.beta_up, self.beta_down], dtype=float)

    @property
    def strip(self):
        return (-1.0 / self.beta_down, 1.0 / self.beta_up)

    def mgf(self, u):
        u = np.asarray(u, dtype=float)
        lo, hi = self.strip
        if np.any(u >= hi):
            raise StripError(f"mgf argument {np.max(u)} >= 1/beta_up = {hi}", bound=hi)
        if np.any(u <= lo):
            raise StripError(f"mgf argument {np.min(u)} <= -1/beta_down = {lo}", bound=lo)
        return self.eta / (1.0 - self.beta_up * u) + (1.0 - self.eta) / (1.0 + self.beta_down * u)

    def moments(self):
        e, bu, bd = self.eta, self.beta_up, self.beta_down
        return e * bu - (1 - e) * bd, 2 * e * bu**2 + 2 * (1 - e) * bd**2, (1 - e) * bd

    def tilt(self, alpha):
        if alpha == 0.0:
            return self
        up = self.eta / (1.0 - alpha * self.beta_up)
        down = (1.0 - self.eta) / (1.0 + alpha * self.beta_down)
        return DoubleExponential(
            up / (up + down),
            self.beta_up / (1.0 - alpha * self.beta_up),
            self.beta_down / (1.0 + alpha * self.beta_down),
        )


JumpLaw = Union[GaussianMixture2, DoubleExponential]
JUMP_FAMILIES = {"gmm": GaussianMixture2, "dexp": DoubleExponential}


def jump_from_array(family, values):
    try:
        cls = JUMP_FAMILIES[family]
    except KeyError:
        raise DomainError(f"unknown jump family {family!r}") from None
    return cls(*(float(v) for v in values))


def _gauss_neg_part(m, s):
    # E[-X 1{X<0}] for X ~ N(m, s^2)
    a = m / s
    return s * math.exp(-0.5 * a * a) / math.sqrt(2 * math.pi) - m * float(ndtr(-a))


@dataclass(frozen=True)
class HorizonParams:
    """Parameters of one horizon's increment law."""

    mu: float
    sigma: float
    lam: float
    jump: JumpLaw
    h: str = "1d"

    def __post_init__(self):
        _finite("mu", self.mu)
        _finite("sigma", self.sigma)
        _finite("lam", self.lam)
        if self.sigma <= 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if self.lam < 0:
            raise DomainError(f"lam must be nonnegative, got {self.lam}")

    @property
    def family(self):
        return self.jump.family

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def log_mgf(self, u):
        """Log mgf of the untruncated increment, ``mu u + sigma^2 u^2/2 + lam (M_Z(u) - 1)``."""
        return self.mu * u + 0.5 * self.sigma**2 * u * u + self.lam * (float(self.jump.mgf(u)) - 1.0)


@dataclass(frozen=True)
class DensityConfig:
    k_max: int = 3
    quad_points: int = 128
    quantile_tol: float = 1e-10
    renormalize: bool = True

    def __post_init__(self):
        if self.k_max < 0:
            raise DomainError("k_max must be >= 0")
        if self.quad_points < 64:
            raise DomainError("quad_points must be >= 64")
        if not self.quantile_tol > 0:
            raise DomainError("quantile_tol must be positive")


DEFAULT_CONFIG = DensityConfig()


class ParamBatch:
    """Column-oriented stack of :class:`HorizonParams` sharing one jump family."""

    def __init__(self, family, mu, sigma, lam, jump):
        self.family = family
        self.mu = np.asarray(mu, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)
        self.lam = np.asarray(lam, dtype=float)
        self.jump = np.atleast_2d(np.asarray(jump, dtype=float))
        n = self.mu.shape[0]
        if not (self.sigma.shape == self.lam.shape == (n,) and self.jump.shape[0] == n):
            raise DomainError("inconsistent batch shapes")

    @classmethod
    def from_params(cls, params: Sequence[HorizonParams]):
        if not params:
            raise DomainError("empty parameter list")
        family = params[0].family
        if any(p.family != family for p in params):
            raise DomainError("mixed jump families in one batch")
        return cls(
            family,
            [p.mu for p in params],
            [p.sigma for p in params],
            [p.lam for p in params],
            np.stack([p.jump.to_array() for p in params]),
        )

    def __len__(self):
        return self.mu.shape[0]

    def row(self, i, h="1d"):
        return HorizonParams(
            float(self.mu[i]),
            float(self.sigma[i]),
            float(self.lam[i]),
            jump_from_array(self.family, self.jump[i]),
            h,
        )

    def take(self, idx):
        return ParamBatch(self.family, self.mu[idx], self.sigma[idx], self.lam[idx], self.jump[idx])

    def jump_moments(self):
        """Vectorized ``(E[Z], E[Z^2], E[|Z| 1{Z<0}])``."""
        j = self.jump
        if self.family == "gmm":
            p, m1, m2, t1, t2 = j.T
            ez = p * m1 + (1 - p) * m2
            ez2 = p * (m1**2 + t1**2) + (1 - p) * (m2**2 + t2**2)
            neg = lambda m, s: s * np.exp(-0.5 * (m / s) ** 2) / math.sqrt(2 * math.pi) - m * ndtr(-m / s)
            eneg = p * neg(m1, t1) + (1 - p) * neg(m2, t2)
        else:
            e, bu, bd = j.T
            ez = e * bu - (1 - e) * bd
            ez2 = 2 * e * bu**2 + 2 * (1 - e) * bd**2
            eneg = (1 - e) * bd
        return ez, ez2, eneg


# ---------------------------------------------------------------------------
# Poisson weights
# ---------------------------------------------------------------------------


def _log_poisson(lam, k_max):
    """``log Pois(k; lam)`` for k = 0..k_max, shape (n, k_max + 1)."""
    k = np.arange(k_max + 1)
    lam = np.asarray(lam, dtype=float)[:, None]
    return -lam + xlogy(k, lam) - gammaln(k + 1)


def log_truncated_mass(lam, k_max):
    """``log sum_{k <= k_max} Pois(k; lam)``."""
    return logsumexp(_log_poisson(np.atleast_1d(lam), k_max), axis=1)


# ---------------------------------------------------------------------------
# Gaussian-mixture jumps
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _gmm_layout(k_max):
    ks, js = [], []
    for k in range(k_max + 1):
        for j in range(k + 1):
            ks.append(k)
            js.append(j)
    ks = np.array(ks)
    js = np.array(js)
    lbinom = gammaln(ks + 1) - gammaln(js + 1) - gammaln(ks - js + 1)
    return ks, js, lbinom


def _gmm_components(batch, k_max):
    ks, js, lbinom = _gmm_layout(k_max)
    p, m1, m2, t1, t2 = (c[:, None] for c in batch.jump.T)
    mu = batch.mu[:, None]
    lam = batch.lam[:, None]
    rest = lbinom + xlogy(js, p) + xlogy(ks - js, 1 - p)
    logpois = -lam + xlogy(ks, lam) - gammaln(ks + 1)
    mean = mu + js * m1 + (ks - js) * m2
    var = batch.sigma[:, None] ** 2 + js * t1**2 + (ks - js) * t2**2
    return ks, js, rest, logpois, mean, var


def _gmm_logpdf(batch, y, k_max, renormalize, grad):
    ks, js, rest, logpois, mean, var = _gmm_components(batch, k_max)
    y = y[:, None]
    resid = y - mean
    logn = -0.5 * (LOG_2PI + np.log(var) + resid**2 / var)
    terms = logpois + rest + logn
    logf = logsumexp(terms, axis=1)
    logmass = logsumexp(_log_poisson(batch.lam, k_max), axis=1)
    out = logf - logmass if renormalize else logf
    if not grad:
        return out, None

    resp = np.exp(terms - logf[:, None])
    p, m1, m2, t1, t2 = (c[:, None] for c in batch.jump.T)
    lam = batch.lam[:, None]
    dlogn_dm = resid / var
    dlogn_dv = 0.5 * (resid**2 / var - 1.0) / var
    g = np.empty((len(batch), 8))
    g[:, 0] = np.sum(resp * dlogn_dm, axis=1)
    g[:, 1] = np.sum(resp * dlogn_dv, axis=1) * 2.0 * batch.sigma
    # d/dlam: -1 + sum_k pois(k-1) * rest * N / f
    shifted = np.where(ks >= 1, -lam + xlogy(ks - 1, lam) - gammaln(np.maximum(ks, 1)), -np.inf)
    g[:, 2] = -1.0 + np.sum(np.exp(shifted + rest + logn - logf[:, None]), axis=1)
    if renormalize:
        logpk = -batch.lam + xlogy(k_max, batch.lam) - gammaln(k_max + 1)
        g[:, 2] += np.exp(logpk - logmass)
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = np.where(resp > 0, resp * (js / p - (ks - js) / (1 - p)), 0.0)
    g[:, 3] = np.sum(dp, axis=1)
    g[:, 4] = np.sum(resp * dlogn_dm * js, axis=1)
    g[:, 5] = np.sum(resp * dlogn_dm * (ks - js), axis=1)
    g[:, 6] = np.sum(resp * dlogn_dv * 2.0 * js * t1, axis=1)
    g[:, 7] = np.sum(resp * dlogn_dv * 2.0 * (ks - js) * t2, axis=1)
    return out, g


def _gmm_cdf(batch, y, k_max):
    ks, js, rest, logpois, mean, var = _gmm_components(batch, k_max)
    w = np.exp(logpois + rest)
    comp = ndtr((y[:, None] - mean) / np.sqrt(var))
    return np.sum(w * comp, axis=1), np.sum(w, axis=1)


# ---------------------------------------------------------------------------
# Double-exponential jumps
# ---------------------------------------------------------------------------

_LAG_X, _LAG_W = roots_laguerre(80)


def _log_kfun(c, kmax):
    """``log K_k(c)`` for k = 0..kmax; accurate to ~1e-13 for all real c."""
    c = np.asarray(c, dtype=float)
    out = np.empty(c.shape + (kmax + 1,))
    lo = c < -1.5
    # forward recursion on J_k(c) = E[(c + Z)^k 1{Z > -c}] = phi(c) K_k(c)
    ch = np.where(lo, 0.0, c)
    log_phi = -0.5 * ch * ch - 0.5 * LOG_2PI
    big_phi = np.exp(log_ndtr(ch))
    small_phi = np.exp(log_phi)
    jm2 = big_phi
    out[..., 0] = np.log(jm2) - log_phi
    if kmax >= 1:
        jm1 = ch * big_phi + small_phi
        out[..., 1] = np.log(np.maximum(jm1, 1e-300)) - log_phi
        for k in range(2, kmax + 1):
            jk = ch * jm1 + (k - 1) * jm2
            out[..., k] = np.log(np.maximum(jk, 1e-300)) - log_phi
            jm2, jm1 = jm1, jk
    if np.any(lo):
        # K_k(c) = |c|^{-(k+1)} int_0^inf t^k e^{-t} e^{-t^2 / (2 c^2)} dt
        cl = c[lo]
        a = np.abs(cl)[:, None]
        damp = _LAG_W * np.exp(-(_LAG_X**2) / (2.0 * a * a))
        xpow = np.ones_like(_LAG_X)
        la = np.log(np.abs(cl))
        sub = np.empty(cl.shape + (kmax + 1,))
        for k in range(kmax + 1):
            sub[:, k] = np.log(np.sum(damp * xpow, axis=1)) - (k + 1) * la
            xpow = xpow * _LAG_X
        out[lo] = sub
    return out


def _log_h(z, sigma, beta, smax):
    """``log h_s(z)`` for s = 0..smax (s = 0 is the bare Gaussian density)."""
    c = z / sigma - sigma / beta
    lk = _log_kfun(c, max(smax - 1, 0))
    base = -0.5 * (z / sigma) ** 2 - 0.5 * LOG_2PI
    out = np.empty(z.shape + (smax + 1,))
    out[..., 0] = base - np.log(sigma)
    for s in range(1, smax + 1):
        out[..., s] = base + (s - 1) * np.log(sigma) - gammaln(s) - s * np.log(beta) + lk[..., s - 1]
    return out


@lru_cache(maxsize=None)
def _dexp_layout(k_max):
    """Component table for the double-exponential mixture.

    Columns: kind (0 gauss, 1 up, -1 down), shape r, jump count k, up count j,
    down count i, log integer coefficient, and the exponents of ``a``, ``b``
    and ``a + b`` in the partial-fraction weight (``a = beta_up``,
    ``b = beta_down``).
    """
    rows = [(0, 0, 0, 0, 0, 0.0, 0, 0, 0)]
    for k in range(1, k_max + 1):
        for j in range(k + 1):
            i = k - j
            lb = math.lgamma(k + 1) - math.lgamma(j + 1) - math.lgamma(i + 1)
            for n in range(j):
                coef = 1 if n == 0 else (math.comb(i + n - 1, n) if i > 0 else 0)
                if coef:
                    rows.append((1, j - n, k, j, i, lb + math.log(coef), i, n, i + n))
            for n in range(i):
                coef = 1 if n == 0 else (math.comb(j + n - 1, n) if j > 0 else 0)
                if coef:
                    rows.append((-1, i - n, k, j, i, lb + math.log(coef), n, j, j + n))
    arr = np.array(rows, dtype=float)
    return {
        "kind": arr[:, 0].astype(int),
        "r": arr[:, 1].astype(int),
        "k": arr[:, 2],
        "j": arr[:, 3],
        "i": arr[:, 4],
        "lcoef": arr[:, 5],
        "pa": arr[:, 6],
        "pb": arr[:, 7],
        "pab": arr[:, 8],
    }


def _dexp_weights(batch, k_max):
    L = _dexp_layout(k_max)
    eta, a, b = (c[:, None] for c in batch.jump.T)
    lam = batch.lam[:, None]
    rest = (
        L["lcoef"]
        + xlogy(L["j"], eta)
        + xlogy(L["i"], 1 - eta)
        + L["pa"] * np.log(a)
        + L["pb"] * np.log(b)
        - L["pab"] * np.log(a + b)
    )
    logpois = -lam + xlogy(L["k"], lam) - gammaln(L["k"] + 1)
    return L, rest, logpois


def _dexp_logpdf(batch, y, k_max, renormalize, grad):
    L, rest, logpois = _dexp_weights(batch, k_max)
    sigma = batch.sigma[:, None]
    eta, a, b = (c[:, None] for c in batch.jump.T)
    z = y - batch.mu
    smax = k_max + 1 if grad else max(k_max, 1)
    lh_up = _log_h(z, batch.sigma, batch.jump[:, 1], smax)
    lh_dn = _log_h(-z, batch.sigma, batch.jump[:, 2], smax)
    kind, r = L["kind"], L["r"]
    n, ncomp = len(batch), kind.size
    logh = np.where(kind == 1, lh_up[:, r], np.where(kind == -1, lh_dn[:, r], lh_up[:, 0:1]))
    terms = logpois + rest + logh
    logf = logsumexp(terms, axis=1)
    logmass = logsumexp(_log_poisson(batch.lam, k_max), axis=1)
    out = logf - logmass if renormalize else logf
    if not grad:
        return out, None

    resp = np.exp(terms - logf[:, None])
    lam = batch.lam[:, None]
    zz = z[:, None]
    # per-component derivatives of log h
    d_mu = np.empty((n, ncomp))
    d_sig = np.empty((n, ncomp))
    d_a = np.zeros((n, ncomp))
    d_b = np.zeros((n, ncomp))
    g0 = kind == 0
    d_mu[:, g0] = zz / sigma**2
    d_sig[:, g0] = ((zz / sigma) ** 2 - 1.0) / sigma
    for sign, lh, beta, dbeta, w in ((1, lh_up, a, d_a, zz), (-1, lh_dn, b, d_b, -zz)):
        for rr in np.unique(r[kind == sign]):
            cols = (kind == sign) & (r == rr)
            cur = lh[:, rr : rr + 1]
            rho_m1 = np.exp(lh[:, rr - 1 : rr] - cur)
            if rr >= 2:
                rho_m2 = np.exp(lh[:, rr - 2 : rr - 1] - cur)
            else:
                rho_m2 = rho_m1 * (1.0 - beta * w / sigma**2)
            d_mu[:, cols] = -sign * (rho_m1 - 1.0) / beta
            d_sig[:, cols] = sigma * (rho_m2 - 2.0 * rho_m1 + 1.0) / beta**2
            rho_p1 = np.exp(lh[:, rr + 1 : rr + 2] - cur)
            dbeta[:, cols] = (rr / beta) * (rho_p1 - 1.0)
    g = np.empty((n, 6))
    g[:, 0] = np.sum(resp * d_mu, axis=1)
    g[:, 1] = np.sum(resp * d_sig, axis=1)
    k = L["k"]
    shifted = np.where(k >= 1, -lam + xlogy(k - 1, lam) - gammaln(np.maximum(k, 1)), -np.inf)
    g[:, 2] = -1.0 + np.sum(np.exp(shifted + rest + logh - logf[:, None]), axis=1)
    if renormalize:
        logpk = -batch.lam + xlogy(k_max, batch.lam) - gammaln(k_max + 1)
        g[:, 2] += np.exp(logpk - logmass)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_eta = np.where(resp > 0, resp * (L["j"] / eta - L["i"] / (1 - eta)), 0.0)
    g[:, 3] = np.sum(d_eta, axis=1)
    g[:, 4] = np.sum(resp * (L["pa"] / a - L["pab"] / (a + b) + d_a), axis=1)
    g[:, 5] = np.sum(resp * (L["pb"] / b - L["pab"] / (a + b) + d_b), axis=1)
    return out, g


def _dexp_cdf(batch, y, k_max):
    L, rest, logpois = _dexp_weights(batch, k_max)
    eta, a, b = (c[:, None] for c in batch.jump.T)
    z = y - batch.mu
    smax = max(k_max, 1)
    h_up = np.exp(_log_h(z, batch.sigma, batch.jump[:, 1], smax))
    h_dn = np.exp(_log_h(-z, batch.sigma, batch.jump[:, 2], smax))
    cum_up = np.cumsum(h_up, axis=1)  # cum_up[:, r] = sum_{s=0..r} h_s
    cum_dn = np.cumsum(h_dn, axis=1)
    base = ndtr(z / batch.sigma)[:, None]
    kind, r = L["kind"], L["r"]
    up = base - a * (cum_up[:, r] - h_up[:, 0:1])
    dn = base + b * (cum_dn[:, r] - h_dn[:, 0:1])
    comp = np.where(kind == 1, up, np.where(kind == -1, dn, base))
    w = np.exp(logpois + rest)
    return np.sum(w * np.clip(comp, 0.0, 1.0), axis=1), np.sum(w, axis=1)


# ---------------------------------------------------------------------------
# Batch API
# ---------------------------------------------------------------------------


def log_density_batch(batch: ParamBatch, y, cfg: DensityConfig = DEFAULT_CONFIG, grad=False, renormalize=None):
    """Log density of each observation under its own law.

    Returns ``(logf, g)`` where ``g`` (if requested) has columns
    ``[mu, sigma, lam, *jump params]`` holding ``d logf / d param``.
    """
    y = np.broadcast_to(np.asarray(y, dtype=float), batch.mu.shape)
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite observation")
    renorm = cfg.renormalize if renormalize is None else renormalize
    if batch.family == "gmm":
        return _gmm_logpdf(batch, y, cfg.k_max, renorm, grad)
    return _dexp_logpdf(batch, y, cfg.k_max, renorm, grad)


def cdf_batch(batch: ParamBatch, y, cfg: DensityConfig = DEFAULT_CONFIG, renormalize=None):
    y = np.broadcast_to(np.asarray(y, dtype=float), batch.mu.shape)
    renorm = cfg.renormalize if renormalize is None else renormalize
    fn = _gmm_cdf if batch.family == "gmm" else _dexp_cdf
    with np.errstate(over="ignore", invalid="ignore"):
        val, mass = fn(batch, np.where(np.isfinite(y), y, 0.0), cfg.k_max)
    val = np.where(y == np.inf, mass, np.where(y == -np.inf, 0.0, val))
    if renorm:
        val = val / mass
    return np.clip(val, 0.0, 1.0)


def gaussian_logpdf_batch(mu, sigma, y, grad=False):
    """Gaussian log density with ``(d/dmu, d/dsigma)`` if requested."""
    z = (y - mu) / sigma
    logf = -0.5 * (LOG_2PI + z * z) - np.log(sigma)
    if not grad:
        return logf, None
    return logf, np.stack([z / sigma, (z * z - 1.0) / sigma], axis=1)


def _single(params):
    return ParamBatch.from_params([params])


def _eval_scalar_or_array(fn, params, y):
    y_arr = np.asarray(y, dtype=float)
    flat = y_arr.ravel()
    batch = ParamBatch(
        params.family,
        np.full(flat.size, params.mu),
        np.full(flat.size, params.sigma),
        np.full(flat.size, params.lam),
        np.tile(params.jump.to_array(), (flat.size, 1)),
    )
    out = fn(batch, flat).reshape(y_arr.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Scalar API
# ---------------------------------------------------------------------------


def pdf(params: HorizonParams, cfg: DensityConfig, y):
    """Density of the (renormalized, per ``cfg``) truncated mixture at ``y``."""
    return _eval_scalar_or_array(lambda b, v: np.exp(log_density_batch(b, v, cfg)[0]), params, y)


def quasi_loglik(params: HorizonParams, cfg: DensityConfig, y, renormalize=None):
    """Log of the truncated Poisson mixture density, via log-sum-exp."""
    return _eval_scalar_or_array(
        lambda b, v: log_density_batch(b, v, cfg, renormalize=renormalize)[0], params, y
    )


def cdf(params: HorizonParams, cfg: DensityConfig, y):
    return _eval_scalar_or_array(lambda b, v: cdf_batch(b, v, cfg), params, y)


def moments(params: HorizonParams, cfg: DensityConfig = DEFAULT_CONFIG):
    """Return ``(mean, variance, E[Z^2], E[|Z| 1{Z<0}])`` of the untruncated law."""
    ez, ez2, eneg = params.jump.moments()
    return params.mu + params.lam * ez, params.sigma**2 + params.lam * ez2, ez2, eneg


def mgf(params: HorizonParams, cfg: DensityConfig, u):
    """Moment generating function ``E[e^{uZ}]`` of the jump size law."""
    return float(params.jump.mgf(u)) if np.ndim(u) == 0 else params.jump.mgf(u)


def total_std(params):
    return math.sqrt(moments(params)[1])


def quantile(params: HorizonParams, cfg: DensityConfig, u):
    """Invert the cdf by bracketing and Brent's method."""
    if not 0.0 < u < 1.0:
        raise DomainError(f"quantile level {u} outside (0, 1)")
    mean, var, _, _ = moments(params)
    sd = math.sqrt(var)
    F = lambda x: cdf(params, cfg, x) - u
    lo, hi = mean - 8.0 * sd, mean + 8.0 * sd
    step = 8.0 * sd
    for _ in range(200):
        if F(lo) < 0:
            break
        step *= 2.0
        lo -= step
    step = 8.0 * sd
    for _ in range(200):
        if F(hi) > 0:
            break
        step *= 2.0
        hi += step
    flo, fhi = F(lo), F(hi)
    if flo > 0 or fhi < 0:
        raise NumericalError(f"could not bracket quantile {u}")
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    return optimize.brentq(F, lo, hi, xtol=1e-3 * cfg.quantile_tol * sd, rtol=4 * np.finfo(float).eps, maxiter=500)


def partial_expectation(params: HorizonParams, cfg: DensityConfig, q):
    """``E[Y 1{Y < q}]`` under the (renormalized) truncated law."""
    if params.family == "gmm":
        ks, js, rest, logpois, mean, var = _gmm_components(_single(params), cfg.k_max)
        w = np.exp(logpois + rest)[0]
        s = np.sqrt(var[0])
        a = (q - mean[0]) / s
        val = float(np.sum(w * (mean[0] * ndtr(a) - s * np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi))))
        return val / w.sum() if cfg.renormalize else val
    sd = total_std(params)
    lo = min(q, params.mu) - 40.0 * sd
    f = lambda x: x * pdf(params, cfg, x)
    val, _ = integrate.quad(f, lo, q, limit=cfg.quad_points, epsabs=1e-14)
    tail, _ = integrate.quad(f, -np.inf, lo, limit=cfg.quad_points)
    return val + tail


def quantile_batch(batch: ParamBatch, u, cfg: DensityConfig = DEFAULT_CONFIG, max_iter=200):
    """Row-wise quantiles by bracketing and vectorized bisection on the cdf."""
    u = np.broadcast_to(np.asarray(u, dtype=float), batch.mu.shape)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("quantile levels must lie in (0, 1)")
    ez, ez2, _ = batch.jump_moments()
    mean = batch.mu + batch.lam * ez
    sd = np.sqrt(batch.sigma**2 + batch.lam * ez2)
    lo, hi = mean - 8.0 * sd, mean + 8.0 * sd
    for _ in range(60):
        low_bad = cdf_batch(batch, lo, cfg) >= u
        high_bad = cdf_batch(batch, hi, cfg) < u
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, lo - 2.0 * (hi - lo), lo)
        hi = np.where(high_bad, hi + 2.0 * (hi - lo), hi)
    else:
        raise NumericalError("could not bracket quantiles")
    tol = cfg.quantile_tol * np.maximum(sd, 1e-300)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = cdf_batch(batch, mid, cfg) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


def partial_expectation_batch(batch: ParamBatch, q, cfg: DensityConfig = DEFAULT_CONFIG):
    """Row-wise ``E[Y 1{Y < q}]``; closed form for Gaussian-mixture jumps."""
    q = np.broadcast_to(np.asarray(q, dtype=float), batch.mu.shape)
    if batch.family != "gmm":
        return np.array([partial_expectation(batch.row(i), cfg, float(q[i])) for i in range(len(batch))])
    _, _, rest, logpois, mean, var = _gmm_components(batch, cfg.k_max)
    w = np.exp(logpois + rest)
    s = np.sqrt(var)
    a = (q[:, None] - mean) / s
    val = np.sum(w * (mean * ndtr(a) - s * np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)), axis=1)
    return val / w.sum(axis=1) if cfg.renormalize else val


def sample_truncated(rng, batch: ParamBatch, k_max: int):
    """One draw per row from the truncated law: jump counts are Poisson conditioned on ``<= k_max``."""
    n = len(batch)
    counts = rng.poisson(batch.lam)
    bad = counts > k_max
    while bad.any():
        counts[bad] = rng.poisson(batch.lam[bad])
        bad = counts > k_max
    out = batch.mu + batch.sigma * rng.standard_normal(n)
    total = int(counts.sum())
    if total:
        rows = np.repeat(np.arange(n), counts)
        j = batch.jump[rows]
        if batch.family == "gmm":
            first = rng.random(total) < j[:, 0]
            eps = rng.standard_normal(total)
            z = np.where(first, j[:, 1] + j[:, 3] * eps, j[:, 2] + j[:, 4] * eps)
        else:
            up = rng.random(total) < j[:, 0]
            mag = rng.standard_exponential(total)
            z = np.where(up, j[:, 1] * mag, -j[:, 2] * mag)
        out = out + np.bincount(rows, weights=z, minlength=n)
    return out


def _gaussian_crps(mu, sigma, y):
    z = (y - mu) / sigma
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi) - 1.0 / SQRT_PI)


def _abs_moment(m, v):
    # E|X| for X ~ N(m, v)
    s = np.sqrt(v)
    return 2.0 * s * np.exp(-0.5 * (m / s) ** 2) / math.sqrt(2 * math.pi) + m * (2.0 * ndtr(m / s) - 1.0)


def _gmm_crps_closed(params, cfg, y):
    ks, js, rest, logpois, mean, var = _gmm_components(_single(params), cfg.k_max)
    w = np.exp(logpois + rest)[0]
    if cfg.renormalize:
        w = w / w.sum()
    m, v = mean[0], var[0]
    first = np.sum(w * _abs_moment(y - m, v))
    second = np.sum(np.outer(w, w) * _abs_moment(m[:, None] - m[None, :], v[:, None] + v[None, :]))
    return float(first - 0.5 * second)


def crps(params: HorizonParams, cfg: DensityConfig, y, method="auto"):
    """Continuous ranked probability score of the forecast law at ``y``.

    ``method="auto"`` uses the Gaussian closed form when ``lam == 0`` and
    adaptive quadrature of ``(F(z) - 1{y <= z})^2`` otherwise; ``"quad"``
    forces quadrature; ``"closed"`` uses the closed form for finite Gaussian
    mixtures (gmm jumps only).
    """
    y = float(y)
    if method == "closed":
        if params.family != "gmm":
            raise DomainError("closed-form CRPS needs Gaussian-mixture jumps")
        return _gmm_crps_closed(params, cfg, y)
    if method == "auto" and params.lam == 0.0:
        return _gaussian_crps(params.mu, params.sigma, y)
    mean, var, _, _ = moments(params)
    sd = math.sqrt(var)
    lo = min(mean - 10.0 * sd, y)
    hi = max(mean + 10.0 * sd, y)
    F = lambda z: cdf(params, cfg, z)
    opts = dict(limit=cfg.quad_points, epsabs=1e-12 * sd, epsrel=1e-10)
    left, err_l = integrate.quad(lambda z: F(z) ** 2, lo, y, **opts)
    right, err_r = integrate.quad(lambda z: (1.0 - F(z)) ** 2, y, hi, **opts)
    # exponential-tail extrapolation beyond the bracket: int F^2 ~ F^3 / (2 f)
    tails = 0.0
    for edge, mass in ((lo, F(lo)), (hi, 1.0 - F(hi))):
        dens = pdf(params, cfg, edge)
        if mass > 0 and dens > 0:
            tails += mass**3 / (2.0 * dens)
    err = err_l + err_r
    total = left + right + tails
    if not np.isfinite(total) or err > 1e-6 * max(total, sd):
        raise NumericalError(f"CRPS quadrature did not converge (estimated error {err:.3e})")
    return total


def sample(params: HorizonParams, cfg: DensityConfig, n: int, seed) -> np.ndarray:
    """Exact (untruncated) draws from the increment law."""
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return sample_with(rng, params, n)


def draw_jumps(rng, jump: JumpLaw, size):
    if jump.family == "gmm":
        first = rng.random(size) < jump.p
        eps = rng.standard_normal(size)
        return np.where(first, jump.mu1 + jump.tau1 * eps, jump.mu2 + jump.tau2 * eps)
    up = rng.random(size) < jump.eta
    mag = rng.standard_exponential(size)
    return np.where(up, jump.beta_up * mag, -jump.beta_down * mag)


def sample_with(rng, params: HorizonParams, n: int) -> np.ndarray:
    eps = rng.standard_normal(n)
    counts = rng.poisson(params.lam, n)
    total = int(counts.sum())
    jumps = np.zeros(n)
    if total:
        z = draw_jumps(rng, params.jump, total)
        jumps = np.bincount(np.repeat(np.arange(n), counts), weights=z, minlength=n)
    return params.mu + params.sigma * eps + jumps
