"""State features: lagged returns, permutation entropy, recurrence determinism,
realized and bipower variation, and the diffusion weight ``omega``.

Every row uses only data up to and including its own day.  Rolling windows are
evaluated with ``sliding_window_view`` so recomputing on a truncated input
reproduces the retained rows bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DegenerateWindowError, DomainError, IngestionError, InsufficientDataError

BV_SCALE = math.pi / 2.0


@dataclass(frozen=True)
class ComplexityConfig:
    pe_embed: int = 3
    pe_delay: int = 1
    rqa_embed: int = 3
    rqa_delay: int = 1
    rqa_target_rr: float = 0.03
    rqa_lmin: int = 2
    window: int = 126
    zscore_window: int = 252
    winsor: float = 0.01
    n_lags: int = 5
    vol_window: int = 21
    omega_eps: float = 1e-12

    def __post_init__(self):
        if self.pe_embed not in (3, 4):
            raise ConfigError("pe_embed must be 3 or 4")
        if self.pe_delay < 1 or self.rqa_delay < 1:
            raise ConfigError("delays must be >= 1")
        if self.rqa_embed < 2:
            raise ConfigError("rqa_embed must be >= 2")
        if not 0.0 < self.rqa_target_rr < 1.0:
            raise ConfigError("rqa_target_rr must lie in (0, 1)")
        if self.rqa_lmin < 2:
            raise ConfigError("rqa_lmin must be >= 2")
        if self.window <= self.pe_embed * self.pe_delay or self.window <= self.rqa_embed * self.rqa_delay:
            raise ConfigError("window too short for the embeddings")
        if self.zscore_window < 2 or self.n_lags < 1 or self.vol_window < 2:
            raise ConfigError("zscore_window, vol_window >= 2 and n_lags >= 1 required")
        if not 0.0 <= self.winsor < 0.5:
            raise ConfigError("winsor must lie in [0, 0.5)")
        if not self.omega_eps > 0:
            raise ConfigError("omega_eps must be positive")


# ---------------------------------------------------------------------------
# Permutation entropy
# ---------------------------------------------------------------------------


def ordinal_patterns(x, m, tau):
    """Rank pattern of every delay vector, ties ranked by position."""
    x = np.asarray(x, dtype=float)
    n = x.size - (m - 1) * tau
    if n < 1:
        raise InsufficientDataError("series too short for the embedding")
    vectors = sliding_window_view(x, (m - 1) * tau + 1)[:, ::tau]
    return np.argsort(vectors, axis=1, kind="stable")


def permutation_entropy(window, m=3, tau=1):
    """Normalized Shannon entropy of ordinal patterns, in [0, 1]."""
    x = np.asarray(window, dtype=float)
    if x.size < m * tau + 1:
        raise InsufficientDataError(f"need at least {m * tau + 1} observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite value in window")
    pat = ordinal_patterns(x, m, tau)
    codes = pat @ (m ** np.arange(m))
    counts = np.unique(codes, return_counts=True)[1]
    prob = counts / counts.sum()
    h = -np.sum(prob * np.log(prob)) / math.log(math.factorial(m))
    return float(min(max(h, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Recurrence quantification
# ---------------------------------------------------------------------------


def delay_embed(x, d, delay):
    x = np.asarray(x, dtype=float)
    span = (d - 1) * delay + 1
    if x.size < span:
        raise InsufficientDataError("series too short for the embedding")
    return sliding_window_view(x, span)[:, ::delay]


def _diagonal_run_points(upper, lmin):
    """Recurrent points, and those on diagonal runs of length >= lmin, in the
    strict upper triangle of a symmetric recurrence matrix."""
    n = upper.shape[0]
    # row o of `diag` holds R[i, i + o] for i < n - o
    idx = np.arange(n)
    rows = np.arange(1, n)[:, None]
    cols = idx[None, :] + rows
    valid = cols < n
    diag = np.zeros((n - 1, n + 1), dtype=bool)
    diag[:, :n][valid] = upper[np.broadcast_to(idx, valid.shape)[valid], cols[valid]]
    padded = np.concatenate([np.zeros((n - 1, 1), dtype=bool), diag], axis=1).astype(np.int8)
    edges = np.diff(padded, axis=1)
    starts = np.flatnonzero(edges.ravel() == 1)
    ends = np.flatnonzero(edges.ravel() == -1)
    lengths = ends - starts
    total = int(lengths.sum())
    in_lines = int(lengths[lengths >= lmin].sum())
    return total, in_lines


def rqa_determinism(window, cfg: ComplexityConfig = ComplexityConfig()):
    """Determinism at a fixed recurrence rate.

    Returns ``(det, epsilon, rr)``: epsilon is the smallest off-diagonal
    distance whose recurrence rate reaches ``cfg.rqa_target_rr``.
    """
    x = np.asarray(window, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite value in window")
    vec = delay_embed(x, cfg.rqa_embed, cfg.rqa_delay)
    n = vec.shape[0]
    if n < cfg.rqa_lmin + 1:
        raise InsufficientDataError(f"need at least {cfg.rqa_lmin + 1} delay vectors, got {n}")
    diff = vec[:, None, :] - vec[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu = np.triu_indices(n, 1)
    pair = dist[iu]
    if np.all(pair == 0.0):
        return 1.0, 0.0, 1.0
    if np.all(pair == pair[0]):
        raise DegenerateWindowError("all pairwise distances identical")
    ordered = np.sort(pair)
    k = max(math.ceil(cfg.rqa_target_rr * pair.size - 1e-9), 1)
    eps = float(ordered[k - 1])
    upper = dist <= eps
    upper[np.tril_indices(n)] = False
    rr = float(np.count_nonzero(upper)) / pair.size
    total, in_lines = _diagonal_run_points(upper, cfg.rqa_lmin)
    return in_lines / total, eps, rr


# ---------------------------------------------------------------------------
# Realized measures
# ---------------------------------------------------------------------------


def realized_and_bipower(intraday):
    """``rv = sum r_i^2`` and ``bv = (pi/2) sum |r_i| |r_{i-1}|``."""
    r = np.asarray(intraday, dtype=float)
    if r.shape[-1] < 2:
        raise InsufficientDataError("need at least two intraday returns")
    a = np.abs(r)
    rv = np.sum(r * r, axis=-1)
    bv = BV_SCALE * np.sum(a[..., 1:] * a[..., :-1], axis=-1)
    if np.ndim(rv) == 0:
        return float(rv), float(bv)
    return rv, bv


def bipower_weight(rv, bv, eps=1e-12):
    """Diffusion share ``min(1, bv / (rv + eps))``; 1 when both are zero."""
    rv = np.asarray(rv, dtype=float)
    bv = np.asarray(bv, dtype=float)
    if np.any(rv < 0) or np.any(bv < 0):
        raise DomainError("rv and bv must be nonnegative")
    if not eps > 0:
        raise DomainError("eps must be positive")
    w = np.where((rv == 0) & (bv == 0), 1.0, np.minimum(1.0, bv / (rv + eps)))
    w = np.clip(w, 0.0, 1.0)
    return float(w) if w.ndim == 0 else w


# ---------------------------------------------------------------------------
# Feature matrix
# ---------------------------------------------------------------------------


@dataclass
class FeatureRow:
    t: int
    lag_returns: np.ndarray
    momentum_5d: float
    momentum_1m: float
    roll_vol: float
    volume_z: float
    perm_entropy: float
    det: float
    rv: float
    bv: float
    jump_var: float
    omega: float
    entropy_z: float
    det_z: float


@dataclass
class FeatureMatrix:
    t: np.ndarray
    columns: tuple
    values: np.ndarray
    norm_state: dict = field(default_factory=dict)

    def column(self, name):
        return self.values[:, self.columns.index(name)]

    def __len__(self):
        return self.t.size

    def row(self, i) -> FeatureRow:
        get = lambda name: float(self.values[i, self.columns.index(name)])  # noqa: E731
        lags = np.array([self.values[i, self.columns.index(c)] for c in self.columns if c.startswith("ret_lag")])
        return FeatureRow(
            t=int(self.t[i]),
            lag_returns=lags,
            momentum_5d=get("momentum_5d"),
            momentum_1m=get("momentum_1m"),
            roll_vol=get("roll_vol"),
            volume_z=get("volume_z"),
            perm_entropy=get("perm_entropy"),
            det=get("det"),
            rv=get("rv"),
            bv=get("bv"),
            jump_var=get("jump_var"),
            omega=get("omega"),
            entropy_z=get("entropy_z"),
            det_z=get("det_z"),
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("t",) + self.columns)
            for t, row in zip(self.t, self.values):
                w.writerow([int(t)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "t":
            raise IngestionError(f"{path}: not a feature file")
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
        return cls(data[:, 0].astype(int), tuple(rows[0][1:]), data[:, 1:])


def feature_columns(n_lags):
    return tuple(f"ret_lag{i}" for i in range(n_lags)) + (
        "momentum_5d",
        "momentum_1m",
        "roll_vol",
        "volume_z",
        "perm_entropy",
        "det",
        "rv",
        "bv",
        "jump_var",
        "jump_var_20d",
        "omega",
        "entropy_z",
        "det_z",
        "order_flow",
        "bid_ask",
    )


def winsorize(x, level):
    """Clip at the lower/upper ``level`` order statistics of ``x``."""
    if level == 0:
        return np.asarray(x, dtype=float)
    lo = np.quantile(x, level, method="lower")
    hi = np.quantile(x, 1.0 - level, method="higher")
    return np.clip(x, lo, hi)


def trailing_zscore(x, window):
    """``(x_t - mean) / std`` over ``x_{t-window+1..t}``; NaN until full, 0 when flat."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if x.size < window:
        return out, out.copy(), out.copy()
    view = sliding_window_view(x, window)
    mean = view.mean(axis=1)
    std = view.std(axis=1)
    z = np.where(std > 0, (x[window - 1 :] - mean) / np.where(std > 0, std, 1.0), 0.0)
    out[window - 1 :] = z
    m = np.full(x.shape, np.nan)
    s = np.full(x.shape, np.nan)
    m[window - 1 :] = mean
    s[window - 1 :] = std
    return out, m, s


def _trailing_sum(x, w):
    out = np.full(x.shape, np.nan)
    if x.size >= w:
        out[w - 1 :] = sliding_window_view(x, w).sum(axis=1)
    return out


def build_features(
    daily_returns,
    intraday_returns=None,
    cfg: ComplexityConfig = ComplexityConfig(),
    volume=None,
    t_index=None,
) -> FeatureMatrix:
    """Feature rows for every day with complete history.

    ``daily_returns`` may also be a :class:`~neurojump.simlab.SimPath`.
    Without intraday data, ``rv`` falls back to the squared daily return and
    ``bv`` to ``rv`` (``omega = 1``).
    """
    if hasattr(daily_returns, "intraday_returns"):
        intraday_returns = daily_returns.intraday_returns
        daily_returns = daily_returns.daily_returns
    r = np.asarray(daily_returns, dtype=float)
    n = r.size
    if t_index is None:
        t_index = np.arange(n)
    t_index = np.asarray(t_index)
    if t_index.size != n or np.any(np.diff(t_index) <= 0):
        raise IngestionError("time index must be strictly increasing")
    if not np.all(np.isfinite(r)):
        raise IngestionError("non-finite daily return")

    if intraday_returns is not None:
        intra = np.asarray(intraday_returns, dtype=float)
        if intra.shape[0] != n:
            raise IngestionError("intraday matrix length differs from daily series")
        rv, bv = realized_and_bipower(intra)
    else:
        rv = r * r
        bv = rv.copy()
    jump_var = np.maximum(rv - bv, 0.0)
    omega = bipower_weight(rv, bv, cfg.omega_eps)

    w = cfg.window
    first = max(w, cfg.vol_window, 21, cfg.n_lags) - 1
    if n < first + cfg.zscore_window:
        raise InsufficientDataError(
            f"need at least {first + cfg.zscore_window} days for the feature windows, got {n}"
        )

    entropy = np.full(n, np.nan)
    det = np.full(n, np.nan)
    for t in range(w - 1, n):
        win = winsorize(r[t - w + 1 : t + 1], cfg.winsor)
        entropy[t] = permutation_entropy(win, cfg.pe_embed, cfg.pe_delay)
        try:
            det[t] = rqa_determinism(win, cfg)[0]
        except DegenerateWindowError:
            det[t] = 1.0

    entropy_z, e_mean, e_std = trailing_zscore(np.nan_to_num(entropy, nan=0.0), cfg.zscore_window)
    det_z, d_mean, d_std = trailing_zscore(np.nan_to_num(det, nan=0.0), cfg.zscore_window)
    if volume is not None:
        volume_z = trailing_zscore(np.log1p(np.asarray(volume, dtype=float)), cfg.zscore_window)[0]
    else:
        volume_z = np.zeros(n)

    roll_vol = np.full(n, np.nan)
    roll_vol[cfg.vol_window - 1 :] = sliding_window_view(r, cfg.vol_window).std(axis=1, ddof=1)
    lags = [np.concatenate([np.full(i, np.nan), r[: n - i]]) for i in range(cfg.n_lags)]
    cols = lags + [
        _trailing_sum(r, 5),
        _trailing_sum(r, 21),
        roll_vol,
        volume_z,
        entropy,
        det,
        rv,
        bv,
        jump_var,
        _trailing_sum(jump_var, 20) / 20.0,
        omega,
        entropy_z,
        det_z,
        np.zeros(n),
        np.zeros(n),
    ]
    values = np.column_stack(cols)
    start = first + cfg.zscore_window - 1
    keep = slice(start, n)
    return FeatureMatrix(
        t=t_index[keep],
        columns=feature_columns(cfg.n_lags),
        values=values[keep],
        norm_state={
            "entropy_mean": e_mean[keep],
            "entropy_std": e_std[keep],
            "det_mean": d_mean[keep],
            "det_std": d_std[keep],
            "zscore_window": cfg.zscore_window,
        },
    )


def horizon_targets(daily_returns, rv, bv, h, eps=1e-12):
    """Forward h-day return ``sum r_{t+1..t+h}`` and its diffusion weight.

    The weight pools realized measures over the same days as the return.
    Entries without h future days are NaN.
    """
    r = np.asarray(daily_returns, dtype=float)
    n = r.size
    y = np.full(n, np.nan)
    w = np.full(n, np.nan)
    if n > h:
        y[: n - h] = sliding_window_view(r[1:], h).sum(axis=1)
        rv_h = sliding_window_view(np.asarray(rv, dtype=float)[1:], h).sum(axis=1)
        bv_h = sliding_window_view(np.asarray(bv, dtype=float)[1:], h).sum(axis=1)
        w[: n - h] = bipower_weight(rv_h, bv_h, eps)
    return y, w


class Standardizer:
    """Column-wise affine standardization fitted on training rows."""

    def __init__(self, mean=None, scale=None):
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.scale = None if scale is None else np.asarray(scale, dtype=float)

    def fit(self, x, passthrough=()):
        x = np.asarray(x, dtype=float)
        self.mean = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        for j in passthrough:
            self.mean[j] = 0.0
            self.scale[j] = 1.0
        return self

    def transform(self, x):
        if self.mean is None:
            raise ConfigError("standardizer not fitted")
        return (np.asarray(x, dtype=float) - self.mean) / self.scale


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def read_daily_csv(path):
    """Read ``date_index`` plus ``daily_return`` (or ``log_price``) and optional ``volume``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    if "date_index" not in fields:
        raise IngestionError(f"{path}: missing date_index column")
    try:
        t = np.array([int(float(r["date_index"])) for r in rows])
        if "daily_return" in fields:
            ret = np.array([float(r["daily_return"]) for r in rows])
        elif "log_price" in fields:
            lp = np.array([float(r["log_price"]) for r in rows])
            ret = np.diff(lp)
            t = t[1:]
        else:
            raise IngestionError(f"{path}: need daily_return or log_price")
        volume = np.array([float(r["volume"]) for r in rows]) if "volume" in fields else None
    except (KeyError, ValueError) as exc:
        raise IngestionError(f"{path}: malformed row ({exc})") from exc
    if np.any(np.diff(t) <= 0):
        raise IngestionError(f"{path}: date_index is not strictly increasing")
    if volume is not None and "daily_return" not in fields:
        volume = volume[1:]
    return t, ret, volume


def read_intraday_csv(path, days):
    """Read ``day, step, return`` rows into a (day x step) matrix aligned to ``days``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 3:
        raise IngestionError(f"{path}: expected columns day,step,return")
    day = data[:, 0].astype(int)
    step = data[:, 1].astype(int)
    steps = step.max() + 1
    lookup = {d: i for i, d in enumerate(days)}
    out = np.full((len(days), steps), np.nan)
    for d, s, v in zip(day, step, data[:, 2]):
        if d in lookup:
            out[lookup[d], s] = v
    if np.isnan(out).any():
        raise IngestionError(f"{path}: incomplete intraday grid")
    return out
