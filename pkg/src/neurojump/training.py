"""Two-stage quasi-maximum-likelihood training.

Stage one fits the diffusion outputs with an ``omega``-weighted Gaussian
likelihood while every jump output is frozen.  Stage two minimizes, per
horizon ``h`` with weight ``alpha_h``,

    sum_t [omega_t NLL_gauss + (1 - omega_t) NLL_compound]
        + gamma_tv TV_h + gamma_l2 ||theta||^2,

where ``TV_h`` sums absolute changes of sigma and lambda between successive
rows of the same contiguous segment.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .density import DensityConfig, ParamBatch, gaussian_logpdf_batch, log_density_batch
from .errors import BatchingError, ConfigError, SplitError, TrainingDivergence
from .neuralnet import NetworkState, logistic

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    gamma_tv: float = 1e-4
    gamma_l2: float = 1e-4
    alpha: tuple = (1.0, 1.0)
    k_max: int = 3
    batch_size: int = 128
    epochs_pretrain: int = 5
    epochs_joint: int = 12
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    purge_gap: int = 5
    embargo: int = 5
    val_fraction: float = 0.2
    renormalize: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if self.gamma_tv < 0 or self.gamma_l2 < 0:
            raise ConfigError("penalty weights must be nonnegative")
        if any(a <= 0 for a in self.alpha):
            raise ConfigError("horizon weights must be positive")
        if self.epochs_pretrain < 0 or self.epochs_joint < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2 or self.k_max < 0:
            raise ConfigError("batch_size >= 2 and k_max >= 0 required")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.clip_norm > 0):
            raise ConfigError("invalid optimizer constants")
        if self.purge_gap < 0 or self.embargo < 0 or not 0 < self.val_fraction < 1:
            raise ConfigError("invalid split settings")

    @property
    def density(self):
        return DensityConfig(k_max=self.k_max, renormalize=self.renormalize)


@dataclass
class Dataset:
    """Model inputs with aligned forward targets.

    ``y[h][i]`` is the return over the ``h`` days after row ``i``'s time and
    ``omega[h][i]`` the diffusion weight attached to that observation.
    """

    x: np.ndarray
    y: dict
    omega: dict
    t: np.ndarray
    segment: np.ndarray
    horizons: tuple
    horizon_days: tuple

    def __post_init__(self):
        n = self.x.shape[0]
        if self.t.shape != (n,) or self.segment.shape != (n,):
            raise ConfigError("time/segment arrays must match the row count")
        for h in self.horizons:
            if self.y[h].shape != (n,) or self.omega[h].shape != (n,):
                raise ConfigError(f"targets for {h} must match the row count")
            if not np.all(np.isfinite(self.y[h])) or not np.all(np.isfinite(self.omega[h])):
                raise ConfigError(f"non-finite targets for {h}")

    def __len__(self):
        return self.x.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.x[idx],
            {h: v[idx] for h, v in self.y.items()},
            {h: v[idx] for h, v in self.omega.items()},
            self.t[idx],
            self.segment[idx],
            self.horizons,
            self.horizon_days,
        )


@dataclass
class TrainReport:
    stage: str
    train_loss: list = field(default_factory=list)  # per epoch: {h: mean NLL}
    val_loss: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    lam_ratio_max: float = 0.0  # max lambda / bound seen during training
    best_epoch: int = -1
    best_val: float = math.inf

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write_csv(self, path):
        horizons = sorted(self.train_loss[0]) if self.train_loss else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "epoch"] + [f"train_{h}" for h in horizons] + [f"val_{h}" for h in horizons]
                       + ["violations"])
            for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
                w.writerow([self.stage, e] + [repr(tr[h]) for h in horizons] + [repr(va[h]) for h in horizons]
                           + [self.violations[e]])


# ---------------------------------------------------------------------------
# Splits and batches
# ---------------------------------------------------------------------------


def make_splits(n: int, cfg: TrainConfig):
    """Contiguous train block, purge + embargo gap, then validation block."""
    gap = cfg.purge_gap + cfg.embargo
    n_val = int(round(cfg.val_fraction * n))
    n_train = n - gap - n_val
    if n_val < 1 or n_train < 2 or gap >= n:
        raise SplitError(f"cannot split {n} rows with a gap of {gap}")
    train = np.arange(n_train)
    val = np.arange(n_train + gap, n)
    return train, val


def split_dataset(data: Dataset, cfg: TrainConfig):
    """Split pooled data by time so every segment shares the same cut."""
    if cfg.purge_gap < max(data.horizon_days):
        raise ConfigError("purge_gap must be >= the longest horizon")
    times = np.unique(data.t)
    tr, va = make_splits(times.size, cfg)
    train_idx = np.flatnonzero(data.t <= times[tr[-1]])
    val_idx = np.flatnonzero(data.t >= times[va[0]])
    return data.take(train_idx), data.take(val_idx)


def contiguous_batches(data: Dataset, batch_size: int, rng):
    """Chunks of consecutive rows within one segment, in shuffled order."""
    chunks = []
    breaks = np.flatnonzero((np.diff(data.segment) != 0) | (np.diff(data.t) != 1)) + 1
    for run in np.split(np.arange(len(data)), breaks):
        for s in range(0, run.size, batch_size):
            chunk = run[s : s + batch_size]
            if chunk.size >= 2 or run.size == 1:
                chunks.append(chunk)
    order = rng.permutation(len(chunks))
    return [chunks[i] for i in order]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _tv_pairs(data: Dataset, check: bool):
    same = data.segment[1:] == data.segment[:-1]
    if check and np.any(same & (np.diff(data.t) != 1)):
        raise BatchingError("total-variation penalty needs time-contiguous rows within each segment")
    return same


def _row_nll(batch: ParamBatch, y, omega, cfg: TrainConfig, jump: bool):
    """Per-row composite NLL and its gradient columns ``[mu, sigma, lam, *jump]``."""
    n = len(batch)
    grad = np.zeros((n, 3 + batch.jump.shape[1]))
    lg, gg = gaussian_logpdf_batch(batch.mu, batch.sigma, y, grad=True)
    nll = -omega * lg
    grad[:, 0:2] = -omega[:, None] * gg
    if jump:
        rows = np.flatnonzero(omega < 1.0)
        if rows.size:
            sub = batch.take(rows)
            lc, gc = log_density_batch(sub, y[rows], cfg.density, grad=True)
            w = 1.0 - omega[rows]
            nll[rows] -= w * lc
            grad[rows] -= w[:, None] * gc
    return nll, grad


def joint_loss(state: NetworkState, data: Dataset, cfg: TrainConfig, l2_scale=1.0, stage="joint"):
    """Loss and parameter gradients on a batch.

    ``stage="pretrain"`` drops the compound term and both penalties.
    ``l2_scale`` prorates the L2 term when the batch is a subsample.
    Returns ``(loss, grads, per_horizon_nll)``.
    """
    joint = stage == "joint"
    use_tv = joint and cfg.gamma_tv > 0
    pairs = _tv_pairs(data, check=use_tv) if use_tv else None
    out = state.forward(data.x)
    loss = 0.0
    upstream = {}
    per_h = {}
    for k, h in enumerate(state.spec.horizons):
        a = cfg.alpha[k]
        b = out.params[h]
        nll, g = _row_nll(b, data.y[h], data.omega[h], cfg, jump=joint)
        total = float(nll.sum())
        per_h[h] = total
        if use_tv:
            for col, vals in ((1, b.sigma), (2, b.lam)):
                d = np.diff(vals)[pairs]
                total += cfg.gamma_tv * float(np.abs(d).sum())
                s = np.zeros(len(vals) - 1)
                s[pairs] = np.sign(np.diff(vals)[pairs])
                g[1:, col] += cfg.gamma_tv * s
                g[:-1, col] -= cfg.gamma_tv * s
        loss += a * total
        upstream[h] = a * g
    grads = state.backward(upstream)
    if joint and cfg.gamma_l2 > 0:
        coef = cfg.gamma_l2 * l2_scale * sum(cfg.alpha)
        sq = 0.0
        for k, v in state.params.items():
            sq += float(np.sum(v * v))
            grads[k] = grads[k] + 2.0 * coef * v
        loss += coef * sq
    return loss, grads, per_h


def validation_nll(state: NetworkState, data: Dataset, cfg: TrainConfig, stage="joint"):
    """Per-horizon mean composite NLL (no penalties), inference mode."""
    mode = state.training
    state.training = False
    try:
        out = state.forward(data.x, keep_cache=False)
        res = {}
        for h in state.spec.horizons:
            nll, _ = _row_nll(out.params[h], data.y[h], data.omega[h], cfg, jump=stage == "joint")
            res[h] = float(nll.mean())
        return res
    finally:
        state.training = mode


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, state: NetworkState, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in state.params.items()}
        self.t = 0

    def step(self, state: NetworkState, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k in state.params:
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            state.params[k] = state.params[k] - c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def jump_gradient_mask(state: NetworkState):
    """Zero-one masks selecting the parameters of the lambda and jump outputs."""
    masks = {}
    for k, v in state.params.items():
        m = np.ones_like(v)
        if k.endswith(".W2") or k.endswith(".mono"):
            m[:, 2:] = 0.0
        elif k.endswith(".b2"):
            m[2:] = 0.0
        masks[k] = m
    return masks


def _run(state: NetworkState, train: Dataset, val: Dataset, cfg: TrainConfig, stage: str, epochs: int, rng):
    report = TrainReport(stage=stage)
    opt = Adam(state, cfg)
    freeze = jump_gradient_mask(state) if stage == "pretrain" else None
    best = state.copy()
    state.training = True
    n = len(train)
    bounds = np.array(state.spec.lam_bounds)
    for epoch in range(epochs):
        sums = {h: 0.0 for h in state.spec.horizons}
        norms = []
        for idx in contiguous_batches(train, cfg.batch_size, rng):
            batch = train.take(idx)
            loss, grads, per_h = joint_loss(state, batch, cfg, l2_scale=idx.size / n, stage=stage)
            if not math.isfinite(loss) or abs(loss) > DIVERGENCE_LIMIT * max(1, idx.size):
                state.training = False
                raise TrainingDivergence(f"{stage} loss {loss!r} at epoch {epoch}", snapshot=best)
            for h in sums:
                sums[h] += per_h[h]
            grads = {k: g / idx.size for k, g in grads.items()}
            if freeze is not None:
                grads = {k: g * freeze[k] for k, g in grads.items()}
            grads, norm = clip_global_norm(grads, cfg.clip_norm)
            norms.append(norm)
            opt.step(state, grads)
            state.project_constraints()
            if stage == "joint":
                for k, bound in enumerate(bounds):
                    lam = bound * logistic(state._cache["heads"][k][2][:, 2])
                    report.lam_ratio_max = max(report.lam_ratio_max, float(np.max(lam / bound)))
        report.train_loss.append({h: sums[h] / n for h in sums})
        report.grad_norms.append(float(np.mean(norms)) if norms else 0.0)
        report.violations.append(state.violations())
        vl = validation_nll(state, val, cfg, stage)
        report.val_loss.append(vl)
        total = sum(a * vl[h] for a, h in zip(cfg.alpha, state.spec.horizons))
        if not math.isfinite(total):
            state.training = False
            raise TrainingDivergence(f"{stage} validation loss not finite at epoch {epoch}", snapshot=best)
        if total < report.best_val:
            report.best_val = total
            report.best_epoch = epoch
            best = state.copy()
    state.training = False
    best.training = False
    return best, report


def pretrain_diffusion(state: NetworkState, train: Dataset, val: Dataset, cfg: TrainConfig, rng=None):
    """Stage one: omega-weighted Gaussian likelihood, jump outputs frozen."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state.reseed_dropout(cfg.seed)
    return _run(state, train, val, cfg, "pretrain", max(cfg.epochs_pretrain, 1), rng)


def train_joint(state: NetworkState, train: Dataset, val: Dataset, cfg: TrainConfig, rng=None):
    """Stage two: composite likelihood with TV and L2 penalties."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
    state.reseed_dropout(cfg.seed + 1)
    return _run(state, train, val, cfg, "joint", cfg.epochs_joint, rng)


def fit(state: NetworkState, data: Dataset, cfg: TrainConfig, pretrain=True):
    """Split, pretrain (optionally), then train jointly.  Returns ``(state, reports)``."""
    train, val = split_dataset(data, cfg)
    rng = np.random.default_rng(cfg.seed)
    reports = []
    if pretrain and cfg.epochs_pretrain > 0:
        state, rep = pretrain_diffusion(state, train, val, cfg, rng)
        reports.append(rep)
    state, rep = train_joint(state, train, val, cfg, rng)
    reports.append(rep)
    return state, reports


def grid_search(make_state, data: Dataset, cfg: TrainConfig, grid=None):
    """Train each penalty combination and keep the best validation likelihood.

    ``make_state()`` returns a freshly initialized network.  Returns
    ``(best_state, best_cfg, table)`` where ``table`` lists
    ``(gamma_tv, gamma_l2, val_nll)``.
    """
    grid = grid or {"gamma_tv": (0.0, 1e-4, 1e-3), "gamma_l2": (0.0, 1e-4, 1e-3)}
    best = None
    table = []
    for gtv, gl2 in itertools.product(grid["gamma_tv"], grid["gamma_l2"]):
        c = replace(cfg, gamma_tv=gtv, gamma_l2=gl2)
        state, reports = fit(make_state(), data, c)
        score = reports[-1].best_val
        table.append((gtv, gl2, score))
        if best is None or score < best[2]:
            best = (state, c, score)
    return best[0], best[1], table


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

MODEL_INPUTS = (
    "ret_lag0",
    "ret_lag1",
    "ret_lag2",
    "ret_lag3",
    "ret_lag4",
    "momentum_5d",
    "momentum_1m",
    "roll_vol",
    "volume_z",
    "entropy_z",
    "det_z",
    "rv",
    "bv",
    "jump_var_20d",
    "omega",
)
SQRT_INPUTS = ("rv", "bv", "jump_var_20d")


def model_inputs(fm, columns=MODEL_INPUTS):
    """Raw model inputs from a feature matrix; variance columns enter as square roots."""
    cols = []
    for name in columns:
        v = fm.column(name)
        cols.append(np.sqrt(np.maximum(v, 0.0)) if name in SQRT_INPUTS else v)
    return np.column_stack(cols)


def dataset_from_features(fm, daily_returns, horizons, horizon_days, segment=0, columns=MODEL_INPUTS):
    """Rows of ``fm`` whose every horizon target lies inside the sample.

    Each row keeps its own bipower weight ``omega_t`` for every horizon.
    The weight is known at time t, so it does not select on the target.
    """
    r = np.asarray(daily_returns, dtype=float)
    t = np.asarray(fm.t)
    x = model_inputs(fm, columns)
    omega = fm.column("omega")
    ys = {}
    keep = np.ones(len(fm), dtype=bool)
    for h, d in zip(horizons, horizon_days):
        y = np.full(r.size, np.nan)
        if r.size > d:
            y[: r.size - d] = np.lib.stride_tricks.sliding_window_view(r[1:], d).sum(axis=1)
        ys[h] = y[t]
        keep &= np.isfinite(ys[h])
    return Dataset(
        x[keep],
        {h: v[keep] for h, v in ys.items()},
        {h: omega[keep].copy() for h in horizons},
        t[keep],
        np.full(int(keep.sum()), segment),
        tuple(horizons),
        tuple(horizon_days),
    )


def concat_datasets(parts):
    first = parts[0]
    return Dataset(
        np.concatenate([p.x for p in parts]),
        {h: np.concatenate([p.y[h] for p in parts]) for h in first.horizons},
        {h: np.concatenate([p.omega[h] for p in parts]) for h in first.horizons},
        np.concatenate([p.t for p in parts]),
        np.concatenate([p.segment for p in parts]),
        first.horizons,
        first.horizon_days,
    )


def standardize(data: Dataset, standardizer):
    return Dataset(standardizer.transform(data.x), data.y, data.omega, data.t, data.segment, data.horizons,
                   data.horizon_days)
