"""Benchmark forecasters that share the neural model's evaluation path.

* ``diffusion``: the same network trained on the Gaussian likelihood with
  every observation weighted as diffusive; forecasts carry zero intensity.
* ``merton``: one state-independent jump-diffusion per horizon fitted by
  maximizing the same truncated likelihood.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from ..density import DensityConfig, HorizonParams, ParamBatch, jump_from_array, log_density_batch
from ..errors import NumericalError
from ..neuralnet import NetworkState
from ..training import Dataset, TrainConfig, pretrain_diffusion, split_dataset


def fit_diffusion_only(state: NetworkState, data: Dataset, cfg: TrainConfig):
    """Gaussian-only training of ``state`` for the combined epoch budget."""
    ones = {h: np.ones(len(data)) for h in data.horizons}
    gaussian = dataclasses.replace(data, omega=ones)
    train, val = split_dataset(gaussian, cfg)
    c = dataclasses.replace(cfg, epochs_pretrain=cfg.epochs_pretrain + cfg.epochs_joint)
    return pretrain_diffusion(state, train, val, c, np.random.default_rng(cfg.seed))


def diffusion_params(batch: ParamBatch, i, h):
    """Row ``i`` of a diffusion-only forecast with the jump channel switched off."""
    p = batch.row(i, h)
    return p.replace(lam=0.0)


# ---------------------------------------------------------------------------
# Constant-parameter jump-diffusion
# ---------------------------------------------------------------------------


def _unpack(theta, family, lam_bound):
    mu, log_sigma, lam_raw = (float(v) for v in theta[:3])
    sigma = math.exp(log_sigma)
    lam = lam_bound * float(expit(lam_raw))
    j = [float(v) for v in theta[3:]]
    if family == "gmm":
        jump = (float(expit(j[0])), j[1], j[2], math.exp(j[3]), math.exp(j[4]))
    else:
        jump = (float(expit(j[0])), math.exp(j[1]), math.exp(j[2]))
    return mu, sigma, lam, jump


def fit_constant(y, family, lam_bound, k_max=3, renormalize=True, h="1d"):
    """Maximum truncated-likelihood fit of constant parameters to returns ``y``.

    Parameters
    ----------
    y : ndarray
        Horizon returns.
    family : {"gmm", "dexp"}
    lam_bound : float
        Upper bound on the intensity, as for the network heads.

    Returns
    -------
    HorizonParams
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    sd = float(np.std(y))
    cfg = DensityConfig(k_max=k_max, renormalize=renormalize)
    start_lam = float(logit(min(0.1, 0.5 * lam_bound) / lam_bound))
    theta0 = [float(np.mean(y)), math.log(0.8 * sd), start_lam]
    if family == "gmm":
        theta0 += [0.0, -2.0 * sd, 2.0 * sd, math.log(sd), math.log(sd)]
    else:
        theta0 += [0.0, math.log(2.0 * sd), math.log(2.0 * sd)]
    theta0 = np.array(theta0)

    def nll(theta):
        mu, sigma, lam, jump = _unpack(theta, family, lam_bound)
        batch = ParamBatch(family, np.full(n, mu), np.full(n, sigma), np.full(n, lam), np.tile(jump, (n, 1)))
        with np.errstate(all="ignore"):
            val = -float(np.sum(log_density_batch(batch, y, cfg)[0]))
        return val if math.isfinite(val) else 1e300

    best = None
    for method in ("L-BFGS-B", "Nelder-Mead"):
        res = minimize(nll, theta0 if best is None else best.x, method=method,
                       options={"maxiter": 2000} if method == "Nelder-Mead" else {"maxiter": 500})
        if best is None or res.fun < best.fun:
            best = res
    if not math.isfinite(best.fun) or best.fun >= 1e300:
        raise NumericalError("constant jump-diffusion fit did not reach a finite likelihood")
    mu, sigma, lam, jump = _unpack(best.x, family, lam_bound)
    return HorizonParams(mu, sigma, lam, jump_from_array(family, jump), h)


def constant_to_dict(p: HorizonParams):
    return {"mu": p.mu, "sigma": p.sigma, "lam": p.lam, "family": p.family, "jump": list(p.jump.to_array()),
            "h": p.h}


def constant_from_dict(d):
    return HorizonParams(d["mu"], d["sigma"], d["lam"], jump_from_array(d["family"], d["jump"]), d["h"])
