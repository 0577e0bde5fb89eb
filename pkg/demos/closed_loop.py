"""Closed-loop recovery on data with a known generating law.

A persistent latent state switches the jump intensity between a calm and a
stressed level.  The network never sees the state; it only sees features of
the simulated prices.  After training we compare the forecast intensity and
volatility in the two regimes with the values that generated the data.

    python demos/closed_loop.py
"""

import math

import numpy as np
from scipy import stats

from neurojump.density import GaussianMixture2
from neurojump.features import Standardizer, build_features
from neurojump.neuralnet import NetworkSpec, init_network
from neurojump.simlab import GroundTruthMaps, SimConfig, StateDynamics, simulate_path
from neurojump.training import MODEL_INPUTS, TrainConfig, dataset_from_features, fit, split_dataset, standardize

CALM, STRESSED = 12.6, 100.8  # jumps per year
VOL = 0.16
JUMPS = GaussianMixture2(0.5, -0.03, 0.03, 0.01, 0.01)


def main():
    maps = GroundTruthMaps(lambda s: 0.0, lambda s: VOL, lambda s: STRESSED if s > 0 else CALM, JUMPS,
                           StateDynamics(0.0, 0.98, 0.2))
    path = simulate_path(SimConfig(4000, maps, seed=1))
    print(f"simulated {len(path.daily_returns)} days, {path.jump_sizes.size} jumps")

    data = dataset_from_features(build_features(path), path.daily_returns, ("1d", "1w"), (1, 5))
    cfg = TrainConfig(seed=0)
    train, _ = split_dataset(data, cfg)
    data = standardize(data, Standardizer().fit(train.x))
    train, val = split_dataset(data, cfg)
    spec = NetworkSpec(input_dim=data.x.shape[1], horizons=("1d", "1w"),
                       entropy_idx=MODEL_INPUTS.index("entropy_z"), det_idx=MODEL_INPUTS.index("det_z"),
                       momentum_idx=MODEL_INPUTS.index("momentum_5d"),
                       out_scales=tuple(float(np.std(train.y[h])) for h in data.horizons))
    state, reports = fit(init_network(spec, 0), data, cfg)
    for r in reports:
        print(f"{r.stage}: best validation loss {r.best_val:.4f} at epoch {r.best_epoch}")

    out = state.forward(val.x, keep_cache=False).params["1d"]
    stressed = path.intensity[val.t + 1] > (CALM + STRESSED) / 2
    print("\nregime     days   true lambda/day   forecast lambda/day   forecast sigma   true sigma")
    for name, mask, lam in (("calm", ~stressed, CALM), ("stressed", stressed, STRESSED)):
        print(f"{name:<9} {mask.sum():>5} {lam / 252:>17.4f} {out.lam[mask].mean():>21.4f}"
              f" {out.sigma[mask].mean():>16.4f} {VOL / math.sqrt(252):>12.4f}")
    m = int(min(stressed.sum(), (~stressed).sum()))
    wins = int(np.sum(out.lam[stressed][:m] > out.lam[~stressed][:m]))
    print(f"\nsign test, stressed above calm: {wins}/{m}, "
          f"p = {stats.binomtest(wins, m, alternative='greater').pvalue:.2e}")
    print("The ordering of the regimes is recovered.  The levels are not: the composite loss lets the")
    print("Gaussian part absorb much of the jump variance, so sigma runs high and lambda low.")


if __name__ == "__main__":
    main()
