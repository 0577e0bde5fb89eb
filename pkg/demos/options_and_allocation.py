"""From forecast heads to option prices and portfolio weights.

Three assets get hand-written one-week forecast heads with different jump
risk.  Each head is moved to the pricing measure in two ways and priced on a
strike grid.  The grid is checked for static arbitrage.  The same heads then
supply the signal and risk inputs for one rebalance, with and without the
intensity gate.

    python demos/options_and_allocation.py
"""

import math

import numpy as np

from neurojump.density import DensityConfig, DoubleExponential, GaussianMixture2, HorizonParams, moments
from neurojump.portfolio import PortfolioConfig, intensity_gate, optimize, signal_isj
from neurojump.riskneutral import call_prices, risk_neutralize, static_noarb_check

RATE = 0.03
CFG = DensityConfig(k_max=25)
HEADS = {
    "quiet": HorizonParams(0.0015, 0.020, 0.05, GaussianMixture2(0.5, -0.02, 0.02, 0.01, 0.01), "1w"),
    "crashy": HorizonParams(0.0030, 0.025, 0.60, GaussianMixture2(0.7, -0.06, 0.02, 0.02, 0.01), "1w"),
    "skewed": HorizonParams(0.0020, 0.022, 0.25, DoubleExponential(0.3, 0.02, 0.04), "1w"),
}


def main():
    strikes = np.linspace(0.85, 1.15, 7)
    print("one-week calls, spot 1, strikes " + " ".join(f"{k:.2f}" for k in strikes))
    for name, head in HEADS.items():
        for mode in ("drift-shift", "esscher"):
            grid, disc = [], []
            for weeks in (1, 4, 13):
                R = RATE * weeks / 52
                scaled = head.replace(mu=head.mu * weeks, sigma=head.sigma * math.sqrt(weeks), lam=head.lam * weeks)
                tilt = risk_neutralize(scaled, R, mode)
                grid.append(call_prices(tilt.q_params, strikes, R, cfg=CFG))
                disc.append(math.exp(-R))
            report = static_noarb_check(np.array(grid), strikes, np.array(disc))
            print(f"  {name:<7} {mode:<12} " + " ".join(f"{c:.4f}" for c in grid[0])
                  + f"   arbitrage-free over 1-13 weeks: {report.ok}")

    alpha = np.array([signal_isj(h) for h in HEADS.values()])
    var = np.array([moments(h)[1] for h in HEADS.values()])
    cfg = PortfolioConfig(risk_aversion=3.0, cost=0.001, turnover_max=0.5, weight_cap=0.6)
    prev = np.full(3, 1 / 3)
    res = optimize(alpha, np.diag(var), prev, cfg)
    lam = np.mean([h.lam for h in HEADS.values()])
    print("\nasset    ISJ signal   variance   weight")
    for name, a, v, w in zip(HEADS, alpha, var, res.weights):
        print(f"{name:<7} {a:>11.4f} {v:>10.5f} {w:>8.3f}")
    print(f"turnover {res.turnover:.3f}, KKT residual {res.kkt_residual:.1e}")
    for threshold in (0.5, 0.2):
        gated = intensity_gate(res.weights, lam, threshold, mode="scale")
        print(f"scaled gate at mean lambda {lam:.2f} vs threshold {threshold}: exposure {gated.sum():.3f}")


if __name__ == "__main__":
    main()
