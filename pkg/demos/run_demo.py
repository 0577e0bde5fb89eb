"""End-to-end run on simulated data.

Simulates three assets with jumps, builds features, trains the network and
two baselines, scores the forecasts, checks the risk-neutral measure and the
option surface, and backtests the gated allocation.  Everything lands under
``runs/demo`` together with a manifest of artifact hashes.

    python demos/run_demo.py [out_dir]
"""

import csv
import json
import sys
from pathlib import Path

from neurojump.workbench.config import load_config
from neurojump.workbench.pipeline import run_pipeline

HERE = Path(__file__).resolve().parent


def show_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(_fmt(r[i])) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  " + "  ".join(_fmt(v).rjust(w) for v, w in zip(r, widths)))


def _fmt(v):
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v


def main(argv):
    cfg = load_config(HERE / "demo.toml")
    out = Path(argv[1]) if len(argv) > 1 else None
    status, manifest = run_pipeline(cfg, out_dir=out, log=print)
    root = Path(out or cfg.out_dir)
    print(f"\n{len(manifest['artifacts'])} artifacts under {root}")

    for h in ("1d", "1w"):
        print(f"\nForecast scores, horizon {h} (log score higher is better, CRPS lower is better)")
        show_csv(root / "report" / f"core_{h}.csv")
        print(f"Diebold-Mariano against the network, horizon {h} (negative favours the network)")
        show_csv(root / "report" / f"dm_{h}.csv")

    rn = json.loads((root / "riskneutral" / "summary.json").read_text())
    surface = json.loads((root / "surface" / "summary.json").read_text())
    print(f"\nRisk-neutral heads: max martingale residual {rn['max_residual']:.1e}")
    print(f"Option surface: {surface}")

    print("\nWeekly VaR backtest of the strategies")
    show_csv(root / "report" / "var.csv")
    summary = json.loads((root / "backtest" / "summary.json").read_text())
    print("\nStrategy      final equity   Sharpe   max drawdown   turnover   gated")
    for name, s in summary["strategies"].items():
        print(f"{name:<12} {s['final_equity']:>13.3f} {s['sharpe']:>8.3f} {s['max_drawdown']:>14.3f}"
              f" {s['turnover']:>10.2f} {s['gated']:>7d}")
    return status


if __name__ == "__main__":
    sys.exit(main(sys.argv))
