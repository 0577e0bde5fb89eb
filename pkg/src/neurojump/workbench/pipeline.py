"""Stage-by-stage orchestration over an output directory.

Each stage reads what earlier stages wrote under ``out_dir`` and writes its
own files, so CLI verbs can run stages individually.  ``run_pipeline`` runs
them in order and writes ``manifest.json`` with file hashes, seeds, library
versions and timings.  Row indices ``t`` are positions in each asset's daily
series.
"""

from __future__ import annotations

import dataclasses
import math
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from ..density import DensityConfig, jump_from_array, moments
from ..errors import IngestionError, NeuroJumpError, NumericalError, StripError
from ..evaluation import (
    ForecastRecord,
    christoffersen,
    crps_scores,
    drawdown_stats,
    kupiec,
    log_scores,
    risk_report,
)
from ..features import ComplexityConfig, FeatureMatrix, Standardizer, build_features
from ..neuralnet import NetworkSpec, init_network, load, save
from ..portfolio import PortfolioConfig, run_strategy, signal_downside, signal_isj
from ..riskneutral import call_prices, risk_neutralize, static_noarb_check
from ..simlab import SimConfig, StateDynamics, logistic_maps, simulate_path, write_csv
from ..training import MODEL_INPUTS, TrainConfig, concat_datasets, dataset_from_features, fit, grid_search
from ..training import standardize as standardize_dataset
from . import baselines
from .config import PipelineConfig, annual_to_period, stage_seed
from .io import (
    DAILY_SCHEMA,
    ForecastRow,
    ingest_csv,
    read_forecasts,
    read_intraday,
    read_json,
    read_table,
    sha256_file,
    write_forecasts,
    write_json,
    write_table,
)
from .report import emit_report

STAGES = ("simulate", "featurize", "train", "forecast", "riskneutralize", "checksurface", "evaluate", "backtest",
          "report")
MODELS = ("neural", "diffusion", "merton")
DAILY_EXTRA = ("log_price", "state", "jump_flag", "jump_sum", "volume")


class StageError(NeuroJumpError):
    """A stage failed; wraps the original error and keeps its exit code."""

    def __init__(self, stage, error):
        super().__init__(f"stage {stage!r} failed: {error}")
        self.stage = stage
        self.error = error
        self.exit_code = getattr(error, "exit_code", 1)


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts):
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def daily(self, a):
        return self.path("data", f"asset{a}_daily.csv")

    def intraday(self, a):
        return self.path("data", f"asset{a}_intraday.csv")

    def features(self, a):
        return self.path("features", f"asset{a}.csv")

    def rel(self, p):
        return str(Path(p).relative_to(self.root))


def _daily_sources(cfg: PipelineConfig, ws: Workspace):
    if cfg.data.daily_csv:
        intra = cfg.data.intraday_csv or (None,) * len(cfg.data.daily_csv)
        return [(Path(d), Path(i) if i else None) for d, i in zip(cfg.data.daily_csv, intra)]
    return [(ws.daily(a), ws.intraday(a)) for a in range(cfg.n_assets)]


def check_inputs(cfg: PipelineConfig):
    """Fail fast on referenced input files that do not exist."""
    for p in tuple(cfg.data.daily_csv) + tuple(cfg.data.intraday_csv):
        if not Path(p).is_file():
            raise IngestionError(f"input file not found: {p}")


def _jump_law(family, params):
    return jump_from_array(family, params)


def _density_cfg(meta):
    return DensityConfig(k_max=meta["k_max"], renormalize=meta["renormalize"])


def _crps_method(cfg: PipelineConfig, family):
    m = cfg.evaluation.crps_method
    if m == "auto" and family == "gmm":
        return "closed"
    return m


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_simulate(cfg: PipelineConfig, ws: Workspace):
    if cfg.data.daily_csv:
        return []
    s = cfg.simulate
    law = _jump_law(s.jump_family, s.jump_params)
    maps = logistic_maps(law, drift=s.drift, vol_base=s.vol_base, vol_slope=s.vol_slope, lam_low=s.lam_low,
                         lam_high=s.lam_high, dynamics=StateDynamics(0.0, s.persistence, s.state_noise))
    out = []
    for a in range(cfg.n_assets):
        path = simulate_path(SimConfig(s.n_days, maps, seed=stage_seed(cfg.run.seed, f"simulate/{a}"),
                                       intraday_steps=s.intraday_steps))
        write_csv(path, ws.daily(a), ws.intraday(a))
        truth = ws.path("data", f"asset{a}_truth.csv")
        write_table(truth, ("t", "state", "drift", "vol", "intensity"),
                    zip(range(path.n_days), path.state_series, path.drift, path.vol, path.intensity))
        out += [ws.daily(a), ws.intraday(a), truth]
    return out


def _load_daily(path):
    cols = ingest_csv(path, DAILY_SCHEMA, time_column="date_index", known_extra=DAILY_EXTRA)
    return cols["date_index"], cols["daily_return"]


def stage_featurize(cfg: PipelineConfig, ws: Workspace):
    ccfg = ComplexityConfig(**dataclasses.asdict(cfg.features))
    out = []
    for a, (daily, intra) in enumerate(_daily_sources(cfg, ws)):
        days, r = _load_daily(daily)
        intraday = read_intraday(intra, days) if intra is not None and Path(intra).is_file() else None
        fm = build_features(r, intraday, ccfg)
        fm.to_csv(ws.features(a))
        out.append(ws.features(a))
    return out


def _datasets(cfg: PipelineConfig, ws: Workspace):
    parts, fms, rets = [], [], []
    for a, (daily, _) in enumerate(_daily_sources(cfg, ws)):
        _, r = _load_daily(daily)
        fm = FeatureMatrix.from_csv(ws.features(a))
        parts.append(dataset_from_features(fm, r, cfg.horizon_labels, cfg.horizon_days, segment=a))
        fms.append(fm)
        rets.append(r)
    return parts, fms, rets


def _train_cut(cfg: PipelineConfig, data):
    times = np.unique(data.t)
    cut = int(times[int(cfg.run.train_fraction * times.size)])
    return cut, cut - max(cfg.horizon_days)  # training targets end before the test block starts


def _train_config(cfg: PipelineConfig, renormalize=None):
    t = cfg.train
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    kwargs = {k: v for k, v in dataclasses.asdict(t).items() if k in fields and k != "alpha"}
    kwargs["alpha"] = t.alpha or (1.0,) * len(cfg.horizons)
    kwargs["seed"] = stage_seed(cfg.run.seed, "train")
    if renormalize is not None:
        kwargs["renormalize"] = renormalize
    return TrainConfig(**kwargs)


def stage_train(cfg: PipelineConfig, ws: Workspace, renormalize=None):
    parts, _, _ = _datasets(cfg, ws)
    data = concat_datasets(parts)
    cut, train_end = _train_cut(cfg, data)
    train = data.take(np.flatnonzero(data.t < train_end))
    std = Standardizer().fit(train.x)
    train = standardize_dataset(train, std)
    tc = _train_config(cfg, renormalize)
    scales = tuple(float(np.std(train.y[h])) for h in cfg.horizon_labels)
    spec = NetworkSpec(
        input_dim=train.x.shape[1],
        entropy_idx=MODEL_INPUTS.index("entropy_z"),
        det_idx=MODEL_INPUTS.index("det_z"),
        momentum_idx=MODEL_INPUTS.index("momentum_5d"),
        encoder_layers=cfg.network.encoder_layers,
        head_hidden=cfg.network.head_hidden,
        horizons=cfg.horizon_labels,
        lam_bounds=cfg.lam_bounds(),
        out_scales=scales,
        dropout_rate=cfg.network.dropout_rate,
        jump_family=cfg.network.jump_family,
    )
    net_seed = stage_seed(cfg.run.seed, "network")
    table = []
    if cfg.train.grid_search:
        grid = {"gamma_tv": cfg.train.grid_gamma_tv, "gamma_l2": cfg.train.grid_gamma_l2}
        neural, tc, table = grid_search(lambda: init_network(spec, net_seed), train, tc, grid)
        _, reports = fit(init_network(spec, net_seed), train, tc)
    else:
        neural, reports = fit(init_network(spec, net_seed), train, tc)
    diffusion, diff_report = baselines.fit_diffusion_only(init_network(spec, net_seed), train, tc)
    merton = {
        h: baselines.constant_to_dict(
            baselines.fit_constant(train.y[h], cfg.network.jump_family, b, tc.k_max, tc.renormalize, h))
        for h, b in zip(cfg.horizon_labels, cfg.lam_bounds())
    }
    out = [ws.path("models", "neural.net"), ws.path("models", "diffusion.net"), ws.path("models", "merton.json"),
           ws.path("models", "meta.json"), ws.path("models", "train_report.json")]
    out[0].write_bytes(save(neural))
    out[1].write_bytes(save(diffusion))
    write_json(out[2], merton)
    write_json(out[3], {
        "columns": list(MODEL_INPUTS),
        "mean": std.mean,
        "scale": std.scale,
        "cut": cut,
        "train_end": train_end,
        "k_max": tc.k_max,
        "renormalize": tc.renormalize,
        "gamma_tv": tc.gamma_tv,
        "gamma_l2": tc.gamma_l2,
        "grid": [list(r) for r in table],
    })
    write_json(out[4], {"neural": [dataclasses.asdict(r) for r in reports],
                        "diffusion": dataclasses.asdict(diff_report)})
    return out


def stage_forecast(cfg: PipelineConfig, ws: Workspace):
    meta = read_json(ws.path("models", "meta.json"))
    std = Standardizer(meta["mean"], meta["scale"])
    neural = load(ws.path("models", "neural.net").read_bytes())
    diffusion = load(ws.path("models", "diffusion.net").read_bytes())
    merton = {h: baselines.constant_from_dict(d) for h, d in read_json(ws.path("models", "merton.json")).items()}
    parts, _, _ = _datasets(cfg, ws)
    rows = {m: [] for m in MODELS}
    train_lam = {h: {} for h in cfg.horizon_labels}
    for a, part in enumerate(parts):
        x = std.transform(part.x)
        out_n = neural.forward(x, keep_cache=False)
        out_d = diffusion.forward(x, keep_cache=False)
        test = part.t >= meta["cut"]
        for h in cfg.horizon_labels:
            for i in np.flatnonzero(part.t < meta["train_end"]):
                train_lam[h].setdefault(int(part.t[i]), []).append(float(out_n.params[h].lam[i]))
            for i in np.flatnonzero(test):
                t, y = int(part.t[i]), float(part.y[h][i])
                rows["neural"].append(ForecastRow(t, a, h, "neural", "P", out_n.params[h].row(i, h), y))
                rows["diffusion"].append(
                    ForecastRow(t, a, h, "diffusion", "P", baselines.diffusion_params(out_d.params[h], i, h), y))
                rows["merton"].append(ForecastRow(t, a, h, "merton", "P", merton[h], y))
    out = []
    for m in MODELS:
        p = ws.path("forecasts", f"{m}.csv")
        write_forecasts(p, rows[m])
        out.append(p)
    # gate thresholds act on the cross-sectional mean intensity
    thresholds = {h: float(np.quantile([np.mean(v) for v in train_lam[h].values()], cfg.portfolio.gate_percentile))
                  for h in cfg.horizon_labels}
    p = ws.path("forecasts", "gate_thresholds.json")
    write_json(p, thresholds)
    out.append(p)
    return out


def stage_riskneutralize(cfg: PipelineConfig, ws: Workspace, mode=None):
    rn = cfg.riskneutral
    mode = mode or rn.mode
    days = dict(cfg.horizons)
    rows, failures, residuals = [], [], []
    for r in read_forecasts(ws.path("forecasts", "neural.csv")):
        R = annual_to_period(rn.rate_annual - rn.dividend_annual, days[r.horizon])
        try:
            res = risk_neutralize(r.params, R, mode, rn.tol)
        except (StripError, NumericalError) as exc:
            failures.append((r.t, r.asset, r.horizon, type(exc).__name__, str(exc)))
            continue
        residuals.append(abs(res.martingale_residual))
        rows.append(ForecastRow(r.t, r.asset, r.horizon, "neural", "Q", res.q_params, r.realized))
    out = [ws.path("forecasts", "neural_Q.csv"), ws.path("riskneutral", "failures.csv"),
           ws.path("riskneutral", "summary.json")]
    write_forecasts(out[0], rows)
    write_table(out[1], ("t", "asset", "horizon", "error", "message"), failures)
    write_json(out[2], {"mode": mode, "converted": len(rows), "failed": len(failures),
                        "max_residual": max(residuals, default=0.0)})
    return out


def stage_checksurface(cfg: PipelineConfig, ws: Workspace):
    rn = cfg.riskneutral
    days = dict(cfg.horizons)
    by_key = {}
    for r in read_forecasts(ws.path("forecasts", "neural_Q.csv")):
        by_key.setdefault((r.asset, r.t), {})[r.horizon] = r.params
    order = sorted(cfg.horizon_labels, key=lambda h: days[h])
    strikes = np.linspace(rn.strikes_lo, rn.strikes_hi, rn.n_strikes)
    dcfg = DensityConfig(k_max=rn.k_max)
    rows, notices, checked = [], set(), 0
    for a in range(cfg.n_assets):
        dates = sorted(t for (aa, t), v in by_key.items() if aa == a and len(v) == len(order))
        if not dates:
            continue
        pick = np.unique(np.linspace(0, len(dates) - 1, min(rn.surface_dates, len(dates))).round().astype(int))
        for i in pick:
            t = dates[i]
            grid, disc = [], []
            for h in order:
                R = annual_to_period(rn.rate_annual - rn.dividend_annual, days[h])
                grid.append(call_prices(by_key[(a, t)][h], strikes, R, cfg=dcfg))
                disc.append(math.exp(-annual_to_period(rn.rate_annual, days[h])))
            report = static_noarb_check(np.array(grid), strikes, np.array(disc), rn.surface_tol)
            checked += 1
            notices.update(report.notices)
            for v in report.violations:
                rows.append((a, t, v.kind, order[v.maturity], float(strikes[v.strike]), v.magnitude))
    out = [ws.path("surface", "violations.csv"), ws.path("surface", "summary.json")]
    write_table(out[0], ("asset", "t", "kind", "maturity", "strike", "magnitude"), rows)
    kinds = sorted({r[2] for r in rows})
    write_json(out[1], {"surfaces": checked, "violations": len(rows),
                        "by_kind": {k: sum(r[2] == k for r in rows) for k in kinds}, "notices": sorted(notices)})
    return out


def _records(rows, horizon, step):
    """Records of one horizon, ordered by asset then time, thinned to non-overlapping targets."""
    sel = sorted((r for r in rows if r.horizon == horizon), key=lambda r: (r.asset, r.t))
    out = []
    first = {}
    for r in sel:
        t0 = first.setdefault(r.asset, r.t)
        if (r.t - t0) % step == 0:
            out.append(r)
    return out


def stage_evaluate(cfg: PipelineConfig, ws: Workspace):
    meta = read_json(ws.path("models", "meta.json"))
    dcfg = _density_cfg(meta)
    days = dict(cfg.horizons)
    forecasts = {m: read_forecasts(ws.path("forecasts", f"{m}.csv")) for m in MODELS}
    out = []
    for h in cfg.horizon_labels:
        score_cols, keys = {}, None
        for m in MODELS:
            rows = _records(forecasts[m], h, days[h])
            recs = [ForecastRecord(r.t, h, r.params, r.realized) for r in rows]
            if keys is None:
                keys = [(r.asset, r.t) for r in rows]
            method = _crps_method(cfg, recs[0].params.family)
            rep = risk_report(recs, dcfg, levels=cfg.evaluation.levels, reps=cfg.evaluation.reps,
                              seed=stage_seed(cfg.run.seed, f"evaluate/{m}/{h}"), crps_method=method)
            d = dataclasses.asdict(rep)
            d["n"] = len(recs)
            for bt in d["backtests"]:
                bt.pop("var")
                bt.pop("es")
            p = ws.path("evaluation", f"{m}_{h}.json")
            write_json(p, d)
            out.append(p)
            score_cols[f"logscore_{m}"] = log_scores(recs, dcfg)
            score_cols[f"crps_{m}"] = crps_scores(recs, dcfg, method)
        p = ws.path("evaluation", f"scores_{h}.csv")
        header = ("asset", "t") + tuple(score_cols)
        write_table(p, header, ([a, t] + [float(score_cols[c][i]) for c in score_cols] for i, (a, t) in
                                enumerate(keys)))
        out.append(p)
    return out


def _hs_var_backtest(returns, window, level):
    """Historical-simulation VaR from the trailing window, with coverage tests."""
    r = np.asarray(returns, dtype=float)
    if r.size <= window:
        return None
    var = np.array([np.quantile(r[t - window:t], 1.0 - level) for t in range(window, r.size)])
    hits = r[window:] < var
    lr_uc, p_uc = kupiec(hits, 1.0 - level)
    lr_ind, p_ind, lr_cc, p_cc = christoffersen(hits, 1.0 - level)
    return {"n": int(hits.size), "breaches": int(hits.sum()), "breach_rate": float(hits.mean()), "kupiec_p": p_uc,
            "indep_p": p_ind, "cc_p": p_cc}


def stage_backtest(cfg: PipelineConfig, ws: Workspace):
    pc = cfg.portfolio
    h = pc.horizon
    d = dict(cfg.horizons)[h]
    n = cfg.n_assets
    thresholds = read_json(ws.path("forecasts", "gate_thresholds.json"))
    fc = {m: {(r.asset, r.t): r for r in read_forecasts(ws.path("forecasts", f"{m}.csv")) if r.horizon == h}
          for m in ("neural", "diffusion")}
    dates = sorted({t for (_, t) in fc["neural"]})
    dates = [t for t in dates if all((a, t) in fc["neural"] for a in range(n))]
    dates = dates[::d]
    realized = np.array([[math.expm1(fc["neural"][(a, t)].realized) for a in range(n)] for t in dates])
    port = PortfolioConfig(risk_aversion=pc.risk_aversion, cost=pc.cost, turnover_max=pc.turnover_max,
                           weight_cap=pc.weight_cap, band=pc.band, downside_aversion=pc.downside_aversion,
                           gate_percentile=pc.gate_percentile, gate_mode=pc.gate_mode)

    def inputs(model):
        sig = np.zeros((len(dates), n))
        var = np.zeros((len(dates), n))
        lam = np.zeros((len(dates), n))
        for i, t in enumerate(dates):
            for a in range(n):
                p = fc[model][(a, t)].params
                sig[i, a] = signal_isj(p) if pc.signal == "isj" else signal_downside(p, pc.downside_aversion)
                var[i, a] = moments(p)[1]
                lam[i, a] = p.lam
        return sig, var, lam

    runs = {}
    sig, var, lam = inputs("neural")
    runs["neural"] = run_strategy(sig, var, lam, realized, port, thresholds[h])
    sig_d, var_d, lam_d = inputs("diffusion")
    runs["diff"] = run_strategy(sig_d, var_d, lam_d, realized, dataclasses.replace(port, gate_mode="off"), math.inf)
    # fixed-rule books: inverse-variance risk parity and an equal-weight market proxy
    fixed = {"rp": (1.0 / var_d) / (1.0 / var_d).sum(axis=1, keepdims=True), "ew": np.full((len(dates), n), 1.0 / n)}
    for name, W in fixed.items():
        prev = np.vstack([np.full(n, 1.0 / n), W[:-1]])
        turn = np.abs(W - prev).sum(axis=1)
        rets = (W * realized).sum(axis=1) - pc.cost * turn
        runs[name] = dataclasses.make_dataclass("Run", ["weights", "returns", "equity", "turnover", "gated", "held"])(
            W, rets, np.cumprod(1 + rets), turn, np.zeros(len(dates), bool), np.zeros(len(dates), bool))

    out = []
    periods = 252.0 / d
    summary, var_rows = {}, []
    for name, run in runs.items():
        p = ws.path("backtest", f"weights_{name}.csv")
        write_table(p, ("t",) + tuple(f"w{a}" for a in range(n)), ([t] + list(w) for t, w in zip(dates, run.weights)))
        out.append(p)
        p = ws.path("backtest", f"log_{name}.csv")
        write_table(p, ("t", "return", "equity", "turnover", "gated", "held"),
                    zip(dates, run.returns, run.equity, run.turnover, run.gated, run.held))
        out.append(p)
        sd = float(np.std(run.returns, ddof=1))
        mdd, dur = drawdown_stats(run.equity)
        tests = {lv: _hs_var_backtest(run.returns, pc.hs_window, lv) for lv in cfg.evaluation.levels}
        summary[name] = {
            "periods": len(dates),
            "mean_return": float(np.mean(run.returns)),
            "sharpe": float(np.mean(run.returns) / sd * math.sqrt(periods)) if sd > 0 else 0.0,
            "max_drawdown": mdd,
            "drawdown_duration": dur,
            "turnover": float(np.sum(run.turnover)),
            "gated": int(np.sum(run.gated)),
            "held": int(np.sum(run.held)),
            "final_equity": float(run.equity[-1]),
            "hs_var": {str(lv): t for lv, t in tests.items()},
        }
        row = [name]
        for lv in cfg.evaluation.levels:
            t = tests[lv]
            row += [t["breach_rate"], t["kupiec_p"], t["indep_p"], t["cc_p"]] if t else [math.nan] * 4
        var_rows.append(row)
    p = ws.path("backtest", "summary.json")
    write_json(p, {"horizon": h, "threshold": thresholds[h], "strategies": summary})
    out.append(p)
    header = ["model"]
    for lv in cfg.evaluation.levels:
        pct = f"{100 * lv:g}"
        header += [f"VaR{pct} breach", f"Kupiec p ({pct})", f"Indep. p ({pct})", f"Cond. p ({pct})"]
    p = ws.path("backtest", "var_table.csv")
    write_table(p, header, var_rows)
    out.append(p)
    return out


def stage_report(cfg: PipelineConfig, ws: Workspace):
    metrics, scores = {}, {}
    for h in cfg.horizon_labels:
        metrics[h] = {m: read_json(ws.path("evaluation", f"{m}_{h}.json")) for m in MODELS}
        header, rows = read_table(ws.path("evaluation", f"scores_{h}.csv"))
        cols = {name: np.array([float(r[j]) for r in rows]) for j, name in enumerate(header) if j >= 2}
        scores[h] = {m: {"logscore": cols[f"logscore_{m}"], "crps": cols[f"crps_{m}"]} for m in MODELS}
    var_path = ws.path("backtest", "var_table.csv")
    var_table = read_table(var_path) if var_path.is_file() else None
    return emit_report(metrics, ws.path("report", "x").parent, reference=cfg.evaluation.reference, scores=scores,
                       var_table=var_table)


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "featurize": stage_featurize,
    "train": stage_train,
    "forecast": stage_forecast,
    "riskneutralize": stage_riskneutralize,
    "checksurface": stage_checksurface,
    "evaluate": stage_evaluate,
    "backtest": stage_backtest,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def versions():
    return {"neurojump": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_stage(cfg: PipelineConfig, stage: str, out_dir=None, manifest=True, **options):
    """Run one stage and merge its outputs into the manifest.  Returns the output paths."""
    ws = Workspace(out_dir or cfg.run.out_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        outputs = STAGE_FUNCS[stage](cfg, ws, **options)
    except NeuroJumpError as exc:
        raise StageError(stage, exc) from exc
    except (ValueError, ArithmeticError, OSError) as exc:
        err = NumericalError(str(exc)) if isinstance(exc, ArithmeticError) else IngestionError(str(exc))
        raise StageError(stage, err) from exc
    elapsed = time.perf_counter() - start
    if manifest:
        _merge_manifest(cfg, ws, stage, outputs, elapsed)
    return outputs


def _merge_manifest(cfg, ws, stage, outputs, elapsed):
    path = ws.root / "manifest.json"
    man = read_json(path) if path.is_file() else {"stages": {}, "artifacts": {}}
    hashes = {ws.rel(p): sha256_file(p) for p in outputs}
    man["stages"][stage] = {"outputs": sorted(hashes), "seconds": round(elapsed, 3),
                            "seed": stage_seed(cfg.run.seed, stage)}
    man["artifacts"].update(hashes)
    man["order"] = [s for s in man.get("order", []) if s != stage] + [stage]
    man["config"] = cfg.to_dict()
    man["global_seed"] = cfg.run.seed
    man["versions"] = versions()
    write_json(path, man)


def run_pipeline(cfg: PipelineConfig, out_dir=None, stages=STAGES, log=None):
    """Run ``stages`` in order.  Returns ``(exit_status, manifest)``.

    A failing stage halts the run; the error is re-raised as
    :class:`StageError` naming the stage.
    """
    check_inputs(cfg)
    ws = Workspace(out_dir or cfg.run.out_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    mpath = ws.root / "manifest.json"
    if mpath.exists():
        mpath.unlink()
    for stage in stages:
        if log:
            log(f"[{stage}] running")
        run_stage(cfg, stage, ws.root)
    return 0, read_json(mpath)


def artifact_hashes(out_dir):
    return read_json(Path(out_dir) / "manifest.json")["artifacts"]


__all__ = [
    "STAGES",
    "StageError",
    "Workspace",
    "artifact_hashes",
    "check_inputs",
    "run_pipeline",
    "run_stage",
    "versions",
]
