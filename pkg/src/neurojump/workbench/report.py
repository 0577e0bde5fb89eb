"""Flat CSV tables in a model-by-metric layout.

Relative columns compare each model with the best baseline. Baselines are
all models other than the reference. Log-score improvement is scaled by the
baseline's absolute log score. CRPS improvement is the baseline's CRPS minus
the model's, divided by the baseline's CRPS. A positive value is always
better. Log scores are mean log-likelihoods: higher is better.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError, NeuroJumpError
from ..evaluation import diebold_mariano
from .io import write_table

SIGN_NOTE = "avg_logscore is the mean log predictive density (higher is better); CRPS is lower-better"


def relative_metrics(log_score, crps, reference):
    """Relative log-score and CRPS improvements (%) against the best baseline.

    Parameters
    ----------
    log_score, crps : dict of str to float
        Average scores per model.
    reference : str
        Model excluded from the baseline set.

    Returns
    -------
    rel_log, rel_crps : dict of str to float
    notices : list of str
    """
    baselines = [m for m in log_score if m != reference]
    notices = []
    if not baselines:
        notices.append(f"only {reference!r} is present: relative columns set to 0")
        return {m: 0.0 for m in log_score}, {m: 0.0 for m in crps}, notices
    best_ls = max(log_score[m] for m in baselines)
    best_crps = min(crps[m] for m in baselines)
    rel_log = {m: (v - best_ls) / abs(best_ls) * 100.0 if best_ls != 0 else 0.0 for m, v in log_score.items()}
    rel_crps = {m: (best_crps - v) / best_crps * 100.0 if best_crps != 0 else 0.0 for m, v in crps.items()}
    if best_ls == 0 or best_crps == 0:
        notices.append("best baseline score is zero: relative column set to 0")
    return rel_log, rel_crps, notices


def dm_table(scores, reference):
    """Pairwise DM rows ``(other, metric, stat, p)``; negative statistics favour the reference.

    ``scores[model]`` holds per-row ``logscore`` and ``crps`` arrays.  The log
    score enters as a loss with its sign flipped.  Comparing a model with
    itself is skipped.
    """
    rows, notices = [], []
    for other in scores:
        if other == reference:
            continue
        for metric in ("logscore", "crps"):
            a = np.asarray(scores[reference][metric], dtype=float)
            b = np.asarray(scores[other][metric], dtype=float)
            if metric == "logscore":
                a, b = -a, -b
            try:
                stat, p = diebold_mariano(a, b)
            except NeuroJumpError as exc:
                notices.append(f"DM {reference} vs {other} ({metric}) skipped: {exc}")
                continue
            rows.append((other, metric, stat, p))
    return rows, notices


def improvement_series(scores, reference, baseline):
    """Running mean of the per-row log-score and CRPS gains of ``reference`` over ``baseline``."""
    ref, base = scores[reference], scores[baseline]
    n = np.arange(1, len(ref["logscore"]) + 1)
    gain_log = np.cumsum(np.asarray(ref["logscore"]) - np.asarray(base["logscore"])) / n
    gain_crps = np.cumsum(np.asarray(base["crps"]) - np.asarray(ref["crps"])) / n
    return n, gain_log, gain_crps


def emit_report(metrics, out_dir, reference="neural", scores=None, var_table=None):
    """Write the report tables.

    Parameters
    ----------
    metrics : dict
        ``metrics[horizon][model]`` is a risk-report dict carrying at least
        ``log_score``, ``crps`` and ``berkowitz``.
    out_dir : path-like
    reference : str
        The model compared with the baselines.
    scores : dict, optional
        ``scores[horizon][model]`` per-row ``logscore`` and ``crps`` arrays,
        aligned across models; enables the DM table and running gains.
    var_table : (header, rows), optional
        Backtest VaR table, copied through.

    Returns
    -------
    list of Path
        Written files.
    """
    if not metrics or not any(metrics.values()):
        raise ConfigError("emit_report needs at least one model report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, notices = [], [SIGN_NOTE]
    for h, by_model in metrics.items():
        ref = reference if reference in by_model else next(iter(by_model))
        if ref != reference:
            notices.append(f"{h}: reference {reference!r} missing, using {ref!r}")
        ls = {m: float(r["log_score"]) for m, r in by_model.items()}
        cr = {m: float(r["crps"]) for m, r in by_model.items()}
        rel_log, rel_crps, note = relative_metrics(ls, cr, ref)
        notices += [f"{h}: {n}" for n in note]
        p = out_dir / f"core_{h}.csv"
        write_table(p, ("model", "avg_logscore", "rel_logscore_pct", "avg_crps", "rel_crps_pct"),
                    ((m, ls[m], rel_log[m], cr[m], rel_crps[m]) for m in by_model))
        written.append(p)

        p = out_dir / f"berkowitz_{h}.csv"
        rows = []
        for m, r in by_model.items():
            bk = r["berkowitz"]
            rows.append((m, *(np.nan if bk.get(k) is None else bk[k] for k in ("p_mu", "p_var", "p_lb")),
                         int(bool(bk.get("inconclusive")))))
        write_table(p, ("model", "p_mu", "p_var", "p_lb", "inconclusive"), rows)
        written.append(p)

        if scores is not None and h in scores:
            rows, note = dm_table(scores[h], ref)
            notices += [f"{h}: {n}" for n in note]
            p = out_dir / f"dm_{h}.csv"
            write_table(p, ("reference", "model", "metric", "dm_stat", "p_value"), ((ref,) + r for r in rows))
            written.append(p)
            others = [m for m in by_model if m != ref]
            if others:
                best = max(others, key=lambda m: ls[m])
                n, gl, gc = improvement_series(scores[h], ref, best)
                p = out_dir / f"relative_{h}.csv"
                write_table(p, ("n", "baseline", "mean_logscore_gain", "mean_crps_gain"),
                            ((int(i), best, a, b) for i, a, b in zip(n, gl, gc)))
                written.append(p)
    if var_table is not None:
        p = out_dir / "var.csv"
        write_table(p, var_table[0], var_table[1])
        written.append(p)
    p = out_dir / "notices.txt"
    p.write_text("\n".join(notices) + "\n")
    written.append(p)
    return written
