import csv
import json
import math
import warnings

import numpy as np
import pytest

from neurojump.density import DoubleExponential, GaussianMixture2, HorizonParams
from neurojump.errors import ConfigError, IngestionError, PersistenceError
from neurojump.workbench import baselines
from neurojump.workbench.cli import main
from neurojump.workbench.config import PipelineConfig, config_from_dict, load_config, stage_seed
from neurojump.workbench.io import (
    DAILY_SCHEMA,
    ForecastRow,
    ingest_csv,
    read_forecasts,
    read_json,
    write_forecasts,
    write_json,
)
from neurojump.workbench.pipeline import StageError, artifact_hashes, run_pipeline
from neurojump.workbench.report import dm_table, emit_report, relative_metrics

SMALL = {
    "run": {"seed": 3, "n_assets": 2},
    "simulate": {"n_days": 600, "intraday_steps": 26},
    "features": {"window": 63, "zscore_window": 126},
    "train": {"epochs_pretrain": 1, "epochs_joint": 2},
    "evaluation": {"reps": 50},
    "portfolio": {"hs_window": 8},
}


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --- configuration ---------------------------------------------------------------


def test_default_config_horizons():
    cfg = PipelineConfig()
    assert cfg.horizon_labels == ("1d", "1w")
    assert cfg.horizon_days == (1, 5)
    assert cfg.lam_bounds() == (0.5, 1.5)


@pytest.mark.parametrize(
    "raw, needle",
    [
        ({"run": {"sead": 1}}, "sead"),
        ({"runs": {}}, "runs"),
        ({"train": {"epochs_joint": 1.5}}, "integer"),
        ({"horizons": {"1d": 1, "2d": 1}}, "unique"),
        ({"portfolio": {"horizon": "1m"}}, "1m"),
        ({"riskneutral": {"mode": "physical"}}, "mode"),
    ],
)
def test_config_rejects_bad_input(raw, needle):
    with pytest.raises(ConfigError, match=needle):
        config_from_dict(raw)


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "cfg.toml").write_text('[data]\ndaily_csv = ["a.csv"]\n')
    cfg = load_config(tmp_path / "cfg.toml")
    assert cfg.data.daily_csv == (str(tmp_path / "a.csv"),)
    assert cfg.n_assets == 1
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


def test_stage_seeds_are_distinct_and_stable():
    seeds = {stage_seed(7, s) for s in ("simulate/0", "simulate/1", "train", "network")}
    assert len(seeds) == 4
    assert stage_seed(7, "train") == stage_seed(7, "train")
    assert stage_seed(7, "train") != stage_seed(8, "train")


# --- ingestion -------------------------------------------------------------------


def test_ingest_preserves_row_count(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date_index", "daily_return"], [[i, 0.001 * i] for i in range(25)])
    cols = ingest_csv(p, DAILY_SCHEMA, time_column="date_index")
    assert cols["date_index"].size == 25
    assert cols["daily_return"][3] == pytest.approx(0.003)


def test_ingest_out_of_order_names_first_offending_line(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date_index", "daily_return"], [[0, 0.0], [1, 0.0], [5, 0.0], [4, 0.0], [3, 0.0]])
    # header is line 1, so the row "4" sits on line 5
    with pytest.raises(IngestionError, match="line 5"):
        ingest_csv(p, DAILY_SCHEMA, time_column="date_index")


def test_ingest_duplicate_timestamp(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date_index", "daily_return"], [[0, 0.0], [1, 0.0], [1, 0.0]])
    with pytest.raises(IngestionError, match="duplicate.*line 4"):
        ingest_csv(p, DAILY_SCHEMA, time_column="date_index")


def test_ingest_extra_columns_warn(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date_index", "note", "daily_return"], [[0, "x", 0.01], [1, "y", 0.02]])
    with pytest.warns(UserWarning, match="note"):
        cols = ingest_csv(p, DAILY_SCHEMA, time_column="date_index")
    assert cols["daily_return"].tolist() == [0.01, 0.02]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ingest_csv(p, DAILY_SCHEMA, time_column="date_index", known_extra=("note",))


def test_ingest_rejects_non_finite_with_line_numbers(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date_index", "daily_return"], [[0, 0.0], [1, "nan"], [2, "abc"]])
    with pytest.raises(IngestionError, match="3, 4"):
        ingest_csv(p, DAILY_SCHEMA)


def test_ingest_schema_mismatch_and_missing_path(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, ["date", "daily_return"], [[0, 0.0]])
    with pytest.raises(IngestionError, match="date_index"):
        ingest_csv(p, DAILY_SCHEMA)
    missing = tmp_path / "nope.csv"
    with pytest.raises(IngestionError, match="nope.csv"):
        ingest_csv(missing, DAILY_SCHEMA)


# --- forecast files --------------------------------------------------------------


def sample_rows():
    gmm = HorizonParams(0.001, 0.012, 0.2, GaussianMixture2(0.4, -0.03, 0.02, 0.01, 0.015), "1d")
    dexp = HorizonParams(-0.002, 0.03, 0.7, DoubleExponential(0.3, 40.0, 25.0), "1w")
    return [
        ForecastRow(10, 0, "1d", "neural", "P", gmm, 0.0123),
        ForecastRow(10, 0, "1d", "neural", "Q", gmm.replace(mu=0.0005)),
        ForecastRow(11, 1, "1w", "merton", "P", dexp, -1.0 / 3.0),
    ]


def same(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


def test_forecast_round_trip(tmp_path):
    rows = sample_rows()
    write_forecasts(tmp_path / "f.csv", rows)
    back = read_forecasts(tmp_path / "f.csv")
    assert [r.key() for r in back] == [r.key() for r in rows]
    for a, b in zip(rows, back):
        assert a.params == b.params
        assert same(a.realized, b.realized)


def test_forecast_duplicate_key_and_version(tmp_path):
    rows = sample_rows()
    write_forecasts(tmp_path / "f.csv", rows + rows[:1])
    with pytest.raises(IngestionError, match="duplicate"):
        read_forecasts(tmp_path / "f.csv")
    text = (tmp_path / "f.csv").read_text().replace("v1", "v9", 1)
    (tmp_path / "g.csv").write_text(text)
    with pytest.raises(PersistenceError, match="v9"):
        read_forecasts(tmp_path / "g.csv")


def test_forecast_invalid_params_rejected(tmp_path):
    write_forecasts(tmp_path / "f.csv", sample_rows()[:1])
    lines = (tmp_path / "f.csv").read_text().splitlines()
    cells = lines[2].split(",")
    cells[7] = "-0.01"  # negative sigma
    lines[2] = ",".join(cells)
    (tmp_path / "f.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(IngestionError, match="line 3"):
        read_forecasts(tmp_path / "f.csv")


def test_json_round_trip(tmp_path):
    obj = {"a": [1.5, float("nan")], "b": {"c": np.float64(2.0), "d": np.int64(3)}}
    write_json(tmp_path / "x.json", obj)
    assert read_json(tmp_path / "x.json") == {"a": [1.5, None], "b": {"c": 2.0, "d": 3}}


# --- report ----------------------------------------------------------------------

# one-day table: average log score and CRPS by model, with printed relative columns
CORE_1D = {
    "NeuralLevy": (2.59815, 0.01028, 5.77, 1.96),
    "DiffusionNN": (2.44477, 0.01312, -0.47, -25.15),
    "EGARCH": (1.77264, 0.03522, -27.83, -235.84),
    "GARCH": (1.66210, 0.01052, -32.33, -0.31),
    "GJR": (2.45635, 0.01049, 0.00, 0.00),
    "Merton": (2.35802, 0.01058, -4.00, -0.91),
}


def test_relative_columns_match_published_table():
    ls = {m: v[0] for m, v in CORE_1D.items()}
    cr = {m: v[1] for m, v in CORE_1D.items()}
    rel_log, rel_crps, notices = relative_metrics(ls, cr, "NeuralLevy")
    assert not notices
    for m, v in CORE_1D.items():
        assert round(rel_log[m], 2) == pytest.approx(v[2], abs=1e-9), m
        # printed CRPS values carry 4 significant digits, so the ratio is only good to the input rounding
        assert rel_crps[m] == pytest.approx(v[3], abs=0.5 + 0.02 * abs(v[3])), m


def test_relative_two_models_uses_the_other_as_baseline():
    rel_log, rel_crps, _ = relative_metrics({"ref": 2.2, "b": 2.0}, {"ref": 0.009, "b": 0.010}, "ref")
    assert rel_log == {"ref": pytest.approx(10.0), "b": 0.0}
    assert rel_crps == {"ref": pytest.approx(10.0), "b": 0.0}


def test_single_model_relative_zero_with_notice(tmp_path):
    rep = {"log_score": 2.5, "crps": 0.01, "berkowitz": {"p_mu": 0.5, "p_var": 0.4, "p_lb": 0.3}}
    files = emit_report({"1d": {"neural": rep}}, tmp_path)
    with open(tmp_path / "core_1d.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["rel_logscore_pct"]) == 0.0
    assert float(rows[0]["rel_crps_pct"]) == 0.0
    assert "relative columns set to 0" in (tmp_path / "notices.txt").read_text()
    assert tmp_path / "berkowitz_1d.csv" in files


def test_emit_report_requires_a_model(tmp_path):
    with pytest.raises(ConfigError):
        emit_report({}, tmp_path)


def test_dm_skips_self_and_sign_convention():
    rng = np.random.default_rng(0)
    good = rng.normal(size=400)
    scores = {
        "ref": {"logscore": 3.0 + 0.1 * good, "crps": 0.01 + 0.001 * rng.random(400)},
        "other": {"logscore": 2.0 + 0.1 * rng.normal(size=400), "crps": 0.02 + 0.001 * rng.random(400)},
    }
    rows, notices = dm_table(scores, "ref")
    assert not notices
    assert {r[0] for r in rows} == {"other"}
    assert all(r[2] < -5 for r in rows)  # the reference wins both metrics


def test_dm_identical_series_gives_notice():
    x = {"logscore": np.linspace(0, 1, 50), "crps": np.linspace(1, 2, 50)}
    rows, notices = dm_table({"ref": x, "copy": dict(x)}, "ref")
    assert rows == []
    assert len(notices) == 2


# --- baselines -------------------------------------------------------------------


def test_constant_fit_round_trip_and_recovery():
    rng = np.random.default_rng(5)
    n = 3000
    jumps = rng.poisson(0.3, n)
    y = 0.0005 + 0.01 * rng.normal(size=n) + np.array([rng.normal(-0.03, 0.01, k).sum() for k in jumps])
    p = baselines.fit_constant(y, "gmm", lam_bound=0.5)
    assert 0.008 < p.sigma < 0.012
    assert 0.1 < p.lam < 0.5
    assert baselines.constant_from_dict(baselines.constant_to_dict(p)) == p


# --- pipeline and CLI ------------------------------------------------------------


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = config_from_dict(SMALL)
    out = []
    for name in ("a", "b"):
        status, manifest = run_pipeline(cfg, out_dir=root / name)
        assert status == 0
        out.append((root / name, manifest))
    return out


def test_pipeline_emits_all_artifacts(small_runs):
    root, manifest = small_runs[0]
    expected = [
        "data/asset0_daily.csv", "features/asset1.csv", "models/neural.net", "models/merton.json",
        "forecasts/neural.csv", "forecasts/neural_Q.csv", "surface/violations.csv",
        "evaluation/neural_1d.json", "evaluation/scores_1w.csv", "backtest/summary.json",
        "report/core_1d.csv", "report/dm_1w.csv", "report/berkowitz_1d.csv", "report/var.csv",
    ]
    for rel in expected:
        assert rel in manifest["artifacts"], rel
        assert (root / rel).is_file()
    assert manifest["order"] == ["simulate", "featurize", "train", "forecast", "riskneutralize",
                                        "checksurface", "evaluate", "backtest", "report"]
    assert manifest["global_seed"] == 3
    assert set(manifest["versions"]) >= {"numpy", "scipy", "neurojump"}


def test_pipeline_rerun_identical_hashes(small_runs):
    (a, _), (b, _) = small_runs
    assert artifact_hashes(a) == artifact_hashes(b)


def test_pipeline_forecast_files_round_trip(small_runs):
    root, _ = small_runs[0]
    rows = read_forecasts(root / "forecasts" / "neural_Q.csv")
    assert rows and all(r.measure == "Q" for r in rows)
    summary = read_json(root / "riskneutral" / "summary.json")
    assert summary["max_residual"] <= 1e-10


def test_pipeline_missing_input_names_path(tmp_path):
    cfg = config_from_dict({"data": {"daily_csv": [str(tmp_path / "absent.csv")]}})
    with pytest.raises(IngestionError, match="absent.csv"):
        run_pipeline(cfg, out_dir=tmp_path / "o")


def test_pipeline_stage_failure_names_stage(tmp_path):
    bad = tmp_path / "bad.csv"
    write_rows(bad, ["date_index", "daily_return"], [[0, 0.0], [2, 0.0], [1, 0.0]])
    cfg = config_from_dict({"data": {"daily_csv": [str(bad)]}})
    with pytest.raises(StageError, match="featurize") as info:
        run_pipeline(cfg, out_dir=tmp_path / "o")
    assert info.value.exit_code == 3


def test_cli_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.toml"
    bad_cfg.write_text("[run]\nunknown_key = 1\n")
    assert main(["simulate", "--config", str(bad_cfg)]) == 2
    assert "unknown_key" in capsys.readouterr().err
    missing = tmp_path / "m.toml"
    missing.write_text(f'[data]\ndaily_csv = ["{tmp_path / "gone.csv"}"]\n')
    assert main(["featurize", "--config", str(missing), "--out-dir", str(tmp_path / "o")]) == 3


def test_cli_single_stage(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[run]\nn_assets = 1\n[simulate]\nn_days = 50\nintraday_steps = 4\n")
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--seed", "11",
                 "--threads", "1"]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["global_seed"] == 11
    assert "data/asset0_daily.csv" in man["artifacts"]
