import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurojump.density import GaussianMixture2, gaussian_logpdf_batch
from neurojump.errors import BatchingError, ConfigError, SplitError, TrainingDivergence
from neurojump.features import build_features
from neurojump.neuralnet import NetworkSpec, init_network
from neurojump.simlab import SimConfig, constant_maps, simulate_path
from neurojump.training import (
    Dataset,
    TrainConfig,
    contiguous_batches,
    dataset_from_features,
    fit,
    jump_gradient_mask,
    joint_loss,
    make_splits,
    pretrain_diffusion,
    split_dataset,
    train_joint,
    validation_nll,
)

HORIZONS = ("1d", "5d")


def spec(dim=6, family="gmm"):
    return NetworkSpec(
        input_dim=dim,
        entropy_idx=1,
        det_idx=2,
        momentum_idx=0,
        encoder_layers=(8, 8),
        head_hidden=6,
        horizons=HORIZONS,
        lam_bounds=(0.5, 1.5),
        out_scales=(0.01, 0.02),
        jump_family=family,
    )


def toy_data(n=400, dim=6, seed=0, omega=None, segments=1):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = {"1d": 0.01 * rng.standard_normal(n), "5d": 0.022 * rng.standard_normal(n)}
    if omega is None:
        w = rng.uniform(0.3, 1.0, n)
        omega = {h: w.copy() for h in HORIZONS}
    elif np.isscalar(omega):
        omega = {h: np.full(n, float(omega)) for h in HORIZONS}
    seg = np.repeat(np.arange(segments), -(-n // segments))[:n]
    t = np.concatenate([np.arange(np.sum(seg == s)) for s in range(segments)])
    return Dataset(x, y, omega, t, seg, HORIZONS, (1, 5))


def quick_cfg(**kw):
    base = dict(batch_size=32, epochs_pretrain=2, epochs_joint=2, lr=1e-2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(state):
    return {k: v.copy() for k, v in state.params.items()}


# --- config and splits -------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma_tv=-1)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=(1.0, 0.0))
    with pytest.raises(ConfigError):
        TrainConfig(epochs_joint=0)
    with pytest.raises(ConfigError):
        split_dataset(toy_data(), TrainConfig(purge_gap=2))


def test_split_gap_arithmetic():
    cfg = TrainConfig(purge_gap=30, embargo=10)
    train, val = make_splits(1000, cfg)
    assert train.max() + 40 < val.min()
    assert np.intersect1d(train, val).size == 0
    assert np.array_equal(train, np.arange(train.size))
    assert np.array_equal(val, np.arange(val[0], 1000))
    again = make_splits(1000, cfg)
    assert np.array_equal(again[0], train) and np.array_equal(again[1], val)


def test_split_rejects_oversized_purge():
    with pytest.raises(SplitError):
        make_splits(100, TrainConfig(purge_gap=100))


@settings(max_examples=60, deadline=None)
@given(st.integers(60, 2000), st.integers(5, 40), st.integers(0, 20), st.floats(0.05, 0.5))
def test_purged_split_targets_never_reach_validation(n, purge, embargo, frac):
    cfg = TrainConfig(purge_gap=purge, embargo=embargo, val_fraction=frac)
    data = toy_data(n, segments=2)
    try:
        train, val = split_dataset(data, cfg)
    except SplitError:
        return
    horizon = max(data.horizon_days)
    assert train.t.max() + horizon < val.t.min()
    assert val.t.min() - train.t.max() > purge + embargo


def test_contiguous_batches_stay_inside_segments():
    data = toy_data(300, segments=3)
    for idx in contiguous_batches(data, 32, np.random.default_rng(0)):
        assert np.all(np.diff(data.t[idx]) == 1)
        assert np.unique(data.segment[idx]).size == 1


# --- loss --------------------------------------------------------------------


def test_zero_weights_leave_pretraining_inert():
    data = toy_data(omega=0.0)
    state = init_network(spec(), 1)
    loss, grads, _ = joint_loss(state, data, quick_cfg(), stage="pretrain")
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())
    before = snapshot(state)
    train, val = split_dataset(data, quick_cfg())
    after, _ = pretrain_diffusion(state, train, val, quick_cfg())
    assert all(np.array_equal(before[k], after.params[k]) for k in before)


def test_pretraining_freezes_jump_outputs_bit_for_bit():
    data = toy_data()
    state = init_network(spec(), 2)
    mask = jump_gradient_mask(state)
    before = snapshot(state)
    train, val = split_dataset(data, quick_cfg())
    after, report = pretrain_diffusion(state, train, val, quick_cfg(epochs_pretrain=3))
    moved = False
    for k, m in mask.items():
        frozen = m == 0
        assert np.array_equal(before[k][frozen], after.params[k][frozen]), k
        moved |= not np.array_equal(before[k][~frozen], after.params[k][~frozen])
    assert moved and report.violations == [0, 0, 0]


def test_unit_weights_reduce_to_gaussian_likelihood():
    data = toy_data(omega=1.0)
    state = init_network(spec(), 4)
    cfg = TrainConfig(gamma_tv=0.0, gamma_l2=0.0)
    loss, _, per_h = joint_loss(state, data, cfg)
    out = state.forward(data.x)
    expected = 0.0
    for h in HORIZONS:
        b = out.params[h]
        direct = -sum(
            -0.5 * math.log(2 * math.pi) - math.log(s) - 0.5 * ((yv - m) / s) ** 2
            for m, s, yv in zip(b.mu, b.sigma, data.y[h])
        )
        assert per_h[h] == pytest.approx(direct, rel=1e-12)
        expected += direct
    assert loss == pytest.approx(expected, rel=1e-12)


def test_constant_outputs_carry_no_tv_penalty():
    data = toy_data(50)
    data.x[:] = data.x[0]
    state = init_network(spec(), 5)
    with_tv, _, _ = joint_loss(state, data, TrainConfig(gamma_tv=10.0, gamma_l2=0.0))
    without, _, _ = joint_loss(state, data, TrainConfig(gamma_tv=0.0, gamma_l2=0.0))
    assert with_tv == without


def test_tv_rejects_gapped_batches():
    data = toy_data(40)
    gapped = data.take(np.r_[0:10, 12:20])
    state = init_network(spec(), 6)
    with pytest.raises(BatchingError):
        joint_loss(state, gapped, TrainConfig(gamma_tv=1e-3))
    joint_loss(state, gapped, TrainConfig(gamma_tv=0.0))


def test_tv_does_not_bridge_segments():
    data = toy_data(40, segments=2)
    state = init_network(spec(), 7)
    cfg = TrainConfig(gamma_tv=1.0, gamma_l2=0.0)
    base, _, _ = joint_loss(state, data, TrainConfig(gamma_tv=0.0, gamma_l2=0.0))
    total, _, _ = joint_loss(state, data, cfg)
    out = state.forward(data.x)
    tv = 0.0
    for h in HORIZONS:
        for vals in (out.params[h].sigma, out.params[h].lam):
            for s in (0, 1):
                tv += np.abs(np.diff(vals[data.segment == s])).sum()
    assert total - base == pytest.approx(tv, rel=1e-9)


def central_difference_check(state, data, cfg, rng, count):
    _, grads, _ = joint_loss(state, data, cfg)
    g = state.flat_grad(grads)
    theta = state.flat()
    step = 1e-6
    worst = 0.0
    for i in rng.choice(theta.size, count, replace=False):
        t = theta.copy()
        t[i] += step
        state.set_flat(t)
        hi = joint_loss(state, data, cfg)[0]
        t[i] -= 2 * step
        state.set_flat(t)
        lo = joint_loss(state, data, cfg)[0]
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-3))
    state.set_flat(theta)
    return worst


@pytest.mark.parametrize("family", ["gmm", "dexp"])
def test_joint_gradient_matches_finite_differences(family):
    rng = np.random.default_rng(8)
    data = toy_data(5, seed=9)
    cfg = TrainConfig(gamma_tv=0.0, gamma_l2=1e-2, alpha=(1.0, 0.5))
    state = init_network(spec(family=family), 10)
    for k, v in state.params.items():
        state.params[k] = v + 0.3 * rng.standard_normal(v.shape)
    state.project_constraints()
    assert central_difference_check(state, data, cfg, rng, 60) < 1e-4


# --- training loop -----------------------------------------------------------


def test_training_is_seed_deterministic():
    data = toy_data(300)
    cfg = quick_cfg()
    a, ra = fit(init_network(spec(), 11), data, cfg)
    b, rb = fit(init_network(spec(), 11), data, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert [r.to_json() for r in ra] == [r.to_json() for r in rb]


def test_best_snapshot_matches_recorded_minimum():
    data = toy_data(300)
    cfg = quick_cfg(epochs_joint=6, lr=3e-2)
    train, val = split_dataset(data, cfg)
    best, report = train_joint(init_network(spec(), 12), train, val, cfg)
    totals = [sum(a * v[h] for a, h in zip(cfg.alpha, HORIZONS)) for v in report.val_loss]
    assert report.best_epoch == int(np.argmin(totals))
    assert report.best_val == min(totals)
    vl = validation_nll(best, val, cfg)
    assert sum(a * vl[h] for a, h in zip(cfg.alpha, HORIZONS)) == pytest.approx(report.best_val, rel=1e-12)
    assert all(v == 0 for v in report.violations)
    assert 0 < report.lam_ratio_max <= 1.0


def test_divergence_returns_last_good_snapshot():
    data = toy_data(200)
    data.y["1d"][:] = 1e6
    state = init_network(spec(), 13)
    before = snapshot(state)
    cfg = quick_cfg()
    train, val = split_dataset(data, cfg)
    with pytest.raises(TrainingDivergence) as info:
        train_joint(state, train, val, cfg)
    snap = info.value.snapshot
    assert all(np.array_equal(before[k], snap.params[k]) for k in before)


def test_report_serializes(tmp_path):
    data = toy_data(200)
    _, reports = fit(init_network(spec(), 14), data, quick_cfg())
    path = tmp_path / "report.csv"
    reports[-1].write_csv(path)
    rows = path.read_text().strip().splitlines()
    assert len(rows) == 1 + quick_cfg().epochs_joint
    assert '"stage": "joint"' in reports[-1].to_json()


# --- closed loop on simulated data --------------------------------------------


def simulated_dataset(n_days, seed, intensity=0.0):
    law = GaussianMixture2(0.5, -0.03, 0.03, 0.01, 0.01)
    path = simulate_path(SimConfig(n_days, constant_maps(0.0, 0.16, intensity, law), seed=seed))
    fm = build_features(path)
    return path, dataset_from_features(fm, path.daily_returns, HORIZONS, (1, 5))


@pytest.mark.slow
def test_jump_free_anchor_keeps_intensity_low():
    _, data = simulated_dataset(1500, seed=21)
    cfg = TrainConfig(seed=0, epochs_joint=10)
    train, _ = split_dataset(data, cfg)
    mean, scale = train.x.mean(axis=0), train.x.std(axis=0)
    scale[scale == 0] = 1.0
    data.x[:] = (data.x - mean) / scale
    net = NetworkSpec(input_dim=data.x.shape[1], entropy_idx=9, det_idx=10, momentum_idx=5,
                      out_scales=(0.01, 0.0224))
    state, reports = fit(init_network(net, 0), data, cfg)
    _, val = split_dataset(data, cfg)
    out = state.forward(val.x)
    assert float(out.params["1d"].lam.mean()) < 0.05
    assert all(v == 0 for r in reports for v in r.violations)


def test_dataset_targets_use_only_future_returns():
    path, data = simulated_dataset(700, seed=22, intensity=12.6)
    r = path.daily_returns
    for i in (0, len(data) // 2, len(data) - 1):
        t = data.t[i]
        assert data.y["1d"][i] == r[t + 1]
        assert data.y["5d"][i] == pytest.approx(r[t + 1 : t + 6].sum(), abs=1e-15)
    assert data.t.max() + 5 <= r.size - 1


def test_gaussian_helper_agrees_with_loss_columns():
    mu, sigma, y = np.array([0.0, 0.01]), np.array([0.01, 0.02]), np.array([0.003, -0.01])
    lg, _ = gaussian_logpdf_batch(mu, sigma, y, grad=True)
    assert np.allclose(lg, -0.5 * np.log(2 * np.pi) - np.log(sigma) - 0.5 * ((y - mu) / sigma) ** 2)
