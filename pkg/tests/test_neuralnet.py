import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurojump.errors import DomainError, PersistenceError, ShapeError, StateError
from neurojump.neuralnet import (
    FORMAT_VERSION,
    MAGIC,
    NetworkSpec,
    backward,
    forward,
    init_network,
    load,
    project_constraints,
    save,
)


def small_spec(family="gmm", dropout=0.0, momentum=True):
    return NetworkSpec(
        input_dim=7,
        entropy_idx=2,
        det_idx=5,
        momentum_idx=0 if momentum else None,
        encoder_layers=(8, 6),
        head_hidden=5,
        horizons=("1d", "5d"),
        lam_bounds=(0.5, 1.5),
        out_scales=(0.01, 0.02),
        dropout_rate=dropout,
        jump_family=family,
    )


def scramble(state, rng, scale=1.0):
    for k, v in state.params.items():
        state.params[k] = v + scale * rng.standard_normal(v.shape)
    return project_constraints(state)


def outputs(state, x):
    out = forward(state, x)
    return {h: np.column_stack([b.mu, b.sigma, b.lam, b.jump]) for h, b in out.params.items()}


# --- forward -----------------------------------------------------------------


@pytest.mark.parametrize("family", ["gmm", "dexp"])
def test_fresh_network_ranges(family):
    spec = small_spec(family)
    state = init_network(spec, seed=0)
    out = forward(state, np.zeros(spec.input_dim))
    for h, bound in zip(spec.horizons, spec.lam_bounds):
        p = out.horizon_params(h)
        assert p.sigma > 0 and 0 <= p.lam <= bound
        assert p.h == h


def test_input_validation():
    state = init_network(small_spec(), 0)
    with pytest.raises(ShapeError):
        forward(state, np.zeros(6))
    with pytest.raises(DomainError):
        forward(state, np.array([0, 0, np.inf, 0, 0, 0, 0.0]))


def test_spec_validation():
    with pytest.raises(ShapeError):
        NetworkSpec(input_dim=4, entropy_idx=1, det_idx=1)
    with pytest.raises(ShapeError):
        NetworkSpec(input_dim=4, entropy_idx=1, det_idx=4)
    with pytest.raises(DomainError):
        NetworkSpec(input_dim=4, entropy_idx=1, det_idx=2, dropout_rate=1.0)


def monotonicity_violations(state, rng, n=1000):
    spec = state.spec
    x = 2.0 * rng.standard_normal((n, spec.input_dim))
    bad = 0
    for delta in (1e-6, 1e-3, 0.1, 1.0, 5.0):
        base = outputs(state, x)
        for idx, cols, direction in (
            (spec.entropy_idx, (1, 2), 1),
            (spec.det_idx, (1, 2), -1),
            (spec.momentum_idx, (0,), 1),
        ):
            if idx is None:
                continue
            moved = x.copy()
            moved[:, idx] += delta
            out = outputs(state, moved)
            for h in spec.horizons:
                for c in cols:
                    bad += int(np.count_nonzero(direction * (out[h][:, c] - base[h][:, c]) < 0))
    return bad


@pytest.mark.parametrize("family", ["gmm", "dexp"])
def test_monotonicity_sweep(family):
    rng = np.random.default_rng(1)
    state = scramble(init_network(small_spec(family), 3), rng)
    assert monotonicity_violations(state, rng) == 0


def test_monotonicity_after_random_projected_sgd():
    rng = np.random.default_rng(2)
    state = init_network(small_spec(), 4)
    x = rng.standard_normal((32, 7))
    for _ in range(1000):
        forward(state, x)
        up = {h: rng.standard_normal((32, state.spec.n_out)) for h in state.spec.horizons}
        grads = backward(state, up)
        for k in state.params:
            state.params[k] -= 0.05 * grads[k]
        project_constraints(state)
        assert state.violations() == 0
    assert monotonicity_violations(state, rng) == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1e3), st.sampled_from(["gmm", "dexp"]))
def test_output_ranges_fuzz(seed, magnitude, family):
    rng = np.random.default_rng(seed)
    state = scramble(init_network(small_spec(family), seed), rng, scale=3.0)
    x = magnitude * rng.standard_normal((50, 7))
    out = forward(state, x)
    for h, bound in zip(state.spec.horizons, state.spec.lam_bounds):
        b = out.params[h]
        assert np.all(b.sigma > 0) and np.all((b.lam >= 0) & (b.lam <= bound))
        assert np.all((b.jump[:, 0] >= 0) & (b.jump[:, 0] <= 1))
        scales = b.jump[:, 3:5] if family == "gmm" else b.jump[:, 1:3]
        assert np.all(scales > 0)
        assert np.all(np.isfinite(b.mu))


# --- backward ----------------------------------------------------------------


def linear_objective(state, x, up):
    out = outputs(state, x)
    return sum(np.sum(up[h] * out[h]) for h in out)


@pytest.mark.parametrize("family", ["gmm", "dexp"])
def test_backward_matches_finite_differences(family):
    rng = np.random.default_rng(5)
    step = 1e-5
    for draw in range(25):
        state = scramble(init_network(small_spec(family), draw), rng, scale=0.5)
        x = rng.standard_normal((3, 7))
        up = {h: rng.standard_normal((3, state.spec.n_out)) for h in state.spec.horizons}
        forward(state, x)
        grad = state.flat_grad(backward(state, up))
        theta = state.flat()
        fd = np.empty_like(theta)
        for i in range(theta.size):
            t = theta.copy()
            t[i] += step
            state.set_flat(t)
            hi = linear_objective(state, x, up)
            t[i] -= 2 * step
            state.set_flat(t)
            lo = linear_objective(state, x, up)
            fd[i] = (hi - lo) / (2 * step)
        state.set_flat(theta)
        assert np.all(np.abs(grad - fd) <= 1e-4 * np.abs(fd) + 1e-8), draw


def test_backward_with_dropout_replays_masks():
    rng = np.random.default_rng(6)
    state = init_network(small_spec(dropout=0.3), 7)
    state.training = True
    x = rng.standard_normal((4, 7))
    up = {h: rng.standard_normal((4, state.spec.n_out)) for h in state.spec.horizons}
    state.reseed_dropout(99)
    forward(state, x)
    grad = state.flat_grad(backward(state, up))
    theta = state.flat()

    def objective(t):
        state.set_flat(t)
        state.reseed_dropout(99)
        return linear_objective(state, x, up)

    for i in rng.choice(theta.size, 40, replace=False):
        e = np.zeros_like(theta)
        e[i] = 1e-5
        fd = (objective(theta + e) - objective(theta - e)) / 2e-5
        assert abs(grad[i] - fd) <= 1e-4 * abs(fd) + 1e-8


def test_dropout_only_in_training_mode():
    state = init_network(small_spec(dropout=0.5), 8)
    x = np.ones((2, 7))
    a, b = outputs(state, x), outputs(state, x)
    assert all(np.array_equal(a[h], b[h]) for h in a)
    state.training = True
    c, d = outputs(state, x), outputs(state, x)
    assert not all(np.array_equal(c[h], d[h]) for h in c)


def test_zero_upstream_gives_zero_gradients():
    state = init_network(small_spec(), 9)
    forward(state, np.ones((3, 7)))
    grads = backward(state, {h: np.zeros((3, state.spec.n_out)) for h in state.spec.horizons})
    assert all(np.all(g == 0) for g in grads.values())


def test_backward_requires_forward():
    state = init_network(small_spec(), 9)
    with pytest.raises(StateError):
        backward(state, {})


def test_masked_gradient_reported_unprojected():
    state = init_network(small_spec(), 10)
    key = "head0.mono"
    state.params[key][state.masks[key]] = 0.0
    x = np.ones((1, 7))
    forward(state, x)
    # pushing sigma down wants the entropy weight to go negative
    up = {"1d": np.zeros((1, state.spec.n_out))}
    up["1d"][0, 1] = 1.0
    g = backward(state, up)[key]
    assert g[0, 1] > 0  # descent direction is negative, not clipped to zero


# --- projection --------------------------------------------------------------


def test_projection_clamps_and_is_idempotent():
    state = init_network(small_spec(), 11)
    for k, m in state.masks.items():
        state.params[k][m] = -1.0
    project_constraints(state)
    for k, m in state.masks.items():
        assert np.all(state.params[k][m] == 0.0)
    before = {k: v.copy() for k, v in state.params.items()}
    project_constraints(state)
    assert all(np.array_equal(before[k], state.params[k]) for k in before)


# --- persistence -------------------------------------------------------------


@pytest.mark.parametrize("family", ["gmm", "dexp"])
def test_save_load_round_trip(family):
    state = scramble(init_network(small_spec(family), 12), np.random.default_rng(0))
    blob = save(state)
    back = load(blob)
    assert save(back) == blob
    assert back.spec == state.spec and back.seed == state.seed
    x = np.random.default_rng(1).standard_normal((5, 7))
    a, b = outputs(state, x), outputs(back, x)
    assert all(np.array_equal(a[h], b[h]) for h in a)


def test_tampered_file_rejected():
    blob = bytearray(save(init_network(small_spec(), 13)))
    blob[-20] ^= 0x01
    with pytest.raises(PersistenceError):
        load(bytes(blob))


def test_version_mismatch_rejected():
    blob = bytearray(save(init_network(small_spec(), 13)))
    struct.pack_into("<I", blob, len(MAGIC), FORMAT_VERSION + 1)
    with pytest.raises(PersistenceError, match="version"):
        load(bytes(blob))


def test_cross_config_load_rejected():
    blob = save(init_network(small_spec(), 14))
    with pytest.raises(PersistenceError, match="input_dim"):
        load(blob, input_dim=8)
    with pytest.raises(PersistenceError):
        load(b"garbage")
