import numpy as np
import pytest

from lidarsr.errors import ConfigError, ShapeError
from lidarsr.priors import DenoiserPrior, total_variation
from lidarsr.rangeview import ProjectionConfig, RangeImage
from lidarsr.sampling import RowSelection, apply, uniform_selection
from lidarsr.solver import (
    SolverConfig,
    data_step,
    initial_estimate,
    objective,
    observed_mask,
    residual,
    superresolve,
)

from conftest import random_image

IDENTITY = DenoiserPrior("identity")


def dense_data_step(S, Z, sel, b):
    """Solve (D^T D + b I) x = D^T S + b Z column by column with a dense solver."""
    D = sel.matrix()
    A = D.T @ D + b * np.eye(sel.h_hi)
    return np.linalg.solve(A, D.T @ S + b * Z)


def full(vals):
    vals = np.asarray(vals, float)
    return RangeImage(ProjectionConfig(*vals.shape), vals, np.ones(vals.shape, bool))


def random_selection(rng, h):
    rows = np.sort(rng.choice(h, int(rng.integers(1, h + 1)), replace=False))
    return RowSelection(h, tuple(int(r) for r in rows))


def test_data_step_hand_example():
    sel = RowSelection(2, (0,))
    T = data_step(full([[4.0]]), full([[2.0], [6.0]]), sel, 1.0)
    assert T.range.tolist() == [[3.0], [6.0]]
    assert np.allclose(dense_data_step(np.array([[4.0]]), np.array([[2.0], [6.0]]), sel, 1.0), T.range)


def test_data_step_matches_dense_solve(rng):
    for _ in range(100):
        h = int(rng.integers(1, 13))
        w = int(rng.integers(1, 8))
        sel = random_selection(rng, h)
        b = float(rng.uniform(0.1, 10))
        S = rng.uniform(1, 50, (sel.h_lo, w))
        Z = rng.uniform(1, 50, (h, w))
        got = data_step(full(S), full(Z), sel, b).range
        ref = dense_data_step(S, Z, sel, b)
        assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-8


def test_data_step_fixed_point(rng):
    sel = uniform_selection(64, 16)
    Tstar = random_image(rng, 64, 128, p_valid=1.0)
    for b in (0.01, 0.5, 7.0):
        out = data_step(apply(Tstar, sel), Tstar, sel, b)
        assert np.max(np.abs(out.range - Tstar.range)) <= 1e-12 * np.abs(Tstar.range).max()


def test_data_step_large_b_returns_z(rng):
    sel = uniform_selection(8, 2)
    S = random_image(rng, 2, 5, p_valid=1.0)
    Z = random_image(rng, 8, 5, p_valid=1.0)
    out = data_step(S, Z, sel, 1e9)
    assert np.allclose(out.range, Z.range, rtol=1e-8)


def test_data_step_mask_rules():
    sel = RowSelection(3, (0, 1))
    S = RangeImage(ProjectionConfig(2, 2), np.array([[5.0, -1], [5.0, -1]]), np.array([[True, False], [True, False]]))
    zv = np.array([[False, True], [True, True], [False, False]])
    Z = RangeImage(ProjectionConfig(3, 2), np.where(zv, 2.0, -1.0), zv)
    T = data_step(S, Z, sel, 1.0)
    # Z invalid but observed -> observation; unobserved -> Z; neither -> invalid
    assert T.range[0, 0] == 5.0
    assert T.range[0, 1] == 2.0
    assert T.range[1, 0] == 3.5
    assert T.valid.tolist() == [[True, True], [True, True], [False, False]]


def test_data_step_errors(rng):
    sel = uniform_selection(4, 2)
    S = random_image(rng, 2, 3)
    with pytest.raises(ConfigError):
        data_step(S, random_image(rng, 4, 3), sel, 0.0)
    with pytest.raises(ShapeError):
        data_step(S, random_image(rng, 4, 5), sel, 1.0)
    with pytest.raises(ShapeError):
        data_step(random_image(rng, 3, 3), random_image(rng, 4, 3), sel, 1.0)


def test_contraction_rate(rng):
    sel = uniform_selection(64, 16)
    Tstar = random_image(rng, 64, 64, p_valid=1.0)
    S = apply(Tstar, sel)
    warm = RangeImage(Tstar.config, Tstar.range + rng.uniform(5, 20, Tstar.shape), Tstar.valid)
    b = 0.5
    cfg = SolverConfig(b=b, iterations=50, prior=IDENTITY)
    T, state = superresolve(S, sel, cfg, initial=warm)
    err = [residual(S, warm, sel)] + state.residual_history
    assert np.max(np.abs(T.range[sel.index] - S.range)) < 1e-6
    ratios = [e1 / e0 for e0, e1 in zip(err, err[1:]) if e1 > 1e-3]
    assert len(ratios) >= 10
    assert np.allclose(ratios, b / (1 + b), rtol=0, atol=1e-9)


def test_single_layer_is_one_data_step(rng):
    sel = uniform_selection(16, 4)
    S = random_image(rng, 4, 20)
    T0 = initial_estimate(S, sel, "replicate-rows")
    T, _ = superresolve(S, sel, SolverConfig(iterations=1, prior=IDENTITY))
    ref = data_step(S, T0, sel, 0.5)
    assert np.array_equal(T.range, ref.range) and np.array_equal(T.valid, ref.valid)


def test_replicate_rows_init():
    sel = RowSelection(4, (0, 2))
    S = full([[1.0, 1.0], [3.0, 3.0]])
    T0 = initial_estimate(S, sel, "replicate-rows")
    assert T0.range[:, 0].tolist() == [1.0, 1.0, 3.0, 3.0]


def test_zero_fill_init_does_not_invent_pixels(rng):
    sel = uniform_selection(8, 2)
    S = random_image(rng, 2, 6)
    T, _ = superresolve(S, sel, SolverConfig(init="adjoint-zero-fill"))
    assert np.array_equal(T.valid, observed_mask(S, sel))


def test_invalid_observations_never_become_observed(rng):
    sel = uniform_selection(64, 16)
    S = random_image(rng, 16, 64, p_valid=0.6)
    T, _ = superresolve(S, sel)
    # replicate-rows init and the TV prior never fill a dropout, so none appears on observed rows
    assert np.array_equal(T.valid[sel.index], S.valid)
    # and in a single data step a dropout pixel takes Z verbatim
    Z = random_image(rng, 64, 64, p_valid=1.0)
    out = data_step(S, Z, sel, 0.5)
    drop = ~S.valid
    assert np.array_equal(out.range[sel.index][drop], Z.range[sel.index][drop])


def test_deterministic(rng):
    sel = uniform_selection(64, 16)
    S = random_image(rng, 16, 256)
    a, sa = superresolve(S, sel)
    b, sb = superresolve(S, sel)
    assert a.range.tobytes() == b.range.tobytes()
    assert sa.residual_history == sb.residual_history


def test_state_history_length(rng):
    sel = uniform_selection(16, 4)
    _, state = superresolve(random_image(rng, 4, 8), sel, SolverConfig(iterations=7))
    assert state.k == 7 and len(state.residual_history) == 7
    assert state.T.config == state.Z.config


@pytest.mark.parametrize("kw", [dict(b=0), dict(b=-1), dict(iterations=0), dict(prior_strength=-1), dict(init="zeros")])
def test_solver_config_invariants(kw):
    with pytest.raises(ConfigError):
        SolverConfig(**kw)


def test_objective_zero_for_consistent_constant_rows():
    sel = RowSelection(4, (0, 2))
    T = full(np.full((4, 3), 2.0))
    assert objective(T, apply(T, sel), sel, 3.0) == 0.0


def test_objective_mu_zero_is_half_residual_squared(rng):
    sel = uniform_selection(8, 4)
    T = random_image(rng, 8, 5)
    S = random_image(rng, 4, 5)
    r = residual(S, T, sel)
    assert objective(T, S, sel, 0.0) == pytest.approx(0.5 * r * r, rel=1e-15)


def test_objective_matches_dense_oracle(rng):
    for _ in range(20):
        h, w = 6, 5
        sel = random_selection(rng, h)
        Tv = rng.uniform(1, 9, (h, w))
        Sv = rng.uniform(1, 9, (sel.h_lo, w))
        mu = float(rng.uniform(0, 3))
        D = sel.matrix()
        tv = sum(abs(Tv[i + 1, j] - Tv[i, j]) for i in range(h - 1) for j in range(w))
        tv += sum(abs(Tv[i, j + 1] - Tv[i, j]) for i in range(h) for j in range(w - 1))
        ref = 0.5 * np.sum((Sv - D @ Tv) ** 2) + mu * tv
        assert objective(full(Tv), full(Sv), sel, mu) == pytest.approx(ref, rel=1e-10)
        assert total_variation(Tv, np.ones_like(Tv, bool)) == pytest.approx(tv, rel=1e-12)


def test_identity_prior_residual_non_increasing(rng):
    sel = uniform_selection(64, 16)
    Tstar = random_image(rng, 64, 64, p_valid=0.9)
    S = apply(Tstar, sel)
    warm = RangeImage(Tstar.config, np.where(Tstar.valid, Tstar.range + 3.0, -1.0), Tstar.valid)
    _, state = superresolve(S, sel, SolverConfig(iterations=20, prior=IDENTITY), initial=warm)
    h = state.residual_history
    assert all(b <= a for a, b in zip(h, h[1:]))
