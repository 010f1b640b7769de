import cvxpy as cp
import numpy as np
import pytest

from lidarsr.errors import ConfigError
from lidarsr.priors import DenoiserPrior, median_filter, prior_step, register_prior, total_variation, tv_prox, tv_prox_array
from lidarsr.rangeview import ProjectionConfig, RangeImage

from conftest import random_image


def tv_prox_oracle(y, valid, w):
    """Exact prox of w*TV on the valid-pixel 4-neighbour graph, solved as a QP."""
    h, wd = y.shape
    idx = -np.ones(y.shape, int)
    idx[valid] = np.arange(valid.sum())
    edges = []
    for i in range(h):
        for j in range(wd):
            if not valid[i, j]:
                continue
            if i + 1 < h and valid[i + 1, j]:
                edges.append((idx[i, j], idx[i + 1, j]))
            if j + 1 < wd and valid[i, j + 1]:
                edges.append((idx[i, j], idx[i, j + 1]))
    x = cp.Variable(int(valid.sum()))
    obj = 0.5 * cp.sum_squares(x - y[valid])
    if edges:
        e = np.array(edges)
        obj = obj + w * cp.norm1(x[e[:, 0]] - x[e[:, 1]])
    cp.Problem(cp.Minimize(obj)).solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    out = y.copy()
    out[valid] = x.value
    return out


def img_of(vals, valid=None):
    vals = np.asarray(vals, float)
    cfg = ProjectionConfig(*vals.shape)
    valid = np.ones(vals.shape, bool) if valid is None else valid
    return RangeImage(cfg, np.where(valid, vals, -1.0), valid)


def test_step_signal_matches_qp_oracle():
    y = np.array([[0.0, 0, 0, 10, 10, 10]])
    valid = np.ones_like(y, bool)
    ref = tv_prox_oracle(y, valid, 1.0)
    got = tv_prox_array(y, valid, 1.0, 200)
    assert np.allclose(got, ref, atol=1e-4)
    # each side of the step moves by weight / 3
    assert np.allclose(got, [[1 / 3] * 3 + [29 / 3] * 3], atol=1e-4)


def test_random_images_match_qp_oracle(rng):
    for _ in range(3):
        y = rng.normal(5, 2, (5, 7))
        valid = rng.random(y.shape) < 0.8
        ref = tv_prox_oracle(y, valid, 0.7)
        got = tv_prox_array(y, valid, 0.7, 3000)
        assert np.allclose(got[valid], ref[valid], atol=1e-3)


def test_weight_zero_is_identity(rng):
    img = random_image(rng, 8, 16)
    out = tv_prox(img, 0.0, 10)
    assert np.array_equal(out.range, img.range) and np.array_equal(out.valid, img.valid)


def test_constant_image_unchanged():
    img = img_of(np.full((6, 9), 4.25))
    out = tv_prox(img, 3.0, 20)
    assert np.array_equal(out.range, img.range)


def test_single_valid_pixel_unchanged():
    valid = np.zeros((3, 3), bool)
    valid[1, 1] = True
    img = img_of(np.full((3, 3), 2.0), valid)
    assert np.array_equal(tv_prox(img, 5.0, 10).range, img.range)


def test_tv_prox_never_increases_objective(rng):
    img = random_image(rng, 16, 32)
    for iters in (1, 5, 20):
        out = tv_prox(img, 1.0, iters)
        y, v = img.values(), img.valid
        f_in = total_variation(y, v)
        f_out = 0.5 * np.sum((out.values() - y)[v] ** 2) + total_variation(out.values(), v)
        assert f_out <= f_in + 1e-9


def test_invalid_pixels_not_touched(rng):
    img = random_image(rng, 8, 8, 0.5)
    out = tv_prox(img, 2.0, 10)
    assert np.array_equal(out.valid, img.valid)
    assert np.all(out.range[~img.valid] == -1.0)
    assert np.all(out.range[img.valid] > 0)


def test_median_filter_is_mask_aware():
    vals = np.full((3, 3), 2.0)
    vals[1, 1] = 100.0
    valid = np.ones((3, 3), bool)
    valid[0, 0] = False
    out = median_filter(img_of(vals, valid), 3)
    assert out.range[1, 1] == 2.0
    assert not out.valid[0, 0]


def test_identity_prior():
    img = img_of(np.arange(1.0, 13).reshape(3, 4))
    assert prior_step(img, DenoiserPrior("identity")) is img


@pytest.mark.parametrize("kw", [dict(kind="cnn"), dict(window=4), dict(window=1), dict(inner_iters=0), dict(weight=-1.0)])
def test_prior_validation(kw):
    with pytest.raises(ConfigError):
        DenoiserPrior(**kw)


def test_registered_prior_is_dispatched():
    register_prior("halve", lambda img, p: RangeImage(img.config, img.range / 2, img.valid))
    img = img_of([[4.0, 8.0]])
    assert prior_step(img, DenoiserPrior("halve")).range.tolist() == [[2.0, 4.0]]
