import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgrlab import covariance as cv
from sgrlab.autodiff import Tensor
from sgrlab.covariance import (CovEstimator, DenseCov, batch_second_moment, bin_counts, dataset_diag_constant,
                               decay_length, default_cutoff, ewma_update, normalized_center_crop, radial_estimate,
                               radial_from_function, radial_to_dense, scale_factor, sigma_vecmul, write_covfun_csv)
from sgrlab.errors import CapacityError, ContractError, DegenerateEstimateError


def brute_force_radial(xi, geometry):
    """Loop oracle: average the dense second moment over every pixel pair in a bin."""
    h, w, c = geometry
    S = xi.T @ xi / len(xi)
    R = int(round(math.hypot(h - 1, w - 1)))
    sums = np.zeros((c, c, R + 1))
    counts = np.zeros((c, c, R + 1), dtype=int)
    for i in range(h * w * c):
        ri, rest = divmod(i, w * c)
        ci_, chi = divmod(rest, c)
        for j in range(h * w * c):
            rj, rest = divmod(j, w * c)
            cj_, chj = divmod(rest, c)
            r = int(np.rint(math.hypot(ri - rj, ci_ - cj_)))
            sums[chi, chj, r] += S[i, j]
            counts[chi, chj, r] += 1
    vals = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return 0.5 * (vals + vals.transpose(1, 0, 2)), counts


@pytest.mark.parametrize("geometry", [(6, 6, 1), (6, 6, 2), (5, 4, 3)])
def test_radial_estimate_equals_bin_average(geometry):
    xi = np.random.default_rng(0).normal(size=(7, int(np.prod(geometry))))
    rc = radial_estimate(xi, geometry)
    vals, counts = brute_force_radial(xi, geometry)
    np.testing.assert_allclose(rc.values, vals, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(rc.counts, counts)


def test_fft_path_matches_dense_path():
    geometry = (9, 7, 2)
    xi = np.random.default_rng(1).normal(size=(5, 9 * 7 * 2))
    R = cv.max_displacement(geometry)
    a = cv._radial_from_dense(xi.T @ xi / 5, geometry)
    b = cv._radial_from_fft(xi, geometry, R)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(a.counts, b.counts)


def test_bin_counts_cover_all_pairs():
    geometry = (5, 6, 2)
    assert bin_counts(geometry)[0, 1].sum() == (5 * 6) ** 2


def test_delta_function_expands_to_identity():
    rc = radial_from_function((4, 5, 2), lambda r: (r == 0).astype(float), inter_scale=0.0)
    np.testing.assert_array_equal(radial_to_dense(rc).matrix, np.eye(40))


def test_radial_roundtrip_of_an_exponential_kernel():
    g = (6, 6, 2)
    rc = radial_from_function(g, lambda r: np.exp(-r / 3), inter_scale=0.5)
    M = radial_to_dense(rc).matrix
    np.testing.assert_allclose(M, M.T)
    # estimating from the exact matrix recovers the function on populated bins
    est = cv._radial_from_dense(M, g)
    full = est.counts > 0
    np.testing.assert_allclose(est.values[full], rc.values[full], rtol=1e-12)


def test_radial_to_dense_respects_cap_and_cutoff():
    rc = radial_from_function((4, 4, 1), lambda r: np.ones_like(r))
    M = radial_to_dense(rc, cutoff=1).matrix
    assert M[0, 1] == 1.0 and M[0, 2] == 0.0
    with pytest.raises(CapacityError):
        radial_to_dense(rc, max_dim=8)
    with pytest.raises(CapacityError):
        batch_second_moment(np.zeros((1, cv.MAX_DENSE_DIM + 1)))


def test_default_cutoff_and_decay_length():
    rc = radial_from_function((20, 20, 1), lambda r: np.exp(-r / 2.0))
    # exp(-r/2) < 1e-3 first at r = 14
    assert default_cutoff(rc) == 14
    assert decay_length(rc.profile()) == pytest.approx(2.0, abs=0.1)
    assert math.isnan(decay_length([1.0, 0.9, 0.8]))
    assert decay_length([1.0, 0.0]) == pytest.approx(1 - 1 / math.e)


@settings(max_examples=30)
@given(st.integers(1, 6), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_ewma_matches_closed_form(t, beta, seed):
    r = np.random.default_rng(seed)
    batches = [r.normal(size=(3, 4)) for _ in range(t)]
    est = CovEstimator(beta=beta)
    for b in batches:
        est.update(b)
    S = [b.T @ b / 3 for b in batches]
    closed = (1 - beta) ** (t - 1) * S[0] + sum(beta * (1 - beta) ** (t - 1 - k) * S[k] for k in range(1, t))
    np.testing.assert_allclose(est.estimate.matrix, closed, rtol=1e-12, atol=1e-14)
    assert est.t == t


def test_ewma_update_is_pure_and_radial_mode_works():
    est = CovEstimator(mode="radial", geometry=(3, 3, 1), beta=0.5)
    xi = np.random.default_rng(0).normal(size=(4, 9))
    new = ewma_update(est, radial_estimate(xi, (3, 3, 1)))
    assert est.estimate is None and new.t == 1
    new2 = ewma_update(new, radial_estimate(2 * xi, (3, 3, 1)))
    np.testing.assert_allclose(new2.estimate.values, 2.5 * new.estimate.values)
    with pytest.raises(ContractError):
        ewma_update(est, batch_second_moment(xi))


def test_mean_tracking():
    est = CovEstimator(beta=0.25, track_mean=True)
    est.update(np.ones((2, 3)))
    est.update(np.zeros((2, 3)))
    np.testing.assert_allclose(est.mean, 0.75 * np.ones(3))


@settings(max_examples=100)
@given(st.floats(1e-6, 1e3), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_scaled_average_diagonal_equals_c(scale, c, seed):
    xi = scale * np.random.default_rng(seed).normal(size=(5, 6))
    cov = batch_second_moment(xi)
    sigma = scale_factor(cov, c)
    assert sigma * cov.avg_diag() == pytest.approx(c, rel=1e-15)


def test_degenerate_estimates_raise():
    with pytest.raises(DegenerateEstimateError):
        scale_factor(DenseCov(np.zeros((3, 3))), 1.0)
    with pytest.raises(DegenerateEstimateError):
        scale_factor(CovEstimator(), 1.0)


def test_dataset_diag_constant_is_mean_population_variance():
    x = np.array([[0.0, 1.0], [2.0, 5.0]])
    assert dataset_diag_constant(x) == pytest.approx((1.0 + 4.0) / 2)
    with pytest.raises(ContractError):
        dataset_diag_constant(x[:1])


def test_sigma_vecmul_dense_and_radial_paths(monkeypatch):
    g = (7, 6, 2)
    rc = radial_from_function(g, lambda r: np.exp(-r / 1.5), inter_scale=0.5)
    v = np.random.default_rng(3).normal(size=(3, 7 * 6 * 2))
    cutoff = 4
    dense = v @ radial_to_dense(rc, cutoff).matrix
    np.testing.assert_allclose(sigma_vecmul(rc, v, cutoff).data, dense, rtol=1e-12, atol=1e-12)
    # force the FFT kernel path
    monkeypatch.setattr(cv, "MAX_DENSE_DIM", 10)
    rc2 = radial_from_function(g, lambda r: np.exp(-r / 1.5), inter_scale=0.5)
    np.testing.assert_allclose(sigma_vecmul(rc2, v, cutoff).data, dense, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(sigma_vecmul(rc2, v[0], cutoff).data, dense[0], rtol=1e-10, atol=1e-10)


def test_sigma_vecmul_gradient_is_adjoint():
    A = np.random.default_rng(2).normal(size=(4, 4))
    x = Tensor(np.random.default_rng(3).normal(size=(2, 4)), requires_grad=True)
    from sgrlab.autodiff import grad
    out = sigma_vecmul(DenseCov(A), x)
    w = np.random.default_rng(4).normal(size=(2, 4))
    np.testing.assert_allclose(grad((out * Tensor(w)).sum(), x).data, w @ A.T, rtol=1e-14)
    with pytest.raises(ContractError):
        sigma_vecmul(DenseCov(A), np.ones(5))


def test_normalized_crop_and_csv(tmp_path):
    M = np.random.default_rng(0).normal(size=(8, 8))
    crop = normalized_center_crop(M, 0.25)
    assert crop.shape == (4, 4) and np.max(np.abs(crop)) == 1.0
    rc = radial_estimate(np.ones((2, 4)), (2, 2, 1))
    text = write_covfun_csv(tmp_path / "c.csv", rc).read_text().splitlines()
    assert text[0] == "channel_pair,r,value,count"
    assert text[1].startswith("0-0,0,1.0,4")
