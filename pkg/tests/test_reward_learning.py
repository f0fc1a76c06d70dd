import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from multiparty_rlhf.instances import random_instance
from multiparty_rlhf.reward_learning import (
    FitOptions, RewardFit, confidence_radius, covariance_matrices, estimation_errors, fit_mle, fit_mle_arrays,
    in_confidence_set, independent_fits,
)
from multiparty_rlhf.sampling import ComparisonDataset, sample_cb_dataset


def _raw_loss(X, y, theta):
    """Mean BTL negative log-likelihood over all ``M n`` records, term by term."""
    M, n, _ = X.shape
    total = 0.0
    for m in range(M):
        for i in range(n):
            z = float(X[m, i] @ theta[m])
            p = oracles.sigmoid(z)
            total -= math.log(p) if y[m, i] == 1 else math.log(1.0 - p)
    return total / (M * n)


def _diff_dataset(diffs, labels):
    """A single-state dataset whose action features realise the given differences."""
    n = len(diffs)
    d = len(diffs[0])
    feats = np.zeros((1, n + 1, d))
    for i, x in enumerate(diffs):
        feats[0, i + 1] = x
    s = np.zeros((1, n), dtype=int)
    a1 = np.arange(1, n + 1)[None]
    a0 = np.zeros((1, n), dtype=int)
    return feats, ComparisonDataset(s, a1, a0, np.asarray(labels)[None])


def test_covariance_two_orthonormal_samples():
    feats, data = _diff_dataset([[1.0, 0.0], [0.0, 1.0]], [1, 0])
    assert np.allclose(covariance_matrices(feats, data)[0], 0.5 * np.eye(2), atol=1e-15)


def test_covariance_zero_diffs():
    feats = np.zeros((1, 2, 3))
    data = ComparisonDataset([[0, 0]], [[1, 1]], [[0, 0]], [[1, 0]])
    assert np.array_equal(covariance_matrices(feats, data)[0], np.zeros((3, 3)))


def test_covariance_matches_summation_and_trace():
    inst = random_instance(3, 4, 5, 2, 3, seed=2)
    data = sample_cb_dataset(inst, 300, 4)
    sig = covariance_matrices(inst.features, data)
    X = data.feature_differences(inst.features)
    for m in range(3):
        assert np.allclose(sig[m], oracles.covariance(list(X[m])), atol=1e-14)
        assert np.trace(sig[m]) == pytest.approx(np.mean(np.sum(X[m] ** 2, axis=1)), rel=1e-12)


def test_covariance_empty_rejected():
    feats = np.zeros((1, 2, 3))
    data = ComparisonDataset(np.zeros((1, 0), int), np.zeros((1, 0), int), np.zeros((1, 0), int), np.zeros((1, 0), int))
    with pytest.raises(ValueError):
        covariance_matrices(feats, data)


def test_balanced_labels_give_zero():
    X = np.ones((1, 400, 1))
    y = np.tile([1, 0], 200)[None]
    fit = fit_mle_arrays(X, y, 1, 1.0)
    assert abs(fit.theta_hat[0, 0]) < 1e-6


def test_all_wins_hit_ball():
    X = np.ones((1, 50, 1))
    y = np.ones((1, 50), dtype=int)
    fit = fit_mle_arrays(X, y, 1, 1.0)
    assert fit.theta_hat[0, 0] == pytest.approx(1.0, abs=1e-9)
    assert fit.converged


def test_fit_accuracy_random_instance():
    inst = random_instance(4, 5, 6, 2, 5, seed=0, param_scale=1.0)
    data = sample_cb_dataset(inst, 5000, seed=0)
    fit = fit_mle(data, inst.features, 2, inst.param_bound)
    assert np.max(estimation_errors(fit, inst.party_params)) < 0.15


def test_fit_invariants_and_stationarity():
    inst = random_instance(3, 4, 4, 2, 3, seed=5)
    data = sample_cb_dataset(inst, 150, seed=1)
    fit = fit_mle(data, inst.features, 2, inst.param_bound)
    assert fit.converged and fit.grad_norm <= FitOptions().grad_tol
    U, alpha = fit.U_hat, fit.alpha_hat
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-10)
    assert np.allclose(fit.theta_hat, alpha @ U.T, atol=1e-10)
    assert np.all(np.linalg.norm(alpha, axis=1) <= inst.param_bound + 1e-9)
    losses = [l for _, l in fit.loss_trace]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))

    X = data.feature_differences(inst.features)
    y = data.label
    assert _raw_loss(X, y, fit.theta_hat) == pytest.approx(losses[-1], abs=1e-12)
    assert np.allclose(fit.sigma, covariance_matrices(inst.features, data), atol=1e-14)

    # central finite differences of the raw loss, then the tangent projection for U
    h = 1e-6
    f = lambda U_, a_: _raw_loss(X, y, a_ @ U_.T)
    ga = np.zeros_like(alpha)
    for idx in np.ndindex(*alpha.shape):
        e = np.zeros_like(alpha)
        e[idx] = h
        ga[idx] = (f(U, alpha + e) - f(U, alpha - e)) / (2 * h)
    gU = np.zeros_like(U)
    for idx in np.ndindex(*U.shape):
        e = np.zeros_like(U)
        e[idx] = h
        gU[idx] = (f(U + e, alpha) - f(U - e, alpha)) / (2 * h)
    rU = gU - U @ (0.5 * (U.T @ gU + gU.T @ U))
    assert np.max(np.abs(ga)) < 1e-5  # interior alphas here
    assert np.max(np.abs(rU)) < 1e-5


def test_fit_reports_non_convergence():
    inst = random_instance(3, 4, 4, 2, 3, seed=5)
    data = sample_cb_dataset(inst, 150, seed=1)
    fit = fit_mle(data, inst.features, 2, inst.param_bound, FitOptions(max_iters=1, grad_tol=1e-14))
    assert not fit.converged and len(fit.loss_trace) == 2


def test_rank_above_dim_rejected():
    with pytest.raises(ValueError):
        fit_mle_arrays(np.ones((1, 3, 2)), np.ones((1, 3)), 3, 1.0)


def test_fit_json_roundtrip(tmp_path):
    inst = random_instance(2, 3, 3, 1, 2, seed=1)
    fit = fit_mle(sample_cb_dataset(inst, 100, 0), inst.features, 1, inst.param_bound)
    fit.save(tmp_path / "f.json")
    back = RewardFit.load(tmp_path / "f.json")
    assert np.array_equal(back.theta_hat, fit.theta_hat) and back.gamma == fit.gamma
    assert json.loads((tmp_path / "f.json").read_text())["schema"] == "reward-fit/v1"


def test_radius_examples():
    assert confidence_radius(0.1, 100, 1, 1, 1, K=0.0) == 0.0
    g = confidence_radius(0.1, 100, 1, 1, 1, K=1.0)
    assert g == pytest.approx(oracles.gamma_formula(0.1, 100, 1, 1, 1), rel=1e-14)
    assert g == pytest.approx(math.sqrt((1 + math.log(10)) / 100), rel=1e-14)
    # the quoted 0.18167 is a rounding of 0.181730...
    assert g == pytest.approx(0.18167, abs=1e-4)
    big = confidence_radius(0.1, 100, 10**12, 5, 2, K=2.0)
    assert big == pytest.approx(2.0 * 2 / 10, rel=1e-4)


@settings(max_examples=50, deadline=None)
@given(delta=st.floats(1e-6, 0.999), n=st.integers(1, 10**6), M=st.integers(1, 100), d=st.integers(1, 50),
       K=st.floats(0, 10), data=st.data())
def test_radius_matches_formula(delta, n, M, d, K, data):
    r = data.draw(st.integers(1, d))
    assert confidence_radius(delta, n, M, d, r, K) == pytest.approx(oracles.gamma_formula(delta, n, M, d, r, K),
                                                                     rel=1e-12, abs=1e-300)


def test_radius_rejects_bad_delta():
    for delta in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            confidence_radius(delta, 10, 1, 1, 1)


def test_membership_examples():
    fit = RewardFit(np.eye(2), [[0.3, 0.1]], np.eye(2)[None], 0.2, 1.0)
    assert in_confidence_set(fit.theta_hat[0], fit, 0)
    assert in_confidence_set(fit.theta_hat[0] + [0.19, 0.0], fit, 0)
    assert not in_confidence_set(fit.theta_hat[0] + [0.21, 0.0], fit, 0)
    zero = fit.with_gamma(0.0)
    assert not in_confidence_set(zero.theta_hat[0] + [1e-6, 0], zero, 0)
    assert not in_confidence_set(np.array([1.01, 0.0]), RewardFit(np.eye(2), [[0.95, 0]], np.eye(2)[None], 1.0, 1.0), 0)


def test_membership_singular_seminorm():
    sig = np.diag([1.0, 0.0])[None]
    fit = RewardFit(np.eye(2), [[0.0, 0.0]], sig, 0.1, 5.0)
    assert in_confidence_set(np.array([0.05, 3.0]), fit, 0)  # unmeasured direction is free


@pytest.mark.slow
def test_shared_representation_beats_independent_fits():
    wins = 0
    for seed in range(20):
        inst = random_instance(6, 5, 24, 2, 16, seed=100 + seed)
        data = sample_cb_dataset(inst, 500, seed)
        fit = fit_mle(data, inst.features, 2, inst.param_bound)
        X = data.feature_differences(inst.features)
        indep = independent_fits(X, data.label, inst.param_bound)
        shared = estimation_errors(fit, inst.party_params).mean()
        diff = indep - inst.party_params
        solo = np.sqrt(np.einsum("mi,mij,mj->m", diff, fit.sigma, diff)).mean()
        wins += shared < solo
    assert wins >= 18
