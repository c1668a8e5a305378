"""Analysis tests: envelope fitting, the ISS check, bound evaluation."""

import numpy as np
import pytest

from exolqr.analysis import (
    BoundConstants,
    bound_constants,
    iss_check,
    iss_constants,
    param_error_curve,
    regret_bound_eval,
)
from exolqr.lsvi import LearnerConfig, run_lsvi
from exolqr.oracle import true_theta_backward
from exolqr.riccati import LinearSystem, CostMatrices, riccati_backward


def autonomous(A, T):
    """Riccati solve with a dead input channel, so Ac(t) is just A."""
    n = A.shape[0]
    sys = LinearSystem(A, np.zeros((n, 1)))
    cost = CostMatrices(W=np.eye(n), R=np.array([[1.0]]))
    return sys, riccati_backward(sys, cost, T)


def test_envelope_exact_geometric_decay():
    sys, sol = autonomous(0.5 * np.eye(2), 6)
    consts = iss_constants(sol, sys)
    assert consts.rho == pytest.approx(0.5, abs=1e-12)
    assert consts.alpha == pytest.approx(1.0, abs=1e-09)
    assert consts.contractive
    assert consts.provenance["windows"] == 21


def test_envelope_marginal_case_reported():
    sys, sol = autonomous(np.eye(2), 5)
    consts = iss_constants(sol, sys)
    assert consts.rho_raw >= 1.0
    assert not consts.contractive
    assert consts.rho < 1.0  # clamped so 1/(1-rho) stays finite


def test_envelope_certifies_tracking_closed_loop(tracking_system, tracking_cost):
    sol = riccati_backward(tracking_system, tracking_cost, 10)
    consts = iss_constants(sol)
    assert not consts.contractive  # the open-loop A survives at t = T-1
    # re-verify the certificate independently over every window
    for t1 in range(11):
        prod = np.eye(2)
        for t2 in range(t1 + 1, 11):
            prod = sol.Ac[t2 - 1] @ prod
            norm = np.linalg.norm(prod, 2)
            assert norm <= consts.alpha * consts.rho ** (t2 - t1) * (1 + 1e-09)
    assert consts.provenance["min_transition_singular_value"] > 0.0


def test_iss_check_zero_state_passes():
    sys, sol = autonomous(0.5 * np.eye(2), 4)
    consts = iss_constants(sol, sys)
    X = np.zeros((3, 5, 2))
    report = iss_check(X, consts, sys, sol, R_theta=500.0, delta_s=15.0, d=2)
    assert report.passed
    assert report.max_ratio == 0.0


def test_iss_check_flags_violations():
    sys, sol = autonomous(0.5 * np.eye(2), 4)
    consts = iss_constants(sol, sys)
    X = np.zeros((2, 5, 2))
    X[1, 3] = 1e12  # plant a state far outside any reasonable envelope
    report = iss_check(X, consts, sys, sol, R_theta=1.0, delta_s=1.0, d=2)
    assert not report.passed
    assert report.per_episode_pass[0]
    assert not report.per_episode_pass[1]
    assert "FAIL" in str(report)


def test_iss_bound_affine_in_projection_radius():
    sys, sol = autonomous(0.5 * np.eye(2), 4)
    consts = iss_constants(sol, sys)
    X = np.ones((1, 5, 2))

    def bound_at(R):
        return iss_check(X, consts, sys, sol, R, 15.0, 2).bounds[0, 0]

    b1, b2, b3 = bound_at(1.0), bound_at(2.0), bound_at(3.0)
    assert b2 - b1 == pytest.approx(b3 - b2, rel=1e-09)


@pytest.fixture
def learning_setup(
    tracking_system, tracking_cost, tracking_features, tracking_kernel
):
    cfg = LearnerConfig(
        lam=2.0,
        R_theta=500.0,
        L=10,
        T=5,
        x0_mean=np.array([3.0, 3.0]),
        x0_cov=np.eye(2),
        s0_mean=np.array([3.0]),
        s0_cov=np.eye(1),
        seed=17,
    )
    hist = run_lsvi(
        cfg, tracking_system, tracking_cost, tracking_kernel, tracking_features
    )
    tt = true_theta_backward(
        tracking_kernel, tracking_features, tracking_cost, hist.sol, 5, 20_000,
        np.random.default_rng(18),
    )
    return hist, tt


def test_iss_check_on_real_run(learning_setup, tracking_system):
    hist, _ = learning_setup
    sol = hist.sol
    consts = iss_constants(sol)
    X = hist.dataset.X[: hist.dataset.count]
    report = iss_check(X, consts, tracking_system, sol, 500.0, 15.0, 2)
    assert report.passed
    assert not report.usable  # rho was clamped, so the pass is vacuous


def test_bound_constants_structure(learning_setup):
    hist, tt = learning_setup
    consts = iss_constants(hist.sol)
    bc = bound_constants(
        hist, tt, consts, np.random.default_rng(19), mc_samples=4000
    )
    assert bc.sigma > 0 and bc.delta_psi > 0 and bc.delta_v > 0
    assert bc.gamma > 0
    assert np.isfinite(bc.gamma_stderr)
    assert bc.delta_psi == pytest.approx(
        np.sqrt((4.0 * bc.x_bar**2 + 1.0) / 2.0), rel=1e-12
    )
    assert bc.details["x_bar_realized"] <= bc.details["x_bar_theoretical"]
    assert bc.x_bar == bc.details["x_bar_theoretical"]
    realized = bound_constants(
        hist, tt, consts, np.random.default_rng(19), mc_samples=4000,
        x_bar_mode="realized",
    )
    assert realized.x_bar <= bc.x_bar
    with pytest.raises(ValueError):
        bound_constants(hist, tt, consts, np.random.default_rng(19), x_bar_mode="best")


def make_bc(sigma=1.0, delta_psi=0.5, delta_v=2.0, gamma=0.1):
    return BoundConstants(
        sigma=sigma,
        delta_psi=delta_psi,
        delta_v=delta_v,
        gamma=gamma,
        gamma_stderr=0.0,
        beta=0.0,
        x_bar=1.0,
        delta=0.05,
        details={},
    )


def test_regret_bound_at_zero_episodes_matches_formula():
    bc = make_bc()
    got = regret_bound_eval(bc, T=5, L=0, lam=2.0, R_theta=10.0, d=2, n=2, delta=0.05)
    # first term vanishes with L = 0 and beta = log(1) = 0; what is left is
    # delta_psi T (1/sqrt(lam)) (sigma sqrt(2 log(1/delta)) + (R+2dv) sqrt(lam))
    expected = (
        0.5 * 5 * (1.0 / np.sqrt(2.0))
        * (1.0 * np.sqrt(2.0 * np.log(20.0)) + (10.0 + 4.0) * np.sqrt(2.0))
    )
    assert got == pytest.approx(expected, rel=1e-12)


def test_regret_bound_monotone_in_L_and_R_theta():
    bc = make_bc()
    grid = np.arange(0, 2001, 50)
    curve = regret_bound_eval(bc, 5, grid, 2.0, 10.0, 2, 2, 0.05)
    assert curve.shape == grid.shape
    assert np.all(np.diff(curve) >= 0.0)
    bigger = regret_bound_eval(bc, 5, grid, 2.0, 20.0, 2, 2, 0.05)
    assert np.all(bigger >= curve)


def test_regret_bound_rejects_bad_delta():
    bc = make_bc()
    with pytest.raises(ValueError):
        regret_bound_eval(bc, 5, 10, 2.0, 10.0, 2, 2, 0.5)
    with pytest.raises(ValueError):
        regret_bound_eval(bc, 5, 10, 2.0, 10.0, 2, 2, 0.0)


def test_param_error_zero_at_truth_and_norm_at_zero(learning_setup):
    hist, tt = learning_setup
    L, Tp1, D = hist.theta.shape
    at_truth = np.tile(tt.stack.data, (L, 1, 1))
    np.testing.assert_allclose(param_error_curve(at_truth, tt), 0.0, atol=1e-14)
    at_zero = np.zeros_like(at_truth)
    expected = np.linalg.norm(tt.stack.data[1:]) / (Tp1 - 1)
    np.testing.assert_allclose(param_error_curve(at_zero, tt), expected, rtol=1e-12)


def test_param_error_block_permutation_invariance(learning_setup):
    hist, tt = learning_setup
    errs = param_error_curve(hist.theta, tt)
    d, n = tt.fm.d, 2
    L, Tp1, D = hist.theta.shape

    def permute(arr):
        blocks = arr.reshape(*arr.shape[:-1], d, n + 1)
        return blocks[..., ::-1, :].reshape(*arr.shape)

    tt_perm = type(tt)(
        stack=type(tt.stack)(permute(tt.stack.data), d, n),
        moments=tt.moments,
        theta_stderr=tt.theta_stderr,
        fm=tt.fm,
        cost=tt.cost,
        kern=tt.kern,
    )
    errs_perm = param_error_curve(permute(hist.theta), tt_perm)
    np.testing.assert_allclose(errs_perm, errs, rtol=1e-12)


def test_param_error_shape_mismatch(learning_setup):
    hist, tt = learning_setup
    with pytest.raises(ValueError):
        param_error_curve(hist.theta[:, :-1, :], tt)
