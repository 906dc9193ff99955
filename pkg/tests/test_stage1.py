import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from conftest import random_stable
from feederid import (
    DegenerateSamples,
    LogBranchError,
    MeasurementSeries,
    OperatingPoint,
    ParameterIndex,
    covariances,
    estimate_state,
    estimate_state_matrix,
    estimate_time_constants,
    extract_initial_parameters,
    mape,
    state_jacobian,
)
from feederid.errors import NonPositiveTau
from feederid.powerflow import nominal_angles
from feederid.stage1 import CovariancePair, EstimatedState, sample_mean, unscale, wls


def exact_pair(A, dt=0.1, lag=1, rng=None):
    from feederid import stationary_covariance
    m = A.shape[0]
    B = np.eye(m) if rng is None else rng.standard_normal((m, m))
    C0 = stationary_covariance(A, B)
    return CovariancePair(C0, expm(A * lag * dt) @ C0, lag, lag * dt)


def test_sample_mean_examples():
    assert np.array_equal(sample_mean(np.full((4, 3), 2.5)), np.full(3, 2.5))
    assert np.allclose(sample_mean([[1.0, 2.0], [3.0, 6.0]]), [2.0, 4.0])


def test_scalar_log():
    A = estimate_state_matrix(CovariancePair(np.array([[1.0]]), np.array([[np.exp(-2.0)]]), 1, 2.0))
    assert A[0, 0] == pytest.approx(-1.0)


def test_equal_covariances_give_zero():
    rng = np.random.default_rng(0)
    M = rng.standard_normal((4, 4))
    C = M @ M.T + np.eye(4)
    assert np.allclose(estimate_state_matrix(CovariancePair(C, C, 1, 0.1)), 0, atol=1e-10)


def test_negative_real_eigenvalue_has_no_principal_log():
    with pytest.raises(LogBranchError):
        estimate_state_matrix(CovariancePair(np.eye(2), np.diag([0.5, -0.5]), 1, 1.0))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_exact_covariance_identity_4x4(seed):
    rng = np.random.default_rng(seed)
    A = random_stable(rng, 4)
    Ahat = estimate_state_matrix(exact_pair(A, rng=rng))
    assert np.linalg.norm(Ahat - A) / np.linalg.norm(A) < 1e-10


@pytest.mark.parametrize("lag", [1, 2, 5])
def test_exact_covariance_lags(lag):
    rng = np.random.default_rng(lag)
    A = random_stable(rng, 6)
    Ahat = estimate_state_matrix(exact_pair(A, dt=0.05, lag=lag, rng=rng))
    assert np.allclose(Ahat, A, rtol=0, atol=1e-9 * np.abs(A).max())


def test_white_noise_covariances():
    X = np.random.default_rng(1).standard_normal((40000, 3))
    cov = covariances(X, lag=1)
    assert np.allclose(cov.C0, np.eye(3), atol=0.03)
    assert np.allclose(cov.Ck, 0, atol=0.03)


def test_scalar_ou_autocorrelation():
    a, dt, S = 0.5, 0.1, 200000
    rng = np.random.default_rng(2)
    phi = np.exp(-a * dt)
    x = np.empty(S)
    x[0] = 0.0
    e = rng.standard_normal(S) * np.sqrt(1 - phi**2)
    for k in range(1, S):
        x[k] = phi * x[k - 1] + e[k]
    cov = covariances(x[:, None], lag=3, dt=dt)
    assert cov.Ck[0, 0] / cov.C0[0, 0] == pytest.approx(np.exp(-a * 3 * dt), abs=0.01)


def test_normalization_switch():
    X = np.random.default_rng(3).standard_normal((50, 2))
    a = covariances(X, lag=5, normalization="S-1")
    b = covariances(X, lag=5, normalization="S-K-1")
    assert np.allclose(b.Ck * (50 - 5 - 1), a.Ck * (50 - 1))


def test_constant_series_is_degenerate():
    with pytest.raises(DegenerateSamples):
        covariances(np.ones((10, 2)))


def linear_ou(A, B, dt, S, rng):
    """Exact discretisation of dx = A x dt + B dW."""
    from feederid import stationary_covariance
    C = stationary_covariance(A, B)
    Phi = expm(A * dt)
    Q = C - Phi @ C @ Phi.T
    Lq = np.linalg.cholesky((Q + Q.T) / 2)
    x = np.empty((S, A.shape[0]))
    x[0] = np.linalg.cholesky(C) @ rng.standard_normal(A.shape[0])
    noise = rng.standard_normal((S, A.shape[0])) @ Lq.T
    for k in range(1, S):
        x[k] = Phi @ x[k - 1] + noise[k]
    return x


def test_error_shrinks_with_sample_size():
    wins = 0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        A = random_stable(rng, 3)
        B = np.eye(3)
        errs = []
        for S in (2500, 40000):
            X = linear_ou(A, B, 0.1, S, rng)
            Ahat = estimate_state_matrix(covariances(X, 1, 0.1))
            errs.append(np.linalg.norm(Ahat - A))
        wins += errs[1] < errs[0]
    assert wins >= 19


def recurrence_series(tau_p, tau_q, dt=0.1, S=500, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal(S)
    Q = rng.standard_normal(S)
    d = np.zeros(S)
    V = np.ones(S)
    for k in range(S - 1):
        d[k + 1] = d[k] + dt * (P.mean() - P[k]) / tau_p
        V[k + 1] = V[k] + dt * (Q.mean() - Q[k]) / tau_q
    return MeasurementSeries(dt, [("1", 0)], V[:, None], d[:, None], P[:, None], Q[:, None])


def test_time_constant_recurrence_oracle():
    tp, tq = estimate_time_constants(recurrence_series(2.0, 3.5), [0])
    assert tp[0] == pytest.approx(2.0, abs=1e-9)
    assert tq[0] == pytest.approx(3.5, abs=1e-9)


def test_constant_series_has_no_time_constant():
    s = MeasurementSeries(0.1, [("1", 0)], np.ones((20, 1)), np.zeros((20, 1)), np.ones((20, 1)), np.ones((20, 1)))
    with pytest.raises(NonPositiveTau):
        estimate_time_constants(s, [0])


def test_simulated_time_constants(net4, dyn4, series4, ybus4):
    tp, tq = estimate_time_constants(series4, ybus4.state_idx)
    # the fastest and slowest loads: stage-1 time constants land within 25%
    err = np.abs(np.concatenate([tp / dyn4.tau_p, tq / dyn4.tau_q]) - 1)
    assert np.median(err) < 0.25


def test_wls_identity_weight_is_ols():
    rng = np.random.default_rng(4)
    L = rng.standard_normal((8, 2))
    U = rng.standard_normal(8)
    beta_w = wls(L, U, np.eye(8))
    beta = wls(L, U)
    assert np.allclose(beta_w, beta)
    assert np.allclose(beta, np.linalg.solve(L.T @ L, L.T @ U))


def exact_state(net, op, ybus, tau):
    J = state_jacobian(ybus, op.V, op.delta)
    m = len(ybus.state_idx)
    tau_p, tau_q = tau[:m], tau[m:]
    A = -J.full / np.concatenate([tau_p, tau_q])[:, None]
    return EstimatedState(A, unscale(A, tau_p, tau_q), tau_p, tau_q, np.zeros(2 * m), ybus.state_idx)


@pytest.mark.parametrize("both", [True, False])
def test_extraction_from_exact_jacobian(net4, op4, ybus4, both):
    tau = np.linspace(1, 5, 2 * len(ybus4.state_idx))
    est = exact_state(net4, op4, ybus4, tau)
    index = ParameterIndex(net4, connected_only=True)
    init = extract_initial_parameters(est, op4, net4, index, both_directions=both)
    assert np.allclose(init.theta, index.true_theta(), rtol=1e-8, atol=1e-8)
    assert set(init.status.values()) == {"ok"}


def test_extraction_13_bus(net13):
    from feederid import assemble_bus_admittance, default_dynamics, equilibrium
    ybus = assemble_bus_admittance(net13)
    op = equilibrium(net13, default_dynamics(net13, seed=2), ybus)
    est = exact_state(net13, op, ybus, np.full(2 * len(ybus.state_idx), 2.0))
    index = ParameterIndex(net13, connected_only=True)
    init = extract_initial_parameters(est, op, net13, index)
    assert np.allclose(init.theta, index.true_theta(), rtol=1e-7, atol=1e-7)


def test_zero_jacobian_gives_zero_parameters(net4, ybus4):
    nodes = ybus4.nodes
    n = len(nodes)
    op = OperatingPoint(nodes, np.ones(n), nominal_angles(nodes), np.zeros(n), np.zeros(n))
    m = len(ybus4.state_idx)
    A = np.zeros((2 * m, 2 * m))
    est = EstimatedState(A, unscale(A, np.ones(m), np.ones(m)), np.ones(m), np.ones(m), np.zeros(2 * m),
                         ybus4.state_idx)
    init = extract_initial_parameters(est, op, net4)
    assert np.allclose(init.theta, 0)


def test_stage1_on_simulated_series(net4, series4, ybus4):
    est = estimate_state(series4, ybus4.state_idx)
    assert np.all(est.tau_p > 0) and np.all(est.tau_q > 0)
    assert np.all(np.linalg.eigvals(est.A).real < 0)
    index = ParameterIndex(net4, connected_only=True)
    init = extract_initial_parameters(est, series4.mean_point(), net4, index)
    n = len(index)
    # a rough but informative starting point for stage 2
    assert mape(index.true_theta()[n:], init.theta[n:]) < 80
