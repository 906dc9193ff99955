import csv

import numpy as np
import pytest

from feederid import (
    DimensionMismatch,
    MaxIterationsExceeded,
    ParameterIndex,
    PipelineOptions,
    RefinementProblem,
    broyden_refine,
    mape,
    mismatch,
    run_pipeline,
)
from feederid.network import network_from_dict, network_to_dict
from feederid.stage2 import ESTIMATE_HEADER, write_estimates


@pytest.fixture(scope="module")
def problem4(net4, series4):
    index = ParameterIndex(net4, connected_only=True)
    return RefinementProblem.from_series(series4, index, n_snapshots=50)


def test_true_parameters_are_a_fixed_point(problem4):
    theta = problem4.index.true_theta()
    assert np.max(np.abs(mismatch(theta, problem4))) < 1e-12
    res = broyden_refine(problem4, theta)
    assert res.converged and res.iterations == 0 and np.array_equal(res.theta, theta)


def test_mismatch_sign(problem4):
    theta = problem4.index.true_theta()
    F = mismatch(1.01 * theta, problem4)
    z = np.concatenate([1.01 * theta, np.zeros(len(problem4.angle_idx))])
    P, Q = problem4.computed(z)
    assert np.allclose(F.reshape(problem4.V.shape[0], -1), np.hstack([problem4.P - P, problem4.Q - Q]))


def test_jacobian_matches_finite_differences(problem4):
    rng = np.random.default_rng(0)
    z = np.concatenate([problem4.index.true_theta() * 1.05, 1e-3 * rng.standard_normal(len(problem4.angle_idx))])
    J = problem4.jacobian(z)
    h = 1e-6
    fd = np.empty_like(J)
    for c in range(len(z)):
        e = np.zeros_like(z)
        e[c] = h
        # mismatch is measured minus computed, so its slope is -J
        fd[:, c] = -(problem4.mismatch(z + e) - problem4.mismatch(z - e)) / (2 * h)
    assert np.max(np.abs(J - fd)) / np.max(np.abs(J)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_converges_from_ten_percent_perturbation(problem4, seed):
    rng = np.random.default_rng(seed)
    truth = problem4.index.true_theta()
    res = broyden_refine(problem4, truth * (1 + rng.uniform(-0.1, 0.1, truth.shape)))
    assert res.converged and res.mismatch_norm < 1e-8 and res.iterations <= 50
    assert np.allclose(res.theta, truth, rtol=1e-6)


def test_single_snapshot_is_rank_deficient(net4, series4):
    index = ParameterIndex(net4, connected_only=True)
    prob = RefinementProblem.from_series(series4, index, aggregation="mean")
    J = prob.jacobian(np.concatenate([index.true_theta(), np.zeros(len(prob.angle_idx))]))
    assert np.linalg.matrix_rank(J) < prob.n_unknowns


def test_pseudo_inverse_matches_normal_equations(problem4):
    z = np.concatenate([problem4.index.true_theta(), np.zeros(len(problem4.angle_idx))])
    J = problem4.jacobian(z)
    assert np.linalg.matrix_rank(J) == J.shape[1]
    F = np.random.default_rng(1).standard_normal(J.shape[0])
    assert np.allclose(np.linalg.pinv(J) @ F, np.linalg.solve(J.T @ J, J.T @ F))


def test_max_iterations_returns_best_iterate(problem4):
    truth = problem4.index.true_theta()
    start = truth * 1.5  # the step cap keeps one iteration from reaching the solution
    res = broyden_refine(problem4, start, max_iter=1)
    assert res.status == "max_iterations" and not res.converged
    assert res.mismatch_norm <= res.history[0]
    with pytest.raises(MaxIterationsExceeded):
        broyden_refine(problem4, start, max_iter=1, raise_on_max_iter=True)


def test_bad_initial_vector(problem4):
    with pytest.raises(DimensionMismatch):
        broyden_refine(problem4, np.zeros(3))
    with pytest.raises(DimensionMismatch):
        broyden_refine(problem4, np.full(problem4.n_params, np.nan))


def test_disconnected_branch_emits_nothing(net4):
    doc = network_to_dict(net4)
    doc["branches"].append({"from": "1", "to": "3", "phases": "c", "z_real": [[0, 0, 0], [0, 0, 0], [0, 0, 0.1]],
                            "z_imag": [[0, 0, 0], [0, 0, 0], [0, 0, 0.2]], "unit": "pu", "connected": False})
    net = network_from_dict(doc)
    assert len(ParameterIndex(net, connected_only=True)) == len(ParameterIndex(net4))
    full = ParameterIndex(net)
    from feederid.powerflow import parameter_derivatives
    from feederid import equilibrium, default_dynamics
    op = equilibrium(net, default_dynamics(net, seed=1))
    dS = parameter_derivatives(full, op.V, op.delta)
    assert np.all(dS[:, full.branch == 3] == 0)


def test_noiseless_pipeline(net4, series4):
    est = run_pipeline(net4, series4)
    truth = est.index.true_theta()
    n = len(est.index)
    s1 = mape(truth[n:], est.initial[n:])
    s2 = mape(truth[n:], est.refined[n:])
    assert s2 < s1 and s2 < 1e-6
    assert est.refinement.converged


def test_pipeline_accepts_reordered_series(net4, series4):
    order = np.arange(len(series4.nodes))[::-1]
    from feederid import MeasurementSeries
    rev = MeasurementSeries(series4.dt, [series4.nodes[k] for k in order], series4.V[:, order],
                            series4.delta[:, order], series4.P[:, order], series4.Q[:, order])
    a = run_pipeline(net4, series4, PipelineOptions(n_snapshots=20))
    b = run_pipeline(net4, rev, PipelineOptions(n_snapshots=20))
    assert np.allclose(a.refined, b.refined)


def test_write_estimates(tmp_path, net4, series4):
    est = run_pipeline(net4, series4, PipelineOptions(n_snapshots=20))
    p = tmp_path / "est.csv"
    write_estimates(est, p, est.index.true_theta())
    rows = list(csv.reader(p.open()))
    assert rows[0] == ESTIMATE_HEADER
    assert len(rows) == 1 + len(est.index)
    assert rows[1][:4] == ["0", "1", "a", "a"]
    write_estimates(est, p)
    assert list(csv.reader(p.open()))[1][4] == ""
