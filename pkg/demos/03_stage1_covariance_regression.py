"""
Stage 1: from covariances to an initial guess
=============================================

The lag-0 and lag-1 covariances of the state give the drift matrix through
a matrix logarithm.  Scaling by the estimated load time constants turns it
into a power-flow Jacobian, from which each branch's G and B follow by a
small least-squares fit.
"""

import numpy as np

from feederid import (
    ParameterIndex,
    assemble_bus_admittance,
    default_dynamics,
    equilibrium,
    estimate_state,
    extract_initial_parameters,
    load_feeder,
    mape,
    simulate,
    true_state_matrix,
)

net = load_feeder("feeder4")
ybus = assemble_bus_admittance(net)
dyn = default_dynamics(net, seed=1)
op = equilibrium(net, dyn, ybus)
series = simulate(net, dyn, op, dt=0.02, samples=3600, seed=3)

est = estimate_state(series, ybus.state_idx, lag=1)
A_true, _ = true_state_matrix(net, dyn, op, ybus)
print(f"drift matrix error: {np.linalg.norm(est.A - A_true) / np.linalg.norm(A_true):.1%}")
print("tau_p estimate / truth:", (est.tau_p / dyn.tau_p).round(2))

index = ParameterIndex(net, connected_only=True)
init = extract_initial_parameters(est, series.mean_point(), net, index)
truth = index.true_theta()
n = len(index)
print(f"stage-1 MAPE(G) = {mape(truth[:n], init.G):.1f}%   MAPE(B) = {mape(truth[n:], init.B):.1f}%")
print("per-branch status:", init.status)

# With the exact Jacobian the same extraction is exact
from feederid import state_jacobian
from feederid.stage1 import EstimatedState, unscale

J = state_jacobian(ybus, op.V, op.delta).full
tau = np.concatenate([dyn.tau_p, dyn.tau_q])
A = -J / tau[:, None]
exact = EstimatedState(A, unscale(A, dyn.tau_p, dyn.tau_q), dyn.tau_p, dyn.tau_q, np.zeros(len(tau)), ybus.state_idx)
print("exact-Jacobian extraction error:", np.abs(extract_initial_parameters(exact, op, net, index).theta - truth).max())
