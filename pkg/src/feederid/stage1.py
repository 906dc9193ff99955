"""First stage: state matrix from lagged covariances, then WLS line parameters.

The pipeline is

1. lag-0 and lag-K sample covariances of x = [delta; V] (non-slack nodes),
2. A_hat = logm(C(K dt) C(0)^-1) / (K dt),
3. load time constants by regressing angle (magnitude) increments on the
   deviation of P (Q) from its mean,
4. J_hat = -diag(tau_hat) A_hat, and per branch phase pair a small WLS fit
   of (G, B) to the four Jacobian entries it produces.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import logm

from .errors import (
    DegenerateSamples,
    DimensionMismatch,
    IllConditionedL,
    LogBranchError,
    NonPositiveTau,
    SingularCovariance,
)
from .network import BusAdmittance, NetworkModel
from .powerflow import OperatingPoint, ParameterIndex, StateJacobian
from .simulation import MeasurementSeries

log = logging.getLogger(__name__)

RIDGE = 1e-12
RIDGE_COND = 1e10  # the ridge is only added when C0 is worse conditioned than this
COND_LIMIT = 1e14
IMAG_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class CovariancePair:
    C0: np.ndarray
    Ck: np.ndarray
    lag: int
    dt_lag: float


@dataclass(frozen=True, eq=False)
class EstimatedState:
    A: np.ndarray
    jacobian: StateJacobian
    tau_p: np.ndarray
    tau_q: np.ndarray
    mean: np.ndarray
    state_idx: np.ndarray
    cov: CovariancePair | None = None


@dataclass(frozen=True, eq=False)
class InitialParameters:
    """Stage-1 (G*, B*) laid out like ``index``; status is per branch."""

    index: ParameterIndex
    theta: np.ndarray
    status: dict = field(default_factory=dict)

    @property
    def G(self):
        return self.theta[: len(self.index)]

    @property
    def B(self):
        return self.theta[len(self.index):]


def state_array(series: MeasurementSeries, state_idx) -> np.ndarray:
    """The F matrix transposed: one row [delta; V] per sample."""
    return series.states(state_idx)


def sample_mean(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DimensionMismatch("need at least two samples")
    return X.mean(axis=0)


def covariances(X, lag: int = 1, dt: float = 1.0, normalization: str = "S-1") -> CovariancePair:
    """Zero-lag and lag-K sample covariances, both centred on the full-series mean.

    ``normalization`` is "S-1" (both divided by S - 1) or "S-K-1" for the
    lagged one.
    """
    X = np.asarray(X, dtype=float)
    S = X.shape[0]
    if not 1 <= lag < S:
        raise DimensionMismatch(f"lag must satisfy 1 <= K < S, got K={lag}, S={S}")
    D = X - sample_mean(X)
    C0 = D.T @ D / (S - 1)
    denom = {"S-1": S - 1, "S-K-1": S - lag - 1}[normalization]
    Ck = D[lag:].T @ D[:-lag] / denom
    m = C0.shape[0]
    tr = np.trace(C0)
    if not tr > 0 or np.linalg.cond(C0 + RIDGE * tr / m * np.eye(m)) > COND_LIMIT:
        raise DegenerateSamples("zero-lag covariance is singular; the series carries no excitation")
    return CovariancePair(C0, Ck, lag, lag * dt)


def estimate_state_matrix(cov: CovariancePair, ridge: float = RIDGE) -> np.ndarray:
    """A_hat = logm(Ck C0^-1) / dt_lag on the principal branch.

    A near-singular C0 (condition number above ``RIDGE_COND``) gets
    ``ridge * trace(C0) / m`` added to its diagonal before the solve; a
    well-conditioned one is used as is, so exact covariances give A back to
    rounding error.
    """
    C0, Ck = cov.C0, cov.Ck
    m = C0.shape[0]
    tr = np.trace(C0)
    if not tr > 0:
        raise SingularCovariance("zero-lag covariance is zero")
    C0r = C0
    if np.linalg.cond(C0) > RIDGE_COND:
        C0r = C0 + ridge * tr / m * np.eye(m)
    if np.linalg.cond(C0r) > COND_LIMIT:
        raise SingularCovariance("zero-lag covariance is singular beyond the ridge")
    M = np.linalg.solve(C0r.T, Ck.T).T
    ev = np.linalg.eigvals(M)
    scale = max(np.max(np.abs(ev)), np.finfo(float).tiny)
    on_cut = (np.abs(ev.imag) <= 1e-12 * scale) & (ev.real <= 0)
    if np.any(on_cut):
        raise LogBranchError(
            f"Ck C0^-1 has {int(on_cut.sum())} eigenvalue(s) on the closed negative real axis; "
            "no principal logarithm (try a shorter lag)"
        )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        L = logm(M)
    L = np.asarray(L)
    if np.iscomplexobj(L):
        resid = np.max(np.abs(L.imag))
        if resid > IMAG_TOL:
            warnings.warn(f"matrix logarithm has imaginary residue {resid:.2e}; discarded", RuntimeWarning,
                          stacklevel=2)
        L = L.real
    return L / cov.dt_lag


def wls(L, U, W=None) -> np.ndarray:
    """beta = (L^T W L)^-1 L^T W U; plain least squares when W is None."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    U = np.asarray(U, dtype=float)
    if W is None:
        return np.linalg.lstsq(L, U, rcond=None)[0]
    W = np.asarray(W, dtype=float)
    LtW = L.T @ W
    return np.linalg.solve(LtW @ L, LtW @ U)


def estimate_time_constants(series: MeasurementSeries, state_idx, W=None):
    """Per-node tau_p, tau_q from increments of delta and V.

    For each node, (x[k+1] - x[k]) / dt is regressed on mean(P) - P[k]
    (respectively Q); the slope is 1/tau.
    """
    if series.samples < 3:
        raise DimensionMismatch("need at least three samples")
    idx = np.asarray(state_idx, dtype=int)
    out = []
    for angle, power in ((series.delta, series.P), (series.V, series.Q)):
        U = np.diff(angle[:, idx], axis=0) / series.dt
        L = power[:, idx].mean(axis=0) - power[:-1, idx]
        taus = np.empty(len(idx))
        for k in range(len(idx)):
            if not np.any(L[:, k]):
                raise NonPositiveTau(f"node {series.nodes[idx[k]]} shows no power variation", index=k)
            beta = wls(L[:, k:k + 1], U[:, k], W)[0]
            if not beta > 0:
                raise NonPositiveTau(
                    f"non-positive 1/tau ({beta:.3g}) at node {series.nodes[idx[k]]}: "
                    "static load or insufficient excitation",
                    index=k,
                )
            taus[k] = 1.0 / beta
        out.append(taus)
    return out[0], out[1]


def unscale(A, tau_p, tau_q) -> StateJacobian:
    """Recover J from A = -diag(1/tau) J."""
    tau = np.concatenate([tau_p, tau_q])
    return StateJacobian.from_full(-tau[:, None] * A)


def estimate_state(series: MeasurementSeries, state_idx, lag: int = 1, normalization: str = "S-1",
                   W=None) -> EstimatedState:
    X = state_array(series, state_idx)
    cov = covariances(X, lag, series.dt, normalization)
    A = estimate_state_matrix(cov)
    tau_p, tau_q = estimate_time_constants(series, state_idx, W)
    return EstimatedState(A, unscale(A, tau_p, tau_q), tau_p, tau_q, sample_mean(X),
                          np.asarray(state_idx, dtype=int), cov)


# --- line parameters ---------------------------------------------------------

def coupling_rows(V, delta, a, b):
    """L rows linking Ybus[a, b] = G + jB (a != b) to the four Jacobian entries.

    Rows are dP_a/d(delta_b), dP_a/dV_b, dQ_a/d(delta_b), dQ_a/dV_b.
    """
    Va, Vb = V[a], V[b]
    s, c = np.sin(delta[a] - delta[b]), np.cos(delta[a] - delta[b])
    return np.array([
        [Va * Vb * s, -Va * Vb * c],
        [Va * c, Va * s],
        [-Va * Vb * c, -Va * Vb * s],
        [Va * s, -Va * c],
    ])


def self_rows(op: OperatingPoint, a):
    """L rows and offsets linking Ybus[a, a] = G + jB to the diagonal Jacobian entries."""
    V, P, Q = op.V[a], op.P[a], op.Q[a]
    L = np.array([[0.0, -V * V], [V, 0.0], [-V * V, 0.0], [0.0, -V]])
    offset = np.array([-Q, P / V, P, Q / V])
    return L, offset


def jacobian_entries(J: StateJacobian, ra, rb):
    return np.array([J.P_delta[ra, rb], J.P_V[ra, rb], J.Q_delta[ra, rb], J.Q_V[ra, rb]])


def _ybus_entry(J, op, spos, a, b, W, cond_bound):
    """WLS estimate of Ybus[a, b] from J_hat; None when a row/col is not a state."""
    if a not in spos or b not in spos:
        return None
    U = jacobian_entries(J, spos[a], spos[b])
    if a == b:
        L, off = self_rows(op, a)
        U = U - off
    else:
        L = coupling_rows(op.V, op.delta, a, b)
    return L, U


def _solve(systems, W, cond_bound):
    L = np.vstack([s[0] for s in systems])
    U = np.concatenate([s[1] for s in systems])
    Wm = None if W is None else np.kron(np.eye(len(systems)), W)
    LtL = L.T @ (L if Wm is None else Wm @ L)
    if np.linalg.cond(LtL) > cond_bound:
        raise IllConditionedL(f"cond(L^T W L) = {np.linalg.cond(LtL):.3g}")
    return wls(L, U, Wm)


def extract_initial_parameters(
    est: EstimatedState,
    op: OperatingPoint,
    net: NetworkModel,
    index: ParameterIndex | None = None,
    both_directions: bool = True,
    W=None,
    cond_bound: float = 1e12,
) -> InitialParameters:
    """Initial (G*, B*) for every connected branch and active phase pair.

    Branches between two state nodes use the off-diagonal Jacobian entries
    (from both ends when ``both_directions``).  A branch with one end outside
    the state (the slack, or a static load) is recovered from the diagonal
    block of its other end minus the already-estimated neighbouring
    branches.  Failures leave zeros and a status note.
    """
    index = ParameterIndex(net, connected_only=True) if index is None else index
    pos = {node: k for k, node in enumerate(op.nodes)}
    spos = {int(a): k for k, a in enumerate(est.state_idx)}
    J = est.jacobian
    n_par = len(index)
    g = np.zeros(n_par)
    b = np.zeros(n_par)
    status = {}
    entries_of = {}
    for e, (k, n, p) in enumerate(index.entries):
        entries_of.setdefault(k, []).append((e, n, p))

    deferred = []
    for k, ents in entries_of.items():
        br = net.branches[k]
        i, j = br.key
        if all(pos[(i, n)] in spos and pos[(j, n)] in spos for n in br.phases):
            try:
                for e, n, p in ents:
                    systems = [_ybus_entry(J, op, spos, pos[(i, n)], pos[(j, p)], W, cond_bound)]
                    if both_directions:
                        systems.append(_ybus_entry(J, op, spos, pos[(j, n)], pos[(i, p)], W, cond_bound))
                    beta = _solve(systems, W, cond_bound)
                    g[e], b[e] = -beta
                status[k] = "ok"
            except IllConditionedL as exc:
                log.warning("branch %s-%s: %s", i, j, exc)
                status[k] = "ill-conditioned"
                for e, _, _ in ents:
                    g[e] = b[e] = 0.0
        else:
            deferred.append(k)

    for k in deferred:
        br = net.branches[k]
        i, j = br.key
        end = j if all(pos[(j, n)] in spos for n in br.phases) else i
        if not all(pos[(end, n)] in spos for n in br.phases):
            status[k] = "unobservable"
            continue
        others = [
            k2 for k2 in entries_of
            if k2 != k and end in net.branches[k2].key
        ]
        if any(status.get(k2) != "ok" for k2 in others):
            status[k] = "unobservable"
            continue
        try:
            for e, n, p in entries_of[k]:
                a, c = pos[(end, n)], pos[(end, p)]
                beta = _solve([_ybus_entry(J, op, spos, a, c, W, cond_bound)], W, cond_bound)
                y_bus = beta[0] + 1j * beta[1]
                for k2 in others:
                    for e2, n2, p2 in entries_of[k2]:
                        if (n2, p2) == (n, p):
                            y_bus -= g[e2] + 1j * b[e2]
                g[e], b[e] = y_bus.real, y_bus.imag
            status[k] = "ok"
        except IllConditionedL as exc:
            log.warning("branch %s-%s: %s", i, j, exc)
            status[k] = "ill-conditioned"
            for e, _, _ in entries_of[k]:
                g[e] = b[e] = 0.0
    return InitialParameters(index, np.concatenate([g, b]), status)
