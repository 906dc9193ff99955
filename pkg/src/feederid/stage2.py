"""Second stage: Broyden refinement of the line parameters, and the full pipeline.

The unknowns are z = [vec(G); vec(B); d_delta] where d_delta is an angle
correction per non-slack node, shared by all snapshots.  The mismatch is
measured minus computed injections at every node and snapshot; each
iteration takes z += H F with H an approximation of the pseudo-inverse of
dF/dz, seeded analytically and then kept up to date by the "good" Broyden
rank-one update.  Angle corrections are solved for but not reported.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, DivergingIterates, MaxIterationsExceeded
from .network import PHASES, NetworkModel
from .powerflow import ParameterIndex, parameter_derivatives
from .simulation import MeasurementSeries
from .stage1 import EstimatedState, InitialParameters, estimate_state, extract_initial_parameters

log = logging.getLogger(__name__)

RISE_TOL = 1e-6


class RefinementProblem:
    """Measured injections at one or more snapshots of (V, delta).

    Arrays are (snapshots, nodes); nodes in ``index.net.bus_phases()`` order.
    """

    def __init__(self, index: ParameterIndex, V, delta, P, Q, solve_angles: bool = True):
        self.index = index
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        self.delta = np.atleast_2d(np.asarray(delta, dtype=float))
        self.P = np.atleast_2d(np.asarray(P, dtype=float))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=float))
        shape = self.V.shape
        if any(a.shape != shape for a in (self.delta, self.P, self.Q)) or shape[1] != index.n_nodes:
            raise DimensionMismatch("V, delta, P, Q must be (snapshots, nodes) and match the network")
        net = index.net
        slack = net.slack.id
        self.angle_idx = np.array(
            [k for k, (b, _) in enumerate(net.bus_phases()) if b != slack] if solve_angles else [],
            dtype=int,
        )
        N = index.n_nodes
        # Ybus is linear in theta: vec(Ybus) = M @ (g + j b)
        M = np.zeros((N * N, len(index)))
        cols = np.arange(len(index))
        u = index.u
        np.add.at(M, (index.row_i * N + index.col_i, cols), u)
        np.add.at(M, (index.row_j * N + index.col_j, cols), u)
        np.add.at(M, (index.row_i * N + index.col_j, cols), -u)
        np.add.at(M, (index.row_j * N + index.col_i, cols), -u)
        self._M = M

    @classmethod
    def from_series(
        cls,
        series: MeasurementSeries,
        index: ParameterIndex,
        aggregation: str = "snapshots",
        n_snapshots: int = 200,
        solve_angles: bool = True,
    ) -> "RefinementProblem":
        """Build from a series: the time average ("mean") or evenly spaced samples ("snapshots")."""
        if aggregation == "mean":
            rows = [a.mean(axis=0, keepdims=True) for a in (series.V, series.delta, series.P, series.Q)]
        elif aggregation == "snapshots":
            take = np.unique(np.linspace(0, series.samples - 1, min(n_snapshots, series.samples)).astype(int))
            rows = [a[take] for a in (series.V, series.delta, series.P, series.Q)]
        else:
            raise ValueError(f"unknown aggregation {aggregation!r}")
        return cls(index, *rows, solve_angles=solve_angles)

    @property
    def n_params(self) -> int:
        return 2 * len(self.index)

    @property
    def n_unknowns(self) -> int:
        return self.n_params + len(self.angle_idx)

    def ybus(self, theta) -> np.ndarray:
        g, b = self.index.split(theta)
        N = self.index.n_nodes
        return (self._M @ (g + 1j * b)).reshape(N, N)

    def _angles(self, z):
        d = self.delta.copy()
        if len(self.angle_idx):
            d[:, self.angle_idx] += z[self.n_params:]
        return d

    def computed(self, z):
        Y = self.ybus(z[: self.n_params])
        v = self.V * np.exp(1j * self._angles(z))
        s = v * np.conj(v @ Y.T)
        return s.real, s.imag

    def mismatch(self, z) -> np.ndarray:
        """[dP; dQ] per snapshot, flattened: measured minus computed."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_unknowns,):
            raise DimensionMismatch(f"z has shape {z.shape}, expected ({self.n_unknowns},)")
        P, Q = self.computed(z)
        return np.hstack([self.P - P, self.Q - Q]).ravel()

    def jacobian(self, z) -> np.ndarray:
        """d(computed injections)/dz, rows laid out like ``mismatch``."""
        z = np.asarray(z, dtype=float)
        d = self._angles(z)
        K, N = self.V.shape
        dSG = parameter_derivatives(self.index, self.V, d)  # (K, N, n)
        dSB = -1j * dSG
        blocks = [np.concatenate([dSG, dSB], axis=2)]
        if len(self.angle_idx):
            Y = self.ybus(z[: self.n_params])
            v = self.V * np.exp(1j * d)
            i = v @ Y.T
            dSd = -1j * v[:, :, None] * np.conj(Y[None, :, :] * v[:, None, :])
            dSd[:, np.arange(N), np.arange(N)] += 1j * v * np.conj(i)
            blocks.append(dSd[:, :, self.angle_idx])
        dS = np.concatenate(blocks, axis=2)
        return np.concatenate([dS.real, dS.imag], axis=1).reshape(K * 2 * N, -1)


def mismatch(theta, problem: RefinementProblem, angle_correction=None) -> np.ndarray:
    """Measured minus computed [dP; dQ] at candidate parameters ``theta``."""
    corr = np.zeros(len(problem.angle_idx)) if angle_correction is None else np.asarray(angle_correction)
    return problem.mismatch(np.concatenate([np.asarray(theta, dtype=float), corr]))


@dataclass(frozen=True, eq=False)
class RefinementResult:
    theta: np.ndarray
    angle_correction: np.ndarray
    iterations: int
    mismatch_norm: float
    converged: bool
    status: str
    history: tuple = ()


def broyden_refine(
    problem: RefinementProblem,
    theta0,
    tol: float = 1e-8,
    max_iter: int = 50,
    step_cap: float = 0.1,
    relinearize_every: int | None = None,
    diverge_window: int = 5,
    step_tol: float = 1e-14,
    raise_on_max_iter: bool = False,
) -> RefinementResult:
    """Quasi-Newton refinement of the branch parameters.

    Stops when the mismatch infinity-norm drops below ``tol``.  Each step is
    capped at ``step_cap`` times the norm of the current unknowns.  With
    ``relinearize_every = r`` the analytic Jacobian is recomputed every r
    iterations; otherwise only the first one is analytic.  If the iteration
    runs out, the best iterate comes back with ``converged=False``.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (problem.n_params,) or not np.all(np.isfinite(theta0)):
        raise DimensionMismatch("initial parameters must be finite and match the parameter index")
    z = np.concatenate([theta0, np.zeros(len(problem.angle_idx))])
    F = problem.mismatch(z)
    r = float(np.max(np.abs(F))) if F.size else 0.0
    history = [r]
    best = (r, z, 0)

    def result(status, converged, z_, r_, it):
        return RefinementResult(z_[: problem.n_params].copy(), z_[problem.n_params:].copy(), it, r_, converged,
                                status, tuple(history))

    if r < tol:
        return result("converged", True, z, r, 0)

    H = np.linalg.pinv(problem.jacobian(z))
    rises = 0
    l2 = float(np.linalg.norm(F))
    for it in range(1, max_iter + 1):
        s = H @ F
        limit = step_cap * max(np.linalg.norm(z), 1.0)
        ns = np.linalg.norm(s)
        if ns > limit:
            s *= limit / ns
        z_new = z + s
        F_new = problem.mismatch(z_new)
        r_new = float(np.max(np.abs(F_new)))
        if not np.isfinite(r_new):
            raise DivergingIterates("mismatch became non-finite", result=result("diverging", False, best[1], best[0], it))
        if relinearize_every and it % relinearize_every == 0:
            H = np.linalg.pinv(problem.jacobian(z_new))
        else:
            y = F - F_new
            Hy = H @ y
            denom = s @ Hy
            if abs(denom) > 1e-300:
                H += np.outer(s - Hy, s @ H) / denom
        l2_new = float(np.linalg.norm(F_new))
        # a noisy least-squares problem bottoms out at a floor and wobbles
        # there; only count growth clearly above rounding level
        rises = rises + 1 if l2_new > l2 * (1 + RISE_TOL) else 0
        l2 = l2_new
        if r > 0:
            log.debug("broyden it %d: |F| %.3e -> %.3e (ratio %.3g)", it, r, r_new, r_new / r)
        z, F, r = z_new, F_new, r_new
        history.append(r)
        if r < best[0]:
            best = (r, z, it)
        if r < tol:
            return result("converged", True, z, r, it)
        if rises >= diverge_window:
            raise DivergingIterates(
                f"mismatch grew for {rises} consecutive iterations",
                result=result("diverging", False, best[1], best[0], it),
            )
        if np.linalg.norm(s) <= step_tol * max(np.linalg.norm(z), 1.0):
            log.info("broyden stalled at |F| = %.3e after %d iterations", best[0], it)
            return result("stalled", False, best[1], best[0], it)
    msg = f"no convergence in {max_iter} iterations (best |F| = {best[0]:.3e})"
    if raise_on_max_iter:
        raise MaxIterationsExceeded(msg)
    log.info(msg)
    return result("max_iterations", False, best[1], best[0], max_iter)


# --- pipeline ----------------------------------------------------------------

@dataclass(frozen=True)
class PipelineOptions:
    lag: int = 1
    normalization: str = "S-1"
    both_directions: bool = True
    aggregation: str = "snapshots"
    n_snapshots: int = 200
    solve_angles: bool = True
    tol: float = 1e-8
    max_iter: int = 50
    step_cap: float = 0.1
    relinearize_every: int | None = None


@dataclass(frozen=True, eq=False)
class ParameterEstimate:
    """Stage-1 and refined parameters over the connected branches."""

    index: ParameterIndex
    initial: np.ndarray
    refined: np.ndarray
    branch_status: dict
    refinement: RefinementResult | None
    state: EstimatedState | None = None
    seconds: float = float("nan")
    extra: dict = field(default_factory=dict)

    def rows(self, truth: np.ndarray | None = None):
        n = len(self.index)
        out = []
        for e, (i, j, a, b) in enumerate(self.index.labels()):
            row = {"from": i, "to": j, "n": PHASES[a], "p": PHASES[b]}
            row["G_true"] = None if truth is None else truth[e]
            row["G_init"] = self.initial[e]
            row["G_refined"] = self.refined[e]
            row["B_true"] = None if truth is None else truth[n + e]
            row["B_init"] = self.initial[n + e]
            row["B_refined"] = self.refined[n + e]
            out.append(row)
        return out


ESTIMATE_HEADER = ["from", "to", "n", "p", "G_true", "G_init", "G_refined", "B_true", "B_init", "B_refined"]


def write_estimates(est: ParameterEstimate, path, truth=None) -> None:
    """Per branch/phase-pair CSV; true columns are empty when unknown."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_HEADER)
        for row in est.rows(truth):
            w.writerow(["" if row[k] is None else (repr(float(row[k])) if k[0] in "GB" else row[k])
                        for k in ESTIMATE_HEADER])


def _align(series: MeasurementSeries, net: NetworkModel) -> MeasurementSeries:
    nodes = net.bus_phases()
    if tuple(series.nodes) == tuple(nodes):
        return series
    pos = {n: k for k, n in enumerate(series.nodes)}
    missing = [n for n in nodes if n not in pos]
    if missing:
        raise DimensionMismatch(f"series lacks nodes {missing}")
    take = [pos[n] for n in nodes]
    return MeasurementSeries(series.dt, nodes, series.V[:, take], series.delta[:, take], series.P[:, take],
                             series.Q[:, take], seed=series.seed, meta=series.meta)


def run_pipeline(net: NetworkModel, series: MeasurementSeries, options: PipelineOptions | None = None,
                 state_nodes=None) -> ParameterEstimate:
    """Both stages end to end.

    ``net`` only contributes connectivity and phases; its impedances are not
    read.  ``state_nodes`` restricts the stochastic state to a subset of the
    non-slack nodes (default: all of them).
    """
    opts = PipelineOptions() if options is None else options
    t0 = time.perf_counter()
    series = _align(series, net)
    nodes = list(series.nodes)
    slack = net.slack.id
    if state_nodes is None:
        state_idx = np.array([k for k, (b, _) in enumerate(nodes) if b != slack], dtype=int)
    else:
        state_idx = np.array([nodes.index(tuple(n)) for n in state_nodes], dtype=int)
    index = ParameterIndex(net, connected_only=True)

    est = estimate_state(series, state_idx, opts.lag, opts.normalization)
    op = series.mean_point()
    init: InitialParameters = extract_initial_parameters(est, op, net, index, opts.both_directions)

    problem = RefinementProblem.from_series(series, index, opts.aggregation, opts.n_snapshots, opts.solve_angles)
    try:
        res = broyden_refine(problem, init.theta, opts.tol, opts.max_iter, opts.step_cap, opts.relinearize_every)
    except DivergingIterates as exc:
        log.info("refinement diverged: %s; keeping the best iterate", exc)
        res = exc.result
    status = {k: s for k, s in init.status.items()}
    return ParameterEstimate(index, init.theta, res.theta, status, res, est, time.perf_counter() - t0)
