"""Polar power injections, Newton-Raphson power flow and analytic Jacobians.

State ordering used throughout the package: all non-slack node angles
first, then all non-slack node magnitudes, nodes in ``NetworkModel.bus_phases``
order.  Angles are phase-native (a = 0, b = -120 deg, c = +120 deg) and
angle differences are taken raw.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonConvergence
from .network import (
    BusAdmittance,
    NetworkModel,
    assemble_bus_admittance,
    branch_admittances,
    bus_admittance_from_blocks,
)

log = logging.getLogger(__name__)

PHASE_ANGLES = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])


def nominal_angles(nodes) -> np.ndarray:
    return np.array([PHASE_ANGLES[p] for _, p in nodes])


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """Voltage magnitude/angle and injections at every (bus, phase) node."""

    nodes: tuple
    V: np.ndarray
    delta: np.ndarray
    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        for name in ("V", "delta", "P", "Q"):
            a = np.array(getattr(self, name), dtype=float)
            if a.shape != (len(self.nodes),):
                raise DimensionMismatch(f"{name} has shape {a.shape}, expected ({len(self.nodes)},)")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.V <= 0):
            raise DimensionMismatch("voltage magnitudes must be positive")

    @property
    def voltage(self) -> np.ndarray:
        return self.V * np.exp(1j * self.delta)


def _as_matrix(ybus) -> np.ndarray:
    return ybus.Y if isinstance(ybus, BusAdmittance) else np.asarray(ybus, dtype=complex)


def injections(ybus, V, delta):
    """Active and reactive injections P, Q at every node.

    P_i^n = V_i^n sum_{j,p} V_j^p [G cos(d_i^n - d_j^p) + B sin(d_i^n - d_j^p)], Q with
    sin / -cos.  Evaluated as Re/Im of v * conj(Y v).  ``V`` and ``delta`` may
    carry leading batch dimensions (one row per snapshot).
    """
    Y = _as_matrix(ybus)
    V = np.asarray(V, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if V.shape != delta.shape or V.shape[-1] != Y.shape[0]:
        raise DimensionMismatch(
            f"V {V.shape} / delta {delta.shape} incompatible with {Y.shape[0]} nodes"
        )
    v = V * np.exp(1j * delta)
    s = v * np.conj(v @ Y.T)
    return s.real, s.imag


@dataclass(frozen=True, eq=False)
class StateJacobian:
    """dP/d(delta), dP/dV, dQ/d(delta), dQ/dV restricted to non-slack nodes."""

    P_delta: np.ndarray
    P_V: np.ndarray
    Q_delta: np.ndarray
    Q_V: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.P_delta, self.P_V], [self.Q_delta, self.Q_V]])

    @classmethod
    def from_full(cls, J) -> "StateJacobian":
        m = J.shape[0] // 2
        return cls(J[:m, :m], J[:m, m:], J[m:, :m], J[m:, m:])


def _dS(Y, v, V):
    """Complex dS/d(delta) and dS/dV over all nodes (dense)."""
    i = Y @ v
    dS_ddelta = 1j * np.diag(v) @ np.conj(np.diag(i) - Y * v[None, :])
    dS_dV = np.diag(v) @ np.conj(Y * (v / V)[None, :]) + np.diag(np.conj(i) * v / V)
    return dS_ddelta, dS_dV


def state_jacobian(ybus: BusAdmittance, V, delta, rows=None, cols=None) -> StateJacobian:
    """Analytic state Jacobian at (V, delta); rows/cols default to the non-slack nodes."""
    Y = _as_matrix(ybus)
    V = np.asarray(V, dtype=float)
    v = V * np.exp(1j * np.asarray(delta, dtype=float))
    rows = ybus.state_idx if rows is None else np.asarray(rows)
    cols = ybus.state_idx if cols is None else np.asarray(cols)
    dSd, dSv = _dS(Y, v, V)
    ix = np.ix_(rows, cols)
    return StateJacobian(dSd.real[ix], dSv.real[ix], dSd.imag[ix], dSv.imag[ix])


def solve_power_flow(
    net: NetworkModel,
    P_set,
    Q_set,
    ybus: BusAdmittance | None = None,
    tol: float = 1e-8,
    max_iter: int = 50,
    max_halvings: int = 4,
) -> OperatingPoint:
    """Newton-Raphson with all non-slack nodes PQ.

    ``P_set`` and ``Q_set`` are injections (loads negative) ordered like
    ``ybus.state_idx``.  The slack holds V = 1 pu and phase-native angles.
    """
    ybus = assemble_bus_admittance(net) if ybus is None else ybus
    nodes = ybus.nodes
    st = ybus.state_idx
    P_set = np.asarray(P_set, dtype=float)
    Q_set = np.asarray(Q_set, dtype=float)
    if P_set.shape != (len(st),) or Q_set.shape != (len(st),):
        raise DimensionMismatch(f"setpoints must have length {len(st)}")
    target = np.concatenate([P_set, Q_set])

    V = np.ones(len(nodes))
    delta = nominal_angles(nodes)
    m = len(st)

    def residual(V, delta):
        P, Q = injections(ybus, V, delta)
        return np.concatenate([P[st], Q[st]]) - target

    r = residual(V, delta)
    norm = np.max(np.abs(r)) if m else 0.0
    for it in range(max_iter + 1):
        if norm < tol:
            P, Q = injections(ybus, V, delta)
            log.debug("power flow converged in %d iterations (residual %.2e)", it, norm)
            return OperatingPoint(nodes, V, delta, P, Q)
        if it == max_iter:
            break
        J = state_jacobian(ybus, V, delta).full
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise NonConvergence("singular power-flow Jacobian", residual=norm, iterations=it) from None
        step = 1.0
        n_new = np.inf
        for _ in range(max_halvings + 1):
            d_new = delta.copy()
            V_new = V.copy()
            d_new[st] += step * dx[:m]
            V_new[st] += step * dx[m:]
            if np.all(V_new > 0):
                r_new = residual(V_new, d_new)
                n_new = np.max(np.abs(r_new))
                if n_new < norm:
                    break
            step *= 0.5
        if not np.isfinite(n_new):
            raise NonConvergence("power flow left the feasible region", residual=norm, iterations=it)
        V, delta, r, norm = V_new, d_new, r_new, n_new
    raise NonConvergence(
        f"power flow did not converge in {max_iter} iterations (residual {norm:.3e})",
        residual=norm,
        iterations=max_iter,
    )


# --- parameters ------------------------------------------------------------

class ParameterIndex:
    """Vectorization of branch parameters.

    One entry per (branch, n, p) with n, p over the branch's active phases,
    row-major, branches in file order.  theta = [vec(G); vec(B)].
    Branches with u_ij = 0 keep their entries (the Jacobian columns are zero)
    unless ``connected_only`` is set.
    """

    def __init__(self, net: NetworkModel, connected_only: bool = False):
        self.net = net
        entries = []
        for k, br in enumerate(net.branches):
            if connected_only and not br.connected:
                continue
            for n in br.phases:
                for p in br.phases:
                    entries.append((k, n, p))
        self.entries = entries
        pos = {node: i for i, node in enumerate(net.bus_phases())}
        self.branch = np.array([e[0] for e in entries], dtype=int)
        self.n = np.array([e[1] for e in entries], dtype=int)
        self.p = np.array([e[2] for e in entries], dtype=int)
        br = net.branches
        self.row_i = np.array([pos[(br[k].from_bus, n)] for k, n, _ in entries], dtype=int)
        self.row_j = np.array([pos[(br[k].to_bus, n)] for k, n, _ in entries], dtype=int)
        self.col_i = np.array([pos[(br[k].from_bus, p)] for k, _, p in entries], dtype=int)
        self.col_j = np.array([pos[(br[k].to_bus, p)] for k, _, p in entries], dtype=int)
        self.u = np.array([1.0 if br[k].connected else 0.0 for k, _, _ in entries])
        self.n_nodes = len(pos)

    def __len__(self):
        return len(self.entries)

    def true_theta(self) -> np.ndarray:
        adm = branch_admittances(self.net)
        g = np.array([adm[k].g[n, p] for k, n, p in self.entries])
        b = np.array([adm[k].b[n, p] for k, n, p in self.entries])
        return np.concatenate([g, b])

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (2 * len(self),):
            raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({2 * len(self)},)")
        return theta[: len(self)], theta[len(self):]

    def blocks(self, theta) -> list:
        g, b = self.split(theta)
        out = [None] * len(self.net.branches)
        for idx, (k, n, p) in enumerate(self.entries):
            if out[k] is None:
                out[k] = np.zeros((3, 3), dtype=complex)
            out[k][n, p] = g[idx] + 1j * b[idx]
        return out

    def bus_admittance(self, theta) -> BusAdmittance:
        return bus_admittance_from_blocks(self.net, self.blocks(theta))

    def labels(self):
        br = self.net.branches
        return [(br[k].from_bus, br[k].to_bus, n, p) for k, n, p in self.entries]


@dataclass(frozen=True, eq=False)
class ParameterJacobian:
    """Derivatives of all node injections w.r.t. branch parameters and angles.

    Parameter blocks are (nodes x parameters); angle blocks are
    (nodes x non-slack nodes).
    """

    P_G: np.ndarray
    P_B: np.ndarray
    Q_G: np.ndarray
    Q_B: np.ndarray
    P_delta: np.ndarray
    Q_delta: np.ndarray

    @property
    def full(self) -> np.ndarray:
        """The augmented [dP/dG dP/dB dP/dd; dQ/dG dQ/dB dQ/dd] matrix."""
        return np.block([[self.P_G, self.P_B, self.P_delta], [self.Q_G, self.Q_B, self.Q_delta]])


def parameter_derivatives(index: ParameterIndex, V, delta):
    """dS/dG for every parameter at one or many snapshots.

    Returns a complex array of shape (..., nodes, parameters); dS/dB is
    -1j times it.  Only rows i^n and j^n of each parameter are nonzero.
    """
    V = np.asarray(V, dtype=float)
    v = V * np.exp(1j * np.asarray(delta, dtype=float))
    vi_n = v[..., index.row_i]
    vj_n = v[..., index.row_j]
    dv = np.conj(v[..., index.col_i] - v[..., index.col_j])
    out = np.zeros(v.shape[:-1] + (index.n_nodes, len(index)), dtype=complex)
    cols = np.arange(len(index))
    out[..., index.row_i, cols] += vi_n * dv * index.u
    out[..., index.row_j, cols] -= vj_n * dv * index.u
    return out


def parameter_jacobian(net: NetworkModel, op: OperatingPoint, theta=None, index: ParameterIndex | None = None) -> ParameterJacobian:
    """Jacobian of injections w.r.t. [G, B, delta] at ``op``.

    ``theta`` sets the candidate parameters used for the angle columns
    (defaults to the network's own admittances).
    """
    index = ParameterIndex(net) if index is None else index
    theta = index.true_theta() if theta is None else np.asarray(theta, dtype=float)
    dSG = parameter_derivatives(index, op.V, op.delta)
    dSB = -1j * dSG
    ybus = index.bus_admittance(theta)
    sj = state_jacobian(ybus, op.V, op.delta, rows=np.arange(len(op.nodes)))
    return ParameterJacobian(dSG.real, dSB.real, dSG.imag, dSB.imag, sj.P_delta, sj.Q_delta)
