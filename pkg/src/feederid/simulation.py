"""Synthetic micro-PMU data from the stochastic dynamic-load model.

Each dynamic load drives its node angle and magnitude toward the power
setpoint,

    d(delta)/dt = (P_set (1 + sigma_p xi_p) - P) / tau_p
    dV/dt       = (Q_set (1 + sigma_q xi_q) - Q) / tau_q

with P, Q the injections of the network at the current voltages.  Loads are
injections, so consumption has negative setpoints.  Linearizing around the
equilibrium gives dx = A x dt + B dW with

    A = -diag(1/tau) J,   B = diag(P_set sigma_p / tau_p, Q_set sigma_q / tau_q)

where J is the state Jacobian.  The minus sign is what makes A stable: for
inductive lines J has a positive-definite symmetric part.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

from .errors import DimensionMismatch, Divergence, NonConvergence, SchemaError
from .network import PHASES, BusAdmittance, NetworkModel, assemble_bus_admittance
from .powerflow import OperatingPoint, injections, solve_power_flow, state_jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LoadDynamics:
    """Per non-slack node load parameters, ordered like ``BusAdmittance.state_idx``.

    A node with tau_p == tau_q == 0 is a static constant-power load and is
    left out of the stochastic state.
    """

    nodes: tuple
    tau_p: np.ndarray
    tau_q: np.ndarray
    sigma_p: np.ndarray
    sigma_q: np.ndarray
    P_set: np.ndarray
    Q_set: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(tuple(n) for n in self.nodes))
        m = len(self.nodes)
        for name in ("tau_p", "tau_q", "sigma_p", "sigma_q", "P_set", "Q_set"):
            a = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (m,)).copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(self.tau_p < 0) or np.any(self.tau_q < 0):
            raise DimensionMismatch("time constants must be non-negative")
        if np.any((self.tau_p == 0) != (self.tau_q == 0)):
            raise DimensionMismatch("a static load needs tau_p == tau_q == 0")
        if np.any(self.sigma_p < 0) or np.any(self.sigma_q < 0):
            raise DimensionMismatch("noise intensities must be non-negative")

    @property
    def dynamic(self) -> np.ndarray:
        return self.tau_p > 0

    def with_sigma(self, sigma: float) -> "LoadDynamics":
        m = len(self.nodes)
        return replace(self, sigma_p=np.full(m, sigma), sigma_q=np.full(m, sigma))

    def to_dict(self) -> dict:
        return {
            "loads": [
                {
                    "bus": b,
                    "phase": PHASES[p],
                    "tau_p": float(self.tau_p[k]),
                    "tau_q": float(self.tau_q[k]),
                    "sigma_p": float(self.sigma_p[k]),
                    "sigma_q": float(self.sigma_q[k]),
                    "p_set": float(self.P_set[k]),
                    "q_set": float(self.Q_set[k]),
                }
                for k, (b, p) in enumerate(self.nodes)
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict, net: NetworkModel) -> "LoadDynamics":
        if "loads" not in doc:
            raise SchemaError("dynamics document needs a 'loads' list", field="loads")
        nodes = [n for n in net.bus_phases() if n[0] != net.slack.id]
        rows = {}
        for k, ld in enumerate(doc["loads"]):
            try:
                key = (str(ld["bus"]), PHASES.index(str(ld["phase"])))
                rows[key] = [float(ld[f]) for f in ("tau_p", "tau_q", "sigma_p", "sigma_q", "p_set", "q_set")]
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"bad load entry: {exc}", field=f"loads[{k}]") from None
        unknown = set(rows) - set(nodes)
        if unknown:
            raise SchemaError(f"loads at unknown or slack nodes: {sorted(unknown)}", field="loads")
        # nodes without an entry carry no load and are static
        vals = np.array([rows.get(n, [0, 0, 0, 0, 0, 0]) for n in nodes], dtype=float).reshape(-1, 6)
        return cls(tuple(nodes), *vals.T)


def default_dynamics(
    net: NetworkModel,
    seed: int = 0,
    sigma: float = 1.0,
    tau_range=(1.0, 10.0),
    p_range=(0.01, 0.05),
    power_factor: float = 0.9,
) -> LoadDynamics:
    """Random dynamic loads on every non-slack node.

    tau ~ U(tau_range) seconds, consumption ~ U(p_range) pu at a lagging
    power factor.
    """
    rng = np.random.default_rng(seed)
    nodes = [n for n in net.bus_phases() if n[0] != net.slack.id]
    m = len(nodes)
    tau_p = rng.uniform(*tau_range, m)
    tau_q = rng.uniform(*tau_range, m)
    p = rng.uniform(*p_range, m)
    q = p * np.tan(np.arccos(power_factor))
    return LoadDynamics(tuple(nodes), tau_p, tau_q, np.full(m, sigma), np.full(m, sigma), -p, -q)


def load_dynamics(path, net: NetworkModel) -> LoadDynamics:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc.msg}", line=exc.lineno) from None
    return LoadDynamics.from_dict(doc, net)


def save_dynamics(dyn: LoadDynamics, path) -> None:
    Path(path).write_text(json.dumps(dyn.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class MeasurementSeries:
    """Uniformly sampled V, delta, P, Q; arrays are (samples, nodes)."""

    dt: float
    nodes: tuple
    V: np.ndarray
    delta: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(tuple(n) for n in self.nodes))
        shape = None
        for name in ("V", "delta", "P", "Q"):
            a = np.array(getattr(self, name), dtype=float)
            if a.ndim != 2 or a.shape[1] != len(self.nodes):
                raise DimensionMismatch(f"{name} must be (samples, {len(self.nodes)}), got {a.shape}")
            if shape is not None and a.shape != shape:
                raise DimensionMismatch("V, delta, P, Q must share one shape")
            shape = a.shape
            if not np.all(np.isfinite(a)):
                raise DimensionMismatch(f"{name} contains non-finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.dt <= 0:
            raise DimensionMismatch("dt must be positive")

    @property
    def samples(self) -> int:
        return self.V.shape[0]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples) * self.dt

    def states(self, idx) -> np.ndarray:
        """Stacked [delta; V] over the given node positions, shape (samples, 2 len(idx))."""
        idx = np.asarray(idx, dtype=int)
        return np.hstack([self.delta[:, idx], self.V[:, idx]])

    def mean_point(self) -> OperatingPoint:
        return OperatingPoint(self.nodes, self.V.mean(0), self.delta.mean(0), self.P.mean(0), self.Q.mean(0))


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise (and optionally the process-noise intensity).

    ``std`` is the relative standard deviation applied to V (fraction of the
    magnitude), delta (radians) and, in ``power="additive"`` mode, P and Q
    (fraction of their value).  Left as None it defaults to
    tve_bound / (3 sqrt 2), which keeps the total vector error of almost every
    sample (>99.98%) inside the bound.
    """

    std: float | None = None
    tve_bound: float = 0.01
    power: str = "recompute"
    process_sigma: float | None = None

    def __post_init__(self):
        if self.power not in ("recompute", "additive"):
            raise ValueError(f"power must be 'recompute' or 'additive', got {self.power!r}")
        if self.std is not None and self.std < 0:
            raise ValueError("std must be non-negative")

    @property
    def effective_std(self) -> float:
        return self.tve_bound / (3 * np.sqrt(2)) if self.std is None else self.std


def _static_newton(ybus, V, delta, stat, P_set, Q_set, tol=1e-10, max_iter=20):
    """Put static constant-power nodes back on their setpoints (in place)."""
    k = len(stat)
    for _ in range(max_iter):
        P, Q = injections(ybus, V, delta)
        r = np.concatenate([P[stat] - P_set, Q[stat] - Q_set])
        if np.max(np.abs(r)) < tol:
            return
        J = state_jacobian(ybus, V, delta, rows=stat, cols=stat).full
        dx = np.linalg.solve(J, -r)
        delta[stat] += dx[:k]
        V[stat] += dx[k:]
    raise NonConvergence("static-load constraint solve failed", residual=float(np.max(np.abs(r))))


def simulate(
    net: NetworkModel,
    dynamics: LoadDynamics,
    initial: OperatingPoint,
    dt: float,
    samples: int,
    seed: int | np.random.SeedSequence | None = None,
    substeps: int = 10,
    ybus: BusAdmittance | None = None,
) -> MeasurementSeries:
    """Euler-Maruyama integration of the load model, sampled every ``dt``.

    The integration step is dt / substeps; one standard normal per dynamic
    node and channel per step.  Slack voltages stay fixed.
    """
    if dt <= 0 or samples < 2 or substeps < 1:
        raise ValueError("need dt > 0, samples >= 2, substeps >= 1")
    ybus = assemble_bus_admittance(net) if ybus is None else ybus
    st = ybus.state_idx
    if tuple(dynamics.nodes) != tuple(ybus.nodes[i] for i in st):
        raise DimensionMismatch("dynamics nodes do not match the network's non-slack nodes")
    dyn = dynamics.dynamic
    d_idx = st[dyn]
    s_idx = st[~dyn]
    tau_p, tau_q = dynamics.tau_p[dyn], dynamics.tau_q[dyn]
    Ps, Qs = dynamics.P_set[dyn], dynamics.Q_set[dyn]
    Ps_stat, Qs_stat = dynamics.P_set[~dyn], dynamics.Q_set[~dyn]
    h = dt / substeps
    amp_p = Ps * dynamics.sigma_p[dyn] / tau_p * np.sqrt(h)
    amp_q = Qs * dynamics.sigma_q[dyn] / tau_q * np.sqrt(h)

    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((samples - 1, substeps, 2, len(d_idx)))

    V = initial.V.copy()
    delta = initial.delta.copy()
    d0 = initial.delta.copy()
    N = len(ybus.nodes)
    out = {k: np.empty((samples, N)) for k in ("V", "delta", "P", "Q")}
    P, Q = injections(ybus, V, delta)
    out["V"][0], out["delta"][0], out["P"][0], out["Q"][0] = V, delta, P, Q
    Y = ybus.Y
    for k in range(1, samples):
        for s in range(substeps):
            v = V * np.exp(1j * delta)
            S = v * np.conj(Y @ v)
            delta[d_idx] += h / tau_p * (Ps - S.real[d_idx]) + amp_p * xi[k - 1, s, 0]
            V[d_idx] += h / tau_q * (Qs - S.imag[d_idx]) + amp_q * xi[k - 1, s, 1]
            if len(s_idx):
                _static_newton(ybus, V, delta, s_idx, Ps_stat, Qs_stat)
        if (
            not np.all(np.isfinite(V))
            or np.any(np.abs(delta - d0) > np.pi / 2)
            or np.any(V < 0.5)
            or np.any(V > 1.5)
        ):
            raise Divergence(f"simulation left the stable region at sample {k} (t = {k * dt:.3f} s)")
        P, Q = injections(ybus, V, delta)
        out["V"][k], out["delta"][k], out["P"][k], out["Q"][k] = V, delta, P, Q
    seed_val = seed if isinstance(seed, (int, np.integer)) else None
    return MeasurementSeries(dt, ybus.nodes, out["V"], out["delta"], out["P"], out["Q"], seed=seed_val,
                             meta={"substeps": substeps})


def add_measurement_noise(
    series: MeasurementSeries,
    noise: NoiseSpec,
    seed: int | np.random.SeedSequence | None = None,
    net: NetworkModel | None = None,
    ybus: BusAdmittance | None = None,
) -> MeasurementSeries:
    """Zero-mean Gaussian errors on every channel of every sample.

    In ``recompute`` mode P and Q are re-evaluated from the noisy V, delta
    through the network (which must then be given); in ``additive`` mode they
    get their own independent relative noise.
    """
    std = noise.effective_std
    if std == 0:
        return series
    if 3 * np.sqrt(2) * std > noise.tve_bound:
        warnings.warn(
            f"measurement noise std {std:g} exceeds the {noise.tve_bound:g} TVE bound at 3 sigma",
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((4,) + series.V.shape)
    V = series.V * (1 + std * eps[0])
    delta = series.delta + std * eps[1]
    if noise.power == "recompute":
        if ybus is None:
            if net is None:
                raise ValueError("recompute mode needs the network")
            ybus = assemble_bus_admittance(net)
        P, Q = injections(ybus, V, delta)
    else:
        P = series.P * (1 + std * eps[2])
        Q = series.Q * (1 + std * eps[3])
    meta = dict(series.meta, noise_std=std, noise_power=noise.power)
    return MeasurementSeries(series.dt, series.nodes, V, delta, P, Q, seed=series.seed, meta=meta)


def total_vector_error(clean: MeasurementSeries, noisy: MeasurementSeries) -> np.ndarray:
    """Per-sample, per-node TVE |v_noisy - v| / |v|."""
    v0 = clean.V * np.exp(1j * clean.delta)
    v1 = noisy.V * np.exp(1j * noisy.delta)
    return np.abs(v1 - v0) / np.abs(v0)


def true_state_matrix(
    net: NetworkModel,
    dynamics: LoadDynamics,
    op: OperatingPoint,
    ybus: BusAdmittance | None = None,
):
    """Linearized drift A and diffusion B over the dynamic nodes' [delta; V].

    Static nodes are eliminated by Kron reduction of the Jacobian.
    """
    ybus = assemble_bus_admittance(net) if ybus is None else ybus
    J = state_jacobian(ybus, op.V, op.delta).full
    dyn = np.concatenate([dynamics.dynamic, dynamics.dynamic])
    if not np.all(dyn):
        Jdd = J[np.ix_(dyn, dyn)]
        Jds = J[np.ix_(dyn, ~dyn)]
        Jsd = J[np.ix_(~dyn, dyn)]
        Jss = J[np.ix_(~dyn, ~dyn)]
        J = Jdd - Jds @ np.linalg.solve(Jss, Jsd)
    d = dynamics.dynamic
    tau = np.concatenate([dynamics.tau_p[d], dynamics.tau_q[d]])
    A = -J / tau[:, None]
    B = np.diag(np.concatenate([
        dynamics.P_set[d] * dynamics.sigma_p[d] / dynamics.tau_p[d],
        dynamics.Q_set[d] * dynamics.sigma_q[d] / dynamics.tau_q[d],
    ]))
    return A, B


def stationary_covariance(A, B) -> np.ndarray:
    """Solve A C + C A^T + B B^T = 0."""
    return solve_continuous_lyapunov(A, -B @ B.T)


def equilibrium(net: NetworkModel, dynamics: LoadDynamics, ybus: BusAdmittance | None = None) -> OperatingPoint:
    return solve_power_flow(net, dynamics.P_set, dynamics.Q_set, ybus=ybus)


# --- measurement CSV --------------------------------------------------------

CSV_HEADER = ["t", "bus", "phase", "V", "delta", "P", "Q"]


def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_measurements(series: MeasurementSeries, path) -> None:
    """One row per (sample, bus, phase); dt and seed go to ``<path>.meta.json``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for k in range(series.samples):
            t = repr(float(k * series.dt))
            for j, (bus, p) in enumerate(series.nodes):
                w.writerow([t, bus, PHASES[p], repr(float(series.V[k, j])), repr(float(series.delta[k, j])),
                            repr(float(series.P[k, j])), repr(float(series.Q[k, j]))])
    meta = {
        "dt": series.dt,
        "samples": series.samples,
        "seed": series.seed,
        "nodes": [[b, PHASES[p]] for b, p in series.nodes],
        **{k: v for k, v in series.meta.items() if isinstance(v, (int, float, str, bool))},
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_measurements(path, dt: float | None = None) -> MeasurementSeries:
    path = Path(path)
    meta = {}
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text())
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise SchemaError(f"expected header {','.join(CSV_HEADER)}", line=1)
        rows = list(reader)
    if not rows:
        raise SchemaError("measurement file has no samples", line=2)
    nodes = []
    times = []
    data = []
    for ln, row in enumerate(rows, start=2):
        if len(row) != 7:
            raise SchemaError(f"expected 7 columns, got {len(row)}", line=ln)
        try:
            t = float(row[0])
            node = (row[1], PHASES.index(row[2]))
            data.append([float(x) for x in row[3:]])
        except ValueError as exc:
            raise SchemaError(f"unparsable value: {exc}", line=ln) from None
        if not times or t != times[-1]:
            times.append(t)
        if len(times) == 1:
            nodes.append(node)
        elif node != nodes[(ln - 2) % len(nodes)]:
            raise SchemaError(f"node {row[1]}.{row[2]} out of order", line=ln)
    n = len(nodes)
    if len(rows) % n:
        raise SchemaError("samples do not all cover the same nodes", line=len(rows) + 1)
    arr = np.array(data).reshape(-1, n, 4)
    if dt is None:
        dt = meta.get("dt") or (times[1] - times[0] if len(times) > 1 else None)
    if dt is None:
        raise SchemaError("sample interval unknown (no sidecar and a single sample)")
    keep = {k: v for k, v in meta.items() if k not in ("dt", "samples", "seed", "nodes")}
    return MeasurementSeries(float(dt), tuple(nodes), arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3],
                             seed=meta.get("seed"), meta=keep)
