"""Multiphase feeder model and admittance assembly.

Every branch stores a full 3x3 block with structural zeros outside its phase
set; only the active submatrix is ever inverted.  Internally everything is
per-unit on the feeder's (s_base, v_base).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PhaseConsistencyError, SchemaError, SingularImpedance

PHASES = "abc"
DEFAULT_COND_BOUND = 1e12


@dataclass(frozen=True)
class PhaseSet:
    """Nonempty subset of {a, b, c}, kept in canonical a-b-c order."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if not 1 <= len(idx) <= 3 or any(i not in (0, 1, 2) for i in idx):
            raise PhaseConsistencyError(f"invalid phase set {self.indices!r}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def parse(cls, text: str) -> "PhaseSet":
        text = str(text).strip().lower()
        if not text or any(c not in PHASES for c in text) or len(set(text)) != len(text):
            raise PhaseConsistencyError(f"invalid phase string {text!r}")
        return cls(tuple(PHASES.index(c) for c in text))

    @property
    def mask(self) -> tuple[bool, bool, bool]:
        return tuple(i in self.indices for i in range(3))

    def issubset(self, other: "PhaseSet") -> bool:
        return set(self.indices) <= set(other.indices)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, phase):
        return phase in self.indices

    def __str__(self):
        return "".join(PHASES[i] for i in self.indices)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_block(a, phases: PhaseSet, name: str):
    if a.shape != (3, 3):
        raise SchemaError(f"{name} must be 3x3, got shape {a.shape}", field=name)
    inactive = [i for i in range(3) if i not in phases]
    if inactive and (np.any(a[inactive, :] != 0) or np.any(a[:, inactive] != 0)):
        raise PhaseConsistencyError(
            f"{name} has nonzero entries on phases outside {phases}"
        )


@dataclass(frozen=True, eq=False)
class BranchImpedance:
    from_bus: str
    to_bus: str
    phases: PhaseSet
    z: np.ndarray
    connected: bool = True

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z, complex))
        _check_block(self.z, self.phases, "z")

    @property
    def key(self) -> tuple[str, str]:
        return (self.from_bus, self.to_bus)

    def active(self) -> np.ndarray:
        idx = self.phases.indices
        return self.z[np.ix_(idx, idx)]


@dataclass(frozen=True, eq=False)
class BranchAdmittance:
    from_bus: str
    to_bus: str
    phases: PhaseSet
    g: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "g", _frozen(self.g, float))
        object.__setattr__(self, "b", _frozen(self.b, float))
        _check_block(self.g, self.phases, "g")
        _check_block(self.b, self.phases, "b")

    @property
    def y(self) -> np.ndarray:
        return self.g + 1j * self.b


@dataclass(frozen=True)
class Bus:
    id: str
    phases: PhaseSet
    is_slack: bool = False


@dataclass(frozen=True)
class Base:
    s_base_kva: float
    v_base_kv: float

    @property
    def z_base_ohm(self) -> float:
        # v_base is line-to-line kV, s_base three-phase kVA
        return self.v_base_kv**2 / (self.s_base_kva / 1000.0)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Buses, branches and the per-unit base of one feeder.

    Branch order is significant: it fixes the parameter vectorization used
    by both estimation stages.
    """

    buses: tuple[Bus, ...]
    branches: tuple[BranchImpedance, ...]
    base: Base = field(default_factory=lambda: Base(1000.0, 4.16))

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate bus ids", field="buses")
        slack = [b for b in self.buses if b.is_slack]
        if len(slack) != 1:
            raise SchemaError(f"exactly one slack bus required, found {len(slack)}", field="is_slack")
        by_id = {b.id: b for b in self.buses}
        seen = set()
        for k, br in enumerate(self.branches):
            for end in br.key:
                if end not in by_id:
                    raise SchemaError(f"branch {k} references unknown bus {end!r}", field="branches")
                if not br.phases.issubset(by_id[end].phases):
                    raise PhaseConsistencyError(
                        f"branch {br.from_bus}-{br.to_bus} phases '{br.phases}' not present "
                        f"at bus {end!r} (phases '{by_id[end].phases}')"
                    )
            if br.from_bus == br.to_bus:
                raise SchemaError(f"branch {k} is a self-loop", field="branches")
            pair = frozenset(br.key)
            if pair in seen:
                raise SchemaError(f"duplicate branch {br.from_bus}-{br.to_bus}", field="branches")
            seen.add(pair)
        self._check_connected()

    def _check_connected(self):
        adj = {b.id: set() for b in self.buses}
        for br in self.branches:
            if br.connected:
                adj[br.from_bus].add(br.to_bus)
                adj[br.to_bus].add(br.from_bus)
        start = self.slack.id
        stack, seen = [start], {start}
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        if len(seen) != len(self.buses):
            missing = sorted(set(adj) - seen)
            raise SchemaError(f"network is not connected; isolated buses {missing}", field="branches")

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.is_slack)

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def connectivity(self, i: str, j: str) -> int:
        """Connectivity indicator u_ij (1 if an in-service branch joins i and j)."""
        pair = {i, j}
        return int(any(br.connected and set(br.key) == pair for br in self.branches))

    def bus_phases(self) -> list[tuple[str, int]]:
        """All (bus, phase) nodes in bus order, phases a-b-c within a bus."""
        return [(b.id, p) for b in self.buses for p in b.phases]

    def equals(self, other: "NetworkModel") -> bool:
        if self.base != other.base or self.buses != other.buses:
            return False
        if len(self.branches) != len(other.branches):
            return False
        return all(
            a.key == b.key
            and a.phases == b.phases
            and a.connected == b.connected
            and np.array_equal(a.z, b.z)
            for a, b in zip(self.branches, other.branches)
        )


def invert_branch_impedance(z: BranchImpedance, cond_bound: float = DEFAULT_COND_BOUND) -> BranchAdmittance:
    """Branch admittance Y = Z^-1 on the active phases, zeros elsewhere."""
    idx = z.phases.indices
    sub = z.active()
    cond = np.linalg.cond(sub)
    if not np.isfinite(cond) or cond > cond_bound:
        raise SingularImpedance(
            f"impedance of branch {z.from_bus}-{z.to_bus} is singular (cond={cond:.3g})"
        )
    y = np.zeros((3, 3), dtype=complex)
    y[np.ix_(idx, idx)] = np.linalg.inv(sub)
    return BranchAdmittance(z.from_bus, z.to_bus, z.phases, y.real, y.imag)


class BusAdmittance:
    """Bus admittance matrix over all (bus, phase) nodes.

    Off-diagonal block (i, j) is -Y_ij and diagonal block (i, i) is the sum of
    Y_ij over incident in-service branches.  No shunt elements.
    """

    def __init__(self, nodes, Y, slack_bus):
        self.nodes = list(nodes)
        self.pos = {node: k for k, node in enumerate(self.nodes)}
        self.Y = np.asarray(Y, dtype=complex)
        self.Y.setflags(write=False)
        self.slack_bus = slack_bus
        self.slack_idx = np.array([k for k, (b, _) in enumerate(self.nodes) if b == slack_bus], dtype=int)
        self.state_idx = np.array([k for k, (b, _) in enumerate(self.nodes) if b != slack_bus], dtype=int)

    @property
    def G(self) -> np.ndarray:
        return self.Y.real

    @property
    def B(self) -> np.ndarray:
        return self.Y.imag

    def __len__(self):
        return len(self.nodes)

    def lookup(self, bus_i, n, bus_j, p) -> complex:
        return self.Y[self.pos[(bus_i, n)], self.pos[(bus_j, p)]]


def bus_admittance_from_blocks(net: NetworkModel, blocks) -> BusAdmittance:
    """Assemble from per-branch 3x3 complex admittance blocks (None to skip)."""
    nodes = net.bus_phases()
    pos = {node: k for k, node in enumerate(nodes)}
    Y = np.zeros((len(nodes), len(nodes)), dtype=complex)
    for br, y in zip(net.branches, blocks):
        if y is None or not br.connected:
            continue
        i, j = br.key
        for n in br.phases:
            for p in br.phases:
                v = y[n, p]
                Y[pos[(i, n)], pos[(i, p)]] += v
                Y[pos[(j, n)], pos[(j, p)]] += v
                Y[pos[(i, n)], pos[(j, p)]] -= v
                Y[pos[(j, n)], pos[(i, p)]] -= v
    return BusAdmittance(nodes, Y, net.slack.id)


def branch_admittances(net: NetworkModel, cond_bound: float = DEFAULT_COND_BOUND) -> list[BranchAdmittance]:
    return [invert_branch_impedance(br, cond_bound) for br in net.branches]


def assemble_bus_admittance(net: NetworkModel, cond_bound: float = DEFAULT_COND_BOUND) -> BusAdmittance:
    blocks = [
        invert_branch_impedance(br, cond_bound).y if br.connected else None
        for br in net.branches
    ]
    return bus_admittance_from_blocks(net, blocks)


# --- feeder files -----------------------------------------------------------

def _require(obj, key, where, line=None):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"missing required field in {where}", field=key, line=line)
    return obj[key]


def _matrix(value, name, line):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{name} is not numeric: {exc}", field=name, line=line) from None
    if a.shape != (3, 3):
        raise SchemaError(f"{name} must be exactly 3x3, got shape {a.shape}", field=name, line=line)
    if not np.all(np.isfinite(a)):
        raise SchemaError(f"{name} has non-finite entries", field=name, line=line)
    return a


def _line_of(text: str, needle: str, start: int = 0) -> int | None:
    k = text.find(needle, start)
    return None if k < 0 else text.count("\n", 0, k) + 1


def network_from_dict(doc: dict, text: str = "") -> NetworkModel:
    base_doc = _require(doc, "base", "document")
    try:
        base = Base(float(_require(base_doc, "s_base_kva", "base")), float(_require(base_doc, "v_base_kv", "base")))
    except (TypeError, ValueError):
        raise SchemaError("base values must be numeric", field="base", line=_line_of(text, '"base"')) from None
    if base.s_base_kva <= 0 or base.v_base_kv <= 0:
        raise SchemaError("base values must be positive", field="base", line=_line_of(text, '"base"'))

    buses = []
    for k, bd in enumerate(_require(doc, "buses", "document")):
        line = _line_of(text, f'"{bd.get("id")}"') if isinstance(bd, dict) else None
        bus_id = str(_require(bd, "id", f"buses[{k}]", line))
        phases = PhaseSet.parse(_require(bd, "phases", f"buses[{k}]", line))
        buses.append(Bus(bus_id, phases, bool(bd.get("is_slack", False))))
    by_id = {b.id: b for b in buses}

    branches = []
    for k, bd in enumerate(_require(doc, "branches", "document")):
        where = f"branches[{k}]"
        line = None
        if isinstance(bd, dict) and "from" in bd:
            line = _line_of(text, '"branches"')
        fb = str(_require(bd, "from", where, line))
        tb = str(_require(bd, "to", where, line))
        phases = PhaseSet.parse(_require(bd, "phases", where, line))
        for end in (fb, tb):
            if end in by_id and not phases.issubset(by_id[end].phases):
                raise PhaseConsistencyError(
                    f"{where} ({fb}-{tb}) uses phases '{phases}' but bus {end!r} "
                    f"declares only '{by_id[end].phases}'"
                )
        zr = _matrix(_require(bd, "z_real", where, line), f"{where}.z_real", line)
        zi = _matrix(_require(bd, "z_imag", where, line), f"{where}.z_imag", line)
        unit = bd.get("unit", "pu")
        if unit not in ("ohm", "pu"):
            raise SchemaError(f"unit must be 'ohm' or 'pu', got {unit!r}", field=f"{where}.unit", line=line)
        z = zr + 1j * zi
        if unit == "ohm":
            z = z / base.z_base_ohm
        branches.append(BranchImpedance(fb, tb, phases, z, bool(bd.get("connected", True))))
    return NetworkModel(tuple(buses), tuple(branches), base)


def network_to_dict(net: NetworkModel) -> dict:
    return {
        "base": {"s_base_kva": net.base.s_base_kva, "v_base_kv": net.base.v_base_kv},
        "buses": [{"id": b.id, "phases": str(b.phases), "is_slack": b.is_slack} for b in net.buses],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "phases": str(br.phases),
                "z_real": br.z.real.tolist(),
                "z_imag": br.z.imag.tolist(),
                "unit": "pu",
                "connected": br.connected,
            }
            for br in net.branches
        ],
    }


def load_network(path) -> NetworkModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise SchemaError("top-level document must be an object")
    return network_from_dict(doc, text)


def save_network(net: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n")
