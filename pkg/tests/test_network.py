import numpy as np
import pytest

from feederid import (
    Base,
    BranchImpedance,
    Bus,
    NetworkModel,
    PhaseConsistencyError,
    PhaseSet,
    SchemaError,
    SingularImpedance,
    assemble_bus_admittance,
    branch_admittances,
    invert_branch_impedance,
    load_network,
    save_network,
)
from feederid.network import network_from_dict, network_to_dict


def two_bus(z=None, phases="abc"):
    z = np.diag([0.01 + 0.02j] * 3) if z is None else z
    ps = PhaseSet.parse(phases)
    mask = np.outer(ps.mask, ps.mask)
    buses = [Bus("s", PhaseSet.parse("abc"), True), Bus("l", ps)]
    return NetworkModel(buses, [BranchImpedance("s", "l", ps, np.where(mask, z, 0))], Base(1000.0, 4.16))


def test_phase_set_parse_and_order():
    assert PhaseSet.parse("ca").indices == (0, 2)
    assert str(PhaseSet.parse("CB")) == "bc"
    assert PhaseSet.parse("b").issubset(PhaseSet.parse("abc"))
    for bad in ("", "abd", "aa"):
        with pytest.raises(PhaseConsistencyError):
            PhaseSet.parse(bad)


def test_invert_scalar_branch():
    ps = PhaseSet.parse("a")
    z = np.zeros((3, 3), complex)
    z[0, 0] = 0.01 + 0.02j
    y = invert_branch_impedance(BranchImpedance("x", "y", ps, z))
    assert y.y[0, 0] == pytest.approx(1 / (0.01 + 0.02j))
    assert np.all(y.y[1:, :] == 0) and np.all(y.y[:, 1:] == 0)


def test_singular_impedance_rejected():
    z = np.ones((3, 3), complex) * (0.1 + 0.1j)
    with pytest.raises(SingularImpedance):
        invert_branch_impedance(BranchImpedance("x", "y", PhaseSet.parse("abc"), z))


def test_two_bus_ybus_structure():
    net = two_bus()
    Y = assemble_bus_admittance(net).Y
    y = 1 / (0.01 + 0.02j)
    assert np.allclose(Y[:3, :3], y * np.eye(3))
    assert np.allclose(Y[:3, 3:], -y * np.eye(3))
    assert np.allclose(Y.sum(axis=1), 0)  # no shunts


def test_bundled_ybus_is_symmetric_with_zero_row_sums(net4, net13):
    for net in (net4, net13):
        Y = assemble_bus_admittance(net).Y
        assert np.allclose(Y, Y.T)
        assert np.allclose(Y.sum(axis=1), 0, atol=1e-9)


def test_partial_phase_branch_has_structural_zeros(net4):
    adm = branch_admittances(net4)
    bc = adm[1]
    assert str(bc.phases) == "bc"
    assert np.all(bc.y[0, :] == 0) and np.all(bc.y[:, 0] == 0)
    assert np.all(adm[2].y[:2, :] == 0)


def test_disconnected_branch_contributes_nothing(net4):
    doc = network_to_dict(net4)
    doc["branches"].append({"from": "1", "to": "3", "phases": "c", "z_real": [[0, 0, 0], [0, 0, 0], [0, 0, 0.1]],
                            "z_imag": [[0, 0, 0], [0, 0, 0], [0, 0, 0.2]], "unit": "pu", "connected": False})
    net = network_from_dict(doc)
    assert np.allclose(assemble_bus_admittance(net).Y, assemble_bus_admittance(net4).Y)
    assert net.connectivity("1", "3") == 0
    assert net4.connectivity("0", "1") == 1


def test_phase_not_on_bus_rejected():
    with pytest.raises(PhaseConsistencyError):
        NetworkModel(
            [Bus("s", PhaseSet.parse("abc"), True), Bus("l", PhaseSet.parse("a"))],
            [BranchImpedance("s", "l", PhaseSet.parse("ab"), np.diag([0.1, 0.1, 0]).astype(complex))],
            Base(1000.0, 4.16),
        )


def test_schema_error_reports_field_and_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "base": {"s_base_kva": 1000, "v_base_kv": 4.16},\n  "buses": [\n    {"id": "0"}\n  ],\n'
                 '  "branches": []\n}\n')
    with pytest.raises(SchemaError) as exc:
        load_network(p)
    assert exc.value.field is not None
    p.write_text("{not json")
    with pytest.raises(SchemaError) as exc:
        load_network(p)
    assert exc.value.line == 1


def test_round_trip(tmp_path, net13):
    p = tmp_path / "f.json"
    save_network(net13, p)
    back = load_network(p)
    assert back.equals(net13)
    assert np.allclose(assemble_bus_admittance(back).Y, assemble_bus_admittance(net13).Y)


def test_ohm_to_per_unit():
    base = Base(5000.0, 4.16)
    assert base.z_base_ohm == pytest.approx(4.16**2 / 5.0)
    doc = {"base": {"s_base_kva": 5000.0, "v_base_kv": 4.16},
           "buses": [{"id": "0", "phases": "a", "is_slack": True}, {"id": "1", "phases": "a"}],
           "branches": [{"from": "0", "to": "1", "phases": "a", "unit": "ohm",
                         "z_real": [[base.z_base_ohm, 0, 0], [0, 0, 0], [0, 0, 0]],
                         "z_imag": [[0, 0, 0], [0, 0, 0], [0, 0, 0]]}]}
    net = network_from_dict(doc)
    assert net.branches[0].z[0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("change, exc", [
    (lambda d: d["buses"].append(dict(d["buses"][1])), SchemaError),
    (lambda d: d["buses"][1].update(is_slack=True), SchemaError),
    (lambda d: d["branches"][0].update({"to": "zz"}), SchemaError),
    (lambda d: d["branches"].pop(), SchemaError),  # bus 3 becomes islanded
])
def test_invalid_networks(net4, change, exc):
    doc = network_to_dict(net4)
    change(doc)
    with pytest.raises(exc):
        network_from_dict(doc)
