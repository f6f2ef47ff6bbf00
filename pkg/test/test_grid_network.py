import math

import numpy as np
import pytest

from app.core.harmonics import HarmonicIndexSet, Sequence, symmetric_components
from app.exceptions import TopologyError
from app.schemas import NetworkTopology
from app.services.grid_network import (
    build_grid_ltp,
    grid_hss,
    line_to_abc_statespace,
    phase_to_sequence,
    sequence_to_phase,
    stored_energy,
    thevenin_emf_spectrum,
    thevenin_from_sc,
    thevenin_impedance,
)

pytestmark = pytest.mark.unit


def test_thevenin_from_short_circuit_power():
    r, x = thevenin_from_sc(230.0, 3.85e6, 0.271)
    assert math.hypot(r, x) == pytest.approx(0.0137, rel=0.01)
    assert r / x == pytest.approx(0.271)
    r, x = thevenin_from_sc(230.0, 267e3, 6.207)
    # V_n²/S_sc = 198 мОм, это на 1.6 % выше 195 мОм, заданных для ресурсов
    assert math.hypot(r, x) == pytest.approx(0.198, rel=0.01)
    assert math.hypot(r, x) == pytest.approx(0.195, rel=0.02)
    with pytest.raises(ValueError):
        thevenin_from_sc(230.0, 0.0, 1.0)


def test_resource_thevenin_impedance_magnitude(forming_config, system_config):
    r, l = thevenin_impedance(forming_config.thevenin, 50.0)
    assert math.hypot(r, 2 * math.pi * 50.0 * l) == pytest.approx(0.195, rel=0.01)
    assert r / (2 * math.pi * 50.0 * l) == pytest.approx(6.207)
    r, l = thevenin_impedance(system_config.thevenin, 50.0)
    assert math.hypot(r, 2 * math.pi * 50.0 * l) == pytest.approx(0.0137, rel=0.01)


def test_explicit_impedance_overrides_short_circuit_power(system_config):
    spec = system_config.thevenin.model_copy(update={"Z_sc_mag": 0.02})
    r, l = thevenin_impedance(spec, 50.0)
    assert math.hypot(r, 2 * math.pi * 50.0 * l) == pytest.approx(0.02)


def test_emf_harmonics_are_balanced(system_config):
    idx = HarmonicIndexSet(h_max=7, f1=50.0)
    emf = thevenin_emf_spectrum(system_config.thevenin, idx)
    amp = math.sqrt(2) * 230.0
    fundamental = symmetric_components(*emf.coefficients[:, idx.position(1)])
    assert abs(fundamental[Sequence.P]) == pytest.approx(amp / 2)
    fifth = symmetric_components(*emf.coefficients[:, idx.position(5)])
    assert abs(fifth[Sequence.N]) == pytest.approx(amp * 0.06 / 2)
    assert abs(fifth[Sequence.P]) < 1e-9
    seventh = symmetric_components(*emf.coefficients[:, idx.position(7)])
    assert abs(seventh[Sequence.P]) == pytest.approx(amp * 0.05 / 2)
    assert emf.is_conjugate_symmetric()
    clean = thevenin_emf_spectrum(system_config.thevenin, idx, with_harmonics=False)
    assert np.allclose(clean.coefficients[:, idx.position(5)], 0.0)


def test_sequence_and_phase_matrices():
    m = sequence_to_phase(0.162, 0.529)
    assert np.allclose(m, m.T)
    assert phase_to_sequence(m) == pytest.approx((0.162, 0.529))
    eig = np.sort(np.linalg.eigvalsh(m))
    assert eig == pytest.approx([0.162, 0.162, 0.529])


def test_single_line_passes_voltage_without_load(system_config):
    line = line_to_abc_statespace(system_config.topology.branches[0].segment)
    assert line.state_dim == 6
    a, b = line.A.average(), line.B.average()
    u = np.concatenate([[1.0, -0.5, -0.5], np.zeros(3)])
    x = -np.linalg.solve(a, b @ u)
    assert np.allclose(line.C.average() @ x, u[:3])
    assert np.all(np.linalg.eigvals(a).real < 0)


# ————————————————————————————————————————————————
def test_passive_grid_is_stable(system_config):
    grid = build_grid_ltp(system_config.topology, system_config.thevenin, [], 50.0)
    assert grid.state_dim == 3 + 4 * 3 + 5 * 3
    assert grid.is_time_invariant()
    assert np.all(np.linalg.eigvals(grid.A.average()).real < 0)
    hss = grid_hss(grid, HarmonicIndexSet(h_max=1, f1=50.0))
    assert hss.size == 3 * grid.state_dim


def test_passive_grid_dissipates_stored_energy(system_config, rng):
    grid = build_grid_ltp(system_config.topology, system_config.thevenin, [], 50.0)
    e = grid.parameters["energy"]
    assert np.allclose(e, e.T)
    assert np.all(np.linalg.eigvalsh(e) > 0)
    # dW/dt = xᵀ·E·A·x при нулевых входах
    a = np.real(grid.A.average())
    assert np.max(np.linalg.eigvalsh(e @ a + a.T @ e)) < 1e-9 * np.max(np.abs(e @ a))
    x = rng.standard_normal((4, grid.state_dim))
    w = stored_energy(grid, x)
    assert w.shape == (4,)
    assert w[0] == pytest.approx(0.5 * x[0] @ e @ x[0])


def test_grid_ports_follow_cider_kinds(system_config, forming_spec, following_ac_spec):
    ciders = [forming_spec.model_copy(update={"node": "N01"}), following_ac_spec.model_copy(update={"node": "N05"})]
    grid = build_grid_ltp(system_config.topology, system_config.thevenin, ciders, 50.0)
    assert grid.input_indices("i_abs", "N05") and grid.input_indices("v_node", "N01")
    assert grid.output_indices("i_node", "N01")
    assert not grid.state_indices("v_node", "N01")
    assert grid.parameters["forming"] == ["N01"]


def test_disconnected_topology_is_rejected(system_config):
    topology = NetworkTopology(nodes=["N01", "N02"], thevenin_node="N01")
    with pytest.raises(TopologyError):
        build_grid_ltp(topology, system_config.thevenin, [])


def test_node_without_capacitance_is_rejected(system_config):
    topology = NetworkTopology(nodes=["N01"], thevenin_node="N01")
    with pytest.raises(TopologyError):
        build_grid_ltp(topology, system_config.thevenin, [])


def test_two_ciders_on_one_node_are_rejected(system_config, following_ac_spec):
    ciders = [
        following_ac_spec.model_copy(update={"id": "a", "node": "N03"}),
        following_ac_spec.model_copy(update={"id": "b", "node": "N03"}),
    ]
    with pytest.raises(TopologyError):
        build_grid_ltp(system_config.topology, system_config.thevenin, ciders)
