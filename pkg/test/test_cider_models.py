import math

import numpy as np
import pytest

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum
from app.core.statespace import Provenance, lift
from app.exceptions import KindMismatchError, SingularOperatingPointError
from app.schemas import Setpoint
from app.services.cider_models import (
    OperatingPoint,
    PerUnitBase,
    build_ltp_model,
    exact_reference,
    internal_steady_state,
    lift_to_hss,
    reciprocal_taylor,
    reference_small_signal,
    xi_spectrum,
)

pytestmark = pytest.mark.unit


def _distorted_v_d(idx: HarmonicIndexSet, v0: float = 1.0, ripple: float = 0.05) -> HarmonicSpectrum:
    """v_D(t) = V0·(1 + ripple·cos ωt)."""
    coeffs = np.zeros((1, idx.size), dtype=complex)
    coeffs[0, idx.position(0)] = v0
    coeffs[0, idx.position(1)] = coeffs[0, idx.position(-1)] = v0 * ripple / 2
    return HarmonicSpectrum(idx, coeffs)


def test_per_unit_base(following_ac_spec):
    base = PerUnitBase.from_spec(following_ac_spec)
    assert base.V_b == pytest.approx(math.sqrt(2) * 230.0)
    assert base.I_b == pytest.approx(2 * 60e3 / (3 * math.sqrt(2) * 230.0))
    assert base.Z_b == pytest.approx(base.V_b / base.I_b)


def test_fundamental_operating_point_is_one_pu(following_ac_spec):
    idx = HarmonicIndexSet(h_max=3, f1=50.0)
    op = OperatingPoint.fundamental(230.0, idx, PerUnitBase.from_spec(following_ac_spec))
    assert op.v_d.index_set.h_max == 4
    assert op.v_d.coefficient(0) == pytest.approx(1.0)
    assert np.max(np.abs(np.delete(op.v_gamma_dq.coefficients[0], 4))) < 1e-12
    assert np.max(np.abs(op.v_gamma_dq.coefficients[1])) < 1e-12
    assert op.check_hypothesis() < 1e-12


def test_xi_spectrum_removes_mean():
    idx = HarmonicIndexSet(h_max=3, f1=50.0)
    xi = xi_spectrum(_distorted_v_d(idx, v0=2.0))
    assert xi.coefficient(0) == 0
    assert xi.coefficient(1) == pytest.approx(0.025)
    assert xi.sup_norm() == pytest.approx(0.05, rel=1e-6)


def test_xi_spectrum_rejects_zero_mean():
    idx = HarmonicIndexSet(h_max=1, f1=50.0)
    with pytest.raises(SingularOperatingPointError):
        xi_spectrum(HarmonicSpectrum.zeros(idx))


def test_reciprocal_taylor_error_decreases_with_order():
    idx = HarmonicIndexSet(h_max=6, f1=50.0)
    v_d = _distorted_v_d(idx)
    exact = HarmonicSpectrum.from_samples(idx, 1.0 / v_d.to_samples(64).real)
    errors = []
    for n in range(4):
        psi = reciprocal_taylor(v_d, n)
        column = psi.matrix[: idx.size, idx.position(0)]
        errors.append(float(np.max(np.abs(column - exact.coefficients[0]))))
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[2] < 2e-4


def test_reciprocal_taylor_of_constant_voltage():
    idx = HarmonicIndexSet(h_max=2, f1=50.0)
    v_d = HarmonicSpectrum.constant(idx, [1.25])
    psi = reciprocal_taylor(v_d, 3)
    assert psi.channel_count == 2
    assert np.allclose(psi.matrix, np.eye(2 * idx.size) / 1.25)


def test_exact_reference_is_reciprocal():
    idx = HarmonicIndexSet(h_max=4, f1=50.0)
    v_d = _distorted_v_d(idx)
    w = exact_reference(v_d, (0.8, -0.3))
    t = np.linspace(0.0, 0.02, 9)
    v = v_d.evaluate(t)[0].real
    values = w.evaluate(t).real
    # Усечение спектра 1/v_D на h_max=4 даёт погрешность порядка 0.025^5
    assert np.allclose(values[0] * v, 0.8, atol=1e-6)
    assert np.allclose(values[1] * v, -0.3, atol=1e-6)


def test_reference_small_signal_for_sinusoidal_voltage(following_ac_spec):
    idx = HarmonicIndexSet(h_max=2, f1=50.0)
    base = PerUnitBase.from_spec(following_ac_spec)
    op = OperatingPoint.fundamental(230.0, idx.with_h_max(1), base)
    ref = reference_small_signal(op, following_ac_spec.setpoint, 2, base)
    m = op.v_d.index_set.size
    p, q = -50e3 / 60e3, -16.4e3 / 60e3
    assert np.allclose(ref.R_rho_hat.matrix, -np.kron(np.diag([p, q]), np.eye(m)))
    assert ref.W_kappa_bar.coefficient(0, 0) == pytest.approx(p)
    assert ref.W_kappa_bar.coefficient(0, 1) == pytest.approx(q)
    gain = ref.voltage_gain
    assert gain.shape == (2 * m, 2 * m)
    # Q-составляющая напряжения на опорный ток не влияет
    assert np.allclose(gain[:, m:], 0.0)


def test_reference_small_signal_requires_pq_setpoint(idx1, following_ac_spec):
    base = PerUnitBase.from_spec(following_ac_spec)
    op = OperatingPoint.fundamental(230.0, idx1, base)
    with pytest.raises(KindMismatchError):
        reference_small_signal(op, Setpoint(V_sigma=230.0, f_sigma=50.0))


# ————————————————————————————————————————————————
def test_model_dimensions(forming_spec, following_ac_spec, following_dc_spec, idx1):
    forming = build_ltp_model(forming_spec)
    assert forming.state_dim == 10
    assert [s.group for s in forming.inputs] == ["i_gamma"] * 3 + ["v_ref"] * 2
    following = build_ltp_model(following_ac_spec)
    assert following.state_dim == 15
    assert following.A.order == 2
    op = OperatingPoint.fundamental(230.0, idx1, PerUnitBase.from_spec(following_dc_spec))
    dc = build_ltp_model(following_dc_spec, op)
    assert dc.state_dim == 17
    assert dc.states[0].group == "v_delta"
    assert [s.group for s in dc.inputs][-1] == "i_src"


def test_dc_model_requires_operating_point(following_dc_spec):
    with pytest.raises(SingularOperatingPointError):
        build_ltp_model(following_dc_spec)


def test_lift_uses_one_more_order_for_dqz_signals(forming_spec, idx1):
    ltp = build_ltp_model(forming_spec)
    hss = lift_to_hss(ltp, idx1)
    assert hss.provenance == Provenance.OPEN_LOOP_RESOURCE
    assert hss.dqz_index_set.h_max == 2
    # 6 состояний ABC по 3 порядка и 4 состояния DQ по 5 порядков
    assert hss.size == 6 * 3 + 4 * 5
    assert lift_to_hss(ltp, idx1, idx1).size == 10 * 3


def test_lyapunov_transform_gives_time_invariant_model(forming_spec, following_ac_spec):
    for spec in (forming_spec, following_ac_spec):
        dqz = build_ltp_model(spec).to_dqz()
        assert dqz.is_time_invariant(atol=1e-6)


def test_forming_resource_tracks_voltage_reference(forming_spec, idx1):
    ltp = build_ltp_model(forming_spec)
    hss = lift(ltp, idx1)
    u = np.zeros(hss.B_hat.shape[1], dtype=complex)
    v_ref = hss.input_block("v_ref")
    # D-компонента на нулевом порядке (DQZ: 5 порядков на канал)
    u[v_ref[2]] = 1.0
    _, y = hss.steady_state(u)
    base = PerUnitBase.from_spec(forming_spec)
    amplitudes = 2 * np.abs(y.reshape(3, 3)[:, idx1.position(1)])
    assert np.allclose(amplitudes, base.V_b, rtol=1e-9)


def test_internal_steady_state_power_balance(following_dc_spec):
    idx = HarmonicIndexSet(h_max=1, f1=50.0)
    base = PerUnitBase.from_spec(following_dc_spec)
    op = OperatingPoint.fundamental(230.0, idx, base)
    steady = internal_steady_state(following_dc_spec, op)
    # P_sigma < 0: ресурс выдаёт около 50 кВт, исполнительный орган отдаёт их плюс потери в фильтре
    assert steady.dc_power == pytest.approx(50e3, rel=0.02)
    assert steady.dc_power > 50e3


def test_internal_steady_state_only_for_following(forming_spec, idx1):
    op = OperatingPoint.fundamental(230.0, idx1, PerUnitBase.from_spec(forming_spec))
    with pytest.raises(KindMismatchError):
        internal_steady_state(forming_spec, op)
