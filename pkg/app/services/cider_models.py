# app/services/cider_models.py
"""
Модели CIDER (преобразовательных источников) в пространстве состояний.

Силовая часть (фильтры, звено постоянного тока) описывается в координатах
ABC в физических единицах, программная часть (каскад ПИ-регуляторов) в
координатах DQ в относительных единицах. Переход между ними выполняют
блоки преобразования Парка, это единственная зависимость A(t) от времени
для моделей без звена постоянного тока.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from app.core.harmonics import (
    HarmonicIndexSet,
    HarmonicSpectrum,
    ToeplitzOperator,
    inverse_park_fourier,
    park_fourier,
    park_operator,
    toeplitz_matrix,
)
from app.core.periodic import PeriodicMatrix
from app.core.statespace import Frame, HssModel, LtpModel, Provenance, Signal, lift
from app.exceptions import HypothesisWarning, KindMismatchError, SingularOperatingPointError
from app.schemas import CiderKind, CiderSpec, Setpoint
from app.settings import settings

logger = logging.getLogger(__name__)


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class PerUnitBase:
    V_b: float   # амплитуда фазного напряжения
    S_b: float
    I_b: float
    Z_b: float

    @classmethod
    def from_spec(cls, spec: CiderSpec) -> "PerUnitBase":
        v_b = math.sqrt(2.0) * spec.nominal_voltage
        i_b = 2.0 * spec.rated_power / (3.0 * v_b)
        return cls(V_b=v_b, S_b=spec.rated_power, I_b=i_b, Z_b=v_b / i_b)


class OperatingPointSource(str, Enum):
    TDS = "tds"
    HPF = "hpf"
    FUNDAMENTAL_ONLY = "fundamental_only"
    THEVENIN = "thevenin"


@dataclass(frozen=True)
class OperatingPoint:
    """Напряжение сети в точке подключения: DQ в о.е. (h_max+1) и, если известно, ABC в вольтах."""

    v_gamma_dq: HarmonicSpectrum
    source: OperatingPointSource
    v_gamma_abc: HarmonicSpectrum | None = None
    v_base: float = 1.0

    @classmethod
    def from_abc(
        cls,
        v_abc: HarmonicSpectrum,
        base: PerUnitBase,
        source: OperatingPointSource,
    ) -> "OperatingPoint":
        op = cls(_to_dq(v_abc, base.V_b), source, v_abc, base.V_b)
        op.check_hypothesis()
        return op

    @classmethod
    def fundamental(cls, nominal_voltage: float, idx: HarmonicIndexSet, base: PerUnitBase) -> "OperatingPoint":
        """Симметричное синусоидальное напряжение прямой последовательности, без искажений."""
        amp = math.sqrt(2.0) * nominal_voltage
        coeffs = np.zeros((3, idx.size), dtype=complex)
        if idx.h_max >= 1:
            phi = 2 * np.pi * np.arange(3) / 3
            coeffs[:, idx.position(1)] = amp / 2 * np.exp(-1j * phi)
            coeffs[:, idx.position(-1)] = amp / 2 * np.exp(1j * phi)
        return cls.from_abc(HarmonicSpectrum(idx, coeffs), base, OperatingPointSource.FUNDAMENTAL_ONLY)

    @property
    def v_d(self) -> HarmonicSpectrum:
        return self.v_gamma_dq.channel(0)

    def truncated(self, h_max: int) -> "OperatingPoint":
        if self.v_gamma_abc is None:
            idx = self.v_gamma_dq.index_set.with_h_max(h_max + 1)
            return OperatingPoint(self.v_gamma_dq.resized(idx), self.source)
        v_abc = self.v_gamma_abc.resized(self.v_gamma_abc.index_set.with_h_max(h_max))
        return OperatingPoint(_to_dq(v_abc, self.v_base), self.source, v_abc, self.v_base)

    def check_hypothesis(self, ceiling: float | None = None) -> float:
        ceiling = settings.HSA_HYPOTHESIS_CEILING if ceiling is None else ceiling
        norm = xi_spectrum(self.v_d).sup_norm()
        if norm >= ceiling:
            message = f"‖ξ‖∞ = {norm:.3f} не меньше порога {ceiling}: разложение обратной величины ненадёжно"
            logger.warning(message)
            warnings.warn(message, HypothesisWarning, stacklevel=2)
        return norm


def _to_dq(v_abc: HarmonicSpectrum, v_base: float) -> HarmonicSpectrum:
    idx = v_abc.index_set
    idx_dqz = idx.with_h_max(idx.h_max + 1)
    return HarmonicSpectrum.from_flat(idx_dqz, park_operator(idx, idx_dqz) @ v_abc.flat() / v_base)


# ————————————————————————————————————————————————
def xi_spectrum(v_d: HarmonicSpectrum) -> HarmonicSpectrum:
    """Относительная переменная составляющая ξ = (v_D - V_0)/V_0."""
    v0 = v_d.coefficient(0)
    if abs(v0) <= np.finfo(float).tiny:
        raise SingularOperatingPointError("Постоянная составляющая v_D равна нулю")
    coeffs = np.array(v_d.coefficients[:1] / v0)
    coeffs[0, v_d.index_set.h_max] = 0.0
    return HarmonicSpectrum(v_d.index_set, coeffs)


def reciprocal_taylor(v_d: HarmonicSpectrum, n: int | None = None) -> ToeplitzOperator:
    """Ψ̂⁽ⁿ⁾ = (1/V_0)·Σ_{k=0..n} (-Ξ̂)^k, продублированная на два канала DQ."""
    n = settings.HSA_TAYLOR_ORDER if n is None else n
    if n < 0:
        raise ValueError(f"Порядок разложения должен быть неотрицательным, получено: {n}")
    idx = v_d.index_set
    xi = xi_spectrum(v_d)
    if xi.sup_norm() >= settings.HSA_HYPOTHESIS_CEILING:
        warnings.warn(f"‖ξ‖∞ выше порога {settings.HSA_HYPOTHESIS_CEILING}", HypothesisWarning, stacklevel=2)
    xi_hat = toeplitz_matrix(xi.coefficients[0], idx.orders, idx.orders)
    term = np.eye(idx.size, dtype=complex)
    psi = term.copy()
    for _ in range(n):
        term = -xi_hat @ term
        psi = psi + term
    psi = psi / v_d.coefficient(0)
    return ToeplitzOperator(idx, 2, np.kron(np.eye(2), psi))


def exact_reference(v_d: HarmonicSpectrum, w_sigma: tuple[float, float]) -> HarmonicSpectrum:
    """Спектр i*(t) = w_σ / v_D(t) по отсчётам во времени (без разложения в ряд)."""
    idx = v_d.index_set
    n = max(64, 16 * idx.size)
    samples = np.real(v_d.to_samples(n))[0]
    if np.min(np.abs(samples)) <= np.finfo(float).eps:
        raise SingularOperatingPointError("v_D(t) обращается в ноль, обратная величина не определена")
    reference = np.vstack([w_sigma[0] / samples, w_sigma[1] / samples])
    return HarmonicSpectrum.from_samples(idx, reference)


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class ReferenceSmallSignal:
    W_kappa_bar: HarmonicSpectrum
    R_rho_hat: ToeplitzOperator
    R_sigma_hat: ToeplitzOperator
    taylor_order: int

    @property
    def voltage_gain(self) -> np.ndarray:
        """R̂_ρ·E: отклик опорного тока на вектор DQ напряжения (действует только D-компонента)."""
        m = self.R_rho_hat.index_set.size
        eye = np.eye(m)
        zero = np.zeros((m, m))
        e = np.block([[eye, zero], [eye, zero]])
        return self.R_rho_hat.matrix @ e


def _setpoint_vector(sp: Setpoint, base: PerUnitBase | None) -> tuple[float, float]:
    s = 1.0 if base is None else base.S_b
    return sp.P_sigma / s, sp.Q_sigma / s


def reference_small_signal(
    op: OperatingPoint,
    sp: Setpoint,
    n: int | None = None,
    base: PerUnitBase | None = None,
) -> ReferenceSmallSignal:
    if sp.P_sigma is None or sp.Q_sigma is None:
        raise KindMismatchError("Закон опорного расчёта PQ применим только к следящим CIDER")
    n = settings.HSA_TAYLOR_ORDER if n is None else n
    v_d = op.v_d
    idx = v_d.index_set
    psi = reciprocal_taylor(v_d, n)
    p, q = _setpoint_vector(sp, base)
    w_sigma = HarmonicSpectrum.constant(idx, [p, q])
    w_lift = np.kron(np.diag([p, q]), np.eye(idx.size))
    r_rho = -(psi.matrix @ psi.matrix) @ w_lift
    return ReferenceSmallSignal(
        W_kappa_bar=psi.apply(w_sigma),
        R_rho_hat=ToeplitzOperator(idx, 2, r_rho),
        R_sigma_hat=psi,
        taylor_order=n,
    )


# ————————————————————————————————————————————————
class _Linear:
    """Линейное выражение X(t)·x + U(t)·u над состояниями и входами модели."""

    def __init__(self, x: PeriodicMatrix, u: PeriodicMatrix):
        self.x = x
        self.u = u

    def __add__(self, other: "_Linear") -> "_Linear":
        return _Linear(self.x + other.x, self.u + other.u)

    def __sub__(self, other: "_Linear") -> "_Linear":
        return _Linear(self.x - other.x, self.u - other.u)

    def __neg__(self) -> "_Linear":
        return _Linear(-self.x, -self.u)

    def __mul__(self, scalar: float) -> "_Linear":
        return _Linear(self.x * scalar, self.u * scalar)

    __rmul__ = __mul__

    def through(self, m: PeriodicMatrix) -> "_Linear":
        return _Linear(m @ self.x, m @ self.u)

    def stack(self, other: "_Linear") -> "_Linear":
        n, k = self.x.shape[1], self.u.shape[1]
        sizes = [self.x.shape[0], other.x.shape[0]]
        return _Linear(
            PeriodicMatrix.block([[self.x], [other.x]], sizes, [n]),
            PeriodicMatrix.block([[self.u], [other.u]], sizes, [k]),
        )


class _ModelBuilder:
    def __init__(self, subsystem: str):
        self.subsystem = subsystem
        self.states: list[Signal] = []
        self.inputs: list[Signal] = []
        self._dynamics: dict[str, _Linear] = {}
        self._outputs: list[tuple[list[Signal], _Linear]] = []

    def _signals(self, group: str, coords: str | tuple, frame: Frame) -> list[Signal]:
        return [Signal(self.subsystem, group, c, frame) for c in coords]

    def add_state(self, group: str, coords, frame: Frame) -> None:
        self.states += self._signals(group, coords, frame)

    def add_input(self, group: str, coords, frame: Frame) -> None:
        self.inputs += self._signals(group, coords, frame)

    def _selector(self, signals: list[Signal], group: str) -> PeriodicMatrix:
        rows = [i for i, s in enumerate(signals) if s.group == group]
        sel = np.zeros((len(rows), len(signals)))
        sel[np.arange(len(rows)), rows] = 1.0
        return PeriodicMatrix.constant(sel)

    def x(self, group: str) -> _Linear:
        sel = self._selector(self.states, group)
        return _Linear(sel, PeriodicMatrix.zeros(sel.shape[0], len(self.inputs)))

    def u(self, group: str) -> _Linear:
        sel = self._selector(self.inputs, group)
        return _Linear(PeriodicMatrix.zeros(sel.shape[0], len(self.states)), sel)

    def derivative(self, group: str, expr: _Linear) -> None:
        self._dynamics[group] = expr

    def output(self, group: str, coords, frame: Frame, expr: _Linear) -> None:
        self._outputs.append((self._signals(group, coords, frame), expr))

    def build(self, f1: float, parameters: dict) -> LtpModel:
        groups = list(dict.fromkeys(s.group for s in self.states))
        missing = [g for g in groups if g not in self._dynamics]
        if missing:
            raise ValueError(f"Не заданы уравнения для состояний {missing}")
        n, m = len(self.states), len(self.inputs)
        a_rows = [[self._dynamics[g].x] for g in groups]
        b_rows = [[self._dynamics[g].u] for g in groups]
        sizes = [self._dynamics[g].x.shape[0] for g in groups]
        out_sizes = [len(s) for s, _ in self._outputs]
        return LtpModel(
            name=self.subsystem,
            f1=f1,
            A=PeriodicMatrix.block(a_rows, sizes, [n]).trimmed(1e-12),
            B=PeriodicMatrix.block(b_rows, sizes, [m]).trimmed(1e-12),
            C=PeriodicMatrix.block([[e.x] for _, e in self._outputs], out_sizes, [n]).trimmed(1e-12),
            D=PeriodicMatrix.block([[e.u] for _, e in self._outputs], out_sizes, [m]).trimmed(1e-12),
            states=tuple(self.states),
            inputs=tuple(self.inputs),
            outputs=tuple(s for signals, _ in self._outputs for s in signals),
            parameters=parameters,
        )


_PARK = PeriodicMatrix(park_fourier())
_INV_PARK = PeriodicMatrix(inverse_park_fourier())


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class InternalSteadyState:
    """Периодический режим силовой части, вокруг которого линеаризуется звено постоянного тока."""

    i_alpha: HarmonicSpectrum   # А, ABC
    v_alpha: HarmonicSpectrum   # В, ABC, напряжение исполнительного органа
    w_kappa: HarmonicSpectrum   # о.е., DQ

    def truncated(self, h_max: int) -> "InternalSteadyState":
        idx = self.i_alpha.index_set.with_h_max(h_max)
        return InternalSteadyState(
            self.i_alpha.resized(idx),
            self.v_alpha.resized(idx),
            self.w_kappa.resized(idx.with_h_max(h_max + 1)),
        )

    @property
    def dc_power(self) -> float:
        return float(np.real(np.sum(self.v_alpha.coefficients * np.conj(self.i_alpha.coefficients))))


def build_ltp_model(
    spec: CiderSpec,
    op: OperatingPoint | None = None,
    f1: float = 50.0,
    frame: str = "abc",
    ac_part: bool = False,
    h_max: int | None = None,
) -> LtpModel:
    """
    Модель внутреннего отклика CIDER. Для grid_following_dc нужна рабочая
    точка: A(t) содержит линеаризацию баланса мощности звена постоянного тока.
    ac_part=True даёт модель без звена постоянного тока (используется в
    расчёте установившихся режимов). frame="dq" возвращает LTI-аналог в
    координатах DQZ.
    """
    base = PerUnitBase.from_spec(spec)
    if spec.kind == CiderKind.GRID_FORMING:
        ltp = _build_forming(spec, base, f1)
    elif spec.kind == CiderKind.GRID_FOLLOWING_AC or ac_part:
        ltp = _build_following(spec, base, f1, steady=None)
    else:
        if op is None:
            raise SingularOperatingPointError(f"CIDER {spec.id}: для модели со звеном постоянного тока нужна рабочая точка")
        steady = internal_steady_state(spec, op, f1)
        if h_max is not None:
            steady = steady.truncated(h_max)
        ltp = _build_following(spec, base, f1, steady=steady)
    logger.debug(f"Модель {spec.id} ({spec.kind.value}): {ltp.state_dim} состояний, порядок A(t) {ltp.A.order}")
    if frame == "dq":
        return ltp.to_dqz().averaged()
    if frame != "abc":
        raise ValueError(f"Неизвестная система координат: {frame}")
    return ltp


def _pi(builder: _ModelBuilder, name: str, error: _Linear, k: float, t: float) -> _Linear:
    builder.derivative(f"x_{name}", error)
    return k * error + (k / t) * builder.x(f"x_{name}")


def _build_forming(spec: CiderSpec, base: PerUnitBase, f1: float) -> LtpModel:
    alpha, phi = spec.stage("alpha"), spec.stage("phi")
    b = _ModelBuilder(spec.id)
    b.add_state("i_alpha", "abc", Frame.ABC)
    b.add_state("v_phi", "abc", Frame.ABC)
    b.add_state("x_phi", "dq", Frame.DQZ)
    b.add_state("x_alpha", "dq", Frame.DQZ)
    b.add_input("i_gamma", "abc", Frame.ABC)
    b.add_input("v_ref", "dq", Frame.DQZ)

    v_phi_dq = b.x("v_phi").through(_PARK) * (1.0 / base.V_b)
    i_alpha_dq = b.x("i_alpha").through(_PARK) * (1.0 / base.I_b)
    i_gamma_dq = b.u("i_gamma").through(_PARK) * (1.0 / base.I_b)

    c_phi = phi.controller
    i_alpha_ref = _pi(b, "phi", b.u("v_ref") - v_phi_dq, c_phi.K_fb, c_phi.T_fb) - c_phi.K_ft * i_gamma_dq
    c_alpha = alpha.controller
    v_a_ref = _pi(b, "alpha", i_alpha_ref - i_alpha_dq, c_alpha.K_fb, c_alpha.T_fb) + c_alpha.K_ft * v_phi_dq
    v_a = v_a_ref.through(_INV_PARK) * base.V_b

    f_alpha, f_phi = alpha.filter, phi.filter
    b.derivative("i_alpha", (v_a - b.x("v_phi") - f_alpha.R_or_G * b.x("i_alpha")) * (1.0 / f_alpha.L_or_C))
    b.derivative("v_phi", (b.x("i_alpha") + b.u("i_gamma") - f_phi.R_or_G * b.x("v_phi")) * (1.0 / f_phi.L_or_C))
    b.output("v_phi", "abc", Frame.ABC, b.x("v_phi"))
    v_ref = (math.sqrt(2.0) * spec.setpoint.V_sigma / base.V_b, 0.0)
    return b.build(f1, {"kind": spec.kind, "base": base, "spec": spec, "v_ref": v_ref})


def _build_following(spec: CiderSpec, base: PerUnitBase, f1: float, steady: InternalSteadyState | None) -> LtpModel:
    alpha, phi, gamma = spec.stage("alpha"), spec.stage("phi"), spec.stage("gamma")
    with_dc = steady is not None
    b = _ModelBuilder(spec.id)
    if with_dc:
        b.add_state("v_delta", ("dc",), Frame.ABC)
    b.add_state("i_alpha", "abc", Frame.ABC)
    b.add_state("v_phi", "abc", Frame.ABC)
    b.add_state("i_gamma", "abc", Frame.ABC)
    if with_dc:
        b.add_state("x_delta", ("dc",), Frame.DQZ)
    b.add_state("x_gamma", "dq", Frame.DQZ)
    b.add_state("x_phi", "dq", Frame.DQZ)
    b.add_state("x_alpha", "dq", Frame.DQZ)
    b.add_input("v_gamma", "abc", Frame.ABC)
    b.add_input("w_kappa", "dq", Frame.DQZ)
    if with_dc:
        b.add_input("i_src", ("dc",), Frame.ABC)

    v_gamma_dq = b.u("v_gamma").through(_PARK) * (1.0 / base.V_b)
    v_phi_dq = b.x("v_phi").through(_PARK) * (1.0 / base.V_b)
    i_alpha_dq = b.x("i_alpha").through(_PARK) * (1.0 / base.I_b)
    i_gamma_dq = b.x("i_gamma").through(_PARK) * (1.0 / base.I_b)

    i_gamma_ref = b.u("w_kappa")
    v_star = spec.setpoint.V_delta_ref
    if with_dc:
        c_delta = spec.stage("delta").controller
        e_delta = b.x("v_delta") * (-1.0 / v_star)
        u_delta = _pi(b, "delta", e_delta, c_delta.K_fb, c_delta.T_fb)
        to_d = PeriodicMatrix.constant([[1.0], [0.0]])
        i_gamma_ref = i_gamma_ref + u_delta.through(to_d)

    c_gamma = gamma.controller
    v_phi_ref = c_gamma.K_ft * v_gamma_dq - _pi(b, "gamma", i_gamma_ref - i_gamma_dq, c_gamma.K_fb, c_gamma.T_fb)
    c_phi = phi.controller
    i_alpha_ref = _pi(b, "phi", v_phi_ref - v_phi_dq, c_phi.K_fb, c_phi.T_fb) - c_phi.K_ft * i_gamma_dq
    c_alpha = alpha.controller
    v_a_ref = _pi(b, "alpha", i_alpha_ref - i_alpha_dq, c_alpha.K_fb, c_alpha.T_fb) + c_alpha.K_ft * v_phi_dq
    v_a = v_a_ref.through(_INV_PARK) * base.V_b

    f_alpha, f_phi, f_gamma = alpha.filter, phi.filter, gamma.filter
    b.derivative("i_alpha", (v_a - b.x("v_phi") - f_alpha.R_or_G * b.x("i_alpha")) * (1.0 / f_alpha.L_or_C))
    b.derivative("v_phi", (b.x("i_alpha") + b.x("i_gamma") - f_phi.R_or_G * b.x("v_phi")) * (1.0 / f_phi.L_or_C))
    b.derivative("i_gamma", (b.u("v_gamma") - b.x("v_phi") - f_gamma.R_or_G * b.x("i_gamma")) * (1.0 / f_gamma.L_or_C))

    if with_dc:
        # C_δ·dv_δ/dt = i_src - G·v_δ - v_a·i_α / v_δ, линеаризация вокруг периодического режима
        f_delta = spec.stage("delta").filter
        v_bar = PeriodicMatrix(steady.v_alpha.coefficients.T[:, None, :])
        i_bar = PeriodicMatrix(steady.i_alpha.coefficients.T[:, None, :])
        p_bar = v_bar @ i_bar.T
        power = b.x("i_alpha").through(v_bar) + v_a.through(i_bar)
        dc = (
            b.u("i_src")
            - f_delta.R_or_G * b.x("v_delta")
            - power * (1.0 / v_star)
            + b.x("v_delta").through(p_bar) * (1.0 / v_star**2)
        )
        b.derivative("v_delta", dc * (1.0 / f_delta.L_or_C))

    b.output("i_gamma", "abc", Frame.ABC, b.x("i_gamma"))
    b.output("v_alpha", "abc", Frame.ABC, v_a)
    return b.build(f1, {"kind": spec.kind, "base": base, "spec": spec, "with_dc": with_dc})


# ————————————————————————————————————————————————
def lift_to_hss(
    ltp: LtpModel,
    idx: HarmonicIndexSet,
    idx_dqz: HarmonicIndexSet | None = None,
    provenance: Provenance = Provenance.OPEN_LOOP_RESOURCE,
) -> HssModel:
    return lift(ltp, idx, idx_dqz, provenance)


def internal_steady_state(spec: CiderSpec, op: OperatingPoint, f1: float = 50.0) -> InternalSteadyState:
    """
    Гармонический баланс силовой части следящего CIDER при заданном
    напряжении сети и точном (не разложенном в ряд) опорном токе.
    """
    if not spec.kind.is_following:
        raise KindMismatchError(f"CIDER {spec.id}: установившийся режим считается только для следящих CIDER")
    if op.v_gamma_abc is None:
        raise SingularOperatingPointError("Для расчёта режима нужно напряжение сети в координатах ABC")
    base = PerUnitBase.from_spec(spec)
    idx = op.v_gamma_abc.index_set
    ltp = build_ltp_model(spec, f1=f1, ac_part=True)
    hss = lift(ltp, idx)
    w_kappa = exact_reference(op.v_d, _setpoint_vector(spec.setpoint, base))
    u_hat = np.concatenate([op.v_gamma_abc.flat(), w_kappa.flat()])
    x_hat, y_hat = hss.steady_state(u_hat)
    i_alpha = HarmonicSpectrum.from_flat(idx, x_hat[hss.state_block("i_alpha")])
    v_alpha = HarmonicSpectrum.from_flat(idx, y_hat[hss.output_block("v_alpha")])
    logger.debug(f"Установившийся режим {spec.id}: мощность исполнительного органа {np.real(np.sum(v_alpha.coefficients * np.conj(i_alpha.coefficients))):.1f} Вт")
    return InternalSteadyState(i_alpha=i_alpha, v_alpha=v_alpha, w_kappa=w_kappa)
