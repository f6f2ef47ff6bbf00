# app/core/statespace.py
"""
Модели в пространстве состояний: линейная периодическая (LTP) модель во
временной области и её гармоническое представление (HSS).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from app.core.harmonics import HarmonicIndexSet, lift_periodic, park_fourier, inverse_park_fourier
from app.core.periodic import PeriodicMatrix
from app.exceptions import IndexSetMismatchError, PeriodicityError, SingularOperatingPointError

logger = logging.getLogger(__name__)


class Frame(str, Enum):
    # Аппаратная часть (ABC и сторона DC) усекается на h_max,ABC,
    # программная часть (DQZ) на h_max,DQZ
    ABC = "abc"
    DQZ = "dqz"


@dataclass(frozen=True)
class Signal:
    subsystem: str
    group: str
    coordinate: str
    frame: Frame

    @property
    def name(self) -> str:
        return f"{self.subsystem}.{self.group}.{self.coordinate}"

    def renamed(self, subsystem: str) -> "Signal":
        return replace(self, subsystem=subsystem)


def abc_signals(subsystem: str, group: str) -> list[Signal]:
    return [Signal(subsystem, group, c, Frame.ABC) for c in "abc"]


def dq_signals(subsystem: str, group: str) -> list[Signal]:
    return [Signal(subsystem, group, c, Frame.DQZ) for c in "dq"]


def find_signals(signals: tuple[Signal, ...], subsystem: str | None, group: str) -> list[int]:
    return [
        i for i, s in enumerate(signals)
        if s.group == group and (subsystem is None or s.subsystem == subsystem)
    ]


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class LtpModel:
    """dx/dt = A(t)x + B(t)u, y = C(t)x + D(t)u с периодом 1/f1."""

    name: str
    f1: float
    A: PeriodicMatrix
    B: PeriodicMatrix
    C: PeriodicMatrix
    D: PeriodicMatrix
    states: tuple[Signal, ...]
    inputs: tuple[Signal, ...]
    outputs: tuple[Signal, ...]
    parameters: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n, m, p = len(self.states), len(self.inputs), len(self.outputs)
        for label, mat, shape in (("A", self.A, (n, n)), ("B", self.B, (n, m)), ("C", self.C, (p, n)), ("D", self.D, (p, m))):
            if mat.shape != shape:
                raise ValueError(f"{self.name}: матрица {label} формы {mat.shape}, ожидалось {shape}")

    @property
    def omega(self) -> float:
        return 2.0 * np.pi * self.f1

    @property
    def state_dim(self) -> int:
        return len(self.states)

    def input_indices(self, group: str, subsystem: str | None = None) -> list[int]:
        return find_signals(self.inputs, subsystem, group)

    def output_indices(self, group: str, subsystem: str | None = None) -> list[int]:
        return find_signals(self.outputs, subsystem, group)

    def state_indices(self, group: str, subsystem: str | None = None) -> list[int]:
        return find_signals(self.states, subsystem, group)

    def is_time_invariant(self, atol: float = 1e-12) -> bool:
        return all(m.is_constant(atol) for m in (self.A, self.B, self.C, self.D))

    # ————————————————————————————————————————————————
    def to_dqz(self) -> "LtpModel":
        """
        Преобразование Ляпунова: каждая тройка ABC (состояния, входы, выходы)
        заменяется на DQZ через преобразование Парка. Для моделей, у которых
        единственная зависимость от времени - блоки преобразования координат,
        результат постоянен.
        """
        t_state, states = _park_transform(self.states)
        t_state_inv, _ = _park_transform(self.states, inverse=True)
        t_in_inv, inputs = _park_transform(self.inputs, inverse=True)
        t_out, outputs = _park_transform(self.outputs)
        a = t_state @ self.A @ t_state_inv + t_state.derivative(self.omega) @ t_state_inv
        return LtpModel(
            name=self.name,
            f1=self.f1,
            A=a.trimmed(1e-9 * _scale(a)),
            B=(t_state @ self.B @ t_in_inv).trimmed(1e-12),
            C=(t_out @ self.C @ t_state_inv).trimmed(1e-12),
            D=(t_out @ self.D @ t_in_inv).trimmed(1e-12),
            states=states,
            inputs=inputs,
            outputs=outputs,
            parameters=self.parameters,
        )

    def averaged(self) -> "LtpModel":
        """Усреднённая (LTI) модель: только коэффициенты нулевого порядка."""
        return replace(
            self,
            A=PeriodicMatrix.constant(self.A.average()),
            B=PeriodicMatrix.constant(self.B.average()),
            C=PeriodicMatrix.constant(self.C.average()),
            D=PeriodicMatrix.constant(self.D.average()),
        )


def _scale(m: PeriodicMatrix) -> float:
    return max(1.0, float(np.max(np.abs(m.coefficients))))


def _park_transform(signals: tuple[Signal, ...], inverse: bool = False):
    """Блочно-диагональная матрица: Парк (с нулевой осью) на каждую тройку a,b,c, единица иначе."""
    n = len(signals)
    coeffs = np.zeros((3, n, n), dtype=complex)
    coeffs[1] = np.eye(n)
    park = inverse_park_fourier(with_zero=True) if inverse else park_fourier(with_zero=True)
    new_signals = list(signals)
    i = 0
    while i < n:
        s = signals[i]
        if s.coordinate == "a" and i + 2 < n and signals[i + 1].coordinate == "b" and signals[i + 2].coordinate == "c":
            coeffs[:, i : i + 3, i : i + 3] = park
            for k, c in enumerate("dqz"):
                new_signals[i + k] = replace(signals[i + k], coordinate=c, frame=Frame.DQZ)
            i += 3
        else:
            i += 1
    return PeriodicMatrix(coeffs), tuple(new_signals)


# ————————————————————————————————————————————————
class Provenance(str, Enum):
    OPEN_LOOP_RESOURCE = "open_loop_resource"
    OPEN_LOOP_GRID = "open_loop_grid"
    CLOSED_LOOP = "closed_loop"
    LTI_COUNTERPART = "lti_counterpart"


@dataclass(frozen=True)
class HssModel:
    name: str
    A_tilde: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    D_hat: np.ndarray
    index_set: HarmonicIndexSet
    dqz_index_set: HarmonicIndexSet
    states: tuple[Signal, ...]
    state_orders: np.ndarray
    inputs: tuple[Signal, ...]
    input_orders: np.ndarray
    outputs: tuple[Signal, ...]
    output_orders: np.ndarray
    provenance: Provenance
    # Номер сигнала для каждой строки/столбца гармонического вектора
    state_rows: np.ndarray = field(default=None)
    input_rows: np.ndarray = field(default=None)
    output_rows: np.ndarray = field(default=None)
    parameters: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = self.A_tilde.shape[0]
        if self.A_tilde.shape != (n, n):
            raise ValueError("Матрица Ã должна быть квадратной")
        if self.B_hat.shape[0] != n or self.C_hat.shape[1] != n:
            raise ValueError("Несогласованные размеры B̂/Ĉ")
        if self.D_hat.shape != (self.C_hat.shape[0], self.B_hat.shape[1]):
            raise ValueError("Несогласованные размеры D̂")

    @property
    def size(self) -> int:
        return self.A_tilde.shape[0]

    def norm(self) -> float:
        return float(np.linalg.norm(self.A_tilde, np.inf))

    def _rows(self, signals, rows, group, subsystem) -> np.ndarray:
        wanted = find_signals(signals, subsystem, group)
        return np.flatnonzero(np.isin(rows, wanted))

    def state_block(self, group: str, subsystem: str | None = None) -> np.ndarray:
        return self._rows(self.states, self.state_rows, group, subsystem)

    def input_block(self, group: str, subsystem: str | None = None) -> np.ndarray:
        return self._rows(self.inputs, self.input_rows, group, subsystem)

    def output_block(self, group: str, subsystem: str | None = None) -> np.ndarray:
        return self._rows(self.outputs, self.output_rows, group, subsystem)

    def steady_state(self, u_hat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Гармонический баланс: 0 = ÃX + B̂Û, Y = ĈX + D̂Û."""
        try:
            x_hat = -np.linalg.solve(self.A_tilde, self.B_hat @ u_hat)
        except np.linalg.LinAlgError as e:
            raise SingularOperatingPointError(f"{self.name}: матрица Ã вырождена, установившийся режим не определён") from e
        return x_hat, self.C_hat @ x_hat + self.D_hat @ u_hat


def harmonic_layout(signals, idx_abc: HarmonicIndexSet, idx_dqz: HarmonicIndexSet):
    """Порядки гармоник каждого сигнала, номер сигнала и порядок для каждой строки гармонического вектора."""
    orders = [idx_abc.orders if s.frame == Frame.ABC else idx_dqz.orders for s in signals]
    rows = np.concatenate([np.full(len(o), i) for i, o in enumerate(orders)]) if orders else np.zeros(0, int)
    flat = np.concatenate(orders) if orders else np.zeros(0, int)
    return orders, rows, flat


def lift(
    ltp: LtpModel,
    idx_abc: HarmonicIndexSet,
    idx_dqz: HarmonicIndexSet | None = None,
    provenance: Provenance = Provenance.OPEN_LOOP_RESOURCE,
) -> HssModel:
    """Ã = Â - N̂; B̂, Ĉ, D̂ - тёплицевы подъёмы соответствующих рядов Фурье."""
    if idx_dqz is None:
        idx_dqz = idx_abc.with_h_max(idx_abc.h_max + 1)
    if not np.isclose(ltp.f1, idx_abc.f1) or idx_abc.f1 != idx_dqz.f1:
        raise PeriodicityError(f"Период модели 1/{ltp.f1} не совпадает с 1/{idx_abc.f1}")
    if idx_dqz.h_max < idx_abc.h_max:
        raise IndexSetMismatchError("h_max,DQZ должен быть не меньше h_max,ABC")
    s_orders, s_rows, s_flat = harmonic_layout(ltp.states, idx_abc, idx_dqz)
    u_orders, u_rows, u_flat = harmonic_layout(ltp.inputs, idx_abc, idx_dqz)
    y_orders, y_rows, y_flat = harmonic_layout(ltp.outputs, idx_abc, idx_dqz)
    a_hat = lift_periodic(ltp.A.coefficients, s_orders, s_orders)
    a_hat[np.diag_indices_from(a_hat)] -= 1j * idx_abc.omega * s_flat
    logger.debug(f"Подъём {ltp.name}: {ltp.state_dim} состояний -> {a_hat.shape[0]} гармонических")
    return HssModel(
        name=ltp.name,
        A_tilde=a_hat,
        B_hat=lift_periodic(ltp.B.coefficients, s_orders, u_orders),
        C_hat=lift_periodic(ltp.C.coefficients, y_orders, s_orders),
        D_hat=lift_periodic(ltp.D.coefficients, y_orders, u_orders),
        index_set=idx_abc,
        dqz_index_set=idx_dqz,
        states=ltp.states,
        state_orders=s_flat,
        inputs=ltp.inputs,
        input_orders=u_flat,
        outputs=ltp.outputs,
        output_orders=y_flat,
        provenance=provenance,
        state_rows=s_rows,
        input_rows=u_rows,
        output_rows=y_rows,
        parameters=ltp.parameters,
    )
