# app/core/harmonics.py
"""
Примитивы гармонической области: усечённые спектры, тёплицевы операторы,
оператор частотного сдвига и отображения гармонических последовательностей
между координатами ABC и DQZ.

Спектры хранятся в порядке "канал за каналом": сначала все порядки от
-h_max до +h_max первого канала, затем второго и т.д.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.exceptions import AmbiguousSequenceError, IndexSetMismatchError, SequenceRangeError
from app.settings import settings

logger = logging.getLogger(__name__)

_ALPHA = np.exp(2j * np.pi / 3)


# ————————————————————————————————————————————————
class HarmonicIndexSet(BaseModel):
    h_max: int = Field(ge=0)
    f1: float = Field(gt=0.0)

    model_config = ConfigDict(frozen=True)

    @property
    def size(self) -> int:
        return 2 * self.h_max + 1

    @property
    def orders(self) -> np.ndarray:
        return np.arange(-self.h_max, self.h_max + 1)

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f1

    def position(self, h: int) -> int:
        if abs(h) > self.h_max:
            raise SequenceRangeError(f"Порядок {h} вне диапазона ±{self.h_max}")
        return h + self.h_max

    def with_h_max(self, h_max: int) -> "HarmonicIndexSet":
        return HarmonicIndexSet(h_max=h_max, f1=self.f1)


def _check_same(a: HarmonicIndexSet, b: HarmonicIndexSet) -> None:
    if a != b:
        raise IndexSetMismatchError(f"Несовпадение наборов гармоник: {a} и {b}")


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class HarmonicSpectrum:
    """Коэффициенты Фурье X_h, массив формы (channel_count, 2·h_max+1)."""

    index_set: HarmonicIndexSet
    coefficients: np.ndarray

    def __post_init__(self):
        coeffs = np.atleast_2d(np.asarray(self.coefficients, dtype=complex))
        if coeffs.shape[1] != self.index_set.size:
            raise IndexSetMismatchError(
                f"Длина спектра {coeffs.shape[1]} не равна {self.index_set.size}"
            )
        coeffs.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def channel_count(self) -> int:
        return self.coefficients.shape[0]

    @classmethod
    def zeros(cls, index_set: HarmonicIndexSet, channel_count: int = 1) -> "HarmonicSpectrum":
        return cls(index_set, np.zeros((channel_count, index_set.size), dtype=complex))

    @classmethod
    def constant(cls, index_set: HarmonicIndexSet, values) -> "HarmonicSpectrum":
        values = np.atleast_1d(np.asarray(values, dtype=complex))
        coeffs = np.zeros((values.size, index_set.size), dtype=complex)
        coeffs[:, index_set.h_max] = values
        return cls(index_set, coeffs)

    @classmethod
    def from_flat(cls, index_set: HarmonicIndexSet, flat: np.ndarray) -> "HarmonicSpectrum":
        flat = np.asarray(flat, dtype=complex)
        return cls(index_set, flat.reshape(-1, index_set.size))

    @classmethod
    def from_samples(cls, index_set: HarmonicIndexSet, samples: np.ndarray) -> "HarmonicSpectrum":
        """ДПФ по отсчётам ровно одного периода (равномерная сетка, t_n = n/(N·f1))."""
        samples = np.atleast_2d(np.asarray(samples))
        n = samples.shape[1]
        if n <= 2 * index_set.h_max:
            raise IndexSetMismatchError(f"{n} отсчётов недостаточно для h_max={index_set.h_max}")
        full = np.fft.fft(samples, axis=1) / n
        return cls(index_set, full[:, index_set.orders % n])

    def flat(self) -> np.ndarray:
        return self.coefficients.reshape(-1)

    def coefficient(self, h: int, channel: int = 0) -> complex:
        return complex(self.coefficients[channel, self.index_set.position(h)])

    def to_samples(self, n: int) -> np.ndarray:
        """Значения во времени на сетке из n точек за период."""
        if n <= 2 * self.index_set.h_max:
            raise IndexSetMismatchError(f"{n} точек недостаточно для h_max={self.index_set.h_max}")
        full = np.zeros((self.channel_count, n), dtype=complex)
        full[:, self.index_set.orders % n] = self.coefficients
        return np.fft.ifft(full, axis=1) * n

    def evaluate(self, t: float | np.ndarray) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        phasors = np.exp(1j * self.index_set.omega * np.outer(self.index_set.orders, t))
        return self.coefficients @ phasors

    def resized(self, index_set: HarmonicIndexSet) -> "HarmonicSpectrum":
        """Перенос на другой набор гармоник: лишние порядки отбрасываются, недостающие нули."""
        if index_set.f1 != self.index_set.f1:
            raise IndexSetMismatchError("Разные основные частоты")
        out = np.zeros((self.channel_count, index_set.size), dtype=complex)
        common = min(index_set.h_max, self.index_set.h_max)
        src = slice(self.index_set.h_max - common, self.index_set.h_max + common + 1)
        dst = slice(index_set.h_max - common, index_set.h_max + common + 1)
        out[:, dst] = self.coefficients[:, src]
        return HarmonicSpectrum(index_set, out)

    def channel(self, k: int) -> "HarmonicSpectrum":
        return HarmonicSpectrum(self.index_set, self.coefficients[k : k + 1])

    def is_conjugate_symmetric(self, atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.coefficients, np.conj(self.coefficients[:, ::-1]), atol=atol))

    def sup_norm(self, samples_per_order: int = 16) -> float:
        n = max(64, samples_per_order * self.index_set.size)
        return float(np.max(np.abs(self.to_samples(n))))

    def __add__(self, other: "HarmonicSpectrum") -> "HarmonicSpectrum":
        _check_same(self.index_set, other.index_set)
        return HarmonicSpectrum(self.index_set, self.coefficients + other.coefficients)

    def __sub__(self, other: "HarmonicSpectrum") -> "HarmonicSpectrum":
        _check_same(self.index_set, other.index_set)
        return HarmonicSpectrum(self.index_set, self.coefficients - other.coefficients)

    def __mul__(self, scalar: complex) -> "HarmonicSpectrum":
        return HarmonicSpectrum(self.index_set, self.coefficients * scalar)

    __rmul__ = __mul__


# ————————————————————————————————————————————————
def toeplitz_matrix(coefficients: np.ndarray, row_orders: np.ndarray, col_orders: np.ndarray) -> np.ndarray:
    """
    Прямоугольная тёплицева матрица: элемент (i, j) равен коэффициенту
    порядка row_orders[i] - col_orders[j]. coefficients хранит порядки
    -K..K; порядки вне этого диапазона дают ноль.
    """
    coefficients = np.asarray(coefficients, dtype=complex)
    k = (coefficients.size - 1) // 2
    diff = np.subtract.outer(np.asarray(row_orders), np.asarray(col_orders))
    valid = np.abs(diff) <= k
    return np.where(valid, coefficients[np.clip(diff + k, 0, 2 * k)], 0.0)


@dataclass(frozen=True)
class ToeplitzOperator:
    index_set: HarmonicIndexSet
    channel_count: int
    matrix: np.ndarray

    def apply(self, spectrum: HarmonicSpectrum) -> HarmonicSpectrum:
        _check_same(self.index_set, spectrum.index_set)
        if spectrum.channel_count != self.channel_count:
            raise IndexSetMismatchError(
                f"Оператор на {self.channel_count} каналов, спектр на {spectrum.channel_count}"
            )
        return HarmonicSpectrum.from_flat(self.index_set, self.matrix @ spectrum.flat())

    def __matmul__(self, other):
        if isinstance(other, HarmonicSpectrum):
            return self.apply(other)
        if isinstance(other, ToeplitzOperator):
            _check_same(self.index_set, other.index_set)
            return ToeplitzOperator(self.index_set, self.channel_count, self.matrix @ other.matrix)
        return NotImplemented


def toeplitz_from_spectrum(x: HarmonicSpectrum) -> ToeplitzOperator:
    """Поканальный блочно-диагональный тёплицев оператор T[i,j] = X_{h_i - h_j}."""
    orders = x.index_set.orders
    n = x.index_set.size
    matrix = np.zeros((x.channel_count * n, x.channel_count * n), dtype=complex)
    for ch in range(x.channel_count):
        block = slice(ch * n, (ch + 1) * n)
        matrix[block, block] = toeplitz_matrix(x.coefficients[ch], orders, orders)
    return ToeplitzOperator(x.index_set, x.channel_count, matrix)


def spectrum_product(x: HarmonicSpectrum, y: HarmonicSpectrum) -> HarmonicSpectrum:
    """Усечённый спектр поточечного произведения x(t)·y(t)."""
    _check_same(x.index_set, y.index_set)
    if x.channel_count == 1 and y.channel_count > 1:
        x = HarmonicSpectrum(x.index_set, np.repeat(x.coefficients, y.channel_count, axis=0))
    return toeplitz_from_spectrum(x).apply(y)


def lift_periodic(
    coefficients: np.ndarray,
    row_orders: list[np.ndarray],
    col_orders: list[np.ndarray],
) -> np.ndarray:
    """
    Подъём периодической матрицы M(t) = Σ M_k e^{jkωt} (массив формы
    (2K+1, r, c)) в гармоническую область. Каждая строка/столбец сигнала
    разворачивается по своему набору порядков; блок (i, j) тёплицев.
    """
    row_sizes = [len(o) for o in row_orders]
    col_sizes = [len(o) for o in col_orders]
    row_start = np.concatenate([[0], np.cumsum(row_sizes)])
    col_start = np.concatenate([[0], np.cumsum(col_sizes)])
    out = np.zeros((row_start[-1], col_start[-1]), dtype=complex)
    for i, j in np.argwhere(np.any(coefficients != 0, axis=0)):
        out[row_start[i] : row_start[i + 1], col_start[j] : col_start[j + 1]] = toeplitz_matrix(
            coefficients[:, i, j], row_orders[i], col_orders[j]
        )
    return out


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class FrequencyShiftOperator:
    index_set: HarmonicIndexSet
    state_dim: int

    @cached_property
    def diagonal(self) -> np.ndarray:
        return np.tile(1j * self.index_set.orders * self.index_set.omega, self.state_dim)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)


def shift_operator(idx: HarmonicIndexSet, state_dim: int) -> FrequencyShiftOperator:
    if state_dim < 1:
        raise ValueError(f"state_dim должен быть >= 1, получено: {state_dim}")
    return FrequencyShiftOperator(idx, state_dim)


# ————————————————————————————————————————————————
class Sequence(str, Enum):
    P = "P"
    N = "N"
    H = "H"
    P_EQ = "P'"
    N_EQ = "N'"


_ABC_TO_DQZ_SHIFT = {Sequence.P: -1, Sequence.N: +1, Sequence.H: 0}
_DQZ_TO_ABC_SHIFT = {Sequence.P_EQ: +1, Sequence.N_EQ: -1, Sequence.H: 0}


def sequence_map_abc_to_dqz(
    h_abc: int, seq: Sequence, h_max_abc: int, h_max_dqz: int | None = None
) -> int | None:
    if h_max_dqz is None:
        h_max_dqz = h_max_abc + 1
    if abs(h_abc) > h_max_abc:
        raise SequenceRangeError(f"Порядок ABC {h_abc} вне диапазона ±{h_max_abc}")
    if seq not in _ABC_TO_DQZ_SHIFT:
        raise ValueError(f"Последовательность {seq} не относится к координатам ABC")
    image = h_abc + _ABC_TO_DQZ_SHIFT[Sequence(seq)]
    return image if abs(image) <= h_max_dqz else None


def sequence_map_dqz_to_abc(
    h_dqz: int, seq: Sequence, h_max_abc: int, h_max_dqz: int | None = None
) -> int | None:
    if h_max_dqz is None:
        h_max_dqz = h_max_abc + 1
    if abs(h_dqz) > h_max_dqz:
        raise SequenceRangeError(f"Порядок DQZ {h_dqz} вне диапазона ±{h_max_dqz}")
    if seq not in _DQZ_TO_ABC_SHIFT:
        raise ValueError(f"Последовательность {seq} не относится к координатам DQZ")
    image = h_dqz + _DQZ_TO_ABC_SHIFT[Sequence(seq)]
    # Отсечение при обратном преобразовании DQ(Z) -> ABC
    return image if abs(image) <= h_max_abc else None


def classify_dq_pair(d_component: complex, q_component: complex, tolerance: float | None = None) -> Sequence:
    """P', если Q отстаёт от D на 90°, N', если опережает."""
    if tolerance is None:
        tolerance = settings.HSA_DQ_TOLERANCE
    if d_component == 0 and q_component == 0:
        raise ValueError("Обе компоненты пары DQ равны нулю")
    if d_component == 0 or q_component == 0:
        raise AmbiguousSequenceError("Одна из компонент пары DQ равна нулю", float("nan"))
    phase = float(np.angle(q_component / d_component))
    if abs(phase + math.pi / 2) <= tolerance:
        return Sequence.P_EQ
    if abs(phase - math.pi / 2) <= tolerance:
        return Sequence.N_EQ
    raise AmbiguousSequenceError(f"Разность фаз {phase:.4f} рад вне окон ±π/2", phase)


def symmetric_components(a: complex, b: complex, c: complex) -> dict[Sequence, complex]:
    return {
        Sequence.P: (a + _ALPHA * b + _ALPHA**2 * c) / 3,
        Sequence.N: (a + _ALPHA**2 * b + _ALPHA * c) / 3,
        Sequence.H: (a + b + c) / 3,
    }


# ————————————————————————————————————————————————
# Преобразование Парка (инвариантное по амплитуде, ось D совпадает с фазой A при t=0).
# Коэффициенты Фурье матриц при порядках -1, 0, +1.
def park_fourier(with_zero: bool = False) -> np.ndarray:
    phi = 2 * np.pi * np.arange(3) / 3
    rows = 3 if with_zero else 2
    coeffs = np.zeros((3, rows, 3), dtype=complex)
    coeffs[2, 0] = np.exp(-1j * phi) / 3
    coeffs[0, 0] = np.exp(1j * phi) / 3
    coeffs[2, 1] = 1j * np.exp(-1j * phi) / 3
    coeffs[0, 1] = -1j * np.exp(1j * phi) / 3
    if with_zero:
        coeffs[1, 2] = 1.0 / 3
    return coeffs


def inverse_park_fourier(with_zero: bool = False) -> np.ndarray:
    phi = 2 * np.pi * np.arange(3) / 3
    cols = 3 if with_zero else 2
    coeffs = np.zeros((3, 3, cols), dtype=complex)
    coeffs[2, :, 0] = np.exp(-1j * phi) / 2
    coeffs[0, :, 0] = np.exp(1j * phi) / 2
    coeffs[2, :, 1] = 1j * np.exp(-1j * phi) / 2
    coeffs[0, :, 1] = -1j * np.exp(1j * phi) / 2
    if with_zero:
        coeffs[1, :, 2] = 1.0
    return coeffs


def park_operator(idx_abc: HarmonicIndexSet, idx_dqz: HarmonicIndexSet) -> np.ndarray:
    """Поднятое преобразование Парка: спектр ABC (3 канала) -> спектр DQ (2 канала)."""
    if idx_abc.f1 != idx_dqz.f1:
        raise IndexSetMismatchError("Разные основные частоты ABC и DQZ")
    return lift_periodic(park_fourier(), [idx_dqz.orders] * 2, [idx_abc.orders] * 3)
