# app/core/periodic.py
"""Периодические матрицы M(t) = Σ_k M_k·exp(jkωt), |k| <= K."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PeriodicMatrix:
    coefficients: np.ndarray  # форма (2K+1, rows, cols)

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=complex)
        if coeffs.ndim != 3 or coeffs.shape[0] % 2 != 1:
            raise ValueError(f"Ожидался массив формы (2K+1, r, c), получено: {coeffs.shape}")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)

    # ————————————————————————————————————————————————
    @classmethod
    def constant(cls, matrix) -> "PeriodicMatrix":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=complex))
        return cls(matrix[None, :, :])

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "PeriodicMatrix":
        return cls(np.zeros((1, rows, cols), dtype=complex))

    @classmethod
    def from_orders(cls, terms: dict[int, np.ndarray]) -> "PeriodicMatrix":
        k = max(abs(h) for h in terms)
        shape = np.atleast_2d(next(iter(terms.values()))).shape
        coeffs = np.zeros((2 * k + 1, *shape), dtype=complex)
        for h, m in terms.items():
            coeffs[h + k] = m
        return cls(coeffs)

    @classmethod
    def block(cls, grid: list[list["PeriodicMatrix | None"]], row_sizes: list[int], col_sizes: list[int]) -> "PeriodicMatrix":
        k = max((m.order for row in grid for m in row if m is not None), default=0)
        out = np.zeros((2 * k + 1, sum(row_sizes), sum(col_sizes)), dtype=complex)
        r0 = np.concatenate([[0], np.cumsum(row_sizes)])
        c0 = np.concatenate([[0], np.cumsum(col_sizes)])
        for i, row in enumerate(grid):
            for j, m in enumerate(row):
                if m is None:
                    continue
                if m.shape != (row_sizes[i], col_sizes[j]):
                    raise ValueError(f"Блок ({i},{j}) формы {m.shape}, ожидалось {(row_sizes[i], col_sizes[j])}")
                out[k - m.order : k + m.order + 1, r0[i] : r0[i + 1], c0[j] : c0[j + 1]] = m.coefficients
        return cls(out)

    @classmethod
    def block_diag(cls, blocks: list["PeriodicMatrix"]) -> "PeriodicMatrix":
        grid = [[b if i == j else None for j, b in enumerate(blocks)] for i in range(len(blocks))]
        return cls.block(grid, [b.shape[0] for b in blocks], [b.shape[1] for b in blocks])

    # ————————————————————————————————————————————————
    @property
    def order(self) -> int:
        return (self.coefficients.shape[0] - 1) // 2

    @property
    def shape(self) -> tuple[int, int]:
        return self.coefficients.shape[1], self.coefficients.shape[2]

    @property
    def T(self) -> "PeriodicMatrix":
        return PeriodicMatrix(np.transpose(self.coefficients, (0, 2, 1)))

    def term(self, h: int) -> np.ndarray:
        if abs(h) > self.order:
            return np.zeros(self.shape, dtype=complex)
        return self.coefficients[h + self.order]

    def average(self) -> np.ndarray:
        return self.coefficients[self.order]

    def padded(self, k: int) -> "PeriodicMatrix":
        if k <= self.order:
            return self
        pad = k - self.order
        return PeriodicMatrix(np.pad(self.coefficients, ((pad, pad), (0, 0), (0, 0))))

    def truncated(self, k: int) -> "PeriodicMatrix":
        if k >= self.order:
            return self
        return PeriodicMatrix(self.coefficients[self.order - k : self.order + k + 1])

    def trimmed(self, atol: float = 0.0) -> "PeriodicMatrix":
        k = self.order
        while k > 0 and np.all(np.abs(self.coefficients[[self.order - k, self.order + k]]) <= atol):
            k -= 1
        return self.truncated(k)

    def is_constant(self, atol: float = 1e-12) -> bool:
        return self.trimmed(atol).order == 0

    def derivative(self, omega: float) -> "PeriodicMatrix":
        orders = np.arange(-self.order, self.order + 1)
        return PeriodicMatrix(self.coefficients * (1j * orders * omega)[:, None, None])

    def evaluate(self, t: float, omega: float) -> np.ndarray:
        """Значение M(t); результат вещественный для вещественного сигнала."""
        phasors = np.exp(1j * omega * t * np.arange(-self.order, self.order + 1))
        return np.real(np.tensordot(phasors, self.coefficients, axes=1))

    def select(self, rows=slice(None), cols=slice(None)) -> "PeriodicMatrix":
        return PeriodicMatrix(self.coefficients[:, rows][:, :, cols])

    # ————————————————————————————————————————————————
    def __add__(self, other: "PeriodicMatrix") -> "PeriodicMatrix":
        k = max(self.order, other.order)
        return PeriodicMatrix(self.padded(k).coefficients + other.padded(k).coefficients)

    def __neg__(self) -> "PeriodicMatrix":
        return PeriodicMatrix(-self.coefficients)

    def __sub__(self, other: "PeriodicMatrix") -> "PeriodicMatrix":
        return self + (-other)

    def __mul__(self, scalar: complex) -> "PeriodicMatrix":
        return PeriodicMatrix(self.coefficients * scalar)

    __rmul__ = __mul__

    def __matmul__(self, other: "PeriodicMatrix") -> "PeriodicMatrix":
        """Произведение во времени = свёртка рядов Фурье (без усечения)."""
        k1, k2 = self.order, other.order
        out = np.zeros((2 * (k1 + k2) + 1, self.shape[0], other.shape[1]), dtype=complex)
        nonzero = [i for i in range(2 * k1 + 1) if np.any(self.coefficients[i])]
        for i in nonzero:
            out[i : i + 2 * k2 + 1] += np.einsum("rc,jcd->jrd", self.coefficients[i], other.coefficients)
        return PeriodicMatrix(out)
