# app/exceptions.py
"""Иерархия исключений пакета. Всё, что не ошибка валидации сценария,
считается численной ошибкой (код выхода 3 в CLI)."""


class HsaError(Exception):
    """Базовое исключение"""


class ScenarioValidationError(HsaError):
    """Сценарий или его параметры не прошли валидацию"""


class IndexSetMismatchError(HsaError):
    pass


class SequenceRangeError(HsaError):
    """Гармонический порядок вне допустимого диапазона"""


class AmbiguousSequenceError(HsaError):
    """Пара DQ не классифицируется ни как P', ни как N'"""

    def __init__(self, message: str, phase: float):
        super().__init__(message)
        self.phase = phase


class SingularOperatingPointError(HsaError):
    pass


class KindMismatchError(HsaError):
    pass


class PeriodicityError(HsaError):
    pass


class PortMismatchError(HsaError):
    pass


class TopologyError(HsaError):
    pass


class EigenSolverError(HsaError):
    pass


class HpfConvergenceError(HsaError):
    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = residuals


class SimulationError(HsaError):
    def __init__(self, message: str, time: float | None = None):
        super().__init__(message)
        self.time = time


class SettleError(HsaError):
    pass


class HypothesisWarning(UserWarning):
    """Нарушение гипотезы о малом искажении напряжения (‖ξ‖∞ выше порога)"""
