# app/services/tds.py
"""
Моделирование во временной области (TDS): явный метод Рунге-Кутты 4-го
порядка с постоянным шагом для полной системы. Опорные токи следящих CIDER
вычисляются по точному закону w_σ/v_D(t), звено постоянного тока
нелинейное. Используется для получения спектров установившегося режима и
для проверки неустойчивости при ступенчатом изменении коэффициента.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum, park_fourier
from app.core.periodic import PeriodicMatrix
from app.core.statespace import Frame, LtpModel, find_signals, harmonic_layout
from app.exceptions import SettleError, SimulationError
from app.schemas import CiderKind, CiderSpec, NetworkTopology, TheveninSpec
from app.services.cider_models import PerUnitBase
from app.services.grid_network import TE, stored_energy, thevenin_emf_spectrum
from app.services.system_assembly import SystemOperatingPoint, assemble_ac_system, harmonic_power_flow

logger = logging.getLogger(__name__)

_PARK = PeriodicMatrix(park_fourier())


# ————————————————————————————————————————————————
class TdsConfig(BaseModel):
    f1: float = Field(default=50.0, gt=0.0)
    h_max: int = Field(default=25, ge=0)
    step: float = Field(default=5e-6, gt=0.0)
    duration: float = Field(default=0.2, gt=0.0)
    record: List[str] = Field(default_factory=list)   # "<подсистема>.<группа>", пусто - напряжения узлов
    fft_window: int = Field(default=5, ge=5)
    settle_tol: float = Field(default=1e-5, gt=0.0)
    divergence_factor: float = Field(default=10.0, gt=1.0)
    record_energy: bool = False                       # энергия LC сети на каждом шаге

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def validate_step(self):
        limit = 1.0 / (20.0 * self.f1 * max(self.h_max, 1))
        if self.step > limit:
            raise ValueError(f"Шаг {self.step:.3e} с больше допустимого {limit:.3e} с для h_max={self.h_max}")
        return self

    @property
    def samples_per_period(self) -> int:
        return math.ceil(1.0 / (self.f1 * self.step) - 1e-9)

    @property
    def dt(self) -> float:
        """Фактический шаг: целое число шагов на период."""
        return 1.0 / (self.f1 * self.samples_per_period)


class GainSchedule(BaseModel):
    cider: str
    parameter: str
    changes: List[Tuple[float, float]]   # (время, значение)
    settle_tol: float = Field(default=1e-5, gt=0.0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def validate_times(self):
        times = [t for t, _ in self.changes]
        if any(t <= 0 for t in times):
            raise ValueError("Моменты изменения должны быть положительными")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("Моменты изменения должны строго возрастать")
        return self

    @classmethod
    def staircase(cls, cider: str, parameter: str, values: list[float], dwell: float) -> "GainSchedule":
        """values[0] - номинальное значение, далее по одному изменению через каждые dwell секунд."""
        return cls(cider=cider, parameter=parameter, changes=[(k * dwell, v) for k, v in enumerate(values[1:], start=1)])


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class TdsEvent:
    time: float
    kind: str      # gain_change, unsettled, divergence
    message: str
    step: int = 0  # номер ступени расписания


@dataclass
class TimeSeries:
    t: np.ndarray
    labels: list[str]
    values: np.ndarray                    # (отсчёты, каналы)
    groups: dict[str, slice]
    samples_per_period: int
    f1: float
    events: list[TdsEvent] = field(default_factory=list)
    energy: Optional[np.ndarray] = None   # Дж, по отсчётам

    @property
    def diverged(self) -> bool:
        return any(e.kind == "divergence" for e in self.events)

    @property
    def divergence(self) -> TdsEvent | None:
        return next((e for e in self.events if e.kind == "divergence"), None)

    def group(self, name: str) -> np.ndarray:
        return self.values[:, self.groups[name]]

    def head(self, samples: int) -> "TimeSeries":
        events = [e for e in self.events if e.time < self.t[min(samples, self.t.size) - 1] + 1e-12]
        energy = None if self.energy is None else self.energy[:samples]
        return TimeSeries(self.t[:samples], self.labels, self.values[:samples], self.groups,
                          self.samples_per_period, self.f1, events, energy)


@dataclass(frozen=True)
class TdsSystem:
    topology: NetworkTopology
    thevenin: TheveninSpec
    ciders: tuple[CiderSpec, ...]
    operating_point: SystemOperatingPoint
    with_harmonics: bool = True
    with_sources: bool = True     # False: ЭДС, уставки и источники постоянного тока равны нулю, начальное состояние из HPF

    @property
    def f1(self) -> float:
        return self.operating_point.index_set.f1

    @classmethod
    def from_hpf(
        cls,
        topology: NetworkTopology,
        thevenin: TheveninSpec,
        ciders: list[CiderSpec],
        idx: HarmonicIndexSet,
        with_harmonics: bool = True,
        with_sources: bool = True,
    ) -> "TdsSystem":
        mode = "with_harmonics" if with_harmonics else "zero_distortion"
        op = harmonic_power_flow(topology, thevenin, ciders, idx, mode=mode)
        return cls(topology, thevenin, tuple(ciders), op, with_harmonics, with_sources)


# ————————————————————————————————————————————————
@dataclass
class _Follower:
    spec: CiderSpec
    base: PerUnitBase
    w_sigma: tuple[float, float]
    v_node: PeriodicMatrix        # строки C для напряжения узла
    w_cols: np.ndarray
    dc: "_DcLink | None" = None


@dataclass
class _DcLink:
    capacitance: float
    conductance: float
    K_fb: float
    T_fb: float
    v_star: float
    i_alpha: np.ndarray           # номера состояний i_α
    v_alpha_c: PeriodicMatrix
    v_alpha_d: PeriodicMatrix
    offset: int                   # позиция (v_δ, x_δ) в полном векторе состояния
    i_src: float = 0.0


class _Dynamics:
    """Правая часть dz/dt = f(t, z) для текущих параметров CIDER."""

    def __init__(self, system: TdsSystem, ciders: list[CiderSpec]):
        self.system = system
        self.ciders = ciders
        self.ltp: LtpModel = assemble_ac_system(system.topology, system.thevenin, ciders, system.f1)
        self.omega = self.ltp.omega
        self.n_ac = self.ltp.state_dim
        idx = system.operating_point.index_set
        self.emf = thevenin_emf_spectrum(system.thevenin, idx, with_harmonics=system.with_harmonics)
        self.u0 = np.zeros(len(self.ltp.inputs))
        self.emf_cols = np.array(find_signals(self.ltp.inputs, TE, "e_te"))
        self.followers: list[_Follower] = []
        offset = self.n_ac
        for c in ciders:
            base = PerUnitBase.from_spec(c)
            if c.kind == CiderKind.GRID_FORMING:
                cols = find_signals(self.ltp.inputs, c.id, "v_ref")
                if system.with_sources:
                    self.u0[cols] = [math.sqrt(2.0) * c.setpoint.V_sigma / base.V_b, 0.0]
                continue
            f = _Follower(
                spec=c,
                base=base,
                w_sigma=(c.setpoint.P_sigma / base.S_b, c.setpoint.Q_sigma / base.S_b) if system.with_sources else (0.0, 0.0),
                v_node=self.ltp.C.select(rows=find_signals(self.ltp.outputs, c.node, "v_node")),
                w_cols=np.array(find_signals(self.ltp.inputs, c.id, "w_kappa")),
            )
            if c.kind == CiderKind.GRID_FOLLOWING_DC:
                delta = c.stage("delta")
                rows = find_signals(self.ltp.outputs, c.id, "v_alpha")
                f.dc = _DcLink(
                    capacitance=delta.filter.L_or_C,
                    conductance=delta.filter.R_or_G,
                    K_fb=delta.controller.K_fb,
                    T_fb=delta.controller.T_fb,
                    v_star=c.setpoint.V_delta_ref,
                    i_alpha=np.array(find_signals(self.ltp.states, c.id, "i_alpha")),
                    v_alpha_c=self.ltp.C.select(rows=rows),
                    v_alpha_d=self.ltp.D.select(rows=rows),
                    offset=offset,
                )
                offset += 2
            self.followers.append(f)
        self.size = offset

    def inherit(self, previous: "_Dynamics") -> None:
        """Ток источника звена постоянного тока не меняется при изменении коэффициентов."""
        sources = {f.spec.id: f.dc.i_src for f in previous.followers if f.dc is not None}
        for f in self.followers:
            if f.dc is not None:
                f.dc.i_src = sources.get(f.spec.id, f.dc.i_src)

    def inputs(self, t: float, z: np.ndarray) -> np.ndarray:
        u = self.u0.copy()
        if self.system.with_sources:
            u[self.emf_cols] = np.real(self.emf.evaluate(t))[:, 0]
        x = z[: self.n_ac]
        park = _PARK.evaluate(t, self.omega)
        for f in self.followers:
            w = np.zeros(2)
            if self.system.with_sources:
                v_dq = park @ (f.v_node.evaluate(t, self.omega) @ x) / f.base.V_b
                if v_dq[0] <= np.finfo(float).eps:
                    raise SimulationError(f"CIDER {f.spec.id}: v_D(t) = {v_dq[0]:.3e}, опорный ток не определён", t)
                w = np.array(f.w_sigma) / v_dq[0]
            if f.dc is not None:
                v_delta, x_delta = z[f.dc.offset : f.dc.offset + 2]
                error = (f.dc.v_star - v_delta) / f.dc.v_star
                w[0] += f.dc.K_fb * (error + x_delta / f.dc.T_fb)
            u[f.w_cols] = w
        return u

    def dc_power(self, t: float, z: np.ndarray, u: np.ndarray, f: _Follower) -> float:
        x = z[: self.n_ac]
        v_a = f.dc.v_alpha_c.evaluate(t, self.omega) @ x + f.dc.v_alpha_d.evaluate(t, self.omega) @ u
        return float(v_a @ x[f.dc.i_alpha])

    def __call__(self, t: float, z: np.ndarray) -> np.ndarray:
        u = self.inputs(t, z)
        x = z[: self.n_ac]
        dz = np.empty_like(z)
        dz[: self.n_ac] = self.ltp.A.evaluate(t, self.omega) @ x + self.ltp.B.evaluate(t, self.omega) @ u
        for f in self.followers:
            if f.dc is None:
                continue
            dc = f.dc
            v_delta = z[dc.offset]
            p = self.dc_power(t, z, u, f)
            dz[dc.offset] = (dc.i_src - dc.conductance * v_delta - p / v_delta) / dc.capacitance
            dz[dc.offset + 1] = (dc.v_star - v_delta) / dc.v_star
        return dz

    def outputs(self, t: float, z: np.ndarray, rows: np.ndarray) -> np.ndarray:
        u = self.inputs(t, z)
        x = z[: self.n_ac]
        c = self.ltp.C.select(rows=rows).evaluate(t, self.omega)
        d = self.ltp.D.select(rows=rows).evaluate(t, self.omega)
        return c @ x + d @ u


# ————————————————————————————————————————————————
def periodic_trajectory(system: TdsSystem, ltp: LtpModel, t: np.ndarray) -> np.ndarray:
    """Значения состояний рабочей точки HPF во времени, форма (len(t), состояния)."""
    op = system.operating_point
    if op.state_hat is None:
        raise SimulationError("Рабочая точка HPF не содержит вектора состояний")
    idx = op.index_set
    _, rows, orders = harmonic_layout(ltp.states, idx, idx.with_h_max(idx.h_max + 1))
    if rows.size != op.state_hat.size:
        raise SimulationError(f"Размер вектора HPF {op.state_hat.size} не совпадает с моделью ({rows.size})")
    phasors = np.exp(1j * idx.omega * np.outer(np.atleast_1d(t), orders))
    scatter = np.zeros((rows.size, ltp.state_dim))
    scatter[np.arange(rows.size), rows] = 1.0
    return np.real((phasors * op.state_hat[None, :]) @ scatter)


def _initial_state(dyn: _Dynamics, cfg: TdsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Начальное состояние из рабочей точки и огибающая каждого состояния."""
    n = cfg.samples_per_period
    times = np.arange(n) / (n * dyn.system.f1)
    trajectory = periodic_trajectory(dyn.system, dyn.ltp, times)
    z0 = np.zeros(dyn.size)
    z0[: dyn.n_ac] = trajectory[0]
    for f in dyn.followers:
        if f.dc is not None:
            z0[f.dc.offset] = f.dc.v_star
    # Ток источника постоянного тока: баланс средней мощности при v_δ = V*
    for f in dyn.followers:
        if f.dc is None:
            continue
        power = []
        for t, x in zip(times, trajectory):
            z = z0.copy()
            z[: dyn.n_ac] = x
            power.append(dyn.dc_power(t, z, dyn.inputs(t, z), f))
        f.dc.i_src = float(np.mean(power)) / f.dc.v_star + f.dc.conductance * f.dc.v_star
        if not dyn.system.with_sources:
            f.dc.i_src = 0.0
        logger.debug(f"{f.spec.id}: ток источника звена постоянного тока {f.dc.i_src:.3f} А")

    peak = np.max(np.abs(trajectory), axis=0)
    envelope = np.zeros(dyn.size)
    for frame_states in _state_groups(dyn.ltp).values():
        group_peak = float(np.max(peak[frame_states]))
        floor = 0.1 if dyn.ltp.states[frame_states[0]].frame == Frame.DQZ else max(0.1 * group_peak, 1.0)
        envelope[frame_states] = np.maximum(peak[frame_states], floor)
    for f in dyn.followers:
        if f.dc is not None:
            envelope[f.dc.offset] = f.dc.v_star
            envelope[f.dc.offset + 1] = 0.1
    return z0, envelope


def _state_groups(ltp: LtpModel) -> dict[tuple[str, str], list[int]]:
    groups: dict[tuple[str, str], list[int]] = {}
    for i, s in enumerate(ltp.states):
        groups.setdefault((s.subsystem, s.group), []).append(i)
    return groups


def _record_rows(dyn: _Dynamics, cfg: TdsConfig) -> tuple[np.ndarray, list[str], dict[str, slice]]:
    names = cfg.record or [f"{s.subsystem}.{s.group}" for s in dyn.ltp.outputs if s.group == "v_node" and s.coordinate == "a"]
    rows, labels, groups = [], [], {}
    for name in names:
        subsystem, _, group = name.rpartition(".")
        found = find_signals(dyn.ltp.outputs, subsystem, group)
        if not found:
            raise SimulationError(f"Нет выхода {name} для записи")
        groups[name] = slice(len(rows), len(rows) + len(found))
        rows += found
        labels += [dyn.ltp.outputs[i].name for i in found]
    return np.array(rows, dtype=int), labels, groups


def _rk4_step(f, t: float, z: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, z)
    k2 = f(t + 0.5 * h, z + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, z + 0.5 * h * k2)
    k4 = f(t + h, z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _period_rms(values: np.ndarray, n: int, periods: int) -> np.ndarray:
    window = values[-periods * n :].reshape(periods, n, -1)
    return np.sqrt(np.mean(window**2, axis=1))


def is_settled(values: np.ndarray, samples_per_period: int, tol: float) -> bool:
    """Относительное изменение RMS за период между двумя последними периодами меньше tol."""
    if values.shape[0] < 2 * samples_per_period:
        return False
    rms = _period_rms(values, samples_per_period, 2)
    scale = np.maximum(np.abs(rms[1]), 1e-12 * max(1.0, float(np.max(np.abs(rms[1])))))
    return bool(np.all(np.abs(rms[1] - rms[0]) / scale < tol))


# ————————————————————————————————————————————————
def simulate(system: TdsSystem, cfg: TdsConfig, schedule: GainSchedule | None = None) -> TimeSeries:
    if not np.isclose(cfg.f1, system.f1):
        raise SimulationError(f"Частота моделирования {cfg.f1} Гц не совпадает с частотой системы {system.f1} Гц")
    ciders = list(system.ciders)
    dyn = _Dynamics(system, ciders)
    z, envelope = _initial_state(dyn, cfg)
    limit = cfg.divergence_factor * envelope
    rows, labels, groups = _record_rows(dyn, cfg)

    h = cfg.dt
    n_steps = int(round(cfg.duration / h))
    change_at = {}
    if schedule is not None:
        target = next((i for i, c in enumerate(ciders) if c.id == schedule.cider), None)
        if target is None:
            raise SimulationError(f"В системе нет CIDER {schedule.cider}")
        change_at = {int(round(t / h)): (k, v) for k, (t, v) in enumerate(schedule.changes, start=1)}

    times = np.arange(n_steps) * h
    values = np.full((n_steps, len(rows)), np.nan)
    energy = np.full(n_steps, np.nan) if cfg.record_energy else None
    events: list[TdsEvent] = []
    step_index = 0
    logger.info(f"TDS: {n_steps} шагов по {h:.3e} с, {dyn.size} состояний")
    for n in range(n_steps):
        t = times[n]
        if n in change_at:
            k, value = change_at[n]
            if not is_settled(values[:n], cfg.samples_per_period, schedule.settle_tol):
                events.append(TdsEvent(t, "unsettled", f"Режим не установился перед ступенью {k}", step_index))
                logger.warning(f"t={t:.4f} с: режим не установился перед ступенью {k}")
            ciders[target] = ciders[target].with_parameters({schedule.parameter: value})
            previous = dyn
            dyn = _Dynamics(system, ciders)
            dyn.inherit(previous)
            step_index = k
            events.append(TdsEvent(t, "gain_change", f"{schedule.cider}.{schedule.parameter} = {value:.6g}", k))
            logger.info(f"t={t:.4f} с: {schedule.cider}.{schedule.parameter} = {value:.6g}")
        values[n] = dyn.outputs(t, z, rows)
        if energy is not None:
            grid = dyn.ltp.parameters["grid"]
            energy[n] = stored_energy(grid, z[: grid.state_dim])[0]
        z = _rk4_step(dyn, t, z, h)
        if not np.all(np.isfinite(z)):
            raise SimulationError(f"Нечисловое состояние на шаге {n}", t + h)
        exceeded = np.flatnonzero(np.abs(z) > limit)
        if exceeded.size:
            names = [dyn.ltp.states[i].name if i < dyn.n_ac else "dc" for i in exceeded[:3]]
            events.append(TdsEvent(t + h, "divergence", f"Превышена огибающая: {', '.join(names)}", step_index))
            logger.warning(f"t={t + h:.4f} с: расходимость на ступени {step_index} ({', '.join(names)})")
            values = values[: n + 1]
            times = times[: n + 1]
            energy = None if energy is None else energy[: n + 1]
            break
    return TimeSeries(times, labels, values, groups, cfg.samples_per_period, cfg.f1, events, energy)


def steady_state_spectrum(series: TimeSeries, cfg: TdsConfig, h_max: int | None = None) -> dict[str, HarmonicSpectrum]:
    """ДПФ по целому числу периодов в конце записи; порядки ±h_max."""
    h_max = cfg.h_max if h_max is None else h_max
    n = series.samples_per_period
    window = cfg.fft_window
    if series.values.shape[0] < (window + 1) * n:
        raise SettleError(f"Запись короче {window + 1} периодов")
    if not is_settled(series.values, n, cfg.settle_tol):
        raise SettleError(f"Изменение RMS за период выше {cfg.settle_tol:.1e}: режим не установился")
    if 2 * h_max >= n:
        raise SettleError(f"{n} отсчётов на период недостаточно для h_max={h_max}")
    samples = series.values[-window * n :]
    bins = np.fft.rfft(samples, axis=0) / samples.shape[0]
    idx = HarmonicIndexSet(h_max=h_max, f1=series.f1)
    positive = bins[np.arange(h_max + 1) * window].T        # (каналы, 0..h_max)
    spectra = {}
    for name, sl in series.groups.items():
        pos = positive[sl]
        coeffs = np.hstack([np.conj(pos[:, :0:-1]), pos])
        coeffs[:, h_max] = coeffs[:, h_max].real
        spectra[name] = HarmonicSpectrum(idx, coeffs)
    return spectra


# ————————————————————————————————————————————————
@dataclass
class StaircaseResult:
    instability_step: Optional[int]
    series: TimeSeries
    values: list[float]


def staircase_experiment(
    system: TdsSystem,
    cider: str,
    parameter: str,
    values: list[float],
    cfg: TdsConfig,
    dwell_periods: int = 10,
) -> StaircaseResult:
    """Ступенчатое изменение параметра; результат - номер ступени, на которой началась расходимость."""
    dwell = dwell_periods / system.f1
    schedule = GainSchedule.staircase(cider, parameter, values, dwell)
    run_cfg = cfg.model_copy(update={"duration": len(values) * dwell})
    series = simulate(system, run_cfg, schedule)
    event = series.divergence
    step = None if event is None else event.step
    mode = "с гармониками" if system.with_harmonics else "без гармоник"
    logger.info(f"Лестница {cider}.{parameter} ({mode}): " + (f"неустойчивость на ступени {step}" if step is not None else "устойчиво"))
    return StaircaseResult(step, series, list(values))
