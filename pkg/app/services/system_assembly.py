# app/services/system_assembly.py
"""
Сборка системы: соединение портов сети и CIDER, гармонический расчёт
потокораспределения (HPF), замкнутая HSS-модель и её LTI-аналог.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum, park_fourier, park_operator
from app.core.periodic import PeriodicMatrix
from app.core.statespace import HssModel, LtpModel, Provenance, Signal, find_signals, lift
from app.exceptions import HpfConvergenceError, IndexSetMismatchError, PortMismatchError
from app.schemas import CiderKind, CiderSpec, NetworkTopology, TheveninSpec
from app.services.cider_models import (
    OperatingPoint,
    OperatingPointSource,
    PerUnitBase,
    ReferenceSmallSignal,
    build_ltp_model,
    exact_reference,
    lift_to_hss,
    reference_small_signal,
)
from app.services.grid_network import TE, build_grid_ltp, grid_hss, thevenin_emf_spectrum
from app.settings import settings

logger = logging.getLogger(__name__)

_PARK = PeriodicMatrix(park_fourier())


@dataclass(frozen=True)
class _Port:
    target: tuple[str, str]   # (подсистема, группа) входа
    source: tuple[str, str]   # (подсистема, группа) выхода
    gain: object = None       # None - единичная связь


def _spec(model) -> CiderSpec:
    return model.parameters["spec"]


def _port_map(ciders: list[CiderSpec], nodes: list[str]) -> list[_Port]:
    ports = []
    for c in ciders:
        if c.id in nodes:
            raise PortMismatchError(f"Идентификатор CIDER {c.id} совпадает с именем узла")
        if c.kind == CiderKind.GRID_FORMING:
            ports.append(_Port((c.id, "i_gamma"), (c.node, "i_node")))
            ports.append(_Port((c.node, "v_node"), (c.id, "v_phi")))
        else:
            ports.append(_Port((c.id, "v_gamma"), (c.node, "v_node")))
            ports.append(_Port((c.node, "i_abs"), (c.id, "i_gamma")))
    return ports


# ————————————————————————————————————————————————
def assemble_ltp(
    grid: LtpModel,
    resources: list[LtpModel],
    references: dict[str, PeriodicMatrix] | None = None,
    name: str = "system",
) -> LtpModel:
    """
    Соединение портов на уровне LTP-моделей. references задаёт для следящих
    CIDER линейную связь w_κ = G(t)·v_узла (линеаризованный опорный расчёт);
    без неё вход w_κ остаётся внешним.
    """
    topology: NetworkTopology = grid.parameters["topology"]
    specs = [_spec(r) for r in resources]
    ports = _port_map(specs, topology.nodes)
    for c in specs:
        if references and c.id in references:
            ports.append(_Port((c.id, "w_kappa"), (c.node, "v_node"), references[c.id]))
    models = [grid] + resources
    a = PeriodicMatrix.block_diag([m.A for m in models])
    b = PeriodicMatrix.block_diag([m.B for m in models])
    c_mat = PeriodicMatrix.block_diag([m.C for m in models])
    d = PeriodicMatrix.block_diag([m.D for m in models])
    states = tuple(s for m in models for s in m.states)
    inputs = tuple(s for m in models for s in m.inputs)
    outputs = tuple(s for m in models for s in m.outputs)
    connected: list[int] = []
    for p in ports:
        iu = find_signals(inputs, *p.target)
        iy = find_signals(outputs, *p.source)
        _check_port(p, iu, iy)
        if np.any(d.select(rows=iy).coefficients):
            raise PortMismatchError(f"Выход {p.source} имеет прямую связь со входом и не может замыкать контур")
        gain = p.gain if p.gain is not None else PeriodicMatrix.constant(np.eye(len(iu)))
        c_out = gain @ c_mat.select(rows=iy)
        a = a + b.select(cols=iu) @ c_out
        c_mat = c_mat + d.select(cols=iu) @ c_out
        connected += iu
    free = [i for i in range(len(inputs)) if i not in set(connected)]
    return LtpModel(
        name=name,
        f1=grid.f1,
        A=a.trimmed(1e-12),
        B=b.select(cols=free).trimmed(1e-12),
        C=c_mat.trimmed(1e-12),
        D=d.select(cols=free).trimmed(1e-12),
        states=states,
        inputs=tuple(inputs[i] for i in free),
        outputs=outputs,
        parameters={"grid": grid, "resources": resources},
    )


def _check_port(p: _Port, iu: list, iy: list) -> None:
    if not iu or not iy:
        raise PortMismatchError(f"Порт {p.target} <- {p.source} не найден")
    if p.gain is None and len(iu) != len(iy):
        raise PortMismatchError(f"Порт {p.target} <- {p.source}: размеры {len(iu)} и {len(iy)} не совпадают")


# ————————————————————————————————————————————————
def close_loop(
    grid: HssModel,
    resources: list[tuple[HssModel, ReferenceSmallSignal | None]],
    op: "SystemOperatingPoint | None" = None,
) -> HssModel:
    """
    Замкнутая HSS-модель: напряжения узлов подаются на входы CIDER и,
    через R̂_ρ, на опорные токи следящих CIDER; токи CIDER подаются в сеть.
    """
    idx, idx_dqz = grid.index_set, grid.dqz_index_set
    models = [grid] + [r for r, _ in resources]
    for m in models:
        if m.index_set != idx or m.dqz_index_set != idx_dqz:
            raise IndexSetMismatchError(f"Модель {m.name} построена на другом наборе гармоник")
    if op is not None and op.index_set.h_max < idx.h_max:
        raise IndexSetMismatchError(f"Рабочая точка содержит h_max={op.index_set.h_max} < {idx.h_max}")
    topology: NetworkTopology = grid.parameters["topology"]
    specs = [_spec(r) for r, _ in resources]
    ports = _port_map(specs, topology.nodes)
    park = park_operator(idx, idx_dqz)
    for (model, ref), c in zip(resources, specs):
        if ref is None:
            if c.kind.is_following:
                raise PortMismatchError(f"Для следящего CIDER {c.id} не задан опорный расчёт")
            continue
        if ref.R_rho_hat.index_set != idx_dqz:
            raise IndexSetMismatchError(f"Опорный расчёт {c.id} построен на другом наборе гармоник")
        base: PerUnitBase = model.parameters["base"]
        ports.append(_Port((c.id, "w_kappa"), (c.node, "v_node"), ref.voltage_gain @ park / base.V_b))

    a = scipy.linalg.block_diag(*[m.A_tilde for m in models])
    b = scipy.linalg.block_diag(*[m.B_hat for m in models])
    c_mat = scipy.linalg.block_diag(*[m.C_hat for m in models])
    d = scipy.linalg.block_diag(*[m.D_hat for m in models])
    states, state_rows = _stack_labels([(m.states, m.state_rows) for m in models])
    inputs, input_rows = _stack_labels([(m.inputs, m.input_rows) for m in models])
    outputs, output_rows = _stack_labels([(m.outputs, m.output_rows) for m in models])
    connected: list[int] = []
    for p in ports:
        iu = np.flatnonzero(np.isin(input_rows, find_signals(inputs, *p.target)))
        iy = np.flatnonzero(np.isin(output_rows, find_signals(outputs, *p.source)))
        _check_port(p, list(iu), list(iy))
        if np.any(d[iy]):
            raise PortMismatchError(f"Выход {p.source} имеет прямую связь со входом")
        c_out = c_mat[iy] if p.gain is None else p.gain @ c_mat[iy]
        a = a + b[:, iu] @ c_out
        c_mat = c_mat + d[:, iu] @ c_out
        connected += list(iu)
    free = np.setdiff1d(np.arange(b.shape[1]), connected)
    free_signals = sorted(set(input_rows[free]))
    remap = {old: new for new, old in enumerate(free_signals)}
    logger.info(f"Замкнутая модель: {a.shape[0]} гармонических состояний, {len(resources)} CIDER")
    return HssModel(
        name="closed_loop",
        A_tilde=a,
        B_hat=b[:, free],
        C_hat=c_mat,
        D_hat=d[:, free],
        index_set=idx,
        dqz_index_set=idx_dqz,
        states=states,
        state_orders=np.concatenate([m.state_orders for m in models]),
        inputs=tuple(inputs[i] for i in free_signals),
        input_orders=np.concatenate([m.input_orders for m in models])[free],
        outputs=outputs,
        output_orders=np.concatenate([m.output_orders for m in models]),
        provenance=Provenance.CLOSED_LOOP,
        state_rows=state_rows,
        input_rows=np.array([remap[r] for r in input_rows[free]], dtype=int),
        output_rows=output_rows,
        parameters={"grid": grid.parameters, "ciders": specs},
    )


def _stack_labels(parts: list[tuple[tuple[Signal, ...], np.ndarray]]) -> tuple[tuple[Signal, ...], np.ndarray]:
    signals: list[Signal] = []
    rows = []
    for labels, r in parts:
        rows.append(np.asarray(r, dtype=int) + len(signals))
        signals += list(labels)
    return tuple(signals), np.concatenate(rows) if rows else np.zeros(0, int)


# ————————————————————————————————————————————————
@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)
    damped: bool = False


@dataclass(frozen=True)
class SystemOperatingPoint:
    index_set: HarmonicIndexSet
    mode: str
    node_voltages: dict[str, HarmonicSpectrum]   # В, ABC
    node_currents: dict[str, HarmonicSpectrum]   # А, ABC, ток из сети в CIDER
    references: dict[str, HarmonicSpectrum]      # о.е., DQ
    report: ConvergenceReport
    v_base: float
    system: LtpModel | None = None
    state_hat: np.ndarray | None = None

    def operating_point(self, spec: CiderSpec) -> OperatingPoint:
        base = PerUnitBase.from_spec(spec)
        return OperatingPoint.from_abc(self.node_voltages[spec.node], base, OperatingPointSource.HPF)

    def fundamental_pu(self, node: str) -> float:
        return 2.0 * abs(self.node_voltages[node].coefficient(1)) / self.v_base


def assemble_ac_system(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    f1: float = 50.0,
) -> LtpModel:
    """Сеть и силовые части CIDER без звеньев постоянного тока; опорные токи w_κ остаются входами."""
    grid = build_grid_ltp(topology, thevenin, ciders, f1)
    resources = [build_ltp_model(c, f1=f1, ac_part=True) for c in ciders]
    return assemble_ltp(grid, resources)


def _symmetrized(x: HarmonicSpectrum) -> HarmonicSpectrum:
    return HarmonicSpectrum(x.index_set, (x.coefficients + np.conj(x.coefficients[:, ::-1])) / 2.0)


def harmonic_power_flow(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    idx: HarmonicIndexSet,
    mode: str = "with_harmonics",
    tol: float | None = None,
    max_iter: int | None = None,
    damping: float | None = None,
) -> SystemOperatingPoint:
    """
    Итерация неподвижной точки по опорным токам: (а) линейный установившийся
    режим сети с внутренними откликами CIDER при заданных опорах, (б)
    обновление опор следящих CIDER по точному закону i* = w_σ / v_D(t).
    """
    if mode not in ("with_harmonics", "zero_distortion"):
        raise ValueError(f"Неизвестный режим HPF: {mode}")
    tol = settings.HSA_HPF_TOL if tol is None else tol
    max_iter = settings.HSA_HPF_MAX_ITER if max_iter is None else max_iter
    damping = settings.HSA_HPF_DAMPING if damping is None else damping

    system = assemble_ac_system(topology, thevenin, ciders, idx.f1)
    hss = lift(system, idx, provenance=Provenance.CLOSED_LOOP)
    try:
        lu = scipy.linalg.lu_factor(hss.A_tilde)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise HpfConvergenceError(f"Матрица системы вырождена: {e}", []) from e

    idx_dqz = hss.dqz_index_set
    u_hat = np.zeros(hss.B_hat.shape[1], dtype=complex)
    emf = thevenin_emf_spectrum(thevenin, idx, with_harmonics=(mode == "with_harmonics"))
    u_hat[hss.input_block("e_te", TE)] = emf.flat()
    bases = {c.id: PerUnitBase.from_spec(c) for c in ciders}
    w_sigma = {}
    for c in ciders:
        if c.kind == CiderKind.GRID_FORMING:
            v_ref = np.sqrt(2.0) * c.setpoint.V_sigma / bases[c.id].V_b
            u_hat[hss.input_block("v_ref", c.id)] = HarmonicSpectrum.constant(idx_dqz, [v_ref, 0.0]).flat()
        else:
            w_sigma[c.id] = (c.setpoint.P_sigma / bases[c.id].S_b, c.setpoint.Q_sigma / bases[c.id].S_b)
    followers = [c for c in ciders if c.kind.is_following]

    def solve(w: dict[str, HarmonicSpectrum]):
        u = u_hat.copy()
        for cid, spectrum in w.items():
            u[hss.input_block("w_kappa", cid)] = spectrum.flat()
        x = -scipy.linalg.lu_solve(lu, hss.B_hat @ u)
        return x, hss.C_hat @ x + hss.D_hat @ u

    def node_voltage(y: np.ndarray, c: CiderSpec) -> HarmonicSpectrum:
        return HarmonicSpectrum.from_flat(idx, y[hss.output_block("v_node", c.node)])

    initial = {cid: HarmonicSpectrum.constant(idx_dqz, list(w)) for cid, w in w_sigma.items()}
    report = ConvergenceReport(converged=not followers, iterations=0)
    w = initial
    x, y = solve(w)
    for factor in (1.0, damping):
        if report.converged:
            break
        report = ConvergenceReport(converged=False, iterations=0, damped=factor < 1.0)
        w = initial
        for it in range(1, max_iter + 1):
            x, y = solve(w)
            w_new = {}
            for c in followers:
                op = OperatingPoint.from_abc(node_voltage(y, c), bases[c.id], OperatingPointSource.HPF)
                w_new[c.id] = exact_reference(op.v_d, w_sigma[c.id])
            residual = max(float(np.max(np.abs(w_new[k].coefficients - w[k].coefficients))) for k in w)
            report.residuals.append(residual)
            report.iterations = it
            w = {k: w[k] + (w_new[k] - w[k]) * factor for k in w}
            logger.debug(f"HPF итерация {it} (коэффициент {factor}): невязка {residual:.3e}")
            if residual < tol:
                report.converged = True
                x, y = solve(w)
                break
            if not np.isfinite(residual) or residual > 1e6:
                break
        if not report.converged:
            logger.warning(f"HPF (коэффициент {factor}) не сошёлся за {report.iterations} итераций, невязка {report.residuals[-1]:.3e}")
    if not report.converged:
        raise HpfConvergenceError(f"HPF не сошёлся за {max_iter} итераций", report.residuals)

    node_voltages = {}
    for n in topology.nodes:
        rows = hss.output_block("v_node", n)
        if rows.size:
            node_voltages[n] = _symmetrized(HarmonicSpectrum.from_flat(idx, y[rows]))
    node_currents = {}
    for c in ciders:
        if c.kind == CiderKind.GRID_FORMING:
            node_voltages[c.node] = _symmetrized(HarmonicSpectrum.from_flat(idx, y[hss.output_block("v_phi", c.id)]))
            node_currents[c.node] = _symmetrized(HarmonicSpectrum.from_flat(idx, y[hss.output_block("i_node", c.node)]))
        else:
            node_currents[c.node] = _symmetrized(HarmonicSpectrum.from_flat(idx, y[hss.output_block("i_gamma", c.id)]))
    v_base = np.sqrt(2.0) * thevenin.V_n
    result = SystemOperatingPoint(
        index_set=idx,
        mode=mode,
        node_voltages=node_voltages,
        node_currents=node_currents,
        references=w,
        report=report,
        v_base=v_base,
        system=system,
        state_hat=x,
    )
    for n in node_voltages:
        magnitude = result.fundamental_pu(n)
        if not 0.9 <= magnitude <= 1.1:
            logger.warning(f"Узел {n}: основная гармоника {magnitude:.3f} о.е. далека от 1 о.е.")
    logger.info(f"HPF ({mode}) сошёлся за {report.iterations} итераций")
    return result


# ————————————————————————————————————————————————
def system_closed_loop(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    op: SystemOperatingPoint,
    idx: HarmonicIndexSet,
    taylor_order: int | None = None,
) -> HssModel:
    """Замкнутая HSS-модель системы, линеаризованная в рабочей точке HPF."""
    grid = grid_hss(build_grid_ltp(topology, thevenin, ciders, idx.f1), idx)
    resources = []
    for c in ciders:
        ltp = build_ltp_model(c, op.operating_point(c) if c.kind.is_following else None, idx.f1, h_max=idx.h_max)
        hss = lift_to_hss(ltp, idx)
        ref = None
        if c.kind.is_following:
            local = op.operating_point(c).truncated(idx.h_max)
            n = c.taylor_order if taylor_order is None else taylor_order
            ref = reference_small_signal(local, c.setpoint, n, PerUnitBase.from_spec(c))
        resources.append((hss, ref))
    return close_loop(grid, resources, op)


def _reference_gain_ltp(op: OperatingPoint, spec: CiderSpec, base: PerUnitBase) -> PeriodicMatrix:
    """Линеаризованный закон PQ при синусоидальном напряжении: G(t) = -diag(P,Q)/V_0²·E·Park(t)/V_b."""
    v0 = np.real(op.v_d.coefficient(0))
    p, q = spec.setpoint.P_sigma / base.S_b, spec.setpoint.Q_sigma / base.S_b
    gain = np.array([[-p / v0**2, 0.0], [-q / v0**2, 0.0]])
    return PeriodicMatrix.constant(gain) @ _PARK * (1.0 / base.V_b)


def closed_loop_ltp(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    op: SystemOperatingPoint,
) -> LtpModel:
    """Замкнутая LTP-модель при рабочей точке основной частоты."""
    f1 = op.index_set.f1
    grid = build_grid_ltp(topology, thevenin, ciders, f1)
    resources, references = [], {}
    for c in ciders:
        if c.kind.is_following:
            local = op.operating_point(c).truncated(1)
            base = PerUnitBase.from_spec(c)
            resources.append(build_ltp_model(c, local, f1, h_max=1))
            references[c.id] = _reference_gain_ltp(local, c, base)
        else:
            resources.append(build_ltp_model(c, f1=f1))
    return assemble_ltp(grid, resources, references)


def lti_counterpart(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    op: SystemOperatingPoint,
) -> HssModel:
    """Вся система в координатах DQZ с постоянными матрицами (LTI-аналог)."""
    ltp = closed_loop_ltp(topology, thevenin, ciders, op).to_dqz().averaged()
    idx0 = HarmonicIndexSet(h_max=0, f1=op.index_set.f1)
    return lift(ltp, idx0, idx0, Provenance.LTI_COUNTERPART)


def resource_lti(spec: CiderSpec, op: OperatingPoint | None = None, f1: float = 50.0) -> HssModel:
    """LTI-аналог отдельного CIDER."""
    ltp = build_ltp_model(spec, op, f1, frame="dq")
    idx0 = HarmonicIndexSet(h_max=0, f1=f1)
    return lift(ltp, idx0, idx0, Provenance.LTI_COUNTERPART)
