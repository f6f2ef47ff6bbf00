# app/services/grid_network.py
"""Модели сети: эквивалент Тевенена, линии (π-схемы) и радиальная топология."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum
from app.core.periodic import PeriodicMatrix
from app.core.statespace import Frame, HssModel, LtpModel, Provenance, Signal, abc_signals, lift
from app.exceptions import TopologyError
from app.schemas import CiderKind, CiderSpec, LineSegment, NetworkTopology, TheveninSpec

logger = logging.getLogger(__name__)

TE = "TE"


# ————————————————————————————————————————————————
def thevenin_from_sc(V_n: float, S_sc: float, R_over_X: float) -> tuple[float, float]:
    """(R_sc, X_sc) при |Z| = V_n²/S_sc."""
    if V_n <= 0 or S_sc <= 0 or R_over_X <= 0:
        raise ValueError("Параметры эквивалента Тевенена должны быть положительными")
    return _split_impedance(V_n**2 / S_sc, R_over_X)


def _split_impedance(z_mag: float, ratio: float) -> tuple[float, float]:
    x = z_mag / math.sqrt(1.0 + ratio**2)
    return ratio * x, x


def thevenin_impedance(spec: TheveninSpec, f1: float) -> tuple[float, float]:
    """(R, L) фазы эквивалента. Заданный |Z| имеет приоритет перед расчётом по S_sc."""
    if spec.Z_sc_mag is not None:
        r, x = _split_impedance(spec.Z_sc_mag, spec.R_over_X)
    else:
        r, x = thevenin_from_sc(spec.V_n, spec.S_sc, spec.R_over_X)
    return r, x / (2.0 * math.pi * f1)


def thevenin_emf_spectrum(spec: TheveninSpec, idx: HarmonicIndexSet, with_harmonics: bool = True) -> HarmonicSpectrum:
    """
    Спектр ЭДС эквивалента (В, ABC). Гармоники образуют симметричную систему:
    фаза k отстаёт на 2πkh/3, поэтому порядки 6m-1 дают обратную
    последовательность, а 6m+1 прямую.
    """
    amp = math.sqrt(2.0) * spec.V_n
    k = np.arange(3)
    coeffs = np.zeros((3, idx.size), dtype=complex)
    terms = [(1, 1.0, 0.0)]
    if with_harmonics:
        terms += [(inj.h, inj.magnitude, inj.phase) for inj in spec.harmonics]
    for h, magnitude, phase in terms:
        if h > idx.h_max:
            continue
        phasor = amp * magnitude / 2.0 * np.exp(1j * (phase - 2.0 * np.pi * k * h / 3.0))
        coeffs[:, idx.position(h)] += phasor
        coeffs[:, idx.position(-h)] += np.conj(phasor)
    return HarmonicSpectrum(idx, coeffs)


# ————————————————————————————————————————————————
def sequence_to_phase(positive: float, zero: float) -> np.ndarray:
    self_term = (zero + 2.0 * positive) / 3.0
    mutual = (zero - positive) / 3.0
    return np.full((3, 3), mutual) + np.eye(3) * (self_term - mutual)


def phase_to_sequence(matrix: np.ndarray) -> tuple[float, float]:
    """Обратное преобразование для циклически-симметричной матрицы: (прямая, нулевая)."""
    self_term = float(np.mean(np.diag(matrix)))
    mutual = float(np.mean(matrix[~np.eye(3, dtype=bool)]))
    return self_term - mutual, self_term + 2.0 * mutual


@dataclass(frozen=True)
class LinePhaseMatrices:
    R: np.ndarray
    L: np.ndarray
    C: np.ndarray

    @classmethod
    def from_segment(cls, seg: LineSegment) -> "LinePhaseMatrices":
        return cls(
            R=sequence_to_phase(seg.R_pos, seg.R_zero),
            L=sequence_to_phase(seg.L_pos, seg.L_zero),
            C=sequence_to_phase(seg.C_pos, seg.C_zero),
        )


def line_to_abc_statespace(seg: LineSegment, f1: float = 50.0, name: str = "line") -> LtpModel:
    """
    Отдельная π-схема: напряжение v_in приложено к началу линии, в конце
    подключена ёмкость C/2 и нагрузка с током i_load. Состояния: токи
    линии и напряжения ёмкости в конце.
    """
    m = LinePhaseMatrices.from_segment(seg)
    l_inv = np.linalg.inv(m.L)
    c_inv = np.linalg.inv(m.C / 2.0)
    zero = np.zeros((3, 3))
    a = np.block([[-l_inv @ m.R, -l_inv], [c_inv, zero]])
    b = np.block([[l_inv, zero], [zero, -c_inv]])
    c = np.hstack([zero, np.eye(3)])
    states = tuple(abc_signals(name, "i_line") + abc_signals(name, "v_out"))
    inputs = tuple(abc_signals(name, "v_in") + abc_signals(name, "i_load"))
    return LtpModel(
        name=name,
        f1=f1,
        A=PeriodicMatrix.constant(a),
        B=PeriodicMatrix.constant(b),
        C=PeriodicMatrix.constant(c),
        D=PeriodicMatrix.zeros(3, 6),
        states=states,
        inputs=inputs,
        outputs=tuple(abc_signals(name, "v_out")),
    )


# ————————————————————————————————————————————————
def check_connected(topology: NetworkTopology) -> None:
    index = {n: i for i, n in enumerate(topology.nodes)}
    rows = [index[b.from_node] for b in topology.branches]
    cols = [index[b.to_node] for b in topology.branches]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(index), len(index)))
    count, _ = connected_components(graph, directed=False)
    if count != 1:
        raise TopologyError(f"Сеть несвязна: {count} компонент(ы)")


def build_grid_ltp(
    topology: NetworkTopology,
    thevenin: TheveninSpec,
    ciders: list[CiderSpec],
    f1: float = 50.0,
) -> LtpModel:
    """
    Модель сети в координатах ABC (постоянные матрицы). Входы: ЭДС эквивалента,
    токи, потребляемые следящими CIDER, и напряжения узлов с формирующими
    CIDER. Выходы: напряжения узлов и токи, втекающие в формирующие CIDER.
    """
    check_connected(topology)
    attachments: dict[str, CiderKind] = {}
    for c in ciders:
        if c.node in attachments:
            raise TopologyError(f"К узлу {c.node} подключено больше одного CIDER")
        attachments[c.node] = c.kind
    forming = [n for n in topology.nodes if attachments.get(n) == CiderKind.GRID_FORMING]
    following = [n for n in topology.nodes if n in attachments and n not in forming]

    # Узловые ёмкости: половины ёмкостей примыкающих линий
    lines = [(b, LinePhaseMatrices.from_segment(b.segment)) for b in topology.branches]
    node_cap = {n: np.zeros((3, 3)) for n in topology.nodes}
    for b, m in lines:
        node_cap[b.from_node] = node_cap[b.from_node] + m.C / 2.0
        node_cap[b.to_node] = node_cap[b.to_node] + m.C / 2.0
    cap_nodes = [n for n in topology.nodes if n not in forming]
    for n in cap_nodes:
        if not np.any(node_cap[n]):
            raise TopologyError(f"Узел {n} не имеет шунтирующей ёмкости и не задан формирующим CIDER")

    states: list[Signal] = abc_signals(TE, "i_te")
    for b, _ in lines:
        states += abc_signals(f"{b.from_node}-{b.to_node}", "i_line")
    for n in cap_nodes:
        states += abc_signals(n, "v_node")
    inputs: list[Signal] = abc_signals(TE, "e_te")
    for n in following:
        inputs += abc_signals(n, "i_abs")
    for n in forming:
        inputs += abc_signals(n, "v_node")
    outputs: list[Signal] = []
    for n in cap_nodes:
        outputs += abc_signals(n, "v_node")
    for n in forming:
        outputs += abc_signals(n, "i_node")

    ns, nu, ny = len(states), len(inputs), len(outputs)
    a = np.zeros((ns, ns))
    b_mat = np.zeros((ns, nu))
    c_mat = np.zeros((ny, ns))
    s_pos = _positions(states)
    u_pos = _positions(inputs)
    y_pos = _positions(outputs)

    def voltage(node: str, row: slice, gain: np.ndarray):
        # Напряжение узла: состояние либо вход (формирующий CIDER)
        if node in forming:
            b_mat[row, u_pos[(node, "v_node")]] += gain
        else:
            a[row, s_pos[(node, "v_node")]] += gain

    # Ток эквивалента: L·di/dt = e - R·i - v(узла эквивалента)
    r_te, l_te = thevenin_impedance(thevenin, f1)
    te_row = s_pos[(TE, "i_te")]
    a[te_row, te_row] -= np.eye(3) * r_te / l_te
    b_mat[te_row, u_pos[(TE, "e_te")]] += np.eye(3) / l_te
    voltage(topology.thevenin_node, te_row, -np.eye(3) / l_te)

    # Токи ветвей: L·di/dt = v_from - v_to - R·i
    currents_into: dict[str, list[tuple[slice, float]]] = {n: [] for n in topology.nodes}
    currents_into[topology.thevenin_node].append((te_row, 1.0))
    for br, m in lines:
        row = s_pos[(f"{br.from_node}-{br.to_node}", "i_line")]
        l_inv = np.linalg.inv(m.L)
        a[row, row] -= l_inv @ m.R
        voltage(br.from_node, row, l_inv)
        voltage(br.to_node, row, -l_inv)
        currents_into[br.from_node].append((row, -1.0))
        currents_into[br.to_node].append((row, 1.0))

    # Узлы с ёмкостью: C·dv/dt = Σ втекающих токов - ток CIDER
    for n in cap_nodes:
        row = s_pos[(n, "v_node")]
        c_inv = np.linalg.inv(node_cap[n])
        for cur, sign in currents_into[n]:
            a[row, cur] += sign * c_inv
        if n in following:
            b_mat[row, u_pos[(n, "i_abs")]] -= c_inv
        c_mat[y_pos[(n, "v_node")], row] = np.eye(3)
    for n in forming:
        for cur, sign in currents_into[n]:
            c_mat[y_pos[(n, "i_node")], cur] += sign * np.eye(3)

    # Матрица запасённой энергии W = ½·xᵀ·E·x в порядке состояний
    energy = np.zeros((ns, ns))
    energy[te_row, te_row] = np.eye(3) * l_te
    for br, m in lines:
        row = s_pos[(f"{br.from_node}-{br.to_node}", "i_line")]
        energy[row, row] = m.L
    for n in cap_nodes:
        row = s_pos[(n, "v_node")]
        energy[row, row] = node_cap[n]

    logger.debug(f"Модель сети: {len(topology.nodes)} узлов, {len(lines)} линий, {ns} состояний")
    return LtpModel(
        name="grid",
        f1=f1,
        A=PeriodicMatrix.constant(a),
        B=PeriodicMatrix.constant(b_mat),
        C=PeriodicMatrix.constant(c_mat),
        D=PeriodicMatrix.zeros(ny, nu),
        states=tuple(states),
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        parameters={"thevenin": thevenin, "topology": topology, "forming": forming, "following": following,
                    "energy": energy},
    )


def _positions(signals: list[Signal]) -> dict[tuple[str, str], slice]:
    out: dict[tuple[str, str], slice] = {}
    for i, s in enumerate(signals):
        if s.frame == Frame.ABC and s.coordinate == "a":
            out[(s.subsystem, s.group)] = slice(i, i + 3)
    return out


def stored_energy(grid: LtpModel, x: np.ndarray) -> np.ndarray:
    """Энергия индуктивностей и ёмкостей сети, Дж; x - состояния сети (или их строки во времени)."""
    e = grid.parameters["energy"]
    x = np.atleast_2d(x)
    return 0.5 * np.einsum("ti,ij,tj->t", x, e, x)


def grid_hss(grid: LtpModel, idx: HarmonicIndexSet, idx_dqz: HarmonicIndexSet | None = None) -> HssModel:
    return lift(grid, idx, idx_dqz, Provenance.OPEN_LOOP_GRID)
