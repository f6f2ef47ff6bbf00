# app/services/hsa_engine.py
"""
Анализ собственных значений HSS-моделей: решение, сопоставление наборов
(задача о назначениях), классификация CDI/CDV/DI, мера близости LTP и LTI
моделей и траектории собственных значений при изменении параметра.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.linalg

from app.core.harmonics import Sequence, classify_dq_pair, symmetric_components
from app.core.statespace import HssModel, Signal
from app.exceptions import AmbiguousSequenceError, EigenSolverError
from app.schemas import ScheduleKind
from app.services.assignment import solve_assignment
from app.settings import settings

logger = logging.getLogger(__name__)


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class EigenSet:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = None
    states: tuple[Signal, ...] = ()
    state_rows: np.ndarray | None = None
    state_orders: np.ndarray | None = None
    norm: float = 1.0
    omega: float | None = None

    def __len__(self) -> int:
        return self.eigenvalues.size

    @property
    def damping(self) -> np.ndarray:
        mag = np.abs(self.eigenvalues)
        with np.errstate(invalid="ignore", divide="ignore"):
            zeta = np.where(mag > 0, -self.eigenvalues.real / mag, 1.0)
        return zeta

    @classmethod
    def of(cls, values) -> "EigenSet":
        if isinstance(values, EigenSet):
            return values
        return cls(np.asarray(values, dtype=complex))


def _values(x) -> np.ndarray:
    return x.eigenvalues if isinstance(x, EigenSet) else np.asarray(x, dtype=complex)


def canonical_order(values: np.ndarray) -> np.ndarray:
    return np.lexsort((values.imag, values.real))


def eigensolve(model: HssModel | np.ndarray, vectors: bool = True) -> EigenSet:
    """Полное плотное разложение, собственные значения упорядочены по (Re, Im)."""
    a = model.A_tilde if isinstance(model, HssModel) else np.asarray(model, dtype=complex)
    norm = float(np.linalg.norm(a, np.inf)) if a.size else 0.0
    if not np.all(np.isfinite(a)):
        raise EigenSolverError(f"Матрица размера {a.shape} содержит {int(np.sum(~np.isfinite(a)))} нечисловых элементов")
    try:
        if vectors:
            w, v = scipy.linalg.eig(a)
        else:
            w, v = scipy.linalg.eigvals(a), None
    except (np.linalg.LinAlgError, ValueError) as e:
        raise EigenSolverError(f"Разложение матрицы {a.shape} (‖A‖∞={norm:.3e}) не сошлось: {e}") from e
    order = canonical_order(w)
    w = w[order]
    if v is not None:
        v = v[:, order]
        residual = np.linalg.norm(a @ v - v * w[None, :], axis=0) / np.maximum(np.linalg.norm(v, axis=0), 1e-300)
        worst = float(np.max(residual, initial=0.0))
        if worst > 1e-8 * max(norm, 1.0):
            raise EigenSolverError(f"Невязка собственной пары {worst:.3e} превышает 1e-8·‖A‖∞ = {1e-8 * norm:.3e}")
    if isinstance(model, HssModel):
        return EigenSet(w, v, model.states, model.state_rows, model.state_orders, norm, model.index_set.omega)
    return EigenSet(w, v, norm=norm)


# ————————————————————————————————————————————————
def lap_match(reference, candidate) -> np.ndarray:
    """Перестановка perm: candidate[perm[i]] сопоставлено reference[i], минимум Σ|Δλ|."""
    ref, cand = _values(reference), _values(candidate)
    if ref.size != cand.size:
        raise ValueError(f"Наборы разной мощности: {ref.size} и {cand.size}")
    if ref.size == 0:
        return np.zeros(0, dtype=int)
    return solve_assignment(np.abs(np.subtract.outer(ref, cand)))


def _l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = np.subtract.outer(a, b)
    return np.abs(diff.real) + np.abs(diff.imag)


@dataclass(frozen=True)
class ClosestSubset:
    matched: np.ndarray     # λ_LTP, сопоставленные λ_LTI по порядку
    indices: np.ndarray     # номера в наборе LTP
    distances: np.ndarray
    margin: float           # запас: насколько второй кандидат дальше назначенного


def closest_subset(lti, ltp) -> ClosestSubset:
    a, b = _values(lti), _values(ltp)
    if b.size < a.size:
        raise ValueError(f"В наборе LTP ({b.size}) меньше значений, чем в LTI ({a.size})")
    cost = _l1(a, b)
    indices = solve_assignment(cost)
    assigned = cost[np.arange(a.size), indices]
    if b.size > 1:
        second = np.partition(cost, 1, axis=1)[:, 1]
        first = np.min(cost, axis=1)
        alternative = np.where(np.isclose(assigned, first), second, first)
        margin = float(np.min(alternative - assigned)) if a.size else float("inf")
    else:
        margin = float("inf")
    return ClosestSubset(b[indices], indices, assigned, margin)


def similarity_metric(lti, ltp) -> float:
    """d = max_i |λ_i,LTI - λ_i,LTP| в 1-норме (|ΔRe| + |ΔIm|)."""
    subset = closest_subset(lti, ltp)
    return float(np.max(subset.distances, initial=0.0))


def truncation_study(
    lti: EigenSet,
    ltp_builder: Callable[[int], HssModel],
    h_values: list[int],
) -> list[dict]:
    """d(h_max) для каждого h_max; модели строятся и решаются параллельно."""

    def one(h: int) -> dict:
        es = eigensolve(ltp_builder(h), vectors=False)
        subset = closest_subset(lti, es)
        return {"h_max": h, "d": float(np.max(subset.distances, initial=0.0)), "margin": subset.margin,
                "n_ltp": len(es), "norm": es.norm}

    with ThreadPoolExecutor(max_workers=settings.HSA_THREADS) as pool:
        rows = list(pool.map(one, h_values))
    for r in rows:
        logger.info(f"h_max={r['h_max']}: d={r['d']:.3e}, запас сопоставления {r['margin']:.3e}")
    return rows


# ————————————————————————————————————————————————
class EigenLabel(str, Enum):
    CDI = "CDI"
    CDV = "CDV"
    DI = "DI"


@dataclass(frozen=True)
class EigenClass:
    label: EigenLabel
    control_displacement: float
    all_displacement: float
    ambiguous: bool = False


@dataclass
class Classification:
    eigenset: EigenSet
    classes: list[EigenClass]
    threshold: float
    census: dict[str, int] = field(default_factory=dict)
    groups: dict[str, list[list[int]]] = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label.value for c in self.classes])

    @property
    def ambiguous(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.ambiguous]


def real_part_groups(values: np.ndarray, indices: np.ndarray, tol: float) -> list[list[int]]:
    """Группы значений с одинаковой (в пределах tol) вещественной частью."""
    if indices.size == 0:
        return []
    order = indices[np.argsort(values[indices].real, kind="stable")]
    groups = [[int(order[0])]]
    for k in order[1:]:
        if values[k].real - values[groups[-1][-1]].real > tol:
            groups.append([])
        groups[-1].append(int(k))
    return groups


def balanced_norm(a: np.ndarray) -> float:
    """‖D⁻¹ÃD‖∞ после диагональной балансировки: не зависит от масштаба состояний (СИ или о.е.)."""
    if a.size == 0:
        return 0.0
    balanced, _ = scipy.linalg.matrix_balance(a, permute=False)
    return float(np.linalg.norm(balanced, np.inf))


def _displacement(nominal: EigenSet, perturbed: EigenSet) -> np.ndarray:
    perm = lap_match(nominal, perturbed)
    return np.abs(perturbed.eigenvalues[perm] - nominal.eigenvalues)


def classify(
    builder: Callable[[dict[str, float]], HssModel],
    control_params: dict[str, float],
    all_params: dict[str, float],
    perturbation: float | None = None,
    eps_move: float | None = None,
) -> Classification:
    """
    builder(overrides) строит HSS-модель с заменёнными параметрами.
    Смещение при изменении параметров управления - CDV, только при
    изменении всех параметров - CDI, иначе DI.
    """
    delta = settings.HSA_PERTURBATION if perturbation is None else perturbation
    eps = settings.HSA_EPS_MOVE if eps_move is None else eps_move
    model = builder({})
    nominal = eigensolve(model)
    control = {k: v * (1.0 + delta) for k, v in control_params.items()}
    everything = {k: v * (1.0 + delta) for k, v in all_params.items()}
    with ThreadPoolExecutor(max_workers=min(2, settings.HSA_THREADS)) as pool:
        perturbed = list(pool.map(lambda p: eigensolve(builder(p), vectors=False), [control, everything]))
    d_control = _displacement(nominal, perturbed[0])
    d_all = _displacement(nominal, perturbed[1])
    threshold = eps * balanced_norm(model.A_tilde)

    classes = []
    for dc, da in zip(d_control, d_all):
        if dc > threshold:
            label = EigenLabel.CDV
        elif da > threshold:
            label = EigenLabel.CDI
        else:
            label = EigenLabel.DI
        ambiguous = bool(threshold <= dc <= 2 * threshold or threshold <= da <= 2 * threshold)
        classes.append(EigenClass(label, float(dc), float(da), ambiguous))
    result = Classification(nominal, classes, threshold)
    labels = result.labels
    tol = 1e-6 * max(1.0, float(np.max(np.abs(nominal.eigenvalues), initial=0.0)))
    for label, key in ((EigenLabel.CDV, "CDV_sets"), (EigenLabel.CDI, "CDI_sets"), (EigenLabel.DI, "DI_pairs")):
        groups = real_part_groups(nominal.eigenvalues, np.flatnonzero(labels == label.value), tol)
        result.groups[label.value] = groups
        result.census[key] = len(groups)
    if result.ambiguous:
        logger.warning(f"Неоднозначная классификация для {len(result.ambiguous)} собственных значений")
    logger.info(f"Классификация: {result.census}")
    return result


# ————————————————————————————————————————————————
@dataclass(frozen=True)
class SequenceEntry:
    subsystem: str
    group: str
    order: int
    label: str           # P, N, H, P', N', DC или ambiguous
    magnitude: float
    ambiguous: bool = False


def _state_groups(es: EigenSet) -> dict[tuple[str, str, int], dict[str, int]]:
    groups: dict[tuple[str, str, int], dict[str, int]] = defaultdict(dict)
    for row, (sig, h) in enumerate(zip(es.state_rows, es.state_orders)):
        s = es.states[sig]
        groups[(s.subsystem, s.group, int(h))][s.coordinate] = row
    return groups


def eigenvector_sequence_report(
    es: EigenSet,
    magnitude_floor: float | None = None,
    indices: list[int] | None = None,
) -> dict[int, list[SequenceEntry]]:
    """
    Для каждого собственного вектора (нормированного на максимум модуля):
    тройки ABC раскладываются на P/N/H, пары DQ классифицируются как P'/N'.
    Элементы ниже порога не выводятся.
    """
    if es.eigenvectors is None or es.state_rows is None:
        raise ValueError("Нужны собственные векторы и разметка состояний")
    floor = settings.HSA_MAGNITUDE_FLOOR if magnitude_floor is None else magnitude_floor
    groups = _state_groups(es)
    indices = range(len(es)) if indices is None else indices
    report: dict[int, list[SequenceEntry]] = {}
    for k in indices:
        vec = es.eigenvectors[:, k]
        vec = vec / max(float(np.max(np.abs(vec))), 1e-300)
        entries = []
        for (subsystem, group, h), coords in groups.items():
            values = {c: vec[r] for c, r in coords.items()}
            magnitude = float(max(abs(x) for x in values.values()))
            if magnitude < floor:
                continue
            if set(values) == {"a", "b", "c"}:
                comps = symmetric_components(values["a"], values["b"], values["c"])
                label = max(comps, key=lambda s: abs(comps[s])).value
                entries.append(SequenceEntry(subsystem, group, h, label, magnitude))
            elif set(values) == {"d", "q"}:
                try:
                    label = classify_dq_pair(values["d"], values["q"]).value
                    entries.append(SequenceEntry(subsystem, group, h, label, magnitude))
                except AmbiguousSequenceError:
                    entries.append(SequenceEntry(subsystem, group, h, "ambiguous", magnitude, True))
            else:
                entries.append(SequenceEntry(subsystem, group, h, "DC" if h == 0 else "H", magnitude))
        report[k] = entries
    return report


# ————————————————————————————————————————————————
@dataclass
class SensitivityTrace:
    parameter: str
    values: list[float]
    loci: np.ndarray                       # (шаги, n): значения, упорядоченные как на шаге 0
    permutations: list[np.ndarray]         # перестановки к порядку шага 0
    omega: float | None = None
    norm: float = 1.0
    error: str | None = None

    @property
    def steps(self) -> int:
        return len(self.values)


def sweep_values(nominal: float, relative_step: float, steps: int, direction: int = 1,
                 schedule: ScheduleKind | str = ScheduleKind.INITIAL) -> list[float]:
    schedule = ScheduleKind(schedule)
    k = np.arange(steps + 1)
    if schedule == ScheduleKind.INITIAL:
        return list(nominal * (1.0 + direction * relative_step * k))
    return list(nominal * (1.0 + direction * relative_step) ** k)


def sensitivity_sweep(
    builder: Callable[[float], HssModel],
    parameter: str,
    values: list[float],
) -> SensitivityTrace:
    """
    Шаги решаются параллельно, затем цепочка сопоставлений с предыдущим
    шагом применяется последовательно.
    """
    nominal_model = builder(values[0])
    first = eigensolve(nominal_model, vectors=False)
    omega = nominal_model.index_set.omega

    def one(value: float) -> np.ndarray:
        return eigensolve(builder(value), vectors=False).eigenvalues

    results: list[np.ndarray] = []
    error = None
    with ThreadPoolExecutor(max_workers=settings.HSA_THREADS) as pool:
        futures = [pool.submit(one, v) for v in values[1:]]
        for step, fut in enumerate(futures, start=1):
            try:
                results.append(fut.result())
            except Exception as e:
                error = f"Шаг {step} ({parameter}={values[step]:.6g}): {e}"
                logger.error(f"Развёртка прервана: {error}")
                for rest in futures[step:]:
                    rest.cancel()
                break

    loci = [first.eigenvalues]
    perms = [np.arange(len(first))]
    for step, ev in enumerate(results, start=1):
        perm = lap_match(loci[-1], ev)
        loci.append(ev[perm])
        perms.append(perm)
        logger.debug(f"{parameter}={values[step]:.6g}: max Re = {np.max(ev.real):.4e}")
    return SensitivityTrace(
        parameter=parameter,
        values=list(values[: len(loci)]),
        loci=np.vstack(loci),
        permutations=perms,
        omega=omega,
        norm=first.norm,
        error=error,
    )


def design_invariant_mask(trace: SensitivityTrace, tol: float | None = None) -> np.ndarray:
    """
    Артефакты усечения: |Re| ≈ 0, Im на сетке j·k·ω и положение не меняется
    на всей траектории.
    """
    scale = max(1.0, float(np.max(np.abs(trace.loci[0]), initial=0.0)))
    tol = settings.HSA_EPS_MOVE * scale if tol is None else tol
    loci = trace.loci
    flat = np.all(np.abs(loci.real) < tol, axis=0)
    still = np.max(np.abs(loci - loci[0]), axis=0) < tol
    if trace.omega:
        k = np.round(loci.imag / trace.omega)
        ladder = np.all(np.abs(loci.imag - k * trace.omega) < tol, axis=0)
    else:
        ladder = np.ones(loci.shape[1], dtype=bool)
    return flat & still & ladder


def stability_margin(trace: SensitivityTrace, exclude: np.ndarray | None = None) -> int | None:
    """Первый шаг, на котором max Re(λ) >= 0 без учёта артефактов DI."""
    exclude = design_invariant_mask(trace) if exclude is None else np.asarray(exclude, dtype=bool)
    keep = ~exclude
    if not np.any(keep):
        return None
    worst = np.max(trace.loci[:, keep].real, axis=1)
    crossing = np.flatnonzero(worst >= 0.0)
    return int(crossing[0]) if crossing.size else None


# ————————————————————————————————————————————————
def least_damped_group(values: np.ndarray, omega: float | None = None, tol: float | None = None) -> list[int]:
    """Группа с наибольшей вещественной частью среди устойчивых значений (артефакты с Re ≈ 0 исключены)."""
    scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
    tol = settings.HSA_EPS_MOVE * scale if tol is None else tol
    candidates = np.flatnonzero(values.real < -tol)
    groups = real_part_groups(values, candidates, tol)
    return groups[-1] if groups else []


def low_damping_indices(values: np.ndarray, threshold: float = 0.4, tol: float | None = None) -> np.ndarray:
    es = EigenSet(values)
    scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
    tol = settings.HSA_EPS_MOVE * scale if tol is None else tol
    return np.flatnonzero((es.damping < threshold) & (values.real < -tol))


def real_part_spread(values: np.ndarray) -> float:
    return float(np.ptp(values.real)) if values.size else 0.0


def dispersion(reference: EigenSet, distorted: EigenSet) -> tuple[float, float]:
    """Разброс Re в наименее демпфированной группе эталона и в сопоставленных ей значениях."""
    group = least_damped_group(reference.eigenvalues)
    if not group:
        return 0.0, 0.0
    perm = lap_match(reference, distorted)
    matched = distorted.eigenvalues[perm][group]
    return real_part_spread(reference.eigenvalues[group]), real_part_spread(matched)


@dataclass(frozen=True)
class ClusterMotion:
    columns: list[int]          # столбцы trace.loci
    start_damping: float        # минимальный коэффициент демпфирования на шаге 0
    final_damping: float
    shift: float                # среднее смещение Re от шага 0 до последнего шага
    monotone: bool              # Re не растёт ни на одном шаге

    @property
    def moving(self) -> bool:
        return self.shift < 0.0 and self.monotone


def cluster_motion(trace: SensitivityTrace, threshold: float = 0.4, tol: float | None = None) -> list[ClusterMotion]:
    """
    Группы слабо демпфированных значений шага 0 (по равной Re) и их движение
    вдоль траектории. Столбцы loci уже сопоставлены между шагами.
    """
    start, final = trace.loci[0], trace.loci[-1]
    scale = max(1.0, float(np.max(np.abs(start), initial=0.0)))
    tol = settings.HSA_EPS_MOVE * scale if tol is None else tol
    groups = real_part_groups(start, low_damping_indices(start, threshold, tol), tol)
    start_zeta, final_zeta = EigenSet(start).damping, EigenSet(final).damping
    motions = []
    for cols in groups:
        re = trace.loci[:, cols].real
        motions.append(ClusterMotion(
            columns=cols,
            start_damping=float(np.min(start_zeta[cols])),
            final_damping=float(np.min(final_zeta[cols])),
            shift=float(np.mean(re[-1] - re[0])),
            monotone=bool(np.all(np.diff(re, axis=0) <= tol)),
        ))
    for m in motions:
        logger.debug(f"Группа {m.columns}: ζ {m.start_damping:.3f} -> {m.final_damping:.3f}, ΔRe = {m.shift:.4e}")
    return motions
