# app/services/assignment.py
"""
Задача о назначениях (венгерский алгоритм с потенциалами) и выбор
лексикографически наименьшего из оптимальных назначений.
"""
from __future__ import annotations

import logging
from collections import deque

import numpy as np

logger = logging.getLogger(__name__)


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Минимизация для квадратной матрицы. Возвращает назначение
    assignment[i] = j и двойственные потенциалы u (строки), v (столбцы):
    u_i + v_j <= c_ij, с равенством на назначенных парах.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape != (n, n) or n == 0:
        raise ValueError(f"Матрица стоимостей должна быть непустой и квадратной, получено: {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Матрица стоимостей содержит нечисловые значения")

    # Индексация с 1, нулевой столбец фиктивный
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)    # p[j] - строка, назначенная столбцу j
    way = np.zeros(n + 1, dtype=int)  # предыдущий столбец на увеличивающем пути

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = np.empty(n + 1)
            cur[0] = np.inf
            cur[1:] = cost[i0 - 1] - u[i0] - v[1:]
            better = ~used & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(used, np.inf, minv)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    assignment = np.empty(n, dtype=int)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment, u[1:], v[1:]


def pad_to_square(cost: np.ndarray, pad_value: float | None = None) -> np.ndarray:
    """Дополнение прямоугольной матрицы до квадратной константой больше любой стоимости."""
    cost = np.asarray(cost, dtype=float)
    r, c = cost.shape
    if pad_value is None:
        pad_value = 2.0 * float(np.max(np.abs(cost), initial=0.0)) + 1.0
    n = max(r, c)
    out = np.full((n, n), pad_value)
    out[:r, :c] = cost
    return out


# ————————————————————————————————————————————————
def _tight_tolerance(cost: np.ndarray) -> float:
    return 1e-12 * max(1.0, float(np.max(np.abs(cost))))


def lexicographic_optimum(
    cost: np.ndarray,
    assignment: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    tol: float | None = None,
) -> np.ndarray:
    """
    Среди оптимальных назначений (они используют только жёсткие рёбра,
    c_ij - u_i - v_j <= tol) выбирает лексикографически наименьшее:
    строки по порядку пробуют меньшие столбцы, перестраивая назначение
    вдоль чередующегося пути.
    """
    cost = np.asarray(cost, dtype=float)
    n = cost.shape[0]
    tol = _tight_tolerance(cost) if tol is None else tol
    tight = (cost - u[:, None] - v[None, :]) <= tol
    assignment = assignment.copy()
    owner = np.empty(n, dtype=int)
    owner[assignment] = np.arange(n)
    for i in range(n):
        for j in np.flatnonzero(tight[i, : assignment[i]]):
            if _rotate(i, int(j), assignment, owner, tight):
                break
    return assignment


def _rotate(i: int, j: int, assignment: np.ndarray, owner: np.ndarray, tight: np.ndarray) -> bool:
    k = owner[j]
    target = assignment[i]
    if k < i:
        return False
    prev_row = {}
    seen = {j}
    queue = deque([k])
    found = False
    while queue and not found:
        row = queue.popleft()
        for col in np.flatnonzero(tight[row]):
            col = int(col)
            if col in seen:
                continue
            if col == target:
                prev_row[col] = row
                found = True
                break
            r2 = owner[col]
            if r2 <= i:
                continue
            seen.add(col)
            prev_row[col] = row
            queue.append(r2)
    if not found:
        return False
    col = target
    while True:
        row = prev_row[col]
        old = assignment[row]
        assignment[row] = col
        owner[col] = row
        if row == k:
            break
        col = old
    assignment[i] = j
    owner[j] = i
    return True


def solve_assignment(cost: np.ndarray, lexicographic: bool = True) -> np.ndarray:
    """Оптимальное назначение для прямоугольной матрицы (строк не больше столбцов или наоборот)."""
    cost = np.asarray(cost, dtype=float)
    r, c = cost.shape
    square = pad_to_square(cost) if r != c else cost
    assignment, u, v = hungarian(square)
    if lexicographic:
        assignment = lexicographic_optimum(square, assignment, u, v)
    if r <= c:
        return assignment[:r]
    # Строк больше, чем столбцов: строки, попавшие на фиктивные столбцы, получают -1
    out = assignment.copy()
    out[out >= c] = -1
    return out


def assignment_cost(cost: np.ndarray, assignment: np.ndarray) -> float:
    rows = np.flatnonzero(assignment >= 0)
    return float(np.sum(np.asarray(cost)[rows, assignment[rows]]))
