# app/services/scenarios.py
"""Встроенные сценарии: параметры ресурсов, эквивалента сети и тестовой системы из пяти узлов."""
from __future__ import annotations

import copy
import logging
import math

from app.exceptions import ScenarioValidationError
from app.schemas import ScenarioConfig

logger = logging.getLogger(__name__)


# ————————————————————————————————————————————————
# Ступени: (имя, тип фильтра, L или C, R или G, K_fb, T_fb, K_ft)
def _stages(rows: list[tuple]) -> list[dict]:
    return [
        {
            "name": name,
            "filter": {"kind": kind, "L_or_C": lc, "R_or_G": rg},
            "controller": {"K_fb": k_fb, "T_fb": t_fb, "K_ft": k_ft},
        }
        for name, kind, lc, rg, k_fb, t_fb, k_ft in rows
    ]


FORMING_STAGES = _stages([
    ("alpha", "inductor", 0.49e-3, 1.53e-3, 4.0, 8e-4, 1.0),
    ("phi", "capacitor", 60.2e-6, 0.0, 1.5, 1e-3, 0.0),
])

FOLLOWING_AC_STAGES = _stages([
    ("alpha", "inductor", 325e-6, 1.02e-3, 5.0, 5e-4, 1.0),
    ("phi", "capacitor", 90.3e-6, 0.0, 1.0, 8e-4, 0.0),
    ("gamma", "inductor", 325e-6, 1.02e-3, 1.0, 1e-3, 1.0),
])

FOLLOWING_DC_STAGES = _stages([
    ("delta", "dc_link_capacitor", 310e-6, 0.0, 10.0, 1e-2, 0.0),
    ("alpha", "inductor", 325e-6, 1.02e-3, 2.5, 5e-4, 1.0),
    ("phi", "capacitor", 90.3e-6, 0.0, 0.8, 1e-3, 0.0),
    ("gamma", "inductor", 325e-6, 1.02e-3, 0.5, 5e-3, 1.0),
])

PQ_SETPOINT = {"P_sigma": -50e3, "Q_sigma": -16.4e3}

# Гармоники ЭДС эквивалента: (порядок, доля основной, фаза)
TE_HARMONICS = [
    {"h": 5, "magnitude": 0.06, "phase": math.pi / 8},
    {"h": 7, "magnitude": 0.05, "phase": math.pi / 12},
    {"h": 11, "magnitude": 0.035, "phase": math.pi / 16},
    {"h": 13, "magnitude": 0.03, "phase": math.pi / 8},
    {"h": 17, "magnitude": 0.02, "phase": math.pi / 12},
    {"h": 19, "magnitude": 0.015, "phase": math.pi / 16},
    {"h": 23, "magnitude": 0.015, "phase": math.pi / 16},
]

# V_n²/S_sc даёт 198 мОм; модуль сопротивления эквивалента задан явно
RESOURCE_THEVENIN = {"V_n": 230.0, "S_sc": 267e3, "R_over_X": 6.207, "Z_sc_mag": 0.195, "harmonics": TE_HARMONICS}
SYSTEM_THEVENIN = {"V_n": 230.0, "S_sc": 3.85e6, "R_over_X": 0.271, "harmonics": TE_HARMONICS}

LINE_SEGMENT = {
    "length": 30.0,
    "R_pos": 0.162,
    "R_zero": 0.529,
    "L_pos": 0.262e-3,
    "L_zero": 1.185e-3,
    "C_pos": 637e-9,
    "C_zero": 388e-9,
}


def _forming(cid: str = "forming", node: str | None = None) -> dict:
    return {
        "id": cid,
        "kind": "grid_forming",
        "node": node,
        "stages": copy.deepcopy(FORMING_STAGES),
        "setpoint": {"V_sigma": 230.0, "f_sigma": 50.0},
        "rated_power": 40e3,
    }


def _following_ac(cid: str = "following_ac", node: str | None = None, k_alpha: float | None = None) -> dict:
    stages = copy.deepcopy(FOLLOWING_AC_STAGES)
    if k_alpha is not None:
        stages[0]["controller"]["K_fb"] = k_alpha
    return {
        "id": cid,
        "kind": "grid_following_ac",
        "node": node,
        "stages": stages,
        "setpoint": dict(PQ_SETPOINT),
        "rated_power": 60e3,
    }


def _following_dc(cid: str = "following_dc") -> dict:
    return {
        "id": cid,
        "kind": "grid_following_dc",
        "stages": copy.deepcopy(FOLLOWING_DC_STAGES),
        "setpoint": {**PQ_SETPOINT, "V_delta_ref": 900.0},
        "rated_power": 60e3,
    }


def _five_node_system(analysis: dict, h_max: int = 25) -> dict:
    nodes = ["N01", "N02", "N03", "N04", "N05"]
    return {
        "system": {"f1": 50.0, "h_max": h_max},
        "thevenin": copy.deepcopy(SYSTEM_THEVENIN),
        "topology": {
            "nodes": nodes,
            "branches": [
                {"from_node": a, "to_node": b, "segment": dict(LINE_SEGMENT)} for a, b in zip(nodes, nodes[1:])
            ],
            "thevenin_node": "N01",
        },
        # Коэффициент K_fb,α ресурса в N04 увеличен до 16 для лучшего демпфирования
        "ciders": [_following_ac("flw_N04", "N04", k_alpha=16.0), _following_ac("flw_N05", "N05")],
        "analysis": analysis,
    }


# ————————————————————————————————————————————————
_CATALOGUE: dict[str, tuple[str, dict]] = {
    "forming_classify_h1": (
        "Формирующий ресурс (40 кВА) при h_max=1: классы CDI/CDV/DI и последовательности собственных векторов",
        {
            "system": {"f1": 50.0, "h_max": 1},
            "thevenin": copy.deepcopy(RESOURCE_THEVENIN),
            "ciders": [_forming()],
            "analysis": {"kind": "classify", "cider": "forming"},
        },
    ),
    "forming_truncation": (
        "Формирующий ресурс: d(h_max) относительно LTI-аналога",
        {
            "system": {"f1": 50.0, "h_max": 25},
            "thevenin": copy.deepcopy(RESOURCE_THEVENIN),
            "ciders": [_forming()],
            "analysis": {"kind": "truncation_study", "cider": "forming"},
        },
    ),
    "flw_ac_truncation": (
        "Следящий ресурс без звена постоянного тока: d(h_max) относительно LTI-аналога",
        {
            "system": {"f1": 50.0, "h_max": 25},
            "thevenin": copy.deepcopy(RESOURCE_THEVENIN),
            "ciders": [_following_ac()],
            "analysis": {"kind": "truncation_study", "cider": "following_ac"},
        },
    ),
    "flw_ac_sensitivity_K70": (
        "Следящий ресурс: траектории собственных значений при увеличении K_fb,α на 1 % начального значения, 70 шагов",
        {
            "system": {"f1": 50.0, "h_max": 1},
            "thevenin": copy.deepcopy(RESOURCE_THEVENIN),
            "ciders": [_following_ac()],
            "analysis": {
                "kind": "sensitivity",
                "cider": "following_ac",
                "parameter": "alpha.K_fb",
                "relative_step": 0.01,
                "steps": 70,
                "direction": 1,
                "schedule": "initial",
            },
        },
    ),
    "flw_dc_truncation": (
        "Следящий ресурс со звеном постоянного тока при гармониках эквивалента: d(h_max), h_max = 1..25",
        {
            "system": {"f1": 50.0, "h_max": 25},
            "thevenin": copy.deepcopy(RESOURCE_THEVENIN),
            "ciders": [_following_dc()],
            "analysis": {"kind": "truncation_study", "cider": "following_dc", "with_harmonics": True},
        },
    ),
    "cigre5_hpf": (
        "Тестовая система из пяти узлов: гармонический расчёт потокораспределения",
        _five_node_system({"kind": "hpf", "mode": "with_harmonics"}),
    ),
    "cigre5_system_hsa": (
        "Тестовая система: собственные значения сети, замкнутой системы и LTI-аналога, с гармониками и без",
        _five_node_system({"kind": "system_hsa"}),
    ),
    "cigre5_instability": (
        "Тестовая система: уменьшение K_fb,α ресурса в N05 на 1 % предыдущего значения, сравнение LTP и LTI",
        _five_node_system({
            "kind": "sensitivity",
            "cider": "flw_N05",
            "parameter": "alpha.K_fb",
            "relative_step": 0.01,
            "steps": 18,
            "direction": -1,
            "schedule": "previous",
            "level": "system",
            "compare_lti": True,
        }),
    ),
    "cigre5_tds_validate": (
        "Тестовая система: проверка неустойчивости моделированием во времени, с гармониками и без",
        _five_node_system({"kind": "tds_validate", "cider": "flw_N05"}),
    ),
}


def list_scenarios() -> list[dict]:
    return [
        {"name": name, "description": description, "analysis": doc["analysis"]["kind"]}
        for name, (description, doc) in _CATALOGUE.items()
    ]


def scenario_document(name: str) -> dict:
    """Копия исходного документа сценария (для наложения --set)."""
    if name not in _CATALOGUE:
        raise ScenarioValidationError(f"Неизвестный сценарий: {name}. Доступны: {', '.join(_CATALOGUE)}")
    description, doc = _CATALOGUE[name]
    return {"name": name, "description": description, **copy.deepcopy(doc)}


def load_scenario(name: str) -> ScenarioConfig:
    return ScenarioConfig.model_validate(scenario_document(name))
