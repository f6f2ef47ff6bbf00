from typing import Annotated, List, Literal, Optional, Union
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from enum import Enum
import logging
import math

# Настройка логирования
logger = logging.getLogger(__name__)


class StrictModel(BaseModel):
    # Неизвестные ключи в документах сценариев отклоняются
    model_config = ConfigDict(extra="forbid")


# ————————————————————————————————————————————————
class StageKind(str, Enum):
    INDUCTOR = "inductor"
    CAPACITOR = "capacitor"
    DC_LINK_CAPACITOR = "dc_link_capacitor"


class StageName(str, Enum):
    ALPHA = "alpha"
    PHI = "phi"
    GAMMA = "gamma"
    DELTA = "delta"


class FilterStage(StrictModel):
    kind: StageKind
    L_or_C: float = Field(gt=0.0)   # Гн или Ф
    R_or_G: float = Field(ge=0.0)   # Ом или См


class ControllerStage(StrictModel):
    K_fb: float = Field(gt=0.0)
    T_fb: float = Field(gt=0.0)
    K_ft: float = Field(default=0.0, ge=0.0)


class Stage(StrictModel):
    name: StageName
    filter: FilterStage
    controller: ControllerStage


FILTER_FIELDS = ("L_or_C", "R_or_G")
CONTROL_FIELDS = ("K_fb", "T_fb", "K_ft")

_EXPECTED_STAGES = {
    "grid_forming": [(StageName.ALPHA, StageKind.INDUCTOR), (StageName.PHI, StageKind.CAPACITOR)],
    "grid_following_ac": [
        (StageName.ALPHA, StageKind.INDUCTOR),
        (StageName.PHI, StageKind.CAPACITOR),
        (StageName.GAMMA, StageKind.INDUCTOR),
    ],
    "grid_following_dc": [
        (StageName.DELTA, StageKind.DC_LINK_CAPACITOR),
        (StageName.ALPHA, StageKind.INDUCTOR),
        (StageName.PHI, StageKind.CAPACITOR),
        (StageName.GAMMA, StageKind.INDUCTOR),
    ],
}


class CiderKind(str, Enum):
    GRID_FORMING = "grid_forming"
    GRID_FOLLOWING_AC = "grid_following_ac"
    GRID_FOLLOWING_DC = "grid_following_dc"

    @property
    def is_following(self) -> bool:
        return self != CiderKind.GRID_FORMING


# ————————————————————————————————————————————————
class Setpoint(StrictModel):
    V_sigma: Optional[float] = None      # В, действующее значение
    f_sigma: Optional[float] = None      # Гц
    P_sigma: Optional[float] = None      # Вт, отрицательное значение - выдача в сеть
    Q_sigma: Optional[float] = None      # вар
    V_delta_ref: Optional[float] = None  # В, напряжение звена постоянного тока

    @field_validator("P_sigma", "Q_sigma")
    @classmethod
    def validate_finite(cls, v):
        if v is not None and not math.isfinite(v):
            raise ValueError(f"Уставка мощности должна быть конечной, получено: {v}")
        return v


class CiderSpec(StrictModel):
    id: str
    kind: CiderKind
    node: Optional[str] = None
    stages: List[Stage]
    setpoint: Setpoint
    rated_power: float = Field(gt=0.0)
    nominal_voltage: float = Field(default=230.0, gt=0.0)
    taylor_order: Optional[int] = Field(default=None, ge=0, le=6)

    @model_validator(mode="after")
    def validate_stages(self):
        expected = _EXPECTED_STAGES[self.kind.value]
        actual = [(s.name, s.filter.kind) for s in self.stages]
        if actual != expected:
            names = ", ".join(f"{n.value}:{k.value}" for n, k in expected)
            raise ValueError(f"CIDER {self.id} ({self.kind.value}): ожидались ступени [{names}]")
        sp = self.setpoint
        if self.kind == CiderKind.GRID_FORMING:
            if sp.V_sigma is None or sp.f_sigma is None or sp.V_sigma <= 0 or sp.f_sigma <= 0:
                raise ValueError(f"CIDER {self.id}: для формирующего режима нужны положительные V_sigma и f_sigma")
        else:
            if sp.P_sigma is None or sp.Q_sigma is None:
                raise ValueError(f"CIDER {self.id}: для следящего режима нужны P_sigma и Q_sigma")
        if self.kind == CiderKind.GRID_FOLLOWING_DC and (sp.V_delta_ref is None or sp.V_delta_ref <= 0):
            raise ValueError(f"CIDER {self.id}: нужна положительная уставка V_delta_ref")
        return self

    def stage(self, name: str) -> Stage:
        for s in self.stages:
            if s.name.value == name:
                return s
        raise KeyError(f"У CIDER {self.id} нет ступени {name}")

    # Параметры адресуются как "<ступень>.<поле>", например "alpha.K_fb"
    def get_parameter(self, path: str) -> float:
        stage_name, field = _split_parameter(path)
        s = self.stage(stage_name)
        return getattr(s.controller if field in CONTROL_FIELDS else s.filter, field)

    def with_parameters(self, values: dict[str, float]) -> "CiderSpec":
        data = self.model_dump()
        for path, value in values.items():
            stage_name, field = _split_parameter(path)
            idx = next(i for i, s in enumerate(self.stages) if s.name.value == stage_name)
            part = "controller" if field in CONTROL_FIELDS else "filter"
            data["stages"][idx][part][field] = value
        return CiderSpec.model_validate(data)

    def control_parameters(self) -> list[str]:
        return [f"{s.name.value}.{f}" for s in self.stages for f in CONTROL_FIELDS]

    def all_parameters(self) -> list[str]:
        return self.control_parameters() + [f"{s.name.value}.{f}" for s in self.stages for f in FILTER_FIELDS]


def _split_parameter(path: str) -> tuple[str, str]:
    try:
        stage_name, field = path.split(".")
    except ValueError:
        raise KeyError(f"Параметр должен иметь вид '<ступень>.<поле>', получено: {path}")
    if field not in CONTROL_FIELDS + FILTER_FIELDS:
        raise KeyError(f"Неизвестное поле параметра: {field}")
    return stage_name, field


# ————————————————————————————————————————————————
class HarmonicInjection(StrictModel):
    h: int = Field(ge=2)
    magnitude: float = Field(ge=0.0)   # доля основной гармоники
    phase: float = 0.0                 # рад


class TheveninSpec(StrictModel):
    V_n: float = Field(gt=0.0)
    S_sc: float = Field(gt=0.0)
    R_over_X: float = Field(gt=0.0)
    Z_sc_mag: Optional[float] = Field(default=None, gt=0.0)
    harmonics: List[HarmonicInjection] = Field(default_factory=list)

    @field_validator("harmonics")
    @classmethod
    def validate_unique_orders(cls, v):
        orders = [inj.h for inj in v]
        if len(orders) != len(set(orders)):
            raise ValueError(f"Повторяющиеся порядки гармоник: {orders}")
        return v


class LineSegment(StrictModel):
    length: float = Field(default=30.0, gt=0.0)
    R_pos: float = Field(gt=0.0)
    R_zero: float = Field(gt=0.0)
    L_pos: float = Field(gt=0.0)
    L_zero: float = Field(gt=0.0)
    C_pos: float = Field(gt=0.0)
    C_zero: float = Field(gt=0.0)


class Branch(StrictModel):
    from_node: str
    to_node: str
    segment: LineSegment

    @model_validator(mode="after")
    def validate_nodes(self):
        if self.from_node == self.to_node:
            raise ValueError(f"Ветвь замкнута на один узел: {self.from_node}")
        return self


class NetworkTopology(StrictModel):
    nodes: List[str]
    branches: List[Branch] = Field(default_factory=list)
    thevenin_node: str

    @model_validator(mode="after")
    def validate_references(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("Повторяющиеся имена узлов")
        known = set(self.nodes)
        if self.thevenin_node not in known:
            raise ValueError(f"Узел эквивалента Тевенена {self.thevenin_node} не объявлен")
        for b in self.branches:
            if b.from_node not in known or b.to_node not in known:
                raise ValueError(f"Ветвь {b.from_node}-{b.to_node} ссылается на неизвестный узел")
        return self


# ————————————————————————————————————————————————
class SystemBlock(StrictModel):
    f1: float = Field(default=50.0, gt=0.0)
    h_max: int = Field(default=1, ge=0)
    h_max_dqz: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def validate_truncation(self):
        if self.h_max_dqz is not None and self.h_max_dqz < self.h_max:
            raise ValueError("h_max_dqz не может быть меньше h_max")
        return self

    @property
    def dqz_order(self) -> int:
        return self.h_max + 1 if self.h_max_dqz is None else self.h_max_dqz


class ScheduleKind(str, Enum):
    INITIAL = "initial"
    PREVIOUS = "previous"


class ClassifyAnalysis(StrictModel):
    kind: Literal["classify"] = "classify"
    cider: str
    h_max: Optional[int] = Field(default=None, ge=0)
    perturbation: Optional[float] = Field(default=None, gt=0.0)
    eps_move: Optional[float] = Field(default=None, gt=0.0)


class TruncationStudyAnalysis(StrictModel):
    kind: Literal["truncation_study"] = "truncation_study"
    cider: str
    h_max_values: List[int] = Field(default_factory=lambda: list(range(1, 26)))
    with_harmonics: bool = True

    @field_validator("h_max_values")
    @classmethod
    def validate_orders(cls, v):
        if not v or any(h < 0 for h in v):
            raise ValueError("Нужен непустой список неотрицательных h_max")
        return sorted(set(v))


class SensitivityAnalysis(StrictModel):
    kind: Literal["sensitivity"] = "sensitivity"
    cider: str
    parameter: str
    relative_step: float = Field(default=0.01, gt=0.0)
    steps: int = Field(default=70, ge=0)
    direction: Literal[1, -1] = 1
    schedule: ScheduleKind = ScheduleKind.INITIAL
    level: Literal["resource", "system"] = "resource"
    h_max: Optional[int] = Field(default=None, ge=0)
    with_harmonics: bool = True
    compare_lti: bool = False


class SystemHsaAnalysis(StrictModel):
    kind: Literal["system_hsa"] = "system_hsa"
    modes: List[Literal["with_harmonics", "zero_distortion"]] = Field(
        default_factory=lambda: ["zero_distortion", "with_harmonics"]
    )
    damping_threshold: float = Field(default=0.4, gt=0.0, le=1.0)


class TdsValidateAnalysis(StrictModel):
    kind: Literal["tds_validate"] = "tds_validate"
    cider: str
    parameter: str = "alpha.K_fb"
    relative_step: float = Field(default=0.01, gt=0.0)
    steps: int = Field(default=18, ge=0)
    direction: Literal[1, -1] = -1
    schedule: ScheduleKind = ScheduleKind.PREVIOUS
    step: float = Field(default=5e-6, gt=0.0)
    dwell_periods: int = Field(default=10, ge=5)
    fft_window: int = Field(default=5, ge=5)


class HpfAnalysis(StrictModel):
    kind: Literal["hpf"] = "hpf"
    mode: Literal["with_harmonics", "zero_distortion"] = "with_harmonics"


AnalysisBlock = Annotated[
    Union[
        ClassifyAnalysis,
        TruncationStudyAnalysis,
        SensitivityAnalysis,
        SystemHsaAnalysis,
        TdsValidateAnalysis,
        HpfAnalysis,
    ],
    Field(discriminator="kind"),
]

_SYSTEM_ANALYSES = ("system_hsa", "tds_validate", "hpf")


class OutputBlock(StrictModel):
    directory: str = "results"
    formats: List[Literal["csv", "json", "svg"]] = Field(default_factory=lambda: ["csv", "json", "svg"])


class ScenarioConfig(StrictModel):
    name: str
    description: str = ""
    system: SystemBlock = Field(default_factory=SystemBlock)
    thevenin: TheveninSpec
    topology: Optional[NetworkTopology] = None
    ciders: List[CiderSpec] = Field(default_factory=list)
    analysis: AnalysisBlock
    output: OutputBlock = Field(default_factory=OutputBlock)

    @model_validator(mode="after")
    def validate_references(self):
        ids = [c.id for c in self.ciders]
        if len(ids) != len(set(ids)):
            raise ValueError(f"Повторяющиеся идентификаторы CIDER: {ids}")
        for c in self.ciders:
            if c.kind == CiderKind.GRID_FORMING and not math.isclose(c.setpoint.f_sigma, self.system.f1):
                raise ValueError(f"CIDER {c.id}: f_sigma={c.setpoint.f_sigma} не равна f1={self.system.f1}")
        target = getattr(self.analysis, "cider", None)
        if target is not None and target not in ids:
            raise ValueError(f"Анализ ссылается на неизвестный CIDER {target}")
        needs_topology = self.analysis.kind in _SYSTEM_ANALYSES or getattr(self.analysis, "level", None) == "system"
        if needs_topology:
            if self.topology is None:
                raise ValueError(f"Анализ {self.analysis.kind} требует блока topology")
            for c in self.ciders:
                if c.node not in self.topology.nodes:
                    raise ValueError(f"CIDER {c.id} подключён к неизвестному узлу {c.node}")
        logger.debug(f"Сценарий {self.name} прошёл проверку: {len(self.ciders)} CIDER, анализ {self.analysis.kind}")
        return self

    def cider(self, cider_id: str) -> CiderSpec:
        return next(c for c in self.ciders if c.id == cider_id)
