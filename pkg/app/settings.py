# app/settings.py
import math
import os

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    HSA_THREADS: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    HSA_LOG_LEVEL: str = "INFO"
    HSA_LOG_FILE: str | None = None

    # Опорный расчёт (разложение Тейлора обратной величины напряжения)
    HSA_TAYLOR_ORDER: int = Field(default=2, ge=0, le=6)
    HSA_HYPOTHESIS_CEILING: float = Field(default=0.5, gt=0.0, lt=1.0)

    # Классификация собственных значений
    HSA_DQ_TOLERANCE: float = Field(default=math.pi / 36, gt=0.0)
    HSA_EPS_MOVE: float = Field(default=1e-6, gt=0.0)
    HSA_PERTURBATION: float = Field(default=1e-2, gt=0.0)
    HSA_MAGNITUDE_FLOOR: float = Field(default=1e-8, gt=0.0)

    # Гармонический расчёт потокораспределения
    HSA_HPF_TOL: float = Field(default=1e-8, gt=0.0)
    HSA_HPF_MAX_ITER: int = Field(default=100, ge=1)
    HSA_HPF_DAMPING: float = Field(default=0.7, gt=0.0, le=1.0)

    # Pydantic v2
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
