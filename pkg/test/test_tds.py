import numpy as np
import pytest
from pydantic import ValidationError

from app.core.harmonics import HarmonicIndexSet
from app.exceptions import SettleError
from app.services.tds import (
    GainSchedule,
    TdsConfig,
    TdsEvent,
    TdsSystem,
    TimeSeries,
    is_settled,
    simulate,
    steady_state_spectrum,
)

pytestmark = pytest.mark.unit

F1 = 50.0


def _series(signal, periods: int, n: int) -> TimeSeries:
    t = np.arange(periods * n) / (n * F1)
    values = np.column_stack([signal(t), 2.0 * signal(t)])
    return TimeSeries(t, ["x", "y"], values, {"xy": slice(0, 2)}, n, F1)


def _distorted(t):
    w = 2 * np.pi * F1 * t
    return 1.0 + 2.0 * np.cos(w) + 0.5 * np.sin(5 * w)


def test_config_step_and_samples():
    cfg = TdsConfig()
    assert cfg.samples_per_period == 4000
    assert cfg.dt == pytest.approx(5e-6)
    coarse = TdsConfig(step=3e-5)
    assert coarse.samples_per_period == 667
    assert coarse.dt == pytest.approx(1.0 / (F1 * 667))


def test_config_rejects_coarse_step():
    with pytest.raises(ValidationError):
        TdsConfig(step=5e-5, h_max=25)
    assert TdsConfig(step=5e-5, h_max=19).step == 5e-5
    with pytest.raises(ValidationError):
        TdsConfig(fft_window=4)
    with pytest.raises(ValidationError):
        TdsConfig(solver="euler")


def test_gain_schedule_validation():
    schedule = GainSchedule.staircase("flw_N05", "alpha.K_fb", [5.0, 4.95, 4.9], dwell=0.2)
    assert schedule.changes == [(0.2, 4.95), (0.4, 4.9)]
    with pytest.raises(ValidationError):
        GainSchedule(cider="c", parameter="p", changes=[(0.2, 1.0), (0.1, 2.0)])
    with pytest.raises(ValidationError):
        GainSchedule(cider="c", parameter="p", changes=[(0.0, 1.0)])


def test_is_settled():
    n = 100
    steady = _series(_distorted, 4, n).values
    assert is_settled(steady, n, 1e-9)
    growing = steady * np.linspace(1.0, 2.0, steady.shape[0])[:, None]
    assert not is_settled(growing, n, 1e-3)
    assert not is_settled(steady[: n + 10], n, 1e-3)


# ————————————————————————————————————————————————
def test_spectrum_of_known_signal():
    cfg = TdsConfig(h_max=5, step=1e-4)
    series = _series(_distorted, 7, cfg.samples_per_period)
    spectra = steady_state_spectrum(series, cfg)
    x = spectra["xy"]
    assert x.index_set.h_max == 5
    assert x.coefficient(0, 0) == pytest.approx(1.0)
    assert x.coefficient(1, 0) == pytest.approx(1.0)
    assert x.coefficient(-1, 0) == pytest.approx(1.0)
    assert x.coefficient(5, 0) == pytest.approx(-0.25j)
    assert x.coefficient(5, 1) == pytest.approx(-0.5j)
    assert abs(x.coefficient(3, 0)) < 1e-12
    assert x.is_conjugate_symmetric()


def test_spectrum_requires_settled_record():
    cfg = TdsConfig(h_max=5, step=1e-4)
    n = cfg.samples_per_period
    with pytest.raises(SettleError):
        steady_state_spectrum(_series(_distorted, 5, n), cfg)
    series = _series(_distorted, 7, n)
    series.values[-n:] *= 1.1
    with pytest.raises(SettleError):
        steady_state_spectrum(series, cfg)


def test_time_series_helpers():
    series = _series(_distorted, 2, 100)
    series.events.append(TdsEvent(0.03, "divergence", "x", step=3))
    assert series.diverged
    assert series.divergence.step == 3
    head = series.head(100)
    assert head.values.shape == (100, 2)
    assert not head.diverged
    assert series.group("xy").shape == (200, 2)


# ————————————————————————————————————————————————
def test_grid_energy_does_not_grow_without_sources(system_config):
    idx = HarmonicIndexSet(h_max=1, f1=F1)
    system = TdsSystem.from_hpf(system_config.topology, system_config.thevenin, [], idx,
                                with_harmonics=False, with_sources=False)
    cfg = TdsConfig(h_max=1, step=1e-6, duration=0.004, record_energy=True)
    series = simulate(system, cfg)
    assert not series.diverged
    energy = series.energy
    assert energy.shape == series.t.shape
    assert energy[0] > 0.0
    assert np.all(np.diff(energy) <= 1e-6 * energy[:-1])
    assert energy[-1] < energy[0]
