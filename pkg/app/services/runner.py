# app/services/runner.py
"""
Выполнение блока analysis сценария и запись результатов: eigenvalues.csv,
loci.csv, spectra.csv, report.json и, по желанию, loci.svg.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum
from app.core.statespace import HssModel
from app.exceptions import SettleError
from app.schemas import (
    CiderKind,
    CiderSpec,
    ClassifyAnalysis,
    HpfAnalysis,
    ScenarioConfig,
    SensitivityAnalysis,
    SystemHsaAnalysis,
    TdsValidateAnalysis,
    TruncationStudyAnalysis,
)
from app.services.cider_models import (
    OperatingPoint,
    OperatingPointSource,
    PerUnitBase,
    build_ltp_model,
    lift_to_hss,
)
from app.services.grid_network import build_grid_ltp, grid_hss, thevenin_emf_spectrum
from app.services.hsa_engine import (
    EigenSet,
    SensitivityTrace,
    classify,
    closest_subset,
    dispersion,
    eigensolve,
    eigenvector_sequence_report,
    cluster_motion,
    least_damped_group,
    low_damping_indices,
    sensitivity_sweep,
    stability_margin,
    sweep_values,
    truncation_study,
)
from app.services.system_assembly import (
    SystemOperatingPoint,
    harmonic_power_flow,
    lti_counterpart,
    resource_lti,
    system_closed_loop,
)
from app.services.tds import TdsConfig, TdsSystem, staircase_experiment, steady_state_spectrum
from app.settings import settings

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    scenario: str
    report: dict
    eigenvalues: list[dict] = field(default_factory=list)
    loci: list[dict] = field(default_factory=list)
    spectra: list[dict] = field(default_factory=list)
    timeseries: dict[str, pd.DataFrame] = field(default_factory=dict)
    traces: list[tuple[str, SensitivityTrace]] = field(default_factory=list)
    files: list[Path] = field(default_factory=list)


# ————————————————————————————————————————————————
def _index_set(cfg: ScenarioConfig, h_max: int | None = None) -> HarmonicIndexSet:
    return HarmonicIndexSet(h_max=cfg.system.h_max if h_max is None else h_max, f1=cfg.system.f1)


def _dqz_index_set(cfg: ScenarioConfig, idx: HarmonicIndexSet) -> HarmonicIndexSet:
    if cfg.system.h_max_dqz is not None and idx.h_max == cfg.system.h_max:
        return idx.with_h_max(cfg.system.h_max_dqz)
    return idx.with_h_max(idx.h_max + 1)


def resource_operating_point(
    cfg: ScenarioConfig,
    spec: CiderSpec,
    idx: HarmonicIndexSet,
    with_harmonics: bool = True,
) -> OperatingPoint | None:
    """Рабочая точка ресурса, подключённого к эквиваленту Тевенена: напряжение холостого хода эквивалента."""
    if spec.kind == CiderKind.GRID_FORMING:
        return None
    emf = thevenin_emf_spectrum(cfg.thevenin, idx, with_harmonics=with_harmonics)
    return OperatingPoint.from_abc(emf, PerUnitBase.from_spec(spec), OperatingPointSource.THEVENIN)


def _resource_builder(cfg: ScenarioConfig, spec: CiderSpec, op: OperatingPoint | None, idx: HarmonicIndexSet):
    def build(overrides: dict[str, float]) -> HssModel:
        s = spec.with_parameters(overrides) if overrides else spec
        ltp = build_ltp_model(s, op, cfg.system.f1, h_max=idx.h_max)
        return lift_to_hss(ltp, idx, _dqz_index_set(cfg, idx))

    return build


def _eigen_rows(name: str, sweep: int, es: EigenSet, labels=None, matched_from=None) -> list[dict]:
    damping = es.damping
    return [
        {
            "scenario": name,
            "sweep": sweep,
            "index": k,
            "re": float(lam.real),
            "im": float(lam.imag),
            "damping": float(damping[k]),
            "label": "" if labels is None else labels[k],
            "matched_from": k if matched_from is None else int(matched_from[k]),
        }
        for k, lam in enumerate(es.eigenvalues)
    ]


def _loci_rows(name: str, model: str, trace: SensitivityTrace) -> list[dict]:
    rows = []
    for step, (value, ev) in enumerate(zip(trace.values, trace.loci)):
        damping = EigenSet(ev).damping
        for k, lam in enumerate(ev):
            rows.append({
                "scenario": name,
                "model": model,
                "step": step,
                "value": float(value),
                "index": k,
                "re": float(lam.real),
                "im": float(lam.imag),
                "damping": float(damping[k]),
            })
    return rows


def _spectrum_rows(name: str, signal: str, spectrum: HarmonicSpectrum, source: str) -> list[dict]:
    rows = []
    for ch in range(spectrum.channel_count):
        for h in range(spectrum.index_set.h_max + 1):
            x = spectrum.coefficient(h, ch)
            rows.append({"scenario": name, "source": source, "signal": signal, "channel": ch,
                         "h": h, "re": x.real, "im": x.imag, "magnitude": abs(x)})
    return rows


def _complex_list(values) -> list[list[float]]:
    return [[float(v.real), float(v.imag)] for v in np.atleast_1d(values)]


# ————————————————————————————————————————————————
def _run_classify(cfg: ScenarioConfig, a: ClassifyAnalysis, result: RunResult) -> None:
    spec = cfg.cider(a.cider)
    idx = _index_set(cfg, a.h_max)
    op = resource_operating_point(cfg, spec, idx)
    builder = _resource_builder(cfg, spec, op, idx)
    control = {p: spec.get_parameter(p) for p in spec.control_parameters()}
    everything = {p: spec.get_parameter(p) for p in spec.all_parameters()}
    classification = classify(builder, control, everything, a.perturbation, a.eps_move)
    es = classification.eigenset
    sequences = eigenvector_sequence_report(es)
    result.eigenvalues += _eigen_rows(cfg.name, 0, es, list(classification.labels))
    result.report.update({
        "h_max": idx.h_max,
        "norm": es.norm,
        "threshold": classification.threshold,
        "census": classification.census,
        "groups": classification.groups,
        "ambiguous": classification.ambiguous,
        "sequences": {
            str(k): [
                {"subsystem": e.subsystem, "group": e.group, "h": e.order, "label": e.label, "magnitude": e.magnitude}
                for e in entries
            ]
            for k, entries in sequences.items()
        },
    })


def _run_truncation(cfg: ScenarioConfig, a: TruncationStudyAnalysis, result: RunResult) -> None:
    spec = cfg.cider(a.cider)
    f1 = cfg.system.f1
    idx_full = _index_set(cfg, max(a.h_max_values))
    op = resource_operating_point(cfg, spec, idx_full, a.with_harmonics)
    op_lti = None
    if spec.kind.is_following:
        op_lti = OperatingPoint.fundamental(spec.nominal_voltage, idx_full.with_h_max(1), PerUnitBase.from_spec(spec))
    lti = eigensolve(resource_lti(spec, op_lti, f1), vectors=False)

    def ltp_builder(h: int) -> HssModel:
        idx = idx_full.with_h_max(h)
        return lift_to_hss(build_ltp_model(spec, op, f1, h_max=h), idx, idx.with_h_max(h + 1))

    rows = truncation_study(lti, ltp_builder, a.h_max_values)
    result.eigenvalues += _eigen_rows(cfg.name, 0, lti, ["LTI"] * len(lti))
    result.report.update({
        "cider": spec.id,
        "kind": spec.kind.value,
        "with_harmonics": a.with_harmonics,
        "lti_eigenvalues": _complex_list(lti.eigenvalues),
        "truncation": rows,
    })


def _system_builder(cfg: ScenarioConfig, cider_id: str, parameter: str, idx: HarmonicIndexSet, mode: str):
    """Замкнутая система с изменённым параметром; HPF пересчитывается для каждого значения."""

    def ciders_with(value: float) -> list[CiderSpec]:
        return [c.with_parameters({parameter: value}) if c.id == cider_id else c for c in cfg.ciders]

    def ltp(value: float) -> HssModel:
        ciders = ciders_with(value)
        op = harmonic_power_flow(cfg.topology, cfg.thevenin, ciders, idx, mode=mode)
        return system_closed_loop(cfg.topology, cfg.thevenin, ciders, op, idx)

    def lti(value: float) -> HssModel:
        ciders = ciders_with(value)
        op = harmonic_power_flow(cfg.topology, cfg.thevenin, ciders, idx.with_h_max(1), mode="zero_distortion")
        return lti_counterpart(cfg.topology, cfg.thevenin, ciders, op)

    return ltp, lti


def _trace_summary(cfg: ScenarioConfig, model: str, trace: SensitivityTrace, result: RunResult) -> dict:
    result.loci += _loci_rows(cfg.name, model, trace)
    result.traces.append((model, trace))
    crossing = stability_margin(trace)
    final = trace.loci[-1]
    group = least_damped_group(final)
    return {
        "steps_completed": trace.steps,
        "crossing_step": crossing,
        "crossing_value": None if crossing is None else trace.values[crossing],
        "max_real_part": [float(np.max(ev.real)) for ev in trace.loci],
        "final_least_damped": _complex_list(final[group]),
        "error": trace.error,
        "clusters": [
            {"columns": m.columns, "start_damping": m.start_damping, "final_damping": m.final_damping,
             "shift": m.shift, "monotone": m.monotone}
            for m in cluster_motion(trace)
        ],
    }


def _run_sensitivity(cfg: ScenarioConfig, a: SensitivityAnalysis, result: RunResult) -> None:
    spec = cfg.cider(a.cider)
    nominal = spec.get_parameter(a.parameter)
    values = sweep_values(nominal, a.relative_step, a.steps, a.direction, a.schedule)
    idx = _index_set(cfg, a.h_max)
    if a.level == "system":
        mode = "with_harmonics" if a.with_harmonics else "zero_distortion"
        ltp_builder, lti_builder = _system_builder(cfg, spec.id, a.parameter, idx, mode)
    else:
        op = resource_operating_point(cfg, spec, idx, a.with_harmonics)
        base = _resource_builder(cfg, spec, op, idx)

        def ltp_builder(value: float) -> HssModel:
            return base({a.parameter: value})

        def lti_builder(value: float) -> HssModel:
            s = spec.with_parameters({a.parameter: value})
            op1 = None if op is None else op.truncated(1)
            return resource_lti(s, op1, cfg.system.f1)

    traces = [("ltp", sensitivity_sweep(ltp_builder, a.parameter, values))]
    if a.compare_lti:
        traces.append(("lti", sensitivity_sweep(lti_builder, a.parameter, values)))
    summary = {model: _trace_summary(cfg, model, trace, result) for model, trace in traces}
    result.report.update({
        "cider": spec.id,
        "parameter": a.parameter,
        "level": a.level,
        "values": values,
        "traces": summary,
    })


def _run_system_hsa(cfg: ScenarioConfig, a: SystemHsaAnalysis, result: RunResult) -> None:
    idx = _index_set(cfg)
    grid = eigensolve(grid_hss(build_grid_ltp(cfg.topology, cfg.thevenin, cfg.ciders, idx.f1), idx), vectors=False)
    result.eigenvalues += _eigen_rows(cfg.name, 0, grid, ["grid"] * len(grid))
    report: dict = {"open_loop_grid": {"max_real_part": float(np.max(grid.eigenvalues.real)),
                                       "max_frequency_hz": float(np.max(np.abs(grid.eigenvalues.imag)) / (2 * np.pi))}}
    closed: dict[str, EigenSet] = {}
    lti = None
    for sweep, mode in enumerate(a.modes, start=1):
        op = harmonic_power_flow(cfg.topology, cfg.thevenin, cfg.ciders, idx, mode=mode)
        es = eigensolve(system_closed_loop(cfg.topology, cfg.thevenin, cfg.ciders, op, idx), vectors=False)
        closed[mode] = es
        result.eigenvalues += _eigen_rows(cfg.name, sweep, es, [mode] * len(es))
        low = low_damping_indices(es.eigenvalues, a.damping_threshold)
        report[mode] = {
            "size": len(es),
            "max_real_part": float(np.max(es.eigenvalues.real)),
            "low_damping": _complex_list(es.eigenvalues[low]),
            "hpf_iterations": op.report.iterations,
        }
        if lti is None:
            lti = eigensolve(lti_counterpart(cfg.topology, cfg.thevenin, cfg.ciders, op), vectors=False)
    result.eigenvalues += _eigen_rows(cfg.name, len(a.modes) + 1, lti, ["lti"] * len(lti))
    report["lti"] = {"size": len(lti), "max_real_part": float(np.max(lti.eigenvalues.real))}
    if "zero_distortion" in closed:
        subset = closest_subset(lti, closed["zero_distortion"])
        scale = max(1.0, float(np.max(np.abs(lti.eigenvalues.real))))
        re_ltp = closed["zero_distortion"].eigenvalues.real
        mismatch = np.min(np.abs(re_ltp[:, None] - lti.eigenvalues.real[None, :]), axis=1) / scale
        report["zero_distortion"]["lti_distance"] = float(np.max(subset.distances))
        report["zero_distortion"]["real_part_mismatch"] = float(np.max(mismatch))
    if {"zero_distortion", "with_harmonics"} <= set(closed):
        reference, distorted = dispersion(closed["zero_distortion"], closed["with_harmonics"])
        report["dispersion"] = {"zero_distortion": reference, "with_harmonics": distorted}
    result.report.update(report)


def _run_hpf(cfg: ScenarioConfig, a: HpfAnalysis, result: RunResult) -> SystemOperatingPoint:
    idx = _index_set(cfg)
    op = harmonic_power_flow(cfg.topology, cfg.thevenin, cfg.ciders, idx, mode=a.mode)
    for node, v in op.node_voltages.items():
        result.spectra += _spectrum_rows(cfg.name, f"{node}.v_node", v * (1.0 / op.v_base), "hpf")
    result.report.update({
        "mode": a.mode,
        "converged": op.report.converged,
        "iterations": op.report.iterations,
        "damped": op.report.damped,
        "residuals": op.report.residuals,
        "fundamental_pu": {n: op.fundamental_pu(n) for n in op.node_voltages},
    })
    return op


def _run_tds(cfg: ScenarioConfig, a: TdsValidateAnalysis, result: RunResult) -> None:
    spec = cfg.cider(a.cider)
    values = sweep_values(spec.get_parameter(a.parameter), a.relative_step, a.steps, a.direction, a.schedule)
    idx = _index_set(cfg)
    tds_cfg = TdsConfig(f1=cfg.system.f1, h_max=idx.h_max, step=a.step, fft_window=a.fft_window,
                        duration=len(values) * a.dwell_periods / cfg.system.f1)

    def one(with_harmonics: bool):
        system = TdsSystem.from_hpf(cfg.topology, cfg.thevenin, cfg.ciders, idx, with_harmonics)
        return system, staircase_experiment(system, spec.id, a.parameter, values, tds_cfg, a.dwell_periods)

    with ThreadPoolExecutor(max_workers=min(2, settings.HSA_THREADS)) as pool:
        runs = list(pool.map(one, [True, False]))
    summary = {}
    for system, run in runs:
        mode = "with_harmonics" if system.with_harmonics else "zero_distortion"
        series = run.series
        frame = pd.DataFrame(series.values, columns=series.labels)
        frame.insert(0, "t", series.t)
        result.timeseries[mode] = frame
        nominal = series.head(a.dwell_periods * series.samples_per_period)
        spectra_error = None
        try:
            spectra = steady_state_spectrum(nominal, tds_cfg)
            op = system.operating_point
            deviation = 0.0
            for name, spectrum in spectra.items():
                result.spectra += _spectrum_rows(cfg.name, name, spectrum * (1.0 / op.v_base), f"tds_{mode}")
                node = name.split(".")[0]
                if node in op.node_voltages:
                    hpf = op.node_voltages[node].resized(spectrum.index_set)
                    deviation = max(deviation, float(np.max(np.abs(hpf.coefficients - spectrum.coefficients))) / op.v_base)
        except SettleError as e:
            spectra_error = str(e)
            deviation = None
            logger.warning(f"TDS ({mode}): спектр установившегося режима не получен: {e}")
        summary[mode] = {
            "instability_step": run.instability_step,
            "instability_value": None if run.instability_step is None else values[run.instability_step],
            "hpf_deviation_pu": deviation,
            "spectrum_error": spectra_error,
            "events": [{"time": e.time, "kind": e.kind, "step": e.step, "message": e.message} for e in series.events],
        }

    # Те же значения параметра в HSS-модели с гармониками и в LTI-аналоге
    ltp_builder, lti_builder = _system_builder(cfg, spec.id, a.parameter, idx, "with_harmonics")
    margins = {model: _trace_summary(cfg, model, sensitivity_sweep(builder, a.parameter, values), result)
               for model, builder in (("ltp", ltp_builder), ("lti", lti_builder))}
    ltp_crossing = margins["ltp"]["crossing_step"]
    lti_crossing = margins["lti"]["crossing_step"]
    tds_step = summary["with_harmonics"]["instability_step"]
    free_step = summary["zero_distortion"]["instability_step"]
    comparison = {
        "ltp_crossing": ltp_crossing,
        "lti_crossing": lti_crossing,
        "tds_within_one_step": tds_step is not None and ltp_crossing is not None and abs(tds_step - ltp_crossing) <= 1,
        "ltp_before_lti": ltp_crossing is not None and (lti_crossing is None or ltp_crossing < lti_crossing),
        "zero_distortion_later": tds_step is not None and (free_step is None or free_step > tds_step),
    }
    logger.info(f"tds_validate {cfg.name}: LTP {ltp_crossing}, LTI {lti_crossing}, TDS {tds_step} / {free_step}")
    result.report.update({"cider": spec.id, "parameter": a.parameter, "values": values, "tds": summary,
                          "traces": margins, "comparison": comparison})


_HANDLERS = {
    "classify": _run_classify,
    "truncation_study": _run_truncation,
    "sensitivity": _run_sensitivity,
    "system_hsa": _run_system_hsa,
    "hpf": _run_hpf,
    "tds_validate": _run_tds,
}


# ————————————————————————————————————————————————
def execute(cfg: ScenarioConfig) -> RunResult:
    logger.info(f"Сценарий {cfg.name}: анализ {cfg.analysis.kind}, h_max={cfg.system.h_max}")
    result = RunResult(cfg.name, {"scenario": cfg.name, "analysis": cfg.analysis.kind})
    _HANDLERS[cfg.analysis.kind](cfg, cfg.analysis, result)
    return result


def write_outputs(result: RunResult, directory: Path, formats: list[str]) -> list[Path]:
    """Файлы пишутся после завершения всех расчётов."""
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    if "csv" in formats:
        tables = {"eigenvalues.csv": result.eigenvalues, "loci.csv": result.loci, "spectra.csv": result.spectra}
        for name, rows in tables.items():
            if rows:
                path = directory / name
                pd.DataFrame(rows).to_csv(path, index=False)
                files.append(path)
        for mode, frame in result.timeseries.items():
            path = directory / f"timeseries_{mode}.csv"
            frame.to_csv(path, index=False)
            files.append(path)
    if "json" in formats:
        path = directory / "report.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(_jsonable(result.report), f, indent=2, ensure_ascii=False)
        files.append(path)
    if "svg" in formats and result.traces:
        path = directory / "loci.svg"
        plot_loci(result.traces, path, title=result.scenario)
        files.append(path)
    for p in files:
        logger.info(f"Записан файл {p}")
    result.files = files
    return files


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def plot_loci(traces: list[tuple[str, SensitivityTrace]], path: Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(traces), figsize=(7 * len(traces), 6), squeeze=False)
    for ax, (model, trace) in zip(axes[0], traces):
        colours = plt.cm.viridis(np.linspace(0.0, 1.0, trace.steps))
        for step, ev in enumerate(trace.loci):
            ax.scatter(ev.real, ev.imag, s=6, color=colours[step])
        ax.axvline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel("Re(λ), 1/с")
        ax.set_ylabel("Im(λ), рад/с")
        ax.set_title(f"{title}: {model}, {trace.parameter}")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
