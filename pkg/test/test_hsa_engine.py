import numpy as np
import pytest

from app.core.harmonics import HarmonicIndexSet
from app.core.periodic import PeriodicMatrix
from app.core.statespace import Frame, LtpModel, Signal, abc_signals, lift
from app.exceptions import EigenSolverError
from app.schemas import ScheduleKind
from app.services.grid_network import sequence_to_phase
from app.services.hsa_engine import (
    EigenSet,
    SensitivityTrace,
    classify,
    closest_subset,
    design_invariant_mask,
    dispersion,
    eigensolve,
    eigenvector_sequence_report,
    lap_match,
    least_damped_group,
    low_damping_indices,
    real_part_groups,
    sensitivity_sweep,
    similarity_metric,
    stability_margin,
    sweep_values,
    truncation_study,
)

pytestmark = pytest.mark.unit

OMEGA = 100 * np.pi


def _hss(a: np.ndarray, h_max: int = 0, states=None):
    n = a.shape[0]
    states = states or tuple(Signal("m", "x", str(i), Frame.ABC) for i in range(n))
    ltp = LtpModel(
        name="m",
        f1=50.0,
        A=PeriodicMatrix.constant(a),
        B=PeriodicMatrix.zeros(n, 1),
        C=PeriodicMatrix.zeros(1, n),
        D=PeriodicMatrix.zeros(1, 1),
        states=states,
        inputs=(Signal("m", "u", "0", Frame.ABC),),
        outputs=(Signal("m", "y", "0", Frame.ABC),),
    )
    return lift(ltp, HarmonicIndexSet(h_max=h_max, f1=50.0))


def test_eigensolve_orders_by_real_then_imaginary():
    es = eigensolve(np.diag([-1.0 + 2j, -3.0, -1.0 - 2j, 0.5]))
    assert np.allclose(es.eigenvalues, [-3.0, -1.0 - 2j, -1.0 + 2j, 0.5])
    assert es.eigenvectors.shape == (4, 4)
    assert es.norm == pytest.approx(3.0)


def test_eigensolve_companion_matrix():
    roots = np.array([-1.0, -2.0, -3.0 + 4j, -3.0 - 4j])
    poly = np.real(np.poly(roots))
    companion = np.zeros((4, 4))
    companion[0] = -poly[1:]
    companion[1:, :-1] = np.eye(3)
    es = eigensolve(companion, vectors=False)
    assert np.allclose(es.eigenvalues, roots[np.lexsort((roots.imag, roots.real))])
    assert es.eigenvectors is None


def test_eigensolve_rejects_non_finite_matrix():
    with pytest.raises(EigenSolverError):
        eigensolve(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_eigensolve_keeps_state_labels():
    hss = _hss(np.diag([-1.0, -2.0]), h_max=1)
    es = eigensolve(hss)
    assert len(es) == 6
    assert es.omega == pytest.approx(OMEGA)
    assert es.state_rows is not None and len(es.states) == 2


# ————————————————————————————————————————————————
def test_lap_match_recovers_permutation(rng):
    reference = np.array([1.0, 2j, -3.0, -3.0 + 0.5j])
    order = np.array([2, 0, 3, 1])
    candidate = reference[order] + 1e-3 * rng.normal(size=4)
    perm = lap_match(reference, candidate)
    assert np.allclose(candidate[perm], reference, atol=1e-2)
    with pytest.raises(ValueError):
        lap_match(reference, candidate[:3])


def test_closest_subset_and_similarity():
    lti = np.array([-1.0, -2.0])
    ltp = np.array([-2.001, 5.0, -0.999, 10j])
    subset = closest_subset(lti, ltp)
    assert list(subset.indices) == [2, 0]
    assert np.allclose(subset.distances, 1e-3)
    assert subset.margin > 0.9
    assert similarity_metric(lti, ltp) == pytest.approx(1e-3)
    assert similarity_metric(lti, lti) == 0.0
    with pytest.raises(ValueError):
        closest_subset(ltp, lti)


def test_truncation_study_of_time_invariant_model():
    a = np.array([[-1.0, 1.0], [0.0, -2.0]])
    lti = eigensolve(a, vectors=False)
    rows = truncation_study(lti, lambda h: _hss(a, h), [0, 1, 2])
    assert [r["h_max"] for r in rows] == [0, 1, 2]
    assert [r["n_ltp"] for r in rows] == [2, 6, 10]
    assert all(r["d"] < 1e-9 for r in rows)


# ————————————————————————————————————————————————
def test_classify_toy_model():
    def builder(overrides: dict):
        p = {"k": 2.0, "c": 3.0, **overrides}
        return _hss(np.diag([-p["k"], -p["c"], -1.0]))

    result = classify(builder, {"k": 2.0}, {"k": 2.0, "c": 3.0})
    assert list(result.labels) == ["CDI", "CDV", "DI"]
    assert result.census == {"CDV_sets": 1, "CDI_sets": 1, "DI_pairs": 1}
    assert result.ambiguous == []
    assert result.classes[1].control_displacement == pytest.approx(0.02)


def test_real_part_groups():
    values = np.array([-1 + 2j, -5.0, -1 - 2j, -3.0])
    groups = real_part_groups(values, np.arange(4), tol=1e-9)
    assert groups == [[1], [3], [0, 2]]
    assert real_part_groups(values, np.array([], dtype=int), tol=1e-9) == []


def test_homopolar_eigenvector_is_labelled():
    a = sequence_to_phase(-1.0, -5.0)
    hss = _hss(a, h_max=1, states=tuple(abc_signals("m", "x")))
    es = eigensolve(hss)
    k = int(np.argmin(np.abs(es.eigenvalues + 5.0)))
    report = eigenvector_sequence_report(es, indices=[k])
    entries = report[k]
    assert len(entries) == 1
    assert entries[0].label == "H"
    assert entries[0].order == 0
    assert entries[0].magnitude == pytest.approx(1.0)


def test_sequence_report_needs_vectors():
    with pytest.raises(ValueError):
        eigenvector_sequence_report(EigenSet.of([-1.0]))


# ————————————————————————————————————————————————
def test_sweep_values():
    assert sweep_values(1.0, 0.01, 2) == pytest.approx([1.0, 1.01, 1.02])
    assert sweep_values(5.0, 0.01, 2, direction=-1) == pytest.approx([5.0, 4.95, 4.9])
    assert sweep_values(1.0, 0.1, 2, schedule=ScheduleKind.PREVIOUS) == pytest.approx([1.0, 1.1, 1.21])
    assert sweep_values(1.0, 0.1, 2, -1, "previous") == pytest.approx([1.0, 0.9, 0.81])


def test_sensitivity_sweep_tracks_crossing():
    def builder(value: float):
        return _hss(np.array([[-value, 1.0], [0.0, -2.0]]))

    trace = sensitivity_sweep(builder, "k", [1.0, 0.5, -0.25, -0.5])
    assert trace.steps == 4
    assert trace.error is None
    # Порядок шага 0 сохраняется вдоль всей траектории
    assert np.allclose(trace.loci[:, 0], [-2.0] * 4)
    assert np.allclose(trace.loci[:, 1], [-1.0, -0.5, 0.25, 0.5])
    assert stability_margin(trace) == 2


def test_stability_margin_ignores_design_invariant_artifacts():
    loci = np.array([[0.0, -2.0, -1.0 + 1j * OMEGA], [0.0, -1.0, -1.0 + 1j * OMEGA], [0.0, 0.5, -1.0 + 1j * OMEGA]])
    trace = SensitivityTrace("k", [1.0, 2.0, 3.0], loci.astype(complex), [np.arange(3)] * 3, omega=OMEGA)
    assert list(design_invariant_mask(trace)) == [True, False, False]
    assert stability_margin(trace) == 2
    stable = SensitivityTrace("k", [1.0, 2.0], loci[:2].astype(complex), [np.arange(3)] * 2, omega=OMEGA)
    assert stability_margin(stable) is None


def test_damping_helpers():
    values = np.array([-1 + 2j, -1 - 2j, -3.0, -5 + 1j, 0.0, -0.1 + 10j])
    assert least_damped_group(values) == [5]
    assert sorted(least_damped_group(values[:5])) == [0, 1]
    assert list(low_damping_indices(values, threshold=0.4)) == [5]
    assert EigenSet.of([-3.0]).damping[0] == pytest.approx(1.0)


def test_dispersion():
    reference = EigenSet.of([-1 + 1j, -1 - 1j, -5.0])
    distorted = EigenSet.of([-1.1 + 1j, -0.9 - 1j, -5.0])
    ref_spread, spread = dispersion(reference, distorted)
    assert ref_spread == pytest.approx(0.0)
    assert spread == pytest.approx(0.2)
