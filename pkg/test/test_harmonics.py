import math

import numpy as np
import pytest

from app.core.harmonics import (
    HarmonicIndexSet,
    HarmonicSpectrum,
    Sequence,
    ToeplitzOperator,
    classify_dq_pair,
    inverse_park_fourier,
    lift_periodic,
    park_fourier,
    park_operator,
    sequence_map_abc_to_dqz,
    sequence_map_dqz_to_abc,
    shift_operator,
    spectrum_product,
    symmetric_components,
    toeplitz_from_spectrum,
)
from app.core.periodic import PeriodicMatrix
from app.exceptions import AmbiguousSequenceError, IndexSetMismatchError, SequenceRangeError
from helpers import random_real_spectrum

pytestmark = pytest.mark.unit

ALPHA = np.exp(2j * np.pi / 3)


def test_index_set_layout():
    idx = HarmonicIndexSet(h_max=3, f1=50.0)
    assert idx.size == 7
    assert list(idx.orders) == [-3, -2, -1, 0, 1, 2, 3]
    assert idx.position(0) == 3
    assert idx.omega == pytest.approx(100 * math.pi)
    with pytest.raises(SequenceRangeError):
        idx.position(4)


def test_spectrum_rejects_wrong_length(idx1):
    with pytest.raises(IndexSetMismatchError):
        HarmonicSpectrum(idx1, np.zeros((1, 5)))


def test_pure_sine_spectrum():
    idx = HarmonicIndexSet(h_max=3, f1=50.0)
    n = 64
    t = np.arange(n) / (n * idx.f1)
    x = HarmonicSpectrum.from_samples(idx, np.sin(2 * np.pi * idx.f1 * t))
    assert x.coefficient(1) == pytest.approx(-0.5j, abs=1e-12)
    assert x.coefficient(-1) == pytest.approx(0.5j, abs=1e-12)
    for h in (-3, -2, 0, 2, 3):
        assert abs(x.coefficient(h)) < 1e-12


def test_samples_round_trip_preserves_real_signal(rng):
    idx = HarmonicIndexSet(h_max=4, f1=50.0)
    x = random_real_spectrum(rng, idx, channels=2)
    samples = x.to_samples(32)
    assert np.max(np.abs(samples.imag)) < 1e-12
    assert np.allclose(HarmonicSpectrum.from_samples(idx, samples.real).coefficients, x.coefficients, atol=1e-12)


def test_toeplitz_product_matches_sampled_oracle(rng):
    for _ in range(1000):
        idx = HarmonicIndexSet(h_max=int(rng.integers(0, 7)), f1=50.0)
        x = random_real_spectrum(rng, idx)
        y = random_real_spectrum(rng, idx)
        n = 64
        oracle = HarmonicSpectrum.from_samples(idx, (x.to_samples(n) * y.to_samples(n)).real)
        product = spectrum_product(x, y)
        assert np.max(np.abs(product.coefficients - oracle.coefficients)) < 1e-10


def test_toeplitz_operator_composition(rng):
    idx = HarmonicIndexSet(h_max=2, f1=50.0)
    a = toeplitz_from_spectrum(random_real_spectrum(rng, idx))
    b = toeplitz_from_spectrum(random_real_spectrum(rng, idx))
    y = random_real_spectrum(rng, idx)
    assert np.allclose((a @ b).apply(y).coefficients, a.apply(b.apply(y)).coefficients)


def test_toeplitz_operator_rejects_other_index_set(rng, idx1):
    op = ToeplitzOperator(idx1, 1, np.eye(3))
    other = random_real_spectrum(rng, HarmonicIndexSet(h_max=2, f1=50.0))
    with pytest.raises(IndexSetMismatchError):
        op.apply(other)


def test_constant_matrix_lifts_to_kronecker_product():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    orders = np.arange(-2, 3)
    lifted = lift_periodic(m[None, :, :], [orders] * 2, [orders] * 2)
    assert np.allclose(lifted, np.kron(m, np.eye(5)))


def test_shift_operator_eigenvalues(idx1):
    n = shift_operator(idx1, 1)
    eig = np.sort_complex(np.linalg.eigvals(-n.matrix))
    assert np.allclose(eig, [-100j * np.pi, 0.0, 100j * np.pi])


def test_sequence_maps_shift_orders():
    assert sequence_map_abc_to_dqz(1, Sequence.P, h_max_abc=1) == 0
    assert sequence_map_abc_to_dqz(-1, Sequence.N, h_max_abc=1) == 0
    assert sequence_map_abc_to_dqz(1, Sequence.N, h_max_abc=1) == 2
    assert sequence_map_abc_to_dqz(0, Sequence.H, h_max_abc=1) == 0
    assert sequence_map_dqz_to_abc(0, Sequence.P_EQ, h_max_abc=1) == 1
    # Обратная последовательность на -(h_max+1) отсекается при переходе в ABC
    assert sequence_map_dqz_to_abc(-2, Sequence.N_EQ, h_max_abc=1) is None
    with pytest.raises(SequenceRangeError):
        sequence_map_abc_to_dqz(2, Sequence.P, h_max_abc=1)


def test_classify_dq_pair():
    assert classify_dq_pair(1.0, -1j) == Sequence.P_EQ
    assert classify_dq_pair(2.0 + 1j, (2.0 + 1j) * 1j) == Sequence.N_EQ
    with pytest.raises(AmbiguousSequenceError) as err:
        classify_dq_pair(1.0, 1.0)
    assert err.value.phase == pytest.approx(0.0)


def test_symmetric_components():
    positive = symmetric_components(1.0, ALPHA**2, ALPHA)
    assert positive[Sequence.P] == pytest.approx(1.0)
    assert abs(positive[Sequence.N]) < 1e-12
    assert abs(positive[Sequence.H]) < 1e-12
    homopolar = symmetric_components(1.0, 1.0, 1.0)
    assert homopolar[Sequence.H] == pytest.approx(1.0)


def test_park_of_balanced_cosines_is_constant():
    omega = 100 * np.pi
    park = PeriodicMatrix(park_fourier())
    inverse = PeriodicMatrix(inverse_park_fourier())
    phi = 2 * np.pi * np.arange(3) / 3
    for t in np.linspace(0.0, 0.02, 7):
        abc = np.cos(omega * t - phi)
        assert np.allclose(park.evaluate(t, omega) @ abc, [1.0, 0.0])
        assert np.allclose(inverse.evaluate(t, omega) @ [1.0, 0.0], abc)


def test_park_operator_maps_positive_sequence_to_dc():
    idx = HarmonicIndexSet(h_max=1, f1=50.0)
    idx_dqz = idx.with_h_max(2)
    phi = 2 * np.pi * np.arange(3) / 3
    coeffs = np.zeros((3, 3), dtype=complex)
    coeffs[:, idx.position(1)] = 0.5 * np.exp(-1j * phi)
    coeffs[:, idx.position(-1)] = 0.5 * np.exp(1j * phi)
    dq = (park_operator(idx, idx_dqz) @ coeffs.reshape(-1)).reshape(2, -1)
    expected = np.zeros((2, 5), dtype=complex)
    expected[0, 2] = 1.0
    assert np.allclose(dq, expected)
