import numpy as np

from app.core.harmonics import HarmonicIndexSet, HarmonicSpectrum


def random_real_spectrum(rng: np.random.Generator, idx: HarmonicIndexSet, channels: int = 1) -> HarmonicSpectrum:
    """Спектр вещественного сигнала: X_{-h} = conj(X_h)."""
    positive = rng.normal(size=(channels, idx.h_max)) + 1j * rng.normal(size=(channels, idx.h_max))
    dc = rng.normal(size=(channels, 1))
    coeffs = np.hstack([np.conj(positive[:, ::-1]), dc, positive])
    return HarmonicSpectrum(idx, coeffs)
