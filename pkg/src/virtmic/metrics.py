"""Signal-to-distortion ratios."""
from __future__ import annotations

import numpy as np
from scipy import linalg, signal as sps

REPORT_CAP_DB = 99.9
RIDGE = 1e-12


def _as_vector(x) -> np.ndarray:
    samples = getattr(x, "samples", x)
    return np.asarray(samples, dtype=np.float64).reshape(-1)


def sdr_plain(reference, estimate) -> float:
    """10 log10(||ref||^2 / ||ref - est||^2); +inf for an exact match."""
    ref, est = _as_vector(reference), _as_vector(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch {ref.shape} vs {est.shape}")
    energy = np.dot(ref, ref)
    if energy <= 0:
        raise ValueError("reference has zero energy")
    diff = ref - est
    err = np.dot(diff, diff)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(energy / err))


def report_value(sdr: float) -> float:
    return min(sdr, REPORT_CAP_DB)


def delayed_gram(ref: np.ndarray, taps: int) -> np.ndarray:
    """Gram matrix of ``ref`` delayed by 0..taps-1 and truncated to len(ref).

    G[i, j] = sum_{n >= max(i, j)} ref[n - i] ref[n - j]: the full
    autocorrelation at lag |i - j| minus the products that fall off the end.
    """
    n = len(ref)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(ref, size)
    acf = np.fft.irfft(spec * spec.conj(), size)[:taps]
    gram = linalg.toeplitz(acf)
    tail = np.zeros(taps)
    k = min(taps, n)
    tail[:k] = ref[::-1][:k]
    outer = np.outer(tail, tail)
    # cumulative sums of the tail products along each diagonal
    loss = np.zeros((taps, taps))
    for i in range(1, taps):
        loss[i, i:] = loss[i - 1, i - 1:-1] + outer[i - 1, i - 1:-1]
    loss = np.triu(loss) + np.triu(loss, 1).T
    return gram - loss


def projection_filter(reference, estimate, taps: int = 512) -> np.ndarray:
    """Least-squares FIR g minimising ||estimate - g * reference||."""
    ref, est = _as_vector(reference), _as_vector(estimate)
    gram = delayed_gram(ref, taps)
    n = len(ref)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = np.fft.irfft(np.fft.rfft(est, size) * np.fft.rfft(ref, size).conj(), size)[:taps]
    try:
        factor = linalg.cho_factor(gram, check_finite=False)
    except linalg.LinAlgError:
        gram = gram + RIDGE * np.trace(gram) * np.eye(taps)
        factor = linalg.cho_factor(gram, check_finite=False)
    return linalg.cho_solve(factor, xc, check_finite=False)


def sdr_projected(reference, estimate, filter_taps: int = 512) -> float:
    """SDR after allowing a time-invariant FIR distortion of the reference.

    The target component is the projection of ``estimate`` onto the span of
    the reference delayed by 0..filter_taps-1 samples; everything else counts
    as distortion.
    """
    ref, est = _as_vector(reference), _as_vector(estimate)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch {ref.shape} vs {est.shape}")
    if filter_taps < 1:
        raise ValueError("filter_taps must be >= 1")
    if np.dot(ref, ref) <= 0:
        raise ValueError("reference has zero energy")
    taps = min(filter_taps, len(ref))
    g = projection_filter(ref, est, taps)
    target = sps.oaconvolve(ref, g)[:len(ref)]
    err = np.sum((est - target) ** 2)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(np.sum(target ** 2) / err))
