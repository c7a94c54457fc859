"""Independent reference implementations shared by the test modules."""
import numpy as np


def random_psd(rng, C, rank=None):
    rank = C if rank is None else rank
    A = rng.standard_normal((C, rank)) + 1j * rng.standard_normal((C, rank))
    return A @ A.conj().T


def random_steering(rng, C):
    return rng.standard_normal(C) + 1j * rng.standard_normal(C)


def scm_double_loop(Y, mask):
    """Weighted outer-product accumulation with explicit loops over t, f, c, d."""
    T, F, C = Y.shape
    out = np.zeros((F, C, C), dtype=np.complex128)
    for f in range(F):
        total = 0.0
        for t in range(T):
            total += mask[t, f]
            for c in range(C):
                for d in range(C):
                    out[f, c, d] += mask[t, f] * Y[t, f, c] * np.conj(Y[t, f, d])
        out[f] /= total
    return out


def dense_projection_sdr(ref, est, taps):
    """Projected SDR via an explicit delayed-reference matrix and lstsq."""
    n = len(ref)
    A = np.zeros((n, taps))
    for k in range(taps):
        A[k:, k] = ref[:n - k]
    coef, *_ = np.linalg.lstsq(A, est, rcond=None)
    target = A @ coef
    return 10 * np.log10(np.sum(target ** 2) / np.sum((est - target) ** 2))
