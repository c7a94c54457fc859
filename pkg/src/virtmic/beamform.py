"""Mask-based MVDR beamforming with virtual-channel diagonal loading."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .signal import MultichannelWaveform, Spectrogram, StftConfig, overlap_add, stft

MASK_DELTA = 1e-10
COND_LIMIT = 1e12
CONDITION_DELTA = 1e-10
DEFAULT_MASK_FLOOR = 1e-6


class DegenerateBin(ArithmeticError):
    def __init__(self, bin_index, message):
        super().__init__(f"bin {bin_index}: {message}")
        self.bin_index = bin_index


@dataclass
class MaskPair:
    speech: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.speech = np.asarray(self.speech, dtype=np.float64)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if self.speech.shape != self.noise.shape:
            raise ValueError(f"mask shapes differ: {self.speech.shape} vs {self.noise.shape}")
        for name, m in (("speech", self.speech), ("noise", self.noise)):
            if np.any(m < 0) or np.any(m > 1) or not np.all(np.isfinite(m)):
                raise ValueError(f"{name} mask values must lie in [0, 1]")

    def floored(self, floor: float = DEFAULT_MASK_FLOOR) -> "MaskPair":
        return MaskPair(np.maximum(self.speech, floor), np.maximum(self.noise, floor))


@dataclass
class LoadingSpec:
    virtual_channel_indices: Sequence[int] = ()
    epsilon: float = 0.05

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        self.virtual_channel_indices = tuple(int(i) for i in self.virtual_channel_indices)


@dataclass
class BfWeights:
    weights: np.ndarray  # (F, C)
    reference: int
    degenerate_bins: list = field(default_factory=list)

    @property
    def reference_vector(self) -> np.ndarray:
        u = np.zeros(self.weights.shape[1])
        u[self.reference] = 1.0
        return u


def oracle_irm_masks(clean: Spectrogram, noise: Spectrogram, channel: int = 0) -> MaskPair:
    """Ideal ratio masks |S|^2 / (|S|^2 + |V|^2 + delta) on one channel."""
    if clean.coefficients.shape != noise.coefficients.shape:
        raise ValueError("clean and noise spectrograms differ in shape")
    s = np.abs(clean.coefficients[:, :, channel]) ** 2
    v = np.abs(noise.coefficients[:, :, channel]) ** 2
    speech = s / (s + v + MASK_DELTA)
    return MaskPair(speech, 1.0 - speech)


def estimate_scm(spec: Spectrogram, mask: np.ndarray) -> np.ndarray:
    """Mask-weighted spatial covariance per bin, shape (F, C, C)."""
    Y = spec.coefficients
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != Y.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {Y.shape[:2]}")
    total = mask.sum(axis=0)
    bad = np.flatnonzero(total <= 0)
    if bad.size:
        raise DegenerateBin(int(bad[0]), "mask sums to zero; floor the mask")
    scm = np.einsum("tf,tfc,tfd->fcd", mask, Y, Y.conj())
    scm /= total[:, None, None]
    # exact Hermitian symmetry
    return 0.5 * (scm + np.conj(np.transpose(scm, (0, 2, 1))))


def apply_vm_loading(scm_noise: np.ndarray, loading: LoadingSpec) -> np.ndarray:
    """Add ``epsilon`` to the diagonal entries of the virtual channels."""
    out = scm_noise.copy()
    if loading.epsilon == 0 or not loading.virtual_channel_indices:
        return out
    C = out.shape[-1]
    for c in loading.virtual_channel_indices:
        if not 0 <= c < C:
            raise IndexError(f"virtual channel index {c} outside 0..{C - 1}")
        out[:, c, c] += loading.epsilon
    return out


def _solve_bin(phi_s, phi_n, f):
    C = phi_n.shape[0]
    try:
        factor = linalg.cho_factor(phi_n, lower=True, check_finite=False)
        cond = np.linalg.cond(phi_n)
    except linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        load = CONDITION_DELTA * max(np.trace(phi_n).real, np.finfo(float).tiny) / C
        phi_n = phi_n + load * np.eye(C)
        try:
            factor = linalg.cho_factor(phi_n, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise DegenerateBin(f, f"noise covariance not positive definite: {exc}") from None
    return linalg.cho_solve(factor, phi_s, check_finite=False)


def mvdr_weights(scm_speech: np.ndarray, scm_noise: np.ndarray, reference: int = 0,
                 strict: bool = False) -> BfWeights:
    """Trace-normalised MVDR filter ``Phi_N^-1 Phi_S u / tr(Phi_N^-1 Phi_S)``.

    Bins whose normaliser vanishes fall back to ``w_f = u`` (recorded in
    ``degenerate_bins``), or raise :class:`DegenerateBin` with ``strict``.
    """
    F_, C, _ = scm_speech.shape
    if scm_noise.shape != scm_speech.shape:
        raise ValueError("speech and noise SCM shapes differ")
    if not 0 <= reference < C:
        raise IndexError(f"reference {reference} outside 0..{C - 1}")
    w = np.zeros((F_, C), dtype=np.complex128)
    degenerate = []
    for f in range(F_):
        try:
            num = _solve_bin(scm_speech[f], scm_noise[f], f)
            tr = np.trace(num)
            if not np.isfinite(tr) or abs(tr) < 1e-300:
                raise DegenerateBin(f, f"trace normaliser {tr} is degenerate")
        except DegenerateBin:
            if strict:
                raise
            degenerate.append(f)
            w[f, reference] = 1.0
            continue
        w[f] = num[:, reference] / tr
    return BfWeights(w, reference, degenerate)


def apply_beamformer(weights: BfWeights, spec: Spectrogram) -> Spectrogram:
    """X[t, f] = w_f^H Y[t, f]."""
    Y = spec.coefficients
    if Y.shape[1:] != weights.weights.shape:
        raise ValueError(f"weights {weights.weights.shape} do not match spectrogram {Y.shape}")
    out = np.einsum("fc,tfc->tf", weights.weights.conj(), Y)
    return Spectrogram(out[:, :, None], spec.config, spec.sample_rate)


@dataclass
class EnhanceResult:
    signal: np.ndarray  # double precision, length of the input
    weights: BfWeights
    channel_ids: tuple
    sample_rate: int

    @property
    def output(self) -> MultichannelWaveform:
        return MultichannelWaveform(self.signal, self.sample_rate,
                                    (self.channel_ids[self.weights.reference],))


def enhance(r: MultichannelWaveform, v_hat: MultichannelWaveform | None, masks: MaskPair,
            stft_config: StftConfig = StftConfig(), loading: LoadingSpec | None = None,
            reference: int = 0, mask_floor: float = DEFAULT_MASK_FLOOR) -> EnhanceResult:
    """Beamform the augmented channel set y = [r, v_hat].

    ``reference`` indexes the concatenated channels (real first). Loading is
    applied to the virtual channels only; with ``v_hat`` empty this is the
    real-microphone baseline.
    """
    y = MultichannelWaveform.concat(r, v_hat) if v_hat is not None else r
    n_virtual = y.num_channels - r.num_channels
    if loading is None:
        loading = LoadingSpec()
    if not loading.virtual_channel_indices and n_virtual:
        loading = LoadingSpec(tuple(range(r.num_channels, y.num_channels)), loading.epsilon)
    Y = stft(y, stft_config)
    if mask_floor:
        masks = masks.floored(mask_floor)
    phi_s = estimate_scm(Y, masks.speech)
    phi_n = apply_vm_loading(estimate_scm(Y, masks.noise), loading)
    w = mvdr_weights(phi_s, phi_n, reference)
    out = overlap_add(apply_beamformer(w, Y), stft_config, len(y))[0]
    return EnhanceResult(out, w, y.channel_ids, y.sample_rate)
