"""Waveform containers and windowed STFT analysis/synthesis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

DEFAULT_SAMPLE_RATE = 16000


@dataclass
class Waveform:
    """Single-channel signal stored in single precision."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class MultichannelWaveform:
    """C equal-length channels with integer labels.

    ``samples`` has shape (C, T).
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    channel_ids: tuple = field(default=None)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2:
            raise ValueError(f"expected (channels, samples) array, got shape {samples.shape}")
        self.samples = samples
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channel_ids is None:
            self.channel_ids = tuple(range(1, samples.shape[0] + 1))
        self.channel_ids = tuple(int(c) for c in self.channel_ids)
        if len(self.channel_ids) != samples.shape[0]:
            raise ValueError(
                f"{len(self.channel_ids)} channel ids for {samples.shape[0]} channels")
        if len(set(self.channel_ids)) != len(self.channel_ids):
            raise ValueError(f"channel ids must be unique: {self.channel_ids}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]

    def channel(self, cid: int) -> Waveform:
        return Waveform(self.samples[self.index(cid)], self.sample_rate)

    def index(self, cid: int) -> int:
        try:
            return self.channel_ids.index(int(cid))
        except ValueError:
            raise KeyError(f"channel {cid} not in {self.channel_ids}") from None

    def select(self, ids: Sequence[int]) -> "MultichannelWaveform":
        idx = [self.index(c) for c in ids]
        return MultichannelWaveform(self.samples[idx], self.sample_rate, tuple(ids))

    @classmethod
    def from_channels(cls, channels: Sequence[Waveform], channel_ids=None):
        if not channels:
            raise ValueError("need at least one channel")
        rates = {w.sample_rate for w in channels}
        if len(rates) != 1:
            raise ValueError(f"channels disagree on sample rate: {sorted(rates)}")
        lengths = {len(w) for w in channels}
        if len(lengths) != 1:
            raise ValueError(f"channels disagree on length: {sorted(lengths)}")
        return cls(np.stack([w.samples for w in channels]), rates.pop(), channel_ids)

    @classmethod
    def concat(cls, *waves: "MultichannelWaveform") -> "MultichannelWaveform":
        waves = [w for w in waves if w is not None and w.num_channels > 0]
        rates = {w.sample_rate for w in waves}
        lengths = {len(w) for w in waves}
        if len(rates) != 1 or len(lengths) != 1:
            raise ValueError("waveforms must share sample rate and length")
        ids = tuple(c for w in waves for c in w.channel_ids)
        return cls(np.concatenate([w.samples for w in waves]), rates.pop(), ids)


class WindowKind(str, Enum):
    BLACKMAN = "blackman"
    HANN = "hann"
    RECT = "rect"


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    window_kind: WindowKind = WindowKind.BLACKMAN

    def __post_init__(self):
        object.__setattr__(self, "window_kind", WindowKind(self.window_kind))
        if self.window_length < 2 or self.window_length % 2:
            raise ValueError(f"window_length must be even and >= 2, got {self.window_length}")
        if not 0 < self.hop <= self.window_length:
            raise ValueError(f"hop must lie in (0, window_length], got {self.hop}")

    @property
    def num_bins(self) -> int:
        return self.window_length // 2 + 1

    @classmethod
    def from_duration(cls, sample_rate, window_ms=64.0, hop_ms=16.0, kind="blackman"):
        return cls(int(round(sample_rate * window_ms / 1000)),
                   int(round(sample_rate * hop_ms / 1000)), WindowKind(kind))


@dataclass
class Spectrogram:
    """Complex coefficients of shape (frames, bins, channels)."""

    coefficients: np.ndarray
    config: StftConfig
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.complex128)
        if c.ndim == 2:
            c = c[:, :, None]
        if c.ndim != 3 or c.shape[1] != self.config.num_bins:
            raise ValueError(
                f"coefficients shape {c.shape} inconsistent with {self.config.num_bins} bins")
        self.coefficients = c

    @property
    def num_frames(self) -> int:
        return self.coefficients.shape[0]

    @property
    def num_channels(self) -> int:
        return self.coefficients.shape[2]


def make_window(kind, length: int) -> np.ndarray:
    """Periodic analysis window of the given kind."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    kind = WindowKind(kind)
    phase = 2.0 * np.pi * np.arange(length) / length
    if kind is WindowKind.BLACKMAN:
        return 0.42 - 0.5 * np.cos(phase) + 0.08 * np.cos(2.0 * phase)
    if kind is WindowKind.HANN:
        return 0.5 - 0.5 * np.cos(phase)
    return np.ones(length)


def num_frames(length: int, config: StftConfig) -> int:
    """Frame count for a signal of ``length`` samples."""
    length = max(length, config.window_length)
    return math.ceil((length + config.window_length) / config.hop)


def _as_matrix(wave) -> tuple[np.ndarray, int]:
    if isinstance(wave, MultichannelWaveform):
        return wave.samples.astype(np.float64), wave.sample_rate
    if isinstance(wave, Waveform):
        return wave.samples[None, :].astype(np.float64), wave.sample_rate
    x = np.asarray(wave, dtype=np.float64)
    return (x[None, :] if x.ndim == 1 else x), DEFAULT_SAMPLE_RATE


def _frame_index(n_frames: int, config: StftConfig) -> np.ndarray:
    return (np.arange(n_frames)[:, None] * config.hop
            + np.arange(config.window_length)[None, :])


def stft(wave, config: StftConfig = StftConfig()) -> Spectrogram:
    """Analyse a (multichannel) waveform.

    The signal is zero padded by half a window at both ends, so frame ``t``
    is centred on input sample ``t * hop``.
    """
    x, sr = _as_matrix(wave)
    C, T = x.shape
    W, half = config.window_length, config.window_length // 2
    n = num_frames(T, config)
    padded = np.zeros((C, (n - 1) * config.hop + W))
    padded[:, half:half + T] = x
    frames = padded[:, _frame_index(n, config)] * make_window(config.window_kind, W)
    coeffs = np.fft.rfft(frames, axis=-1)  # (C, frames, bins)
    return Spectrogram(np.transpose(coeffs, (1, 2, 0)), config, sr)


def overlap_add(spec: Spectrogram, config: StftConfig | None = None,
                out_length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft` in double precision.

    Returns a (channels, out_length) array. ``out_length`` defaults to the
    longest length consistent with the frame count.
    """
    if config is None:
        config = spec.config
    if config != spec.config:
        raise ValueError(f"spectrogram computed with {spec.config}, asked to invert with {config}")
    W, half = config.window_length, config.window_length // 2
    n = spec.num_frames
    if out_length is None:
        out_length = max(n * config.hop - W, 0)
    if out_length < 0:
        raise ValueError(f"out_length must be non-negative, got {out_length}")
    if n < num_frames(out_length, config):
        raise ValueError(f"{n} frames cannot cover {out_length} samples")

    window = make_window(config.window_kind, W)
    frames = np.fft.irfft(np.transpose(spec.coefficients, (2, 0, 1)), n=W, axis=-1)
    total = (n - 1) * config.hop + W
    idx = _frame_index(n, config).ravel()
    out = np.zeros((frames.shape[0], total))
    for c in range(frames.shape[0]):
        out[c] = np.bincount(idx, weights=(frames[c] * window).ravel(), minlength=total)
    norm = np.bincount(idx, weights=np.tile(window ** 2, n), minlength=total)
    norm = norm[half:half + out_length]
    if np.any(norm <= 1e-12 * window.max() ** 2):
        raise ValueError("window/hop combination is not invertible")
    return out[:, half:half + out_length] / norm


def istft(spec: Spectrogram, config: StftConfig | None = None,
          out_length: int | None = None) -> MultichannelWaveform:
    """Inverse STFT; one output channel per spectrogram channel."""
    return MultichannelWaveform(overlap_add(spec, config, out_length), spec.sample_rate)
