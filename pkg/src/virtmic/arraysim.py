"""Synthetic array scenes, supervised channel splits and channel screening."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .signal import MultichannelWaveform, Waveform
from .wavio import read_wav, write_wav

MANIFEST_SCHEMA = "virtmic.manifest/1"
FD_TAPS = 64


@dataclass
class ArrayGeometry:
    mic_positions: np.ndarray
    channel_ids: tuple = None

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"mic positions must be (M, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("an array needs at least two microphones")
        dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(dist[np.triu_indices(len(pos), 1)] <= 0):
            raise ValueError("microphone positions must be distinct")
        self.mic_positions = pos
        if self.channel_ids is None:
            self.channel_ids = tuple(range(1, len(pos) + 1))
        self.channel_ids = tuple(int(c) for c in self.channel_ids)
        if len(self.channel_ids) != len(pos) or len(set(self.channel_ids)) != len(pos):
            raise ValueError(f"bad channel ids {self.channel_ids} for {len(pos)} mics")

    def position(self, cid: int) -> np.ndarray:
        return self.mic_positions[self.channel_ids.index(cid)]

    @classmethod
    def tablet(cls, dx: float = 0.10, dz: float = 0.19) -> "ArrayGeometry":
        """2x3 rectangular grid in the x-z plane facing +y.

        Channels 1-3 form the top row and 4-6 the bottom row, left to right.
        """
        xs = (-dx, 0.0, dx)
        pos = [(x, 0.0, dz / 2) for x in xs] + [(x, 0.0, -dz / 2) for x in xs]
        return cls(np.array(pos))


class NoiseKind(str, Enum):
    WHITE = "white"
    DIFFUSE_BABBLE = "diffuse_babble"
    DIFFUSE_AMBIENT = "diffuse_ambient"


@dataclass
class SceneSpec:
    source_position: np.ndarray
    source_signal: Waveform
    noise_kind: NoiseKind = NoiseKind.DIFFUSE_AMBIENT
    snr_db: float = 5.0
    sound_speed: float = 343.0
    seed: int = 0
    noise_sources: int = 16
    noise_distance: tuple = (2.0, 5.0)

    def __post_init__(self):
        self.source_position = np.asarray(self.source_position, dtype=np.float64)
        self.noise_kind = NoiseKind(self.noise_kind)
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")


@dataclass
class ScenePair:
    mixture: MultichannelWaveform
    clean: MultichannelWaveform
    noise: MultichannelWaveform


@dataclass
class SupervisedPair:
    input: MultichannelWaveform
    target: MultichannelWaveform

    @property
    def input_ids(self):
        return self.input.channel_ids

    @property
    def target_ids(self):
        return self.target.channel_ids


def fractional_delay(x: Waveform, delay: float) -> Waveform:
    """Delay by a real number of samples with a Hann-windowed sinc filter.

    Integer delays reduce to an exact shift. Output length equals input length.
    """
    n = len(x)
    if abs(delay) >= max(n, 1):
        raise ValueError(f"|delay| = {abs(delay)} must be below the signal length {n}")
    d_int = int(np.floor(delay))
    frac = delay - d_int
    centre = FD_TAPS // 2
    t = np.arange(FD_TAPS) - centre - frac
    taps = np.sinc(t) * np.where(np.abs(t) < centre, 0.5 + 0.5 * np.cos(np.pi * t / centre), 0.0)
    full = np.convolve(x.samples.astype(np.float64), taps)
    idx = np.arange(n) - d_int + centre
    valid = (idx >= 0) & (idx < len(full))
    out = np.zeros(n)
    out[valid] = full[idx[valid]]
    return Waveform(out, x.sample_rate)


def _delay_array(x: np.ndarray, delay: float, sr: int) -> np.ndarray:
    return fractional_delay(Waveform(x, sr), delay).samples.astype(np.float64)


def speech_like(length: int, sample_rate: int, rng: np.random.Generator,
                rms: float = 0.05) -> np.ndarray:
    """Voiced/unvoiced formant-filtered excitation with a syllabic envelope."""
    sr = sample_rate
    t = np.arange(length) / sr
    f0 = rng.uniform(90.0, 220.0) * (1.0 + 0.15 * np.sin(
        2 * np.pi * rng.uniform(0.3, 2.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    n_harm = int(4000 // 220)
    voiced = sum(np.cos(h * phase) / h for h in range(1, n_harm + 1))
    # slow voicing switch between harmonic and noise excitation
    gate = _smooth_noise(length, sr, 3.0, rng)
    voicing = 1.0 / (1.0 + np.exp(-4.0 * gate))
    exc = voicing * voiced + (1.0 - voicing) * 2.0 * rng.standard_normal(length)

    out = np.zeros(length)
    for lo, hi in ((300, 900), (900, 2400), (2400, 3600)):
        fc = rng.uniform(lo, hi)
        bw = rng.uniform(80, 250)
        r = np.exp(-np.pi * bw / sr)
        a = [1.0, -2 * r * np.cos(2 * np.pi * fc / sr), r * r]
        out += sps.lfilter([1.0 - r], a, exc)
    sos = sps.butter(4, [70, min(7000, 0.45 * sr)], btype="band", fs=sr, output="sos")
    out = sps.sosfilt(sos, out)

    env = np.maximum(_smooth_noise(length, sr, 4.0, rng) + 0.3, 0.0) ** 1.5 + 0.02
    fade = min(length // 10, sr // 20)
    if fade > 0:
        env[:fade] *= np.linspace(0, 1, fade)
        env[-fade:] *= np.linspace(1, 0, fade)
    out *= env
    energy = np.sqrt(np.mean(out ** 2))
    return out * (rms / energy) if energy > 0 else out


def brown_noise(length: int, sample_rate: int, rng: np.random.Generator,
                corner_hz: float = 50.0, cutoff_hz: float = 30.0) -> np.ndarray:
    """Unit-variance noise with a 1/f^2 power spectrum, flat below ``corner_hz``.

    A stand-in for low-frequency dominated environmental noise (traffic, vehicle
    cabins, ventilation).
    """
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spec /= np.maximum(f, corner_hz)
    spec[f < cutoff_hz] = 0.0
    out = np.fft.irfft(spec, length)
    std = np.std(out)
    return out / std if std > 0 else out


def _smooth_noise(length, sr, cutoff, rng):
    sos = sps.butter(2, cutoff, fs=sr, output="sos")
    y = sps.sosfiltfilt(sos, rng.standard_normal(length + 2 * sr))
    # normalise over the whole draw so short excerpts keep the same statistics
    return y[sr:sr + length] / (np.std(y) + 1e-12)


def _random_direction(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def simulate_scene(spec: SceneSpec, geometry: ArrayGeometry, sample_rate: int = 16000) -> ScenePair:
    """Anechoic point source plus noise observed at every microphone.

    Clean channel m is ``fractional_delay(s, d_m * sr / c) / d_m``; the noise
    is scaled so the channel-averaged energy ratio equals ``snr_db``.
    """
    src = spec.source_signal.samples.astype(np.float64)
    if not np.any(src):
        raise ValueError("source signal has zero energy")
    n = len(src)
    sr = sample_rate
    mics = geometry.mic_positions
    dist = np.linalg.norm(mics - spec.source_position[None], axis=1)
    if np.any(dist <= 0):
        raise ValueError("source coincides with a microphone")
    clean = np.stack([_delay_array(src, d * sr / spec.sound_speed, sr) / d for d in dist])

    rng = np.random.default_rng(spec.seed)
    if spec.noise_kind is NoiseKind.WHITE:
        noise = rng.standard_normal(clean.shape)
    else:
        # far-field sources from random directions; extra lead-in hides edge effects
        margin = int(np.ceil(spec.noise_distance[1] * sr / spec.sound_speed)) + FD_TAPS
        noise = np.zeros((len(mics), n))
        emit = speech_like if spec.noise_kind is NoiseKind.DIFFUSE_BABBLE else brown_noise
        for _ in range(spec.noise_sources):
            pos = _random_direction(rng) * rng.uniform(*spec.noise_distance)
            far = emit(n + margin, sr, rng)
            d = np.linalg.norm(mics - pos[None], axis=1)
            for m in range(len(mics)):
                noise[m] += _delay_array(far, d[m] * sr / spec.sound_speed, sr)[margin:] / d[m]
    clean_energy = np.sum(clean ** 2)
    noise_energy = np.sum(noise ** 2)
    noise *= np.sqrt(clean_energy / (noise_energy * 10.0 ** (spec.snr_db / 10.0)))

    ids = geometry.channel_ids
    clean_w = MultichannelWaveform(clean, sr, ids)
    noise_w = MultichannelWaveform(noise, sr, ids)
    # sum in float32 so mixture == clean + noise holds on the stored samples
    return ScenePair(MultichannelWaveform(clean_w.samples + noise_w.samples, sr, ids),
                     clean_w, noise_w)


def make_supervised_pair(mix: MultichannelWaveform, input_ids: Sequence[int],
                         target_ids: Sequence[int]) -> SupervisedPair:
    input_ids, target_ids = tuple(input_ids), tuple(target_ids)
    overlap = set(input_ids) & set(target_ids)
    if overlap:
        raise ValueError(f"input and target channels overlap: {sorted(overlap)}")
    missing = (set(input_ids) | set(target_ids)) - set(mix.channel_ids)
    if missing:
        raise ValueError(f"channels {sorted(missing)} not in mixture {mix.channel_ids}")
    if not input_ids or not target_ids:
        raise ValueError("need at least one input and one target channel")
    return SupervisedPair(mix.select(input_ids), mix.select(target_ids))


@dataclass
class ScreeningResult:
    accepted: bool
    pair_scores: dict
    min_score: float


def _max_normalized_xcorr(a: np.ndarray, b: np.ndarray, max_lag: int) -> float:
    ea, eb = np.dot(a, a), np.dot(b, b)
    if ea <= 0 or eb <= 0:
        return 0.0
    n = len(a)
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = np.fft.irfft(np.fft.rfft(a, size) * np.conj(np.fft.rfft(b, size)), size)
    lags = np.concatenate([xc[:max_lag + 1], xc[-max_lag:]]) if max_lag else xc[:1]
    return float(np.max(np.abs(lags)) / np.sqrt(ea * eb))


def screen_channel_failures(mix: MultichannelWaveform, candidate_ids: Sequence[int] = None,
                            threshold: float = 0.9, max_lag_ms: float = 5.0) -> ScreeningResult:
    """Reject a recording whose weakest channel pair correlates below ``threshold``.

    Each pair is scored by the peak absolute normalized cross-correlation over
    lags within +-``max_lag_ms``. Silent channels score 0.
    """
    ids = tuple(mix.channel_ids if candidate_ids is None else candidate_ids)
    if len(ids) < 2:
        raise ValueError("screening needs at least two channels")
    max_lag = int(round(max_lag_ms * mix.sample_rate / 1000))
    x = {c: mix.samples[mix.index(c)].astype(np.float64) for c in ids}
    scores = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            key = tuple(sorted((a, b)))
            scores[key] = _max_normalized_xcorr(x[key[0]], x[key[1]], max_lag)
    low = min(scores.values())
    return ScreeningResult(low >= threshold, scores, low)


@dataclass
class SceneTemplate:
    """Randomisation ranges for scene generation."""

    duration_s: float = 2.0
    sample_rate: int = 16000
    noise_kind: str = "diffuse_ambient"
    snr_db: tuple = (0.0, 10.0)
    source_distance: tuple = (0.3, 1.0)
    source_azimuth_deg: tuple = (-60.0, 60.0)
    source_elevation_deg: tuple = (-15.0, 15.0)
    noise_sources: int = 16
    noise_distance: tuple = (2.0, 5.0)
    sound_speed: float = 343.0


def draw_scene(template: SceneTemplate, geometry: ArrayGeometry, seed: int) -> ScenePair:
    rng = np.random.default_rng(seed)
    sr = template.sample_rate
    n = int(round(template.duration_s * sr))
    az = np.deg2rad(rng.uniform(*template.source_azimuth_deg))
    el = np.deg2rad(rng.uniform(*template.source_elevation_deg))
    r = rng.uniform(*template.source_distance)
    pos = r * np.array([np.sin(az) * np.cos(el), np.cos(az) * np.cos(el), np.sin(el)])
    spec = SceneSpec(
        source_position=pos,
        source_signal=Waveform(speech_like(n, sr, rng), sr),
        noise_kind=template.noise_kind,
        snr_db=float(rng.uniform(*template.snr_db)),
        sound_speed=template.sound_speed,
        seed=int(rng.integers(2 ** 63)),
        noise_sources=template.noise_sources,
        noise_distance=tuple(template.noise_distance),
    )
    return simulate_scene(spec, geometry, sr)


def build_dataset(scene_count: int, geometry: ArrayGeometry, template: SceneTemplate,
                  input_ids: Sequence[int], target_ids: Sequence[int], out_dir,
                  base_seed: int = 0, config_hash: str = "") -> Path:
    """Write mixture/clean/noise WAV shards and a JSON-lines manifest.

    Scene ``i`` is drawn with seed ``base_seed + i``. Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    input_ids, target_ids = tuple(input_ids), tuple(target_ids)
    records = []
    comment = f"config_hash={config_hash}" if config_hash else None
    for i in range(scene_count):
        seed = base_seed + i
        scene = draw_scene(template, geometry, seed)
        paths = {}
        for kind, wave in (("mixture", scene.mixture), ("clean", scene.clean),
                           ("noise", scene.noise)):
            name = f"scene{seed:08d}_{kind}.wav"
            try:
                write_wav(out_dir / name, wave, comment=comment)
            except OSError as exc:
                raise OSError(f"failed writing {out_dir / name}: {exc}") from exc
            paths[kind] = name
        records.append({**paths, "input_ids": list(input_ids), "target_ids": list(target_ids),
                        "seed": seed, "sample_rate": template.sample_rate})
    header = {"schema": MANIFEST_SCHEMA, "channel_ids": list(geometry.channel_ids),
              "mic_positions": geometry.mic_positions.tolist(),
              "template": asdict(template), "config_hash": config_hash}
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


@dataclass
class Manifest:
    path: Path
    header: dict
    records: list = field(default_factory=list)

    def load_scene(self, i: int) -> ScenePair:
        rec = self.records[i]
        base = self.path.parent
        ids = self.header.get("channel_ids")
        return ScenePair(*(read_wav(base / rec[k], ids) for k in ("mixture", "clean", "noise")))

    def __len__(self):
        return len(self.records)


def load_manifest(path) -> Manifest:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest (missing header)")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"{path}: unsupported manifest schema {header.get('schema')!r}")
    return Manifest(path, header, [json.loads(ln) for ln in lines[1:]])
