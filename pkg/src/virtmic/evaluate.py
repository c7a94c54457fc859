"""Virtual-microphone and beamformer SDR evaluation with table reports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import net
from .arraysim import Manifest, ScenePair
from .beamform import LoadingSpec, enhance, oracle_irm_masks
from .metrics import report_value, sdr_plain, sdr_projected
from .signal import StftConfig, stft


@dataclass
class SdrRow:
    label: str
    eval_channel: str
    ref_channel: str
    sdr_db: float
    scene: int = None

    def __post_init__(self):
        self.sdr_db = report_value(float(self.sdr_db))
        if not np.isfinite(self.sdr_db):
            raise ValueError(f"non-finite SDR in row {self.label} {self.eval_channel}")


@dataclass
class SdrReport:
    title: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def summary(self) -> list:
        """Arithmetic dB mean per (label, eval_channel, ref_channel), first-seen order."""
        groups = {}
        for row in self.rows:
            groups.setdefault((row.label, row.eval_channel, row.ref_channel), []).append(row.sdr_db)
        return [SdrRow(k[0], k[1], k[2], float(np.mean(v))) for k, v in groups.items()]

    def mean(self, label: str, eval_channel: str) -> float:
        for row in self.summary():
            if row.label == label and row.eval_channel == eval_channel:
                return row.sdr_db
        raise KeyError(f"no rows for {label} {eval_channel}")

    def to_text(self) -> str:
        lines = [self.title]
        for key in sorted(self.metadata):
            lines.append(f"# {key}: {self.metadata[key]}")
        header = ("method", "eval ch", "ref ch", "SDR [dB]")
        body = [(r.label, r.eval_channel, r.ref_channel, f"{r.sdr_db:.2f}") for r in self.summary()]
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        lines += [rule, fmt.format(*header), rule]
        lines += [fmt.format(*b) for b in body]
        lines.append(rule)
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        out = [json.dumps({"title": self.title, "metadata": self.metadata}, sort_keys=True)]
        out += [json.dumps({"kind": "scene", **asdict(r)}, sort_keys=True) for r in self.rows]
        out += [json.dumps({"kind": "mean", **asdict(r)}, sort_keys=True) for r in self.summary()]
        return "\n".join(out) + "\n"


def layout_label(eval_channels: Sequence[int], input_channels: Sequence[int] = ()) -> str:
    """Channel notation: "5 (4,6)" for a virtual channel 5 estimated from 4 and 6."""
    text = ",".join(str(c) for c in eval_channels)
    if input_channels:
        text += " (" + ",".join(str(c) for c in input_channels) + ")"
    return text


def nearest_channels(positions: dict, target: int, candidates: Sequence[int]) -> list:
    """Candidates at minimal distance from ``target`` (ties kept, input order)."""
    d = {c: float(np.linalg.norm(np.asarray(positions[c]) - np.asarray(positions[target])))
         for c in candidates}
    best = min(d.values())
    return [c for c in candidates if d[c] <= best + 1e-9]


def _mic_positions(manifest: Manifest) -> dict | None:
    pos = manifest.header.get("mic_positions")
    if pos is None:
        return None
    return dict(zip(manifest.header["channel_ids"], pos))


def evaluate_vm(manifest: Manifest, params: dict, hp: net.VmeHyperparams,
                input_ids: Sequence[int], target_ids: Sequence[int],
                metadata: dict | None = None) -> SdrReport:
    """Virtual channel estimate vs. the observed noisy channel at that position.

    Baseline rows compare the geometrically nearest input channel with the same
    observation; ties are resolved by the higher dataset-mean SDR.
    """
    report = SdrReport("SDR [dB] for virtual microphone estimation "
                       "(reference: noisy observation at the virtual position)",
                       metadata=dict(metadata or {}))
    report.metadata["scenes"] = len(manifest)
    input_ids, target_ids = tuple(input_ids), tuple(target_ids)
    positions = _mic_positions(manifest)
    vm_rows, rm_rows = [], {}
    for i in range(len(manifest)):
        scene = manifest.load_scene(i)
        r = scene.mixture.select(input_ids)
        v_hat = net.vme_forward(params, r, hp, target_ids)
        for t in target_ids:
            obs = scene.mixture.channel(t).samples
            vm_rows.append(SdrRow("VM", layout_label([t], input_ids), str(t),
                                  sdr_plain(obs, v_hat.channel(t).samples), i))
            cands = nearest_channels(positions, t, input_ids) if positions else list(input_ids)
            for c in cands:
                rm_rows.setdefault((t, c), []).append(
                    SdrRow("RM", str(c), str(t), sdr_plain(obs, scene.mixture.channel(c).samples), i))
    for t in target_ids:
        cands = [k for k in rm_rows if k[0] == t]
        if cands:
            best = max(cands, key=lambda k: np.mean([r.sdr_db for r in rm_rows[k]]))
            report.rows += rm_rows[best]
        report.rows += [r for r in vm_rows if r.ref_channel == str(t)]
    return report


@dataclass
class BfLayout:
    label: str
    real: tuple
    virtual: tuple = ()
    epsilon: float = 0.05
    reference: int = None

    @property
    def reference_channel(self) -> int:
        return self.real[0] if self.reference is None else self.reference

    def describe(self) -> str:
        text = ",".join(map(str, self.real))
        if self.virtual:
            text += " + " + ",".join(map(str, self.virtual))
        return text


def beamform_scene(scene: ScenePair, layout: BfLayout, stft_config: StftConfig,
                   params: dict | None = None, hp: net.VmeHyperparams | None = None,
                   input_ids: Sequence[int] = (), mask_floor: float = 1e-6):
    """Run one layout on one simulated scene with oracle masks.

    Masks are ideal ratio masks on the reference channel. Virtual channels are
    estimated from ``input_ids`` and must be the network's output channels.
    """
    ref = layout.reference_channel
    if ref not in layout.real:
        raise ValueError(f"reference {ref} is not a real channel of {layout.real}")
    masks = oracle_irm_masks(stft(scene.clean.channel(ref), stft_config),
                             stft(scene.noise.channel(ref), stft_config))
    r = scene.mixture.select(layout.real)
    v_hat = None
    if layout.virtual:
        if params is None:
            raise ValueError(f"layout {layout.describe()} needs a trained estimator")
        est = net.vme_forward(params, scene.mixture.select(input_ids), hp, layout.virtual)
        v_hat = est.select(layout.virtual)
    loading = LoadingSpec(epsilon=layout.epsilon)
    return enhance(r, v_hat, masks, stft_config, loading, layout.real.index(ref), mask_floor)


def evaluate_bf(manifest: Manifest, layouts: Sequence[BfLayout], stft_config: StftConfig,
                params: dict | None = None, hp: net.VmeHyperparams | None = None,
                input_ids: Sequence[int] = (), filter_taps: int = 512,
                mask_floor: float = 1e-6, metadata: dict | None = None) -> SdrReport:
    """Projected SDR of each beamformer layout against the clean reference channel."""
    report = SdrReport("SDR [dB] for beamforming (reference: clean signal at the reference channel)",
                       metadata=dict(metadata or {}))
    report.metadata["scenes"] = len(manifest)
    for i in range(len(manifest)):
        scene = manifest.load_scene(i)
        refs = []
        for layout in layouts:
            ref = layout.reference_channel
            if ref not in refs:
                refs.append(ref)
                report.rows.append(SdrRow("no process", str(ref), str(ref), sdr_projected(
                    scene.clean.channel(ref).samples, scene.mixture.channel(ref).samples,
                    filter_taps), i))
            out = beamform_scene(scene, layout, stft_config, params, hp, input_ids, mask_floor)
            report.rows.append(SdrRow(layout.label, layout.describe(), str(ref), sdr_projected(
                scene.clean.channel(ref).samples, out.signal, filter_taps), i))
    return report
