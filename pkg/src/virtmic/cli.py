"""Command-line entry point: simulate, train, estimate, beamform, evaluate, gradcheck, e2e."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import net
from .arraysim import ScenePair, build_dataset, load_manifest, screen_channel_failures
from .config import EVAL_SEED_BASE, TRAIN_SEED_BASE, ConfigError, PipelineConfig, load_config
from .evaluate import BfLayout, beamform_scene, evaluate_bf, evaluate_vm
from .gradcheck import gradcheck
from .signal import MultichannelWaveform
from .train import load_pairs, restore, train
from .wavio import read_wav, write_wav

log = logging.getLogger("virtmic")


class CliError(Exception):
    """A user-facing failure reported as one structured line."""


def _ids(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated channel ids, got {text!r}")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load_params(checkpoint):
    try:
        hp, params, _, meta = restore(checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {checkpoint}: {exc}") from None
    return hp, params, meta


def _layouts(cfg: PipelineConfig) -> list:
    bf = cfg.beamformer
    return [BfLayout(lay.label, tuple(lay.real), tuple(lay.virtual),
                     bf.epsilon if lay.epsilon is None else lay.epsilon,
                     lay.reference if lay.reference is not None else bf.reference)
            for lay in bf.layouts]


def simulate(cfg: PipelineConfig, out_dir) -> dict:
    """Build the train and eval datasets; returns their manifest paths."""
    out = Path(out_dir)
    sc = cfg.scenes
    train_seeds = range(TRAIN_SEED_BASE, TRAIN_SEED_BASE + sc.train_count)
    eval_seeds = range(EVAL_SEED_BASE, EVAL_SEED_BASE + sc.eval_count)
    assert not set(train_seeds) & set(eval_seeds), "train and eval seed ranges overlap"
    geometry = cfg.geometry.build()
    paths = {}
    for split, count, base in (("train", sc.train_count, TRAIN_SEED_BASE),
                               ("eval", sc.eval_count, EVAL_SEED_BASE)):
        paths[split] = build_dataset(count, geometry, sc.template, sc.input_ids, sc.target_ids,
                                     out / split, base_seed=base, config_hash=cfg.hash)
    return paths


def train_model(cfg: PipelineConfig, manifest, out_dir):
    m = load_manifest(manifest)
    hp = cfg.hyperparams()
    if m.records:
        rec = m.records[0]
        if len(rec["target_ids"]) != hp.c_out or len(rec["input_ids"]) != hp.c_in:
            raise CliError(f"manifest pairs {rec['input_ids']}->{rec['target_ids']} do not match "
                           f"the network's {hp.c_in}->{hp.c_out} channels")
    pairs = load_pairs(manifest)
    if not pairs:
        raise CliError(f"manifest {manifest} has no scenes to train on")
    return train(pairs, hp, cfg.training, out_dir, config_hash=cfg.hash)


def estimate(checkpoint, in_wavs, input_ids, out_wav) -> MultichannelWaveform:
    hp, params, meta = _load_params(checkpoint)
    waves = [read_wav(p) for p in in_wavs]
    if len({w.sample_rate for w in waves}) != 1 or len({len(w) for w in waves}) != 1:
        raise CliError("input WAV files differ in sample rate or length")
    samples = np.concatenate([w.samples for w in waves])
    if len(input_ids) != samples.shape[0]:
        raise CliError(f"{samples.shape[0]} input channels but {len(input_ids)} input ids")
    if samples.shape[0] != hp.c_in:
        raise CliError(f"network expects {hp.c_in} input channels, got {samples.shape[0]}")
    r = MultichannelWaveform(samples, waves[0].sample_rate, tuple(input_ids))
    v_hat = net.vme_forward(params, r, hp)
    write_wav(out_wav, v_hat, comment=f"config_hash={meta.get('config_hash', '')}")
    return v_hat


def beamform(cfg: PipelineConfig, layout: BfLayout, out_wav, manifest=None, scene: int = 0,
             wavs=None, checkpoint=None):
    """One beamformer run with oracle masks.

    Components come from a manifest scene or from explicit mixture/clean/noise
    WAV files (``wavs``) holding every real channel of the layout.
    """
    if layout.virtual and checkpoint is None:
        raise CliError("virtual channels requested but no checkpoint given")
    params = hp = None
    input_ids = tuple(cfg.scenes.input_ids)
    if checkpoint is not None:
        hp, params, _ = _load_params(checkpoint)
    if manifest is not None:
        m = load_manifest(manifest)
        if not 0 <= scene < len(m):
            raise CliError(f"scene {scene} outside manifest of {len(m)} scenes")
        pair = m.load_scene(scene)
    elif wavs is not None:
        ids = cfg.geometry.build().channel_ids
        pair = ScenePair(*(read_wav(wavs[k], ids) for k in ("mixture", "clean", "noise")))
    else:
        raise CliError("give either a manifest scene or mixture/clean/noise WAV files")
    stft_config = cfg.beamformer.stft_config(pair.mixture.sample_rate)
    out = beamform_scene(pair, layout, stft_config, params, hp, input_ids, cfg.beamformer.mask_floor)
    write_wav(out_wav, out.output, comment=f"config_hash={cfg.hash}")
    return out


def evaluate(cfg: PipelineConfig, manifest, checkpoint, out_dir=None) -> tuple:
    """Virtual-mic and beamformer SDR reports for a manifest."""
    hp, params, meta = _load_params(checkpoint)
    m = load_manifest(manifest)
    sc = cfg.scenes
    meta_common = {"config_hash": cfg.hash, "checkpoint_config_hash": meta.get("config_hash", ""),
                   "dataset": str(Path(manifest).parent.name)}
    if len(m) != sc.eval_count:
        meta_common["note"] = f"partial manifest: {len(m)} of {sc.eval_count} configured scenes"
    vm = evaluate_vm(m, params, hp, sc.input_ids, sc.target_ids,
                     {**meta_common, "metric": "sdr_plain"})
    sr = int(m.header.get("template", {}).get("sample_rate", 16000))
    bf = evaluate_bf(m, _layouts(cfg), cfg.beamformer.stft_config(sr), params, hp,
                     sc.input_ids, cfg.evaluation.filter_taps, cfg.beamformer.mask_floor,
                     {**meta_common, "metric": f"sdr_projected taps={cfg.evaluation.filter_taps}"})
    if out_dir is not None:
        out = Path(out_dir)
        _write_text(out / "report.txt", vm.to_text() + "\n" + bf.to_text())
        _write_text(out / "report_vm.jsonl", vm.to_jsonl())
        _write_text(out / "report_bf.jsonl", bf.to_jsonl())
    return vm, bf


def screening_summary(manifest, candidate_ids=(4, 5, 6), threshold: float = 0.9) -> dict:
    m = load_manifest(manifest)
    scores = [screen_channel_failures(m.load_scene(i).mixture, candidate_ids, threshold).min_score
              for i in range(len(m))]
    accepted = sum(s >= threshold for s in scores)
    return {"scenes": len(m), "accepted": accepted,
            "min_score": float(min(scores)) if scores else None}


def e2e(cfg: PipelineConfig, out_dir) -> dict:
    """simulate -> train -> estimate -> beamform -> evaluate in one directory."""
    out = Path(out_dir)
    timings = {}
    t0 = time.perf_counter()
    paths = simulate(cfg, out / "data")
    timings["simulate_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    train_model(cfg, paths["train"], out / "model")
    timings["train_s"] = time.perf_counter() - t0
    ckpt = out / "model" / "checkpoint.bin"
    t0 = time.perf_counter()
    m = load_manifest(paths["eval"])
    if len(m):
        sample = out / "samples"
        sample.mkdir(parents=True, exist_ok=True)
        first = m.load_scene(0)
        sc = cfg.scenes
        write_wav(sample / "input.wav", first.mixture.select(sc.input_ids),
                  comment=f"config_hash={cfg.hash}")
        estimate(ckpt, [sample / "input.wav"], sc.input_ids, sample / "virtual.wav")
        for i, layout in enumerate(_layouts(cfg)):
            beamform(cfg, layout, sample / f"bf{i}.wav", manifest=paths["eval"], scene=0,
                     checkpoint=ckpt)
    vm, bf = evaluate(cfg, paths["eval"], ckpt, out)
    timings["evaluate_s"] = time.perf_counter() - t0
    _write_text(out / "timing.json", json.dumps(timings, indent=1, sort_keys=True) + "\n")
    return {"paths": paths, "vm": vm, "bf": bf, "timings": timings}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="virtmic", description=__doc__)
    p.add_argument("--config", type=Path, help="JSON pipeline config (defaults apply)")
    p.add_argument("--seed", type=int, help="pipeline seed (required unless set in the config)")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = bit-exact)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build train/eval manifests")
    s.add_argument("out_dir", type=Path)

    s = sub.add_parser("train", help="train the estimator on a manifest")
    s.add_argument("manifest", type=Path)
    s.add_argument("out_dir", type=Path)

    s = sub.add_parser("estimate", help="virtual channel from input WAV files")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("out_wav", type=Path)
    s.add_argument("in_wavs", type=Path, nargs="+")
    s.add_argument("--input-ids", type=_ids, required=True)

    s = sub.add_parser("beamform", help="MVDR with optional virtual channels")
    s.add_argument("out_wav", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--scene", type=int, default=0)
    s.add_argument("--mixture", type=Path)
    s.add_argument("--clean", type=Path)
    s.add_argument("--noise", type=Path)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--layout", type=int, help="index into the configured layouts")
    s.add_argument("--real", type=_ids)
    s.add_argument("--virtual", type=_ids, default=())
    s.add_argument("--epsilon", type=float)
    s.add_argument("--reference", type=int)

    s = sub.add_parser("evaluate", help="virtual-mic and beamformer SDR reports")
    s.add_argument("manifest", type=Path)
    s.add_argument("checkpoint", type=Path)
    s.add_argument("--out", type=Path, help="directory for report files")

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--corrupt", action="store_true", help="perturb a gradient (self-test)")

    s = sub.add_parser("e2e", help="simulate, train, estimate, beamform and evaluate")
    s.add_argument("out_dir", type=Path)
    return p


def _run(args) -> int:
    # estimate works from the checkpoint alone
    cfg = load_config(args.config, args.seed) if args.command != "estimate" else None
    if args.command == "simulate":
        paths = simulate(cfg, args.out_dir)
        print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))
    elif args.command == "train":
        res = train_model(cfg, args.manifest, args.out_dir)
        print(json.dumps({"epoch": res.epoch, "step": res.state.step,
                          "checkpoint": str(args.out_dir / "checkpoint.bin")}))
    elif args.command == "estimate":
        v = estimate(args.checkpoint, args.in_wavs, args.input_ids, args.out_wav)
        print(json.dumps({"out": str(args.out_wav), "samples": len(v)}))
    elif args.command == "beamform":
        if args.layout is not None:
            layouts = _layouts(cfg)
            if not 0 <= args.layout < len(layouts):
                raise CliError(f"layout {args.layout} outside 0..{len(layouts) - 1}")
            layout = layouts[args.layout]
        elif args.real:
            eps = cfg.beamformer.epsilon if args.epsilon is None else args.epsilon
            ref = cfg.beamformer.reference if args.reference is None else args.reference
            layout = BfLayout("VM BF" if args.virtual else "RM BF", args.real, args.virtual, eps, ref)
        else:
            raise CliError("give --layout or --real")
        wavs = None
        if args.mixture or args.clean or args.noise:
            if not (args.mixture and args.clean and args.noise):
                raise CliError("--mixture, --clean and --noise go together")
            wavs = {"mixture": args.mixture, "clean": args.clean, "noise": args.noise}
        beamform(cfg, layout, args.out_wav, args.manifest, args.scene, wavs, args.checkpoint)
        print(json.dumps({"out": str(args.out_wav), "layout": layout.describe()}))
    elif args.command == "evaluate":
        vm, bf = evaluate(cfg, args.manifest, args.checkpoint, args.out)
        sys.stdout.write(vm.to_text() + "\n" + bf.to_text())
    elif args.command == "gradcheck":
        t0 = time.perf_counter()
        res = gradcheck(cfg.hyperparams(), seed=cfg.seed, corrupt=args.corrupt)
        print(json.dumps({"max_rel_error": res.max_rel_error, "tolerance": res.tolerance,
                          "checked": res.checked, "worst": list(res.worst),
                          "kink_crossings": res.kink_crossings, "passed": res.passed,
                          "seconds": round(time.perf_counter() - t0, 1),
                          "config_hash": cfg.hash}, sort_keys=True))
        return 0 if res.passed else 1
    elif args.command == "e2e":
        res = e2e(cfg, args.out_dir)
        sys.stdout.write(res["vm"].to_text() + "\n" + res["bf"].to_text())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(args.threads)
    try:
        return _run(args)
    except (CliError, ConfigError, OSError, ValueError, KeyError) as exc:
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
