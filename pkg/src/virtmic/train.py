"""Supervised training of the virtual microphone estimator."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import net
from .arraysim import SupervisedPair, load_manifest, make_supervised_pair
from .signal import MultichannelWaveform

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    clip_norm: float = 5.0
    epochs: int = 200
    batch_size: int = 4
    segment_length: int = 16000
    snr_cap_db: float = 60.0
    seed: int = 0
    halve_lr_on_plateau: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.snr_cap_db <= 0:
            raise ValueError("snr_cap_db must be positive")
        if self.batch_size < 1 or self.segment_length < 1 or self.epochs < 0:
            raise ValueError("batch_size and segment_length must be >= 1, epochs >= 0")


class NonFiniteLoss(RuntimeError):
    pass


def snr_db(target: torch.Tensor, estimate: torch.Tensor, cap_db: float) -> torch.Tensor:
    """Per-channel capped SNR, shape (..., C, T) -> (..., C).

    The cap is applied by flooring the residual energy at
    ``||t||^2 * 10^(-cap/10)``, which equals min(SNR, cap) and gives zero
    gradient once the cap is reached.
    """
    signal = (target ** 2).sum(-1)
    residual = ((target - estimate) ** 2).sum(-1)
    floor = signal * 10.0 ** (-cap_db / 10.0)
    return 10.0 * torch.log10(signal) - 10.0 * torch.log10(torch.maximum(residual, floor))


def snr_objective(t: MultichannelWaveform, v_hat: MultichannelWaveform, cap_db: float = 60.0) -> float:
    """Sum over virtual channels of the capped scale-dependent SNR in dB."""
    if t.samples.shape != v_hat.samples.shape:
        raise ValueError(f"shape mismatch {t.samples.shape} vs {v_hat.samples.shape}")
    tt = torch.from_numpy(t.samples.astype(np.float64))
    if torch.any((tt ** 2).sum(-1) <= 0):
        raise ValueError("target channel with zero energy")
    return float(snr_db(tt, torch.from_numpy(v_hat.samples.astype(np.float64)), cap_db).sum())


def batch_loss(params: dict, inputs: torch.Tensor, targets: torch.Tensor,
               hp: net.VmeHyperparams, cap_db: float) -> torch.Tensor:
    """Negated batch mean of the per-item objective (summed over channels)."""
    if torch.any((targets ** 2).sum(-1) <= 0):
        raise ValueError("target channel with zero energy")
    est = net.forward(params, inputs, hp)
    return -snr_db(targets, est, cap_db).sum(-1).mean()


def stack_batch(batch: Sequence[SupervisedPair], dtype=torch.float32):
    x = torch.from_numpy(np.stack([p.input.samples for p in batch])).to(dtype)
    y = torch.from_numpy(np.stack([p.target.samples for p in batch])).to(dtype)
    return x, y


def gradients(params: dict, batch, hp: net.VmeHyperparams, cap_db: float = 60.0):
    """Reverse-mode gradient of the batch loss. Returns (grads, loss)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    dtype = next(iter(params.values())).dtype
    if isinstance(batch, tuple) and isinstance(batch[0], torch.Tensor):
        x, y = batch
    else:
        x, y = stack_batch(batch, dtype)
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = batch_loss(leaves, x, y, hp, cap_db)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()}")
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    grads = {k: (torch.zeros_like(v) if g is None else g)
             for (k, v), g in zip(leaves.items(), grads)}
    return grads, loss.item()


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Rescale all tensors jointly so the global L2 norm is at most ``clip_norm``."""
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new (params, state)."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        new_params[k] = p - lr * (m[k] / c1) / (torch.sqrt(v[k] / c2) + state.eps)
    return new_params, AdamState(m, v, step, b1, b2, state.eps)


def load_pairs(manifest_path, input_ids=None, target_ids=None) -> list:
    """Read every manifest scene as a SupervisedPair of noisy channels."""
    manifest = load_manifest(manifest_path)
    pairs = []
    for i, rec in enumerate(manifest.records):
        scene = manifest.load_scene(i)
        pairs.append(make_supervised_pair(scene.mixture, input_ids or rec["input_ids"],
                                          target_ids or rec["target_ids"]))
    return pairs


def crop_batch(pairs: Sequence[SupervisedPair], order: Sequence[int], seg: int,
               rng: np.random.Generator, dtype=torch.float32):
    xs, ys = [], []
    for i in order:
        x, y = pairs[i].input.samples, pairs[i].target.samples
        n = x.shape[-1]
        if n > seg:
            start = int(rng.integers(0, n - seg + 1))
            x, y = x[:, start:start + seg], y[:, start:start + seg]
        elif n < seg:
            x = np.pad(x, ((0, 0), (0, seg - n)))
            y = np.pad(y, ((0, 0), (0, seg - n)))
        xs.append(x)
        ys.append(y)
    return (torch.from_numpy(np.stack(xs)).to(dtype), torch.from_numpy(np.stack(ys)).to(dtype))


@dataclass
class TrainResult:
    params: dict
    state: AdamState
    epoch: int
    log: list = field(default_factory=list)


def _checkpoint_tensors(params, state):
    tensors = dict(params)
    tensors.update({f"adam.m.{k}": t for k, t in state.m.items()})
    tensors.update({f"adam.v.{k}": t for k, t in state.v.items()})
    return tensors


def restore(path):
    """Load params and optimizer state written by :func:`train`."""
    hp, tensors, meta = net.load_checkpoint(path)
    names = list(net.param_shapes(hp))
    params = {k: tensors[k] for k in names}
    if all(f"adam.m.{k}" in tensors for k in names):
        state = AdamState({k: tensors[f"adam.m.{k}"] for k in names},
                          {k: tensors[f"adam.v.{k}"] for k in names}, int(meta.get("step", 0)))
    else:
        state = AdamState.zeros_like(params)
    return hp, params, state, meta


def train(pairs: Sequence[SupervisedPair], hp: net.VmeHyperparams, config: TrainConfig,
          out_dir=None, params: dict | None = None, resume: bool = True,
          config_hash: str = "", max_steps: int | None = None) -> TrainResult:
    """Epoch loop with seeded shuffling and random fixed-length crops.

    Writes ``checkpoint.bin`` and appends to ``loss_log.jsonl`` (plus wall
    times to ``timing.jsonl``) after every epoch when ``out_dir`` is given;
    an existing checkpoint is resumed. The
    shuffle/crop generator for epoch ``e`` is seeded by ``(seed, e)`` so a
    resumed run follows the same schedule as an uninterrupted one.
    """
    if not pairs:
        raise ValueError("no training pairs")
    if pairs[0].input.num_channels != hp.c_in or pairs[0].target.num_channels != hp.c_out:
        raise ValueError(
            f"data has {pairs[0].input.num_channels}->{pairs[0].target.num_channels} channels, "
            f"network expects {hp.c_in}->{hp.c_out}")
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.bin" if out else None
    log_path = out / "loss_log.jsonl" if out else None
    timing_path = out / "timing.jsonl" if out else None
    start_epoch = 0
    lr = config.learning_rate
    state = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if ckpt and resume and ckpt.exists():
        _, params, state, meta = restore(ckpt)
        start_epoch = int(meta["epoch"]) + 1
        lr = float(meta.get("learning_rate", lr))
        log.info("resuming from %s at epoch %d", ckpt, start_epoch)
    elif out:
        for stale_log in (log_path, timing_path):
            if stale_log.exists():
                stale_log.unlink()
    if params is None:
        params = net.init_params(hp, config.seed)
    if state is None:
        state = AdamState.zeros_like(params)

    records = []
    best = -math.inf
    stale = 0
    steps = 0
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(pairs))
        epoch_losses = []
        timings = []
        for b, first in enumerate(range(0, len(order), config.batch_size)):
            t0 = time.perf_counter()
            x, y = crop_batch(pairs, order[first:first + config.batch_size],
                              config.segment_length, rng)
            try:
                grads, loss = gradients(params, (x, y), hp, config.snr_cap_db)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch} batch {b}: {exc}") from None
            gnorm = global_norm(grads)
            grads = clip_gradients(grads, config.clip_norm)
            params, state = adam_step(params, grads, state, lr)
            rec = {"epoch": epoch, "batch": b, "loss_db": loss, "grad_norm": gnorm}
            if config_hash:
                rec["config_hash"] = config_hash
            records.append(rec)
            timings.append({"epoch": epoch, "batch": b,
                            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)})
            epoch_losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        mean_loss = float(np.mean(epoch_losses))
        log.info("epoch %d mean objective %.3f dB", epoch, -mean_loss)
        if config.halve_lr_on_plateau:
            if -mean_loss > best + 0.05:
                best, stale = -mean_loss, 0
            else:
                stale += 1
                if stale >= 3:
                    lr, stale = lr / 2.0, 0
        if out:
            with open(log_path, "a") as fh:
                for rec in records[-len(epoch_losses):]:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            with open(timing_path, "a") as fh:
                for rec in timings:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            net.save_checkpoint(ckpt, hp, _checkpoint_tensors(params, state),
                                {"epoch": epoch, "step": state.step, "learning_rate": lr,
                                 "config_hash": config_hash, "train_config": asdict(config)})
        if max_steps is not None and steps >= max_steps:
            return TrainResult(params, state, epoch, records)
    return TrainResult(params, state, config.epochs - 1, records)
