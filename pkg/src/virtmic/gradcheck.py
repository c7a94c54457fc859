"""Finite-difference verification of the reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from . import net
from .train import batch_loss, gradients

_KINKED = (F.relu, torch.relu, F.prelu, torch.prelu)


class ActivationPattern(TorchFunctionMode):
    """Records, or replays, the sign pattern of every ReLU/PReLU input.

    In replay mode each rectifier acts as the linear piece selected at the
    recorded point, so the network is smooth around it and agrees with the
    true function (and its gradient) at that point.
    """

    def __init__(self, masks=None):
        super().__init__()
        self.replay = masks is not None
        self.masks = list(masks) if masks is not None else []
        self._next = 0
        self.flips = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func not in _KINKED:
            return func(*args, **kwargs)
        x = args[0]
        if not self.replay:
            self.masks.append(x.detach() > 0)
            return func(*args, **kwargs)
        mask = self.masks[self._next]
        self._next += 1
        self.flips += int(((x.detach() > 0) != mask).sum())
        if func in (F.prelu, torch.prelu):
            return torch.where(mask, x, args[1].view(1, -1, 1) * x)
        return x * mask


@dataclass
class GradcheckResult:
    max_rel_error: float
    tolerance: float
    checked: int
    worst: tuple
    per_family: dict = field(default_factory=dict)
    kink_crossings: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def family(name: str) -> str:
    """Parameter family: block tensors are grouped across blocks."""
    parts = name.split(".")
    if parts[0] == "blocks":
        return ".".join(["blocks"] + parts[2:])
    return name


def gradcheck(hp: net.VmeHyperparams, seed: int = 0, length: int = 480, batch: int = 2,
              per_tensor: int = 2, h: float = 1e-4, tolerance: float = 1e-4,
              cap_db: float = 60.0, corrupt: bool = False, floor: float = 1e-6) -> GradcheckResult:
    """Compare autograd against central differences on sampled parameter entries.

    Runs in double precision on a random input/target batch. ``per_tensor``
    entries are drawn from every tensor, so every family is covered. The
    relative error is ``|fd - ad| / max(|fd|, |ad|, floor)``. Differences are
    taken with the rectifier pattern of the unperturbed point held fixed, so a
    step that crosses a ReLU/PReLU kink does not pollute the estimate; the
    number of such crossings is reported. With ``corrupt`` the analytic
    gradient of the encoder is perturbed, which must fail.
    """
    gen = torch.Generator().manual_seed(seed)
    params = net.init_params(hp, seed, torch.float64)
    # move norm/PReLU parameters off their symmetric init so every path is exercised
    for k, p in params.items():
        if k.endswith(("gain", "prelu1", "prelu2")) or ".norm" in k:
            params[k] = p + 0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64)
    x = 0.1 * torch.randn(batch, hp.c_in, length, generator=gen, dtype=torch.float64)
    y = 0.1 * torch.randn(batch, hp.c_out, length, generator=gen, dtype=torch.float64)
    grads, _ = gradients(params, (x, y), hp, cap_db)
    if corrupt:
        grads["encoder"] = grads["encoder"] * 1.01 + 1e-3

    with torch.no_grad(), ActivationPattern() as recorder:
        batch_loss(params, x, y, hp, cap_db)
    masks = recorder.masks

    def loss_at():
        with ActivationPattern(masks) as mode:
            value = batch_loss(params, x, y, hp, cap_db).item()
        return value, mode.flips

    rng = np.random.default_rng(seed)
    worst = (0.0, None, None)
    per_family = {}
    checked = crossings = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up, f_up = loss_at()
                flat[idx] = orig - h
                down, f_down = loss_at()
                flat[idx] = orig
                crossings += (f_up + f_down) > 0
                fd = (up - down) / (2 * h)
                ad = grads[name].view(-1)[idx].item()
                err = abs(fd - ad) / max(abs(fd), abs(ad), floor)
                fam = family(name)
                per_family[fam] = max(per_family.get(fam, 0.0), err)
                if err > worst[0]:
                    worst = (err, name, int(idx))
                checked += 1
    return GradcheckResult(worst[0], tolerance, checked, worst[1:], per_family, int(crossings))
