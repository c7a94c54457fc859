"""Time-domain virtual microphone estimator.

A strided 1-D convolution encoder, a stack of dilated depthwise-separable
residual blocks and a transposed-convolution decoder, written as pure
functions over a name -> tensor parameter dict.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .signal import MultichannelWaveform

NORM_EPS = 1e-8
CHECKPOINT_MAGIC = b"VMECKPT\0"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VmeHyperparams:
    N: int = 64
    L: int = 20
    B: int = 64
    H: int = 128
    P: int = 3
    X: int = 6
    R: int = 2
    c_in: int = 2
    c_out: int = 1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value}")
        if self.L % 2:
            raise ValueError(f"L must be even (stride L/2), got {self.L}")
        if self.P % 2 == 0:
            raise ValueError(f"P must be odd for symmetric padding, got {self.P}")

    @property
    def stride(self) -> int:
        return self.L // 2

    @classmethod
    def full(cls, c_in=2, c_out=1):
        return cls(N=256, L=20, B=256, H=512, P=3, X=8, R=4, c_in=c_in, c_out=c_out)

    @classmethod
    def desk(cls, c_in=2, c_out=1):
        return cls(N=64, L=20, B=64, H=128, P=3, X=6, R=2, c_in=c_in, c_out=c_out)


def param_shapes(hp: VmeHyperparams) -> dict:
    """Ordered name -> shape map; fan-in for initialisation is prod(shape[1:])."""
    shapes = {
        "encoder": (hp.N, hp.c_in, hp.L),
        "bottleneck.weight": (hp.B, hp.N, 1),
        "bottleneck.bias": (hp.B,),
    }
    for i in range(hp.R * hp.X):
        p = f"blocks.{i}."
        shapes.update({
            p + "in.weight": (hp.H, hp.B, 1),
            p + "in.bias": (hp.H,),
            p + "prelu1": (1,),
            p + "norm1.gain": (hp.H,),
            p + "norm1.bias": (hp.H,),
            p + "depthwise.weight": (hp.H, 1, hp.P),
            p + "depthwise.bias": (hp.H,),
            p + "prelu2": (1,),
            p + "norm2.gain": (hp.H,),
            p + "norm2.bias": (hp.H,),
            p + "out.weight": (hp.B, hp.H, 1),
            p + "out.bias": (hp.B,),
        })
    shapes.update({
        "unbottleneck.weight": (hp.N, hp.B, 1),
        "unbottleneck.bias": (hp.N,),
        "decoder": (hp.N, hp.c_out, hp.L),
    })
    return shapes


def param_count(hp: VmeHyperparams) -> int:
    """Closed-form number of scalar parameters."""
    N, L, B, H, P = hp.N, hp.L, hp.B, hp.H, hp.P
    per_block = (H * B + H) + 1 + 2 * H + (H * P + H) + 1 + 2 * H + (B * H + B)
    return (N * hp.c_in * L + (B * N + B) + hp.R * hp.X * per_block
            + (N * B + N) + N * hp.c_out * L)


def receptive_field(hp: VmeHyperparams) -> int:
    """Receptive field of the block stack in encoder frames."""
    return 1 + hp.R * sum((hp.P - 1) * 2 ** x for x in range(hp.X))


def init_params(hp: VmeHyperparams, seed: int = 0, dtype=torch.float32) -> dict:
    """Uniform(-k, k), k = 1/sqrt(fan_in); PReLU slopes 0.25, norm gains 1, biases 0."""
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(hp).items():
        if name.endswith(("prelu1", "prelu2")):
            t = torch.full(shape, 0.25, dtype=torch.float64)
        elif name.endswith("gain"):
            t = torch.ones(shape, dtype=torch.float64)
        elif ".norm" in name and name.endswith("bias"):
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            fan_in = math.prod(shape[1:]) if len(shape) > 1 else _bias_fan_in(name, hp)
            k = 1.0 / math.sqrt(fan_in)
            t = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * k
        params[name] = t.to(dtype)
    return params


def _bias_fan_in(name: str, hp: VmeHyperparams) -> int:
    if name.startswith("bottleneck"):
        return hp.N
    if name.startswith("unbottleneck"):
        return hp.B
    if name.endswith("in.bias"):
        return hp.B
    if name.endswith("depthwise.bias"):
        return hp.P
    return hp.H  # out.bias


def num_frames(length: int, hp: VmeHyperparams) -> int:
    return math.ceil(length / hp.stride)


def encode(params: dict, x: torch.Tensor, hp: VmeHyperparams) -> torch.Tensor:
    """(batch, c_in, T) -> (batch, N, K) with K = ceil(T / stride)."""
    if x.shape[1] != hp.c_in:
        raise ValueError(f"expected {hp.c_in} input channels, got {x.shape[1]}")
    K = num_frames(x.shape[-1], hp)
    pad = (K + 1) * hp.stride - x.shape[-1]
    x = F.pad(x, (0, pad))
    return F.relu(F.conv1d(x, params["encoder"], stride=hp.stride))


def global_layer_norm(x, gain, bias):
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
    return (x - mean) / torch.sqrt(var + NORM_EPS) * gain[:, None] + bias[:, None]


def block_forward(params: dict, h: torch.Tensor, i: int, hp: VmeHyperparams) -> torch.Tensor:
    p = f"blocks.{i}."
    dilation = 2 ** (i % hp.X)
    y = F.conv1d(h, params[p + "in.weight"], params[p + "in.bias"])
    y = F.prelu(y, params[p + "prelu1"])
    y = global_layer_norm(y, params[p + "norm1.gain"], params[p + "norm1.bias"])
    y = F.conv1d(y, params[p + "depthwise.weight"], params[p + "depthwise.bias"],
                 padding=dilation * (hp.P - 1) // 2, dilation=dilation, groups=hp.H)
    y = F.prelu(y, params[p + "prelu2"])
    y = global_layer_norm(y, params[p + "norm2.gain"], params[p + "norm2.bias"])
    return h + F.conv1d(y, params[p + "out.weight"], params[p + "out.bias"])


def tcn_forward(params: dict, latent: torch.Tensor, hp: VmeHyperparams) -> torch.Tensor:
    h = F.conv1d(latent, params["bottleneck.weight"], params["bottleneck.bias"])
    for i in range(hp.R * hp.X):
        h = block_forward(params, h, i, hp)
    return F.relu(F.conv1d(h, params["unbottleneck.weight"], params["unbottleneck.bias"]))


def decode(params: dict, latent: torch.Tensor, length: int, hp: VmeHyperparams) -> torch.Tensor:
    """(batch, N, K) -> (batch, c_out, length) by overlap-add of decoder kernels."""
    y = F.conv_transpose1d(latent, params["decoder"], stride=hp.stride)
    return y[..., :length]


def forward(params: dict, x: torch.Tensor, hp: VmeHyperparams) -> torch.Tensor:
    """Batched tensor forward pass, (batch, c_in, T) -> (batch, c_out, T)."""
    return decode(params, tcn_forward(params, encode(params, x, hp), hp), x.shape[-1], hp)


def vme_forward(params: dict, r: MultichannelWaveform, hp: VmeHyperparams,
                output_ids=None) -> MultichannelWaveform:
    """Estimate the virtual channels for one multichannel recording."""
    if r.num_channels != hp.c_in:
        raise ValueError(f"network expects {hp.c_in} input channels, got {r.num_channels}")
    if len(r) < hp.L:
        raise ValueError(f"input must have at least L={hp.L} samples, got {len(r)}")
    dtype = next(iter(params.values())).dtype
    with torch.no_grad():
        x = torch.from_numpy(r.samples).to(dtype)[None]
        y = forward(params, x, hp)[0].double().numpy()
    if output_ids is None:
        output_ids = tuple(range(1, hp.c_out + 1))
    return MultichannelWaveform(y, r.sample_rate, output_ids)


def save_checkpoint(path, hp: VmeHyperparams, tensors: dict, meta: dict | None = None) -> None:
    """Write a checkpoint container.

    Layout: 8-byte magic ``VMECKPT\\0``, uint32 LE header length, UTF-8 JSON
    header, then the raw little-endian tensor payloads in header order. The
    header holds ``version``, ``hyperparams``, ``meta`` and a ``tensors`` list
    of {name, shape, dtype, offset, nbytes}; offsets are relative to the first
    payload byte.
    """
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": CHECKPOINT_VERSION, "hyperparams": asdict(hp),
                         "meta": meta or {}, "tensors": table}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path, dtype=torch.float32):
    """Returns (hyperparams, tensors, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 12 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ValueError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(dtype)
    return VmeHyperparams(**header["hyperparams"]), tensors, header["meta"]
