"""RIFF/WAVE reader and writer for PCM16 and IEEE float32 data."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .signal import MultichannelWaveform

PCM = 0x0001
IEEE_FLOAT = 0x0003
EXTENSIBLE = 0xFFFE


class WavError(OSError):
    """Malformed or unsupported WAV content."""


def _chunks(data: bytes):
    pos = 12
    while pos < len(data):
        if pos + 8 > len(data):
            raise WavError(f"truncated chunk header at byte {pos}")
        cid, size = struct.unpack_from("<4sI", data, pos)
        name = cid.decode("ascii", "replace")
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavError(f"chunk '{name}' truncated: declares {size} bytes, "
                           f"{len(body)} available")
        yield name, body
        pos += 8 + size + (size & 1)


def read_wav(path, channel_ids=None) -> MultichannelWaveform:
    """Read a WAV file into a (channels, samples) float32 waveform.

    PCM16 samples are scaled by 1/32768.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: missing RIFF/WAVE header")
    fmt = None
    payload = None
    for name, body in _chunks(data):
        if name == "fmt ":
            if len(body) < 16:
                raise WavError(f"{path}: chunk 'fmt ' too short ({len(body)} bytes)")
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == EXTENSIBLE:
                if len(body) < 40:
                    raise WavError(f"{path}: chunk 'fmt ' extensible header too short")
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, align, bits)
        elif name == "data":
            payload = body
    if fmt is None:
        raise WavError(f"{path}: no 'fmt ' chunk")
    if payload is None:
        raise WavError(f"{path}: no 'data' chunk")
    tag, channels, rate, align, bits = fmt
    if channels < 1:
        raise WavError(f"{path}: chunk 'fmt ' declares {channels} channels")
    if (tag, bits) == (PCM, 16):
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif (tag, bits) == (IEEE_FLOAT, 32):
        dtype, scale = np.dtype("<f4"), None
    else:
        raise WavError(f"{path}: chunk 'fmt ' has unsupported codec tag={tag} bits={bits}")
    frame_bytes = dtype.itemsize * channels
    if len(payload) % frame_bytes:
        raise WavError(f"{path}: chunk 'data' length {len(payload)} is not a multiple "
                       f"of the {frame_bytes}-byte frame size")
    x = np.frombuffer(payload, dtype=dtype).reshape(-1, channels).T
    x = x.astype(np.float32) * np.float32(scale) if scale else x.astype(np.float32)
    return MultichannelWaveform(x, rate, channel_ids)


def read_wav_comment(path) -> str | None:
    """Text of the LIST/INFO ICMT chunk, if present."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: missing RIFF/WAVE header")
    for name, body in _chunks(data):
        if name == "LIST" and body[:4] == b"INFO":
            pos = 4
            while pos + 8 <= len(body):
                sub, size = struct.unpack_from("<4sI", body, pos)
                if sub == b"ICMT":
                    return body[pos + 8:pos + 8 + size].rstrip(b"\0").decode("utf-8")
                pos += 8 + size + (size & 1)
    return None


def write_wav(path, wave: MultichannelWaveform, subtype: str = "float32",
              comment: str | None = None) -> None:
    """Write interleaved samples; ``subtype`` is "float32" or "pcm16".

    ``comment`` is stored in a LIST/INFO ICMT chunk after the data.
    """
    x = wave.samples
    channels = x.shape[0]
    if subtype == "float32":
        tag, bits = IEEE_FLOAT, 32
        payload = np.ascontiguousarray(x.T, dtype="<f4").tobytes()
    elif subtype == "pcm16":
        tag, bits = PCM, 16
        q = np.clip(np.round(x.astype(np.float64) * 32768.0), -32768, 32767)
        payload = np.ascontiguousarray(q.T, dtype="<i2").tobytes()
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, wave.sample_rate,
                      wave.sample_rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\0"
    if comment is not None:
        text = comment.encode("utf-8") + b"\0"
        if len(text) & 1:
            text += b"\0"
        info = b"INFO" + b"ICMT" + struct.pack("<I", len(text)) + text
        body += b"LIST" + struct.pack("<I", len(info)) + info
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
