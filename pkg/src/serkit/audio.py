"""WAV decoding and waveform conditioning.

Only RIFF/WAVE files with 16-bit PCM or 32-bit IEEE float samples are
accepted. All downstream processing works on mono float64 waveforms at a
canonical sample rate (16 kHz by default); multi-channel inputs are
downmixed by arithmetic mean.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.signal import resample_poly

from .errors import ConstantSignal, MalformedWav, SignalTooShort, UnsupportedEncoding

TARGET_RATE = 16_000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    """Mono audio signal: float amplitudes plus their sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def _read_chunks(raw: bytes):
    """Yield (chunk_id, payload_offset, declared_size) for every RIFF chunk."""
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        yield cid, pos + 8, size
        pos += 8 + size + (size & 1)  # chunks are word-aligned


def load_wav(path) -> Waveform:
    """Decode a RIFF/WAVE file into a mono waveform.

    16-bit PCM samples are scaled by 1/32768; float32 samples are taken
    as-is. Channels are averaged sample-wise.
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    for cid, off, size in _read_chunks(raw):
        if cid == b"fmt " and fmt is None:
            if off + size > len(raw) or size < 16:
                raise MalformedWav(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", raw, off)
        elif cid == b"data" and data is None:
            if off + size > len(raw):
                raise MalformedWav(
                    f"{path}: data chunk declares {size} bytes but only "
                    f"{len(raw) - off} remain"
                )
            data = raw[off:off + size]
    if fmt is None or data is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")

    tag, n_channels, sample_rate, _, block_align, bits = fmt
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        # subformat GUID starts 8 bytes into the extension; its first u16 is the tag
        for cid, off, size in _read_chunks(raw):
            if cid == b"fmt ":
                if size < 40:
                    raise MalformedWav(f"{path}: extensible fmt chunk too short")
                (tag,) = struct.unpack_from("<H", raw, off + 24)
                break
    if tag == _WAVE_FORMAT_PCM:
        if bits != 16:
            raise UnsupportedEncoding(f"{path}: {bits}-bit PCM (only 16-bit supported)")
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT:
        if bits != 32:
            raise UnsupportedEncoding(f"{path}: {bits}-bit float (only 32-bit supported)")
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncoding(f"{path}: format tag 0x{tag:04x}")

    if n_channels < 1:
        raise MalformedWav(f"{path}: zero channels")
    frame_bytes = dtype.itemsize * n_channels
    if block_align and block_align != frame_bytes:
        raise MalformedWav(f"{path}: block align {block_align} != {frame_bytes}")
    if len(data) % frame_bytes:
        raise MalformedWav(f"{path}: data size not a whole number of frames")

    frames = np.frombuffer(data, dtype=dtype).astype(np.float64) * scale
    if frames.size == 0:
        raise MalformedWav(f"{path}: empty data chunk")
    mono = frames.reshape(-1, n_channels).mean(axis=1)
    return Waveform(samples=mono, sample_rate=int(sample_rate))


def save_wav(path, w: Waveform) -> None:
    """Write a mono waveform as 16-bit PCM, clipping to [-1, 1)."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    hdr = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, _WAVE_FORMAT_PCM, 1, w.sample_rate,
        w.sample_rate * 2, 2, 16,
        b"data", len(data),
    )
    with open(path, "wb") as fh:
        fh.write(hdr + data)


def _sinc_prototype(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.6) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for polyphase resampling (unit DC gain).

    The tap count is odd so the filter is symmetric about an integer index;
    an even count would leave a half-sample group delay the polyphase
    machinery cannot compensate.
    """
    n_taps = taps_per_phase * up + 1
    cutoff = 1.0 / max(up, down)  # fraction of the upsampled Nyquist
    m = np.arange(n_taps) - (n_taps - 1) / 2.0
    h = cutoff * np.sinc(cutoff * m) * np.kaiser(n_taps, beta)
    return h / h.sum()


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Rate-convert via polyphase windowed-sinc interpolation.

    Identity (the input object's samples pass through bitwise) when the
    rates already match. Output length is ceil(n * target/orig), so the
    duration is preserved within one output sample.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if w.sample_rate == target_rate:
        return Waveform(samples=w.samples, sample_rate=target_rate)
    g = gcd(target_rate, w.sample_rate)
    up, down = target_rate // g, w.sample_rate // g
    h = _sinc_prototype(up, down)
    out = resample_poly(w.samples, up, down, window=h)
    return Waveform(samples=out, sample_rate=target_rate)


def condition(w: Waveform) -> Waveform:
    """Standardize to zero mean and unit variance (population std)."""
    if len(w.samples) == 0:
        raise ValueError("empty waveform")
    mean = w.samples.mean()
    std = w.samples.std()
    if std < 1e-12:
        raise ConstantSignal("signal is constant/silent; cannot standardize")
    return Waveform(samples=(w.samples - mean) / std, sample_rate=w.sample_rate)


def trim_silence(w: Waveform, threshold_db: float = -40.0) -> Waveform:
    """Strip leading/trailing low-energy regions.

    Frame energies (25 ms frames, 10 ms hop) are compared in dB against the
    peak frame. The cut points are the end of the last leading below-threshold
    frame and the start of the first trailing one: if a whole frame is quiet,
    the signal provably carries no energy across its span, which keeps the
    bounds tight to within one hop of the actual onset/offset. Returns the
    input unchanged when no frame exceeds the threshold (or the signal is
    shorter than one frame). The output is always a contiguous slice.
    """
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative (relative to peak)")
    n = len(w.samples)
    frame_len = int(round(w.sample_rate * 0.025))
    hop = int(round(w.sample_rate * 0.010))
    if n < frame_len:
        return w

    n_frames = 1 + (n - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    energies = (w.samples[idx] ** 2).sum(axis=1)
    peak = energies.max()
    if peak <= 0.0:
        return w

    # threshold on log-energy: e/peak in dB
    loud = energies > peak * 10.0 ** (threshold_db / 10.0)
    if not loud.any():
        return w
    first, last = int(np.argmax(loud)), int(n_frames - 1 - np.argmax(loud[::-1]))

    start = (first - 1) * hop + frame_len if first > 0 else 0
    stop = (last + 1) * hop if last < n_frames - 1 else n
    if start >= stop:  # lone loud frame whose quiet neighbours overlap it
        start = first * hop
        stop = min(last * hop + frame_len, n)
    return Waveform(samples=w.samples[start:stop], sample_rate=w.sample_rate)
