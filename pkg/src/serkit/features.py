"""Log-Mel spectrogram and MFCC feature extraction.

The pipeline from a conditioned waveform to a model input is:

    frame (25 ms Hamming, 10 ms hop) -> |rfft|^2 -> Mel filterbank ->
    ln(clamped) -> per-utterance standardization -> pad/truncate to a
    fixed frame count

Conventions (fixed so golden tests are exact): HTK Mel scale
mel(f) = 2595*log10(1 + f/700); triangular filters with centers uniformly
spaced in Mel, evaluated as the mean of the triangle over each FFT bin's
frequency band (pure center sampling leaves the lowest filters empty at
128 Mel bins / 512-point FFT); natural log with an absolute floor;
population standard deviation throughout.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform, condition, resample, trim_silence
from .errors import (
    BadMagic,
    ConstantFeatures,
    CorruptCache,
    DegenerateFilter,
    ShapeMismatch,
    SignalTooShort,
)

FEATURE_MAGIC = b"SERFEAT1"


@dataclass
class FramingSpec:
    """Short-time analysis geometry; only Hamming windows are supported."""

    frame_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hamming"

    def __post_init__(self):
        if not (self.frame_ms > self.hop_ms > 0):
            raise ValueError("need frame_ms > hop_ms > 0")
        if self.window != "hamming":
            raise ValueError(f"unsupported window {self.window!r}")

    def frame_len(self, sample_rate: int) -> int:
        return _whole_samples(self.frame_ms, sample_rate, "frame")

    def hop(self, sample_rate: int) -> int:
        return _whole_samples(self.hop_ms, sample_rate, "hop")


@dataclass
class MelSpec:
    """Mel filterbank and log-compression parameters."""

    n_fft: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax):
            raise ValueError("need 0 <= fmin < fmax")


@dataclass
class DspConfig:
    """Everything featurization needs beyond the waveform itself."""

    framing: FramingSpec = field(default_factory=FramingSpec)
    mel: MelSpec = field(default_factory=MelSpec)
    target_frames: int = 300
    mfcc_coeffs: int = 13


@dataclass
class FeatureMap:
    """F x T real matrix: Mel bins along rows, frames along columns."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"feature map must be 2-D, got {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _whole_samples(ms: float, sample_rate: int, what: str) -> int:
    exact = sample_rate * ms / 1000.0
    n = round(exact)
    if abs(exact - n) > 1e-9:
        raise ValueError(f"{what} of {ms} ms is not a whole number of samples at {sample_rate} Hz")
    return int(n)


def hamming_window(n: int) -> np.ndarray:
    """w[k] = 0.54 - 0.46*cos(2*pi*k/(n-1)); w[0] = w[n-1] = 0.08."""
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_signal(w: Waveform, spec: FramingSpec) -> np.ndarray:
    """Slice into overlapping frames and apply the Hamming window.

    Returns a (T, frame_len) array with T = 1 + floor((n - frame_len)/hop).
    """
    frame_len = spec.frame_len(w.sample_rate)
    hop = spec.hop(w.sample_rate)
    n = len(w.samples)
    if n < frame_len:
        raise SignalTooShort(f"{n} samples < one {frame_len}-sample frame")
    n_frames = 1 + (n - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return w.samples[idx] * hamming_window(frame_len)[None, :]


def stft_power(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """Power spectrum per frame: (n_fft/2 + 1, T), columns are |DFT|^2.

    Frames are zero-padded to n_fft; windowing (if any) is the caller's job.
    """
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[1] > n_fft:
        raise ShapeMismatch(f"frame length {frames.shape[1]} exceeds n_fft {n_fft}")
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _ramp_integral(a, b, x0, x1, y0, y1):
    # integral over [a,b] of the line through (x0,y0)-(x1,y1), clipped to [x0,x1]
    lo, hi = max(a, x0), min(b, x1)
    if hi <= lo or x1 <= x0:
        return 0.0
    slope = (y1 - y0) / (x1 - x0)
    anti = lambda x: y0 * (x - x0) + 0.5 * slope * (x - x0) ** 2
    return anti(hi) - anti(lo)


def mel_filterbank(spec: MelSpec, sample_rate: int) -> np.ndarray:
    """Triangular Mel filters as an (n_mels, n_fft/2 + 1) matrix.

    Filter m rises from Mel point m to m+1 and falls to m+2, the points
    being uniformly spaced between mel(fmin) and mel(fmax). Each weight is
    the triangle's mean over the bin's frequency band [(k-1/2), (k+1/2)]*df,
    clipped to [0, Nyquist].
    """
    if spec.fmax > sample_rate / 2:
        raise ValueError(f"fmax {spec.fmax} above Nyquist {sample_rate / 2}")
    n_bins = spec.n_fft // 2 + 1
    pts = mel_to_hz(np.linspace(hz_to_mel(spec.fmin), hz_to_mel(spec.fmax), spec.n_mels + 2))
    df = sample_rate / spec.n_fft
    edges = np.clip((np.arange(n_bins + 1) - 0.5) * df, 0.0, sample_rate / 2.0)

    fb = np.zeros((spec.n_mels, n_bins))
    for m in range(spec.n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        k_lo = max(int(np.searchsorted(edges, lo, side="right")) - 1, 0)
        k_hi = min(int(np.searchsorted(edges, hi, side="left")), n_bins)
        for k in range(k_lo, k_hi):
            a, b = edges[k], edges[k + 1]
            if b <= a:
                continue
            area = _ramp_integral(a, b, lo, c, 0.0, 1.0) + _ramp_integral(a, b, c, hi, 1.0, 0.0)
            fb[m, k] = area / (b - a)
        if not fb[m].any():
            raise DegenerateFilter(f"Mel filter {m} has no support at n_fft={spec.n_fft}")
    return fb


def log_mel(power: np.ndarray, fb: np.ndarray, log_floor: float = 1e-10) -> FeatureMap:
    """ln(max(fb @ power, log_floor)); finite everywhere by construction."""
    power = np.asarray(power, dtype=np.float64)
    if fb.shape[1] != power.shape[0]:
        raise ShapeMismatch(f"filterbank has {fb.shape[1]} columns, power has {power.shape[0]} rows")
    return FeatureMap(np.log(np.maximum(fb @ power, log_floor)))


def normalize_features(fm: FeatureMap) -> FeatureMap:
    """Standardize over all F x T cells (single mean/std per utterance)."""
    mean = fm.values.mean()
    std = fm.values.std()
    if std < 1e-12:
        raise ConstantFeatures("feature map is constant; cannot standardize")
    return FeatureMap((fm.values - mean) / std)


def pad_or_truncate(fm: FeatureMap, target_frames: int) -> FeatureMap:
    """Fix the frame count: keep the centered window when too long,
    right-pad with the map's minimum value when too short."""
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    t = fm.n_frames
    if t == target_frames:
        return fm
    if t > target_frames:
        start = (t - target_frames) // 2
        return FeatureMap(fm.values[:, start:start + target_frames])
    out = np.full((fm.n_mels, target_frames), fm.values.min())
    out[:, :t] = fm.values
    return FeatureMap(out)


def _dct_ii_orthonormal(n: int) -> np.ndarray:
    # C[k, j] = s_k * cos(pi*(j + 1/2)*k/n), s_0 = sqrt(1/n), s_k = sqrt(2/n)
    j = np.arange(n)
    k = np.arange(n)[:, None]
    mat = np.cos(np.pi * (j + 0.5) * k / n)
    mat[0] *= np.sqrt(1.0 / n)
    mat[1:] *= np.sqrt(2.0 / n)
    return mat


def mfcc(fm: FeatureMap, n_coeffs: int = 13) -> np.ndarray:
    """Orthonormal DCT-II along the Mel axis of a (pre-normalization)
    log-Mel map, keeping the first n_coeffs rows: (n_coeffs, T)."""
    if n_coeffs > fm.n_mels:
        raise ValueError(f"n_coeffs {n_coeffs} > n_mels {fm.n_mels}")
    return _dct_ii_orthonormal(fm.n_mels)[:n_coeffs] @ fm.values


def mfcc_stats(fm: FeatureMap, n_coeffs: int = 13) -> np.ndarray:
    """Per-utterance summary for the MLP baseline: mean then std of each
    MFCC coefficient across frames (length 2*n_coeffs)."""
    c = mfcc(fm, n_coeffs)
    return np.concatenate([c.mean(axis=1), c.std(axis=1)])


def featurize_waveform(w: Waveform, dsp: DspConfig, sample_rate: int = 16_000,
                       trim_db: float = -40.0) -> FeatureMap:
    """Full chain from a raw waveform to a normalized, fixed-size map."""
    w = resample(w, sample_rate)
    w = trim_silence(w, trim_db)
    w = condition(w)
    frames = frame_signal(w, dsp.framing)
    power = stft_power(frames, dsp.mel.n_fft)
    fb = mel_filterbank(dsp.mel, sample_rate)
    fm = log_mel(power, fb, dsp.mel.log_floor)
    fm = normalize_features(fm)
    return pad_or_truncate(fm, dsp.target_frames)


def write_features(path, fm: FeatureMap) -> None:
    """Cache format: magic, u32 F, u32 T, then F*T float32 LE row-major."""
    header = FEATURE_MAGIC + struct.pack("<II", fm.n_mels, fm.n_frames)
    body = fm.values.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_features(path) -> FeatureMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:8] != FEATURE_MAGIC:
        raise BadMagic(f"{path}: not a feature cache file")
    f, t = struct.unpack_from("<II", raw, 8)
    body = raw[16:]
    if len(body) != 4 * f * t:
        raise CorruptCache(f"{path}: expected {4 * f * t} value bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(f, t)
    return FeatureMap(values)
