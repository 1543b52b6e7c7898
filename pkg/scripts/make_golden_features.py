"""Regenerate the golden log-mel fixtures under tests/data/.

The reference implementation here is deliberately independent of the
package: framing and the DFT are written as direct sums, and the mel
filter weights are obtained by numerically averaging each triangle over
the FFT bin bands (midpoint rule, 4096 points per bin) instead of the
library's closed-form integral. Agreement between the two paths is what
the golden tests certify.

Usage: python3 scripts/make_golden_features.py
"""

import pathlib

import numpy as np

OUT_DIR = pathlib.Path(__file__).resolve().parent.parent / "tests" / "data"

SAMPLE_RATE = 16_000
FRAME_MS = 25.0
HOP_MS = 10.0
LOG_FLOOR = 1e-10


def reference_hamming(n: int) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def reference_frames(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - frame_len) // hop
    window = reference_hamming(frame_len)
    return np.stack([x[t * hop:t * hop + frame_len] * window
                     for t in range(n_frames)])


def reference_power(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """|DFT|^2 of zero-padded frames via an explicit Fourier matrix,
    one-sided; returns (n_fft/2 + 1, n_frames)."""
    n_bins = n_fft // 2 + 1
    padded = np.zeros((frames.shape[0], n_fft))
    padded[:, :frames.shape[1]] = frames
    n = np.arange(n_fft)
    k = np.arange(n_bins)[:, None]
    fourier = np.exp(-2j * np.pi * k * n / n_fft)
    spectrum = fourier @ padded.T
    return np.abs(spectrum) ** 2


def reference_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                         fmin: float, fmax: float,
                         points_per_bin: int = 4096) -> np.ndarray:
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    nyquist = sample_rate / 2.0
    pts = from_mel(np.linspace(to_mel(fmin), to_mel(fmax), n_mels + 2))

    # midpoint grid over each bin's frequency band, clipped to [0, Nyquist]
    lo_edges = np.clip((np.arange(n_bins) - 0.5) * df, 0.0, nyquist)
    hi_edges = np.clip((np.arange(n_bins) + 0.5) * df, 0.0, nyquist)
    frac = (np.arange(points_per_bin) + 0.5) / points_per_bin
    grid = lo_edges[:, None] + (hi_edges - lo_edges)[:, None] * frac[None, :]

    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = pts[m], pts[m + 1], pts[m + 2]
        rising = (grid - lo) / (center - lo)
        falling = (hi - grid) / (hi - center)
        tri = np.clip(np.minimum(rising, falling), 0.0, None)
        fb[m] = tri.mean(axis=1)
    # degenerate bands (both edges clipped to the same point) sample the center
    empty = hi_edges <= lo_edges
    if empty.any():
        fb[:, empty] = 0.0
    return fb


def reference_log_mel(x: np.ndarray, sample_rate: int, n_fft: int,
                      n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    frame_len = int(round(sample_rate * FRAME_MS / 1000.0))
    hop = int(round(sample_rate * HOP_MS / 1000.0))
    frames = reference_frames(x, frame_len, hop)
    power = reference_power(frames, n_fft)
    fb = reference_filterbank(n_mels, n_fft, sample_rate, fmin, fmax)
    return np.log(np.maximum(fb @ power, LOG_FLOOR))


def make_waveform(duration: float = 0.35, seed: int = 2024) -> np.ndarray:
    """Tones at 440/1000/3333 Hz with an envelope, plus -60 dB noise so
    every mel band carries energy well above the log floor."""
    rng = np.random.Generator(np.random.Philox(seed))
    t = np.arange(int(duration * SAMPLE_RATE)) / SAMPLE_RATE
    envelope = np.minimum(t / 0.05, 1.0) * np.exp(-1.5 * t)
    x = (0.6 * np.sin(2 * np.pi * 440.0 * t)
         + 0.3 * np.sin(2 * np.pi * 1000.0 * t + 0.7)
         + 0.2 * envelope * np.sin(2 * np.pi * 3333.0 * t)
         + 1e-3 * rng.standard_normal(t.size))
    return x


def main() -> None:
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    x = make_waveform()
    for n_mels, n_fft in ((128, 512), (40, 512)):
        fmin, fmax = 0.0, 8000.0
        logmel = reference_log_mel(x, SAMPLE_RATE, n_fft, n_mels, fmin, fmax)
        out = OUT_DIR / f"golden_logmel_{n_mels}.npz"
        np.savez(
            out,
            samples=x,
            sample_rate=SAMPLE_RATE,
            frame_ms=FRAME_MS,
            hop_ms=HOP_MS,
            n_fft=n_fft,
            n_mels=n_mels,
            fmin=fmin,
            fmax=fmax,
            log_floor=LOG_FLOOR,
            logmel=logmel,
        )
        print(f"wrote {out} (logmel {logmel.shape}, "
              f"range [{logmel.min():.3f}, {logmel.max():.3f}])")


if __name__ == "__main__":
    main()
