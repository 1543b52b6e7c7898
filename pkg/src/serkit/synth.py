"""Synthetic four-class corpus generator.

Real emotional-speech corpora cannot be bundled, so tests and demos run on
generated utterances whose classes are acoustically far apart by
construction: each class occupies its own fundamental-frequency band and
has a distinct spectral tilt, amplitude envelope, and tremolo. A
nearest-centroid classifier on mean MFCCs separates the classes perfectly,
which is what makes the end-to-end overfit oracle meaningful.

Generation is deterministic: utterance (label, index) draws from its own
counter-keyed stream, so corpora are bitwise reproducible for a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav
from .model import LABELS
from .rng import STREAM_SYNTH, derived_rng
from .train import ManifestRow, write_manifest

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class ClassRecipe:
    """Acoustic signature of one emotion class."""

    f0_range: tuple[float, float]   # fundamental frequency band, Hz
    tilt: float                     # harmonic h gets amplitude h**-tilt
    n_harmonics: int
    tremolo_hz: float               # amplitude modulation rate, 0 = none
    tremolo_depth: float
    attack: float                   # fraction of the utterance ramping up
    decay: float                    # fraction ramping down
    noise_level: float              # broadband noise relative to peak


# Bands are disjoint octaves and tilts range from bright to dark, so the
# classes stay separable after log-Mel compression and normalization.
RECIPES: dict[int, ClassRecipe] = {
    0: ClassRecipe((270.0, 330.0), 0.3, 20, 0.0, 0.0, 0.02, 0.10, 0.010),  # anger
    1: ClassRecipe((190.0, 240.0), 0.8, 16, 6.0, 0.5, 0.10, 0.10, 0.010),  # happiness
    2: ClassRecipe((90.0, 120.0), 2.0, 12, 0.0, 0.0, 0.35, 0.40, 0.005),   # sadness
    3: ClassRecipe((140.0, 170.0), 1.3, 14, 0.0, 0.0, 0.15, 0.15, 0.008),  # neutral
}


def synth_utterance(label: int, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """One harmonic utterance for the class, float64 in [-1, 1]."""
    recipe = RECIPES[label]
    duration = rng.uniform(1.2, 2.2)
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(*recipe.f0_range)
    drift = rng.uniform(-0.02, 0.02)  # slow pitch glide, +-2 percent
    inst_freq = f0 * (1.0 + drift * t / duration)
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate

    voiced = np.zeros(n)
    for h in range(1, recipe.n_harmonics + 1):
        if h * f0 >= sample_rate / 2:
            break
        amp = h ** -recipe.tilt
        voiced += amp * np.sin(h * phase + rng.uniform(0.0, 2.0 * np.pi))
    voiced /= np.abs(voiced).max()

    envelope = np.ones(n)
    n_attack = max(1, int(recipe.attack * n))
    n_decay = max(1, int(recipe.decay * n))
    envelope[:n_attack] = np.linspace(0.0, 1.0, n_attack)
    envelope[n - n_decay:] = np.linspace(1.0, 0.0, n_decay)
    if recipe.tremolo_hz > 0:
        envelope *= 1.0 - recipe.tremolo_depth * 0.5 * (
            1.0 + np.sin(2.0 * np.pi * recipe.tremolo_hz * t))

    samples = voiced * envelope
    samples += recipe.noise_level * rng.standard_normal(n)
    samples *= rng.uniform(0.5, 0.9) / np.abs(samples).max()

    # surround with near-silence so the trimming stage has work to do
    lead = int(rng.uniform(0.05, 0.15) * sample_rate)
    tail = int(rng.uniform(0.05, 0.15) * sample_rate)
    quiet = 1e-4
    return np.concatenate([
        quiet * rng.standard_normal(lead),
        samples,
        quiet * rng.standard_normal(tail),
    ])


def generate_corpus(out_dir, n_per_class: int = 4, seed: int = 7,
                    sample_rate: int = SAMPLE_RATE) -> list[ManifestRow]:
    """Write n_per_class WAVs per class plus ``manifest.csv``; returns rows
    whose paths are absolute. Deterministic in the seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = []
    relative: list[ManifestRow] = []
    for label, name in enumerate(LABELS):
        for item in range(n_per_class):
            rng = derived_rng(seed, STREAM_SYNTH, label, item)
            samples = synth_utterance(label, rng, sample_rate)
            filename = f"{name}_{item:03d}.wav"
            save_wav(out_dir / filename, Waveform(samples, sample_rate))
            rows.append(ManifestRow(str(out_dir / filename), label))
            relative.append(ManifestRow(filename, label))
    write_manifest(relative, out_dir / "manifest.csv")
    return rows
