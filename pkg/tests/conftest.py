import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from serkit.model import ArchConfig
from serkit.synth import generate_corpus

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def sine(freq: float, duration: float, sample_rate: int = 16_000,
         amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(duration * sample_rate)) / sample_rate
    return amplitude * np.sin(2.0 * np.pi * freq * t)


@pytest.fixture
def tiny_arch() -> ArchConfig:
    """Smallest architecture that exercises every layer type."""
    return ArchConfig(n_mels=8, input_frames=16, conv_channels=(2, 3, 4),
                      n_encoder_layers=1, n_heads=2, d_model=16, d_ff=32)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """16 deterministic labeled utterances plus their manifest rows."""
    out = tmp_path_factory.mktemp("corpus")
    rows = generate_corpus(out, n_per_class=4, seed=7)
    return rows, out
