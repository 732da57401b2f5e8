import numpy as np
import pytest

from rgbtreg.encoders import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config() -> EncoderConfig:
    """Divisor-8 widths with pooling ratios small enough for 32px inputs."""
    return EncoderConfig.scaled(8, self_ratios=((2, 4), (1, 2)), cross_ratios=((1, 2), (1,)))
