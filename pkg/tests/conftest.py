import numpy as np
import pytest

from madis_stereo.data import synth_generate
from madis_stereo.model import MaDisStereo, ModelConfig


def toy_config(**overrides) -> ModelConfig:
    """32x64 images, patch 16, embed 32, encoder/decoder depth 2."""
    base = dict(
        image_h=32,
        image_w=64,
        patch_size=16,
        embed_dim=32,
        encoder_depth=2,
        decoder_depth=2,
        num_heads=2,
        head_channels=8,
        mask_ratio=0.4,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_model(toy_cfg):
    return MaDisStereo(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def toy_samples():
    return [synth_generate(100 + s, 32, 64) for s in range(4)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}")
