import numpy as np
import pytest
import torch

from stylemaml.core import TrainConfig, set_deterministic
from stylemaml.meta import build_model
from stylemaml.model import ModelConfig
from stylemaml.syndata import GeneratorConfig, SyntheticWorld, make_corpus

set_deterministic()


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(
        hidden=8,
        heads=2,
        kernel=3,
        filter_size=8,
        blocks=1,
        style_dim=4,
        bins=6,
        alphabet_size=10,
        postnet_layers=2,
        postnet_channels=4,
        postnet_kernel=3,
        predictor_channels=4,
        prosody_kernel=3,
        classifier_hidden=4,
        n_classes=3,
        lut_entries=3,
        n_quant_bins=4,
        pitch_range=(-1.0, 1.0),
        energy_range=(0.3, 2.0),
        dropout=0.0,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_generator_config(**kw) -> GeneratorConfig:
    base = dict(
        n_speakers=5,
        n_test_speakers=2,
        n_prosodies=2,
        alphabet_size=10,
        bins=6,
        utterances_per_pseudo=10,
        pretrain_utterances_per_pseudo=4,
        n_meta_val_pseudo=2,
        min_tokens=2,
        max_tokens=4,
        seed=3,
    )
    base.update(kw)
    return GeneratorConfig(**base)


def randomize_style(model, seed=0, scale=0.3):
    """Give the zero-initialised CLN adaptors random weights so style actually reaches the trunk."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name in ("speaker_adaptor", "prosody_adaptor"):
            lin = getattr(model.style_encoder, name)
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g, dtype=lin.weight.dtype) * scale)
    return model


@pytest.fixture(scope="session")
def tiny_world():
    return SyntheticWorld(tiny_generator_config())


@pytest.fixture(scope="session")
def tiny_corpora(tiny_world):
    return make_corpus(tiny_world.cfg, tiny_world)


@pytest.fixture
def tiny_model():
    return randomize_style(build_model(tiny_model_config(), seed=1, dtype=torch.float64))


@pytest.fixture
def train_cfg():
    return TrainConfig()


@pytest.fixture(scope="session")
def default_world():
    return SyntheticWorld(GeneratorConfig())


@pytest.fixture(scope="session")
def default_corpora(default_world):
    return make_corpus(default_world.cfg, default_world)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
