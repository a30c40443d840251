from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from costeps.model import DiT, ModelConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(layers=2, dim=16, heads=2, grid=(4, 5, 5), mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> DiT:
    return DiT(tiny_config(), seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
