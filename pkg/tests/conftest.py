import numpy as np
import pytest

from edgemga.models import ConvNetClassifier, Layer, ModelSpec

TINY_SPEC = ModelSpec(
    name="tiny",
    input_shape=(1, 8, 8),
    n_classes=3,
    layers=(
        Layer("conv", 3),
        Layer("relu"),
        Layer("maxpool", 2),
        Layer("conv", 4),
        Layer("relu"),
        Layer("gap"),
        Layer("dense", 3),
    ),
)


def tiny_model(seed=0, spec=TINY_SPEC):
    return ConvNetClassifier(spec=spec, random_state=seed).initialize()


@pytest.fixture
def tiny():
    return tiny_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
