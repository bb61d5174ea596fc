import dataclasses

import numpy as np
import pytest

from moebd import harness
from moebd.dataset import PoisonConfig
from moebd.pmoe import ModelConfig
from moebd.triggers import TriggerSpec

TINY_DATA = harness.DataConfig(num_classes=3, per_class=24, test_per_class=6, h=8, w=8, channels=3, seed=1)
TINY_MODEL = ModelConfig(l=4, k=2, n=2, hidden=4, num_classes=3, summary=4)
TINY_TRAIN = harness.TrainConfig(epochs=2, lr=0.1, batch=8)


@pytest.fixture
def tiny_cfg():
    spec = TriggerSpec("square", size_px=2)
    return harness.ExperimentConfig(TINY_MODEL, PoisonConfig(0.1, spec), TINY_TRAIN, TINY_DATA, repeats=2, seed=5, name="tiny")


@pytest.fixture
def tiny_data():
    return harness.load_data(TINY_DATA)


class ConstantModel:
    """Stand-in predicting a fixed label, for metric definition tests."""

    def __init__(self, label):
        self.label = label


# one line per acceptance criterion, filled by test_acceptance and echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
