import numpy as np
import pytest
import torch

from chagasnet.ingest import STANDARD_LEADS, ECGRecord


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def twelve_lead():
    def make(n=4000, fs=500.0, rid="r0", pid="p0", t=1_600_000_000, seed=0):
        sig = np.random.default_rng(seed).normal(size=(12, n)).astype(np.float32)
        return ECGRecord(sig, list(STANDARD_LEADS), fs, t, pid, rid)
    return make


def tiny_model_config(**kw):
    from chagasnet.model import ModelConfig
    base = dict(stem_channels=16, n_filters=16, bottleneck=16, n_blocks=2)
    base.update(kw)
    return ModelConfig(**base)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
