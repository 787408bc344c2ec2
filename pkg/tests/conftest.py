import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from convertlite.encoder import ModelConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE = []


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=40, oov_buckets=8, d_model=32, attn_dim=16, ff_dim=64, n_layers=2,
                max_relative_attention=(3, 5), head_hidden=64, head_layers=3, out_dim=32)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report():
    """Record one acceptance line: report(name, passed, detail)."""
    def _report(name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
