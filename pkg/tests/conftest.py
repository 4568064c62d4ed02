import numpy as np
import pytest
from hypothesis import settings

from uniwrv.model import ModelConfig, UniWRV
from uniwrv.tensorkit import backend

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

TINY = dict(base_channels=2, blocks_per_scale=1, prior_entries=4, paths=2, routing_layers=1,
            heads=2, points=2, flow_width=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=backend.available())
def each_backend(request):
    prev = backend.name
    backend.use(request.param)
    yield request.param
    backend.use(prev)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY, dtype="float64")


@pytest.fixture
def tiny_model(tiny_cfg):
    return UniWRV(tiny_cfg)


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the lines are repeated in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
