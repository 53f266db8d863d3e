import numpy as np
import pytest

from mtwb.channel import ChannelConfig

TINY_ENCODER = dict(n_layers=1, d_model=4, n_heads=2)


@pytest.fixture
def tiny_channel():
    return ChannelConfig(n_x=2, n_y=2, n_subcarriers=3, n_clusters=2, n_paths=2, max_delay=2.0)


def rebind(model, point, *dicts):
    """Point every parameter dict of ``model`` at the tensors in ``point``."""
    for d in (model.params,) + dicts:
        for k in d:
            d[k] = point[k]


def param_values(model):
    return {k: v.data for k, v in model.params.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
    report = terminalreporter.config.rootpath / "acceptance_report.txt"
    report.write_text("\n".join(sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1]))) + "\n")
