import numpy as np
import pytest

from saferealign import kernels
from saferealign.tensors import ParamSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return request.param


def random_paramset(rng, shapes, dtype=np.float32, scale=1.0):
    return ParamSet({n: (rng.standard_normal(s) * scale).astype(dtype) for n, s in shapes.items()})


SHAPES = {"layer.1.weight": (6, 5), "layer.1.bias": (6,), "layer.2.weight": (4, 6), "layer.0.embed": (7, 5)}


# acceptance verdicts, one line per criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
