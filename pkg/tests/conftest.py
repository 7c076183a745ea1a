import numpy as np
import pytest

from hiernas.module_graph import INPUT, OUTPUT, LayerOp, LayerRef, ModuleDef, ModuleRef
from hiernas.registry import initialize, layer_ops

FMNIST_OPS = ["conv1_32", "conv2_32", "conv3_32", "pool2", "pool3", "pool5"]
NASBENCH_OPS = ["conv1x1", "conv3x3", "maxpool3x3"]

ACCEPTANCE_LINES = []


def layer(label):
    return LayerRef(LayerOp(label))


def chain(refs):
    """Module whose nodes form a single INPUT -> ... -> OUTPUT chain."""
    n = len(refs)
    edges = [(INPUT, 0), *((i, i + 1) for i in range(n - 1)), (n - 1, OUTPUT)]
    return ModuleDef.build(refs, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fmnist_lists():
    return initialize(layer_ops(FMNIST_OPS))


@pytest.fixture
def nasbench_lists():
    return initialize(layer_ops(NASBENCH_OPS))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
