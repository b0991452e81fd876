import os
import sys

import pytest

from turnpike_resnet.softce import SmoothingSpec

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "tools"))


@pytest.fixture(scope="session")
def spirals_spec():
    return SmoothingSpec(2, 0.95)


@pytest.fixture(scope="session")
def mnist_spec():
    return SmoothingSpec(10, 0.91)


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """(images_path, labels_path) of a class-interleaved 5000-image MNIST sample."""
    pytest.importorskip("mlxtend")
    from make_mnist_subset import write_idx

    return write_idx(tmp_path_factory.mktemp("mnist"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
