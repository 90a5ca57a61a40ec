import numpy as np
import pytest

from pmgmra.covertree import build_cover_tree
from pmgmra.dyadic import DimPolicy, DyadicParams, build_dyadic_tree
from pmgmra.wavelets import build_wavelets


def mnist_like(n, seed=0):
    """``n`` 28x28 u8 images of one anisotropic Gaussian blob each.

    Stands in for MNIST digits: same shape and dtype, a low-dimensional
    image manifold, no repeated images.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    cx, cy = rng.uniform(7, 21, (2, n))
    sx, sy = rng.uniform(1.5, 4.5, (2, n))
    amp = rng.uniform(120, 255, n)
    img = amp[:, None, None] * np.exp(
        -0.5 * (((xx - cx[:, None, None]) / sx[:, None, None]) ** 2
                + ((yy - cy[:, None, None]) / sy[:, None, None]) ** 2))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gmra(X, policy="energy:0.95", min_cell_size=10):
    ct = build_cover_tree(X)
    tree = build_dyadic_tree(ct, X, DyadicParams(DimPolicy.parse(policy), min_cell_size))
    return ct, tree, build_wavelets(tree)


@pytest.fixture(scope="session")
def cloud_500x10():
    return np.random.default_rng(500).random((500, 10))


@pytest.fixture(scope="session")
def model_500x10(cloud_500x10):
    return gmra(cloud_500x10)[2]


# -- acceptance summary --------------------------------------------------------

_ACCEPTANCE = {}
_DETAILS = {}


@pytest.fixture
def measured(request):
    """Record the measured value of an acceptance criterion for the summary."""
    def note(text):
        _DETAILS[request.node.name] = text
    return note


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _ACCEPTANCE[name] = report.outcome
    elif report.outcome == "failed":
        _ACCEPTANCE.setdefault(name, "error")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        status = "PASS" if _ACCEPTANCE[name] == "passed" else "FAIL"
        detail = _DETAILS.get(name, "")
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))
