import numpy as np
import pytest

from proxforge.linops import GradientOp, LinOp, MatrixOp
from proxforge.prox import L1, SqL2Dist, Zero
from proxforge.scheme import Problem
from proxforge.tensor import RngStream


class CountingOp(LinOp):
    """Wraps an operator and counts forward and adjoint applications."""

    def __init__(self, op):
        super().__init__(op.domain_shape, op.range_shape, op.norm_bound)
        self.op = op
        self.n_forward = 0
        self.n_adjoint = 0

    def _forward(self, x):
        self.n_forward += 1
        return self.op._forward(x)

    def _adjoint(self, y):
        self.n_adjoint += 1
        return self.op._adjoint(y)


def tv_toy(n=12, seed=0, lam=0.3, F=None):
    """1-D TV denoising/deblurring toy: ``|A x - b|^2 + lam |D x|_1``."""
    rng = RngStream(seed)
    A = np.eye(n) + 0.3 * rng.normal(size=(n, n)) / np.sqrt(n)
    A /= np.linalg.norm(A, 2)
    truth = np.repeat(rng.normal(size=3), n // 3 + 1)[:n]
    b = A @ truth + 0.05 * rng.normal(size=n)
    fwd = MatrixOp(A, (n,), (n,))
    grad = GradientOp((n,))
    return Problem(F or Zero(), [(SqL2Dist(b), fwd), (L1(lam), grad)])


@pytest.fixture
def toy():
    return tv_toy()


# -- acceptance report: one line per criterion after the run -------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True, "seconds": 0.0})
    entry["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}  {status}  {e['title']}  ({e['seconds']:.1f} s)")
