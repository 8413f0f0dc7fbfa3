import json
from pathlib import Path

import numpy as np
import pytest

from almaforge.autograd import Tape, Tensor

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f(*arrays)
            a[i] = old - eps
            lo = f(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def gradcheck(build, arrays, eps=1e-6, rtol=1e-4, weight_seed=0):
    """Compare tape gradients of sum(w * build(*tensors)) with finite differences.

    A fixed random weighting turns any output into a scalar so every output
    element contributes.  Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*tensors)
    w = np.random.default_rng(weight_seed).normal(size=out.shape)
    tape.backward(out, w)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(*arrs):
        return float(np.sum(w * build(*[Tensor(a) for a in arrs]).data))

    numeric = numeric_grad(scalar, arrays, eps)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        denom = max(np.abs(gn).max(), np.abs(ga).max(), 1e-8)
        worst = max(worst, float(np.abs(ga - gn).max() / denom))
    assert worst < rtol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
