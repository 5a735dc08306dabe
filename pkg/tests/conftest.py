import numpy as np
import pytest

from salmod.tensor import backward, leaf, mul, constant, tensor_sum

FD_STEP = 1e-5
REL_FLOOR = 1e-6


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return float(np.max(np.abs(a - b) / denom))


def projected_loss(out, weights):
    """Scalar sum(out * weights); random weights keep gradients O(1)."""
    return tensor_sum(mul(out, constant(weights)))


def numeric_grad(fn, arrays, index, h=FD_STEP, coords=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    it = range(flat.size) if coords is None else coords
    for i in it:
        old = flat[i]
        flat[i] = old + h
        up = fn(*arrays)
        flat[i] = old - h
        down = fn(*arrays)
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check_op(op, arrays, rng, requires=None):
    """Max relative error between analytic and numeric gradients of ``op``."""
    requires = requires or [True] * len(arrays)
    out_shape = op(*[leaf(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    def scalar(*arrs):
        return float(projected_loss(op(*[constant(a) for a in arrs]), weights).value[0])

    nodes = [leaf(a, requires_grad=r) for a, r in zip(arrays, requires)]
    grads = backward(projected_loss(op(*nodes), weights))
    worst = 0.0
    for i, (node, r) in enumerate(zip(nodes, requires)):
        if not r:
            continue
        worst = max(worst, rel_error(grads[node], numeric_grad(scalar, arrays, i)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
