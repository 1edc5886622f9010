import numpy as np
import pytest

from voxnet import netgraph as ng

ACCEPTANCE_RESULTS = {}


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` at every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-5):
    """Relative l2 error; ``floor`` keeps identically-zero gradients (a bias
    feeding a train-mode batchnorm) from turning difference noise into 100 %."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return np.linalg.norm(a - b) / denom


def as_float64(model):
    """Same model with float64 parameters, so finite differences are not limited by storage precision."""
    model = model.copy()
    for rec in model.params.values():
        for role in rec:
            rec[role] = rec[role].astype(np.float64)
    return model


def small_model(layers, input_shape, seed=0, scheme="he"):
    return ng.build_model(layers, input_shape, scheme, seed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
