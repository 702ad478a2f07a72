import numpy as np
import pytest

from gramalign import tensor as T


def directional_gradcheck(fn, inputs, probes=25, h=1e-5, seed=0):
    """Worst relative error between analytic and central-difference directional derivatives.

    The scalar probed is sum(fn(*inputs) * W) for a fixed random W.
    """
    rng = np.random.default_rng(seed)
    params = [T.parameter(x) for x in inputs]
    out = fn(*params)
    weight = rng.standard_normal(out.shape)
    loss = T.sum(out * T.constant(weight))
    T.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]

    def value(xs):
        with T.no_grad():
            return float(np.sum(fn(*[T.constant(x) for x in xs]).values * weight))

    worst = 0.0
    for _ in range(probes):
        dirs = [rng.standard_normal(x.shape) for x in inputs]
        up = value([x + h * d for x, d in zip(inputs, dirs)])
        down = value([x - h * d for x, d in zip(inputs, dirs)])
        numeric = (up - down) / (2 * h)
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line straight to the terminal and keep it for the summary."""
    def emit(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
