import numpy as np
import pytest

from fedsa import nn

ACCEPTANCE_LINES: list[str] = []


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x``, perturbing one element at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tiny_spec(hw=4, cin=1, c1=3, c2=4, classes=3, pool=True, hint=4) -> nn.NetworkSpec:
    return nn.NetworkSpec("tiny", (hw, hw, cin), (nn.conv(c1, pool=pool), nn.conv(c2)), (nn.linear(classes),),
                          -1, hint)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDSA_OUTPUT_ROOT", str(tmp_path / "out"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
