import numpy as np
import pytest

from deltaplug.backbones import ToyformerConfig, build_toyformer

ACCEPTANCE_LINES = []


def central_difference(f, x, eps=1e-5, coords=None):
    """Numeric gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    it = coords if coords is not None else list(np.ndindex(x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.abs(a), np.abs(b))
    return float(np.max(np.where(denom == 0, 0.0, np.abs(a - b) / np.where(denom == 0, 1.0, denom))))


def fixed_batch(batch=4, seq=6, vocab=64, seed=123):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab, size=(batch, seq))
    mask = np.ones((batch, seq), dtype=bool)
    mask[1, -2:] = False
    return ids, mask


@pytest.fixture
def model_a():
    return build_toyformer(ToyformerConfig(seed=1), "A")


@pytest.fixture
def model_b():
    return build_toyformer(ToyformerConfig(seed=1), "B")


@pytest.fixture
def batch():
    return fixed_batch()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
