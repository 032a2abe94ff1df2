import numpy as np
import pytest

from pblab import tensor as T
from pblab.data import LabeledSet, SequenceSet
from pblab.models import ClassifierModel, CausalLMModel, ModelConfig


def numeric_grad(f, arrays, h=1e-3):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    out = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    denom = np.abs(a) + np.abs(n)
    mask = denom > floor
    if not mask.any():
        return 0.0
    return float((np.abs(a - n)[mask] / denom[mask]).max())


def to_float64(model):
    for _, p in model.named_parameters():
        p.data = p.data.astype(np.float64)
    return model


@pytest.fixture
def tiny_clf():
    return ClassifierModel.init(ModelConfig(kind="classifier", d=6, h=8, n_classes=3, layers=2, seed=3))


@pytest.fixture
def tiny_lm():
    return CausalLMModel.init(ModelConfig.lm_default(d=16, ctx=24, layers=2, heads=2, vocab=12, seed=5))


def blob_set(n=120, d=6, c=3, noise=0.3, seed=0, id_offset=0):
    rng = np.random.default_rng(seed)
    means = np.eye(c, d) * 2.0
    y = rng.integers(0, c, n)
    x = means[y] + noise * rng.normal(size=(n, d))
    return LabeledSet(x.astype(np.float32), y.astype(np.int64), np.arange(n, dtype=np.int64) + id_offset)


def seq_set(n=20, length=10, vocab=12, seed=0, id_offset=0):
    rng = np.random.default_rng(seed)
    return SequenceSet([rng.integers(1, vocab, length) for _ in range(n)], np.arange(n, dtype=np.int64) + id_offset)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
