import numpy as np
import pytest

from phrase_transformer import tensor as T
from phrase_transformer.model import ModelConfig, PRTransformer


def tiny_config(**kw):
    base = dict(
        src_vocab=20, tgt_vocab=20, d_model=16, d_ffn=32, n_heads=2,
        enc_layers=2, dec_layers=2, dropout=0.0, max_positions=40,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, **kw):
    return PRTransformer(tiny_config(**kw), seed=seed).eval()


def random_batch(rng, batch=3, src_len=9, tgt_len=7, vocab=20, pad_tail=True):
    """Padded source/target id arrays with ragged lengths."""
    src = rng.integers(4, vocab, size=(batch, src_len))
    tgt = rng.integers(4, vocab, size=(batch, tgt_len))
    if pad_tail:
        for i in range(1, batch):
            src[i, src_len - i :] = 0
            tgt[i, tgt_len - i :] = 0
    return src, tgt


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grad(fn, *arrays, tol=1e-6, h=1e-5):
    """Compare backward() of ``fn(*tensors)`` (a scalar Tensor) with finite differences."""
    with T.precision(np.float64):
        tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*tensors)
        out.backward()
        worst = 0.0
        for t in tensors:
            num = numeric_grad(lambda: float(fn(*tensors).data), t.data, h)
            worst = max(worst, rel_error(t.grad, num))
    assert worst < tol, f"relative gradient error {worst:.3g} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report: one line per criterion, printed after the run

ACCEPTANCE = {}


def record_criterion(number, title, ok, detail):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
