import numpy as np
import pytest

from spectral_lora import lora as L
from spectral_lora.model import DecoderModel, ModelConfig, PROJ_NAMES
from spectral_lora.tensor_core import make_rng

FD_STEP = 1e-5


def central_diff(f, x, step=FD_STEP, idx=None):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size) if idx is None else idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


TINY = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, d_ff=12, max_seq=7)


def tiny_model(seed=0, cfg=TINY):
    return DecoderModel.init(cfg, make_rng(seed, "init"))


def full_adapters(model, seed=0, r=2, names=PROJ_NAMES, mode="alpha_over_rank"):
    """Adapters on the given projections with nonzero B so both factors get gradient."""
    rng = make_rng(seed, "adapters")
    out = L.LoraSet()
    for i in range(model.config.n_layers):
        for name in names:
            d_out, d_in = model.weight(f"layer.{i}.{name}").shape
            out.add(L.LoraAdapter(f"layer.{i}.{name}", rng.normal(0, 0.3, (d_out, r)),
                                  rng.normal(0, 0.3, (r, d_in)), 4.0, 0.0, mode))
    return out


@pytest.fixture
def model():
    return tiny_model()


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
