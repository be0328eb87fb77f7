import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pdformer.model import ModelConfig, PDFormer  # noqa: E402

_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def random_mask(rng, n, p=0.5):
    m = (rng.random((n, n)) < p).astype(np.int8)
    np.fill_diagonal(m, 1)
    return m


def tiny_model(seed=0, N=3, T=3, T_prime=2, C=1, d=8, heads=(1, 1, 2), L=1, S=3, N_p=3, k=2, d_sk=6, **kw):
    """A small float64 model with random masks, basis and patterns."""
    rng = np.random.default_rng(1000 + seed)
    cfg = ModelConfig(
        T=T,
        T_prime=T_prime,
        N=N,
        C=C,
        d=d,
        d_sk=d_sk,
        L=L,
        h_geo=heads[0],
        h_sem=heads[1],
        h_t=heads[2],
        S=S,
        N_p=N_p,
        k=k,
        seed=seed,
        **kw,
    )
    geo = random_mask(rng, N)
    sem = random_mask(rng, N)
    basis = rng.normal(size=(N, k))
    patterns = rng.normal(size=(N_p, S))
    model = PDFormer(cfg, geo, sem, basis, patterns)
    # perturb norms/biases away from their trivial init so every path is exercised
    for name, p in model.params.items():
        if "norm" in name or name.endswith(".b") or ".b1" in name or ".b2" in name:
            p.data[...] = p.data + 0.3 * rng.normal(size=p.shape)
    return model, rng
