import numpy as np
import pytest

from irlm.model import ModelConfig, init_model
from irlm.synthetic import SyntheticConfig, write_synthetic


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=40, max_len=16, dropout_rate=0.1, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return init_model(tiny_config(), np.random.default_rng(0))


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    """Small synthetic corpus, held-out set, probe set and synonym table."""
    out = tmp_path_factory.mktemp("synthetic")
    write_synthetic(out, SyntheticConfig(seed=0, n_corpus=300, n_heldout=60, n_probe_per_class=30))
    return out


ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 8


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records the verdict for acceptance criterion ``n``."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        results[n] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL  (not run or errored before a verdict)")
