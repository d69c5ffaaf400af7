import numpy as np
import pytest

from vlinear.flowmatch import init_wfm_params
from vlinear.linalg import Rng
from vlinear.model import ModelConfig, init_params
from vlinear.transforms import fit_ortho_basis


def tiny_config(**kw):
    base = dict(n_var=3, lookback=8, horizon=4, d_model=16, d_ext=2, layers=1)
    base.update(kw)
    return ModelConfig(**base)


def tiny_setup(seed=0, batch=2, jitter=0.3, **kw):
    """Params (jittered off the symmetric init), probe batch and basis."""
    cfg = tiny_config(**kw)
    rng = Rng(seed)
    p = init_params(cfg, rng.split("init"))
    p.update(init_wfm_params(cfg.horizon, rng.split("head")))
    j = rng.split("jitter")
    p = {k: v + jitter * j.normal(v.shape) for k, v in p.items()}
    xs = rng.split("x").normal((batch, cfg.n_var, cfg.lookback))
    ys = rng.split("y").normal((batch, cfg.n_var, cfg.horizon))
    return cfg, p, xs, ys, fit_ortho_basis(xs, ys)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[number])
