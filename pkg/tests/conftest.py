import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flame.data import ModalityGen, SyntheticTaskParams, make_synthetic_task

settings.register_profile("flame", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("flame")


def synthetic(task_id, modalities, seed=0, n=64, dim=6, rank=2, length=6, label_key=None, **kw):
    gens = tuple(ModalityGen(m, dim, rank, length, latent_key=m) for m in modalities)
    params = SyntheticTaskParams(task_id, gens, n_samples=n, label_key=label_key, **kw)
    return make_synthetic_task(params, seed)[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
