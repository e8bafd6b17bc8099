import numpy as np
import pytest

from latrot.dataio import EmbeddingSet
from latrot.synth import SynthConfig, generate


def random_set(n=100, m=4, seed=0, survival=True, n_protocols=2, n_anatomy=5, n_patients=7):
    rng = np.random.default_rng(seed)
    t = rng.exponential(100.0, n) + 0.1
    e = rng.integers(0, 2, n)
    if survival:
        missing = rng.random(n) < 0.2
        t[missing] = np.nan
        e[missing] = -1
    return EmbeddingSet(
        record_ids=rng.permutation(10 * n)[:n],
        vectors=rng.standard_normal((n, m)) * 10 ** rng.uniform(-3, 3, (n, m)),
        anatomy_id=[f"a{k}" for k in rng.integers(0, n_anatomy, n)],
        protocol_id=[f"p{k}" for k in rng.integers(0, n_protocols, n)],
        patient_id=[f"pt{k}" for k in rng.integers(0, n_patients, n)],
        survival_time=t if survival else None,
        event=e if survival else None,
        m=m,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SynthConfig(m=24, n_anatomy=20, n_protocols=2, n_patients=8, d_bio=6, d_tech=3, noise_sigma=0.05, seed=3)
    return generate(cfg)


@pytest.fixture(scope="session")
def zero_noise_synth():
    cfg = SynthConfig(m=24, n_anatomy=20, n_protocols=2, n_patients=6, d_bio=6, d_tech=3, noise_sigma=0.0,
                      tech_jitter=0.0, seed=5)
    return generate(cfg)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
