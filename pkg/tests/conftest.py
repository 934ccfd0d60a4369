import numpy as np
import pytest

from decunroll.instance import InstanceConfig, sample_instance


@pytest.fixture
def small_cfg():
    return InstanceConfig(n_nodes=5, n_edges=6, d=30, m_total=50, snr_db=50, p_s=5, seed=0)


@pytest.fixture
def small_inst(small_cfg):
    return sample_instance(small_cfg)


def tiny_instance(seed=0, n_nodes=3, n_edges=3, d=6, m_total=12, p_s=3, snr_db=40):
    cfg = InstanceConfig(n_nodes=n_nodes, n_edges=n_edges, d=d, m_total=m_total,
                         snr_db=snr_db, p_s=p_s, seed=seed)
    return sample_instance(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
