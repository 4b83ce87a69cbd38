import numpy as np
import pytest

from pase.network import dlf_matrix, load_network


@pytest.fixture(scope="session")
def net():
    return load_network()


@pytest.fixture(scope="session")
def M(net):
    return dlf_matrix(net)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_feeder(path, rows, header="from,to,r_ohm,x_ohm,p_kw,q_kvar"):
    text = header + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n"
    path.write_text(text)
    return path


@pytest.fixture(scope="session")
def scenario_cache():
    """Build default scenarios once per ``(dt_s, seed)`` for the whole session."""
    from pase.harness import SimulationConfig, build_scenario

    cache = {}

    def get(dt_s=6.0, seed=1):
        key = (float(dt_s), int(seed))
        if key not in cache:
            cache[key] = build_scenario(SimulationConfig(seed=seed, dt_s=dt_s))
        return cache[key]

    return get


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
