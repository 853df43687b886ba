import numpy as np
import pytest

from cfltr.click_sim import SimulationConfig, simulate_clicks
from cfltr.ltr_core import Dataset, LinearModel, QueryInstance, Ranking
from cfltr.metrics import ClickLog, ClickRecord


def random_dataset(rng, num_queries=8, dim=3, min_cand=2, max_cand=6):
    queries = []
    for qid in range(num_queries):
        m = int(rng.integers(min_cand, max_cand + 1))
        rel = (rng.random(m) < 0.4).astype(np.int8)
        queries.append(QueryInstance(qid, rng.normal(size=(m, dim)), rel))
    return Dataset(tuple(queries), dim)


def random_log(rng, num_queries=8, dim=3, clicks=20, min_cand=2, max_cand=6, qmin=0.05):
    """Arbitrary clicks with random propensities; no click model behind them."""
    data = random_dataset(rng, num_queries, dim, min_cand, max_cand)
    records = []
    for _ in range(clicks):
        q = data.queries[int(rng.integers(num_queries))]
        order = tuple(int(i) for i in rng.permutation(q.num_candidates))
        records.append(ClickRecord(q.query_id, int(rng.integers(q.num_candidates)),
                                   Ranking(order), float(rng.uniform(qmin, 1.0))))
    return ClickLog(tuple(records), data)


def simulated_log(seed=0, num_queries=40, dim=4, passes=3, eta=1.0, eps_minus=0.1):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, num_queries, dim, 4, 8)
    production = LinearModel(rng.normal(size=dim))
    return simulate_clicks(data, production, SimulationConfig(eta=eta, eps_minus=eps_minus,
                                                              passes=passes, seed=seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
