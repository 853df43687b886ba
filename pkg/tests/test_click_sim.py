import math

import numpy as np
import pytest

from cfltr import click_sim
from cfltr.click_sim import (PositionBiasModel, SimulationConfig, full_information_log, load_click_log,
                             propensity, save_click_log, simulate_clicks, train_production_ranker)
from cfltr.ltr_core import Dataset, LinearModel, QueryInstance, rank_by_scores

from conftest import random_dataset


def test_propensity_examples():
    assert propensity(PositionBiasModel(1.0), 2) == 0.5
    assert propensity(PositionBiasModel(0.0), 7) == 1.0
    assert propensity(PositionBiasModel(2.0), 4) == 0.0625
    assert PositionBiasModel(1.5).propensity(1) == 1.0
    with pytest.raises(ValueError):
        propensity(PositionBiasModel(1.0), 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(passes=0)
    with pytest.raises(ValueError):
        SimulationConfig(eps_minus=1.5)
    with pytest.raises(ValueError):
        SimulationConfig(eta=-1)
    assert SimulationConfig(eta=1.5).assumed_eta == 1.5


def test_no_bias_no_noise_clicks_every_relevant(rng):
    data = random_dataset(rng, 10, 3, 2, 6)
    prod = LinearModel(rng.normal(size=3))
    log = simulate_clicks(data, prod, SimulationConfig(eta=0, eps_minus=0, passes=4))
    total_rel = sum(int(q.relevances.sum()) for q in data)
    assert len(log) == 4 * total_rel
    assert all(r.propensity == 1.0 for r in log)


def test_extreme_bias_only_top_clicked(rng):
    data = random_dataset(rng, 10, 3, 2, 6)
    prod = LinearModel(rng.normal(size=3))
    log = simulate_clicks(data, prod, SimulationConfig(eta=200, eps_minus=0, passes=5))
    assert len(log) > 0
    assert all(r.presented_ranking.ranks[r.clicked_candidate] == 1 for r in log)


def test_recorded_propensity_and_presentation(rng):
    data = random_dataset(rng, 12, 3, 2, 6)
    prod = LinearModel(rng.normal(size=3))
    cfg = SimulationConfig(eta=1.0, assumed_eta=1.7, eps_minus=0.3, passes=3, seed=5)
    log = simulate_clicks(data, prod, cfg)
    for r in log:
        q = data.query(r.query_id)
        assert r.presented_ranking == rank_by_scores(prod.scores(q))
        assert r.propensity == (1.0 / r.presented_ranking.ranks[r.clicked_candidate]) ** 1.7


def test_monte_carlo_click_rate():
    # irrelevant candidate 1 is always presented at rank 2
    q = QueryInstance(0, np.array([[1.0], [0.0]]), np.array([1, 0]))
    data = Dataset((q,), 1)
    passes = 100_000
    log = simulate_clicks(data, LinearModel(np.ones(1)),
                          SimulationConfig(eta=1, eps_minus=0.1, passes=passes, seed=11))
    hits = sum(r.clicked_candidate == 1 for r in log)
    p = 0.5 * 0.1
    sigma = math.sqrt(p * (1 - p) / passes)
    assert abs(hits / passes - p) <= 3 * sigma
    top = sum(r.clicked_candidate == 0 for r in log)
    assert top == passes


def test_simulation_deterministic_and_order_independent(rng):
    data = random_dataset(rng, 15, 3, 2, 6)
    prod = LinearModel(rng.normal(size=3))
    cfg = SimulationConfig(passes=3, seed=99)
    a = simulate_clicks(data, prod, cfg)
    assert simulate_clicks(data, prod, cfg).records == a.records
    assert simulate_clicks(data, prod, SimulationConfig(passes=3, seed=100)).records != a.records
    # per-(query, pass) streams: simulating a prefix of the queries yields a prefix of the log
    head = simulate_clicks(data.subset(range(5)), prod, cfg)
    ids = {q.query_id for q in data.queries[:5]}
    assert head.records == tuple(r for r in a.records if r.query_id in ids)


def test_jsonl_round_trip(tmp_path, rng):
    data = random_dataset(rng, 6, 2, 2, 5)
    cfg = SimulationConfig(passes=2, seed=3, assumed_eta=0.5)
    log = simulate_clicks(data, LinearModel(np.ones(2)), cfg)
    path = tmp_path / "clicks.jsonl"
    save_click_log(log, cfg, path)
    back, back_cfg = load_click_log(path, data)
    assert back.records == log.records
    assert back_cfg == cfg
    save_click_log(log, cfg, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_load_click_log_reports_bad_line(tmp_path, rng):
    data = random_dataset(rng, 2, 2, 2, 3)
    path = tmp_path / "bad.jsonl"
    path.write_text('{"config": {}}\n{"query_id": 0, "clicked_candidate": 0}\n')
    with pytest.raises(click_sim.DataError, match=":2:"):
        load_click_log(path, data)


def test_full_information_log():
    data = Dataset((QueryInstance(0, np.zeros((3, 1)), np.array([1, 0, 1])),
                    QueryInstance(1, np.zeros((2, 1)), np.array([0, 0]))), 1)
    log = full_information_log(data)
    assert [(r.query_id, r.clicked_candidate, r.propensity) for r in log] == [(0, 0, 1.0), (0, 2, 1.0)]


def test_production_ranker_separable_toy():
    # relevant docs lie on the positive side of feature 0, feature 1 is noise
    rng = np.random.default_rng(4)
    queries = []
    for i in range(6):
        x = np.column_stack([np.array([2.0, 1.5, -1.0, -2.0]), rng.normal(size=4)])
        queries.append(QueryInstance(i, x, np.array([1, 1, 0, 0])))
    data = Dataset(tuple(queries), 2)
    model = train_production_ranker(data, fraction=1.0, seed=0)
    for q in data:
        ranks = rank_by_scores(model.scores(q)).ranks
        assert max(ranks[y] for y in (0, 1)) < min(ranks[y] for y in (2, 3))


def test_production_ranker_subsample_size_and_determinism(monkeypatch, rng):
    data = random_dataset(rng, 200, 3, 3, 6)
    seen = []
    original = click_sim.full_information_log

    def spy(ds):
        seen.append(len(ds))
        return original(ds)

    monkeypatch.setattr(click_sim, "full_information_log", spy)
    a = train_production_ranker(data, fraction=0.01, seed=8)
    b = train_production_ranker(data, fraction=0.01, seed=8)
    assert seen == [2, 2]
    np.testing.assert_array_equal(a.w, b.w)


def test_production_ranker_errors(rng):
    data = Dataset((QueryInstance(0, np.zeros((2, 1)), np.array([0, 0])),), 1)
    with pytest.raises(click_sim.DataError):
        train_production_ranker(data, 1.0)
    with pytest.raises(ValueError):
        train_production_ranker(random_dataset(rng), 0.0)
