import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cfltr import linear_ccp
from cfltr.ltr_core import Dataset, LinearModel, QueryInstance, Ranking, rank_by_scores
from cfltr.linear_ccp import (CcpDivergenceError, PairData, SubproblemResult, TrainConfig,
                              ccp_qprime, ccp_surrogate, hinge_slacks, propdcg_objective,
                              solve_convex_subproblem, train_propdcg, train_proprank)
from cfltr.metrics import AVG_RANK, DCG, DCG_LN, ClickLog, ClickRecord, RankWeighting, weight

from conftest import random_log, simulated_log


def _single_click_log(features, clicked=0, q=1.0):
    x = np.asarray(features, dtype=float)
    data = Dataset((QueryInstance(0, x),), x.shape[1])
    rec = ClickRecord(0, clicked, Ranking(tuple(range(x.shape[0]))), q)
    return ClickLog((rec,), data)


def test_hinge_slack_examples():
    q = QueryInstance(0, np.array([[3.0], [1.0], [0.5]]))
    assert hinge_slacks(LinearModel(np.ones(1)), q, 0).tolist() == [0.0, 0.0]
    flat = QueryInstance(0, np.zeros((4, 2)))
    assert hinge_slacks(LinearModel(np.ones(2)), flat, 1).tolist() == [1.0, 1.0, 1.0]
    two = QueryInstance(0, np.array([[0.0], [0.5]]))
    assert hinge_slacks(LinearModel(np.ones(1)), two, 0).tolist() == [1.5]
    with pytest.raises(IndexError):
        hinge_slacks(LinearModel(np.ones(1)), two, 2)


def test_objective_examples():
    log = _single_click_log([[1.0], [2.0]])
    zero = LinearModel.zeros(1)
    assert propdcg_objective(zero, log, 1.0, AVG_RANK) == 2.0
    assert propdcg_objective(zero, log, 1.0, DCG_LN) == pytest.approx(-1 / math.log(3), rel=1e-15)
    assert -1 / math.log(3) == pytest.approx(-0.9102, abs=1e-4)


def test_objective_zero_features_depends_on_norm_only():
    log = _single_click_log(np.zeros((3, 2)))
    for w in ([1.0, 2.0], [-2.0, 1.0], [0.0, math.sqrt(5)]):
        val = propdcg_objective(LinearModel(np.array(w)), log, 2.0, DCG_LN)
        assert val == pytest.approx(2.5 - 2.0 / math.log(4), rel=1e-14)


def test_qprime_examples():
    assert ccp_qprime([0.0], [0.5])[0] == pytest.approx(0.48045, abs=1e-5)
    assert ccp_qprime([math.e - 2], [1.0])[0] == pytest.approx(math.e, rel=1e-14)
    s = np.linspace(0, 50, 2001)
    v = ccp_qprime(s, np.ones_like(s))
    assert np.all(np.diff(v) > 0)
    with pytest.raises(ValueError):
        ccp_qprime([-0.1], [1.0])


@pytest.mark.parametrize("C, d, qp", [(0.1, 1.0, 1.0), (1.0, 2.0, 0.7), (5.0, 0.5, 3.0), (0.01, 3.0, 0.2)])
def test_subproblem_one_dimensional_closed_form(C, d, qp):
    log = _single_click_log([[d], [0.0]])
    res = solve_convex_subproblem(log, [qp], C, tol=1e-12)
    assert res.converged
    assert res.model.w[0] == pytest.approx(min(C * d / qp, 1 / d), rel=1e-6, abs=1e-9)


def test_subproblem_small_C_gives_zero():
    log = simulated_log(seed=1)
    data = PairData(log)
    res = solve_convex_subproblem(data, data.q, 1e-9)
    assert np.linalg.norm(res.model.w) < 1e-7


def _grid_optimum(data, weights, C, radius, points):
    axes = [np.linspace(-radius, radius, points)] * data.dim
    W = np.array(list(itertools.product(*axes)))
    s = data.X @ W.T
    hinge = np.maximum(1.0 - (s[data.pair_a] - s[data.pair_b]), 0.0)
    coef = (C * data.count / (data.n * weights))[data.pair_inst]
    vals = 0.5 * np.sum(W * W, axis=1) + coef @ hinge
    return vals.min()


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_subproblem_matches_grid_search(dim):
    for seed in range(3):
        rng = np.random.default_rng(100 * dim + seed)
        log = random_log(rng, num_queries=5, dim=dim, clicks=12)
        data = PairData(log)
        weights = rng.uniform(0.2, 2.0, data.num_instances)
        C = float(rng.choice([0.3, 1.0, 3.0]))
        res = solve_convex_subproblem(data, weights, C)
        radius = math.sqrt(2 * res.objective) + 0.1
        points = {1: 20001, 2: 801, 3: 121}[dim]
        grid = _grid_optimum(data, weights, C, radius, points)
        assert res.objective <= grid + 1e-9
        assert grid - res.objective <= 1e-2


def test_subproblem_warm_start_invariance(rng):
    for _ in range(5):
        log = random_log(rng, num_queries=6, dim=4, clicks=25)
        data = PairData(log)
        w = rng.uniform(0.1, 1.0, data.num_instances)
        cold = solve_convex_subproblem(data, w, 2.0)
        warm = solve_convex_subproblem(data, w, 2.0, warm_start=LinearModel(rng.normal(size=4) * 3))
        assert abs(cold.objective - warm.objective) <= 1e-5 * abs(cold.objective)


def test_subproblem_budget_exhaustion_warns():
    log = simulated_log(seed=2, passes=4)
    data = PairData(log)
    with pytest.warns(RuntimeWarning, match="not converged"):
        res = solve_convex_subproblem(data, data.q, 100.0, tol=1e-15, max_epochs=1)
    assert not res.converged and np.all(np.isfinite(res.model.w))


def test_subproblem_rejects_bad_weights():
    log = _single_click_log([[1.0], [0.0]])
    with pytest.raises(ValueError):
        solve_convex_subproblem(log, [0.0], 1.0)
    with pytest.raises(ValueError):
        solve_convex_subproblem(log, [1.0, 1.0], 1.0)


def test_duplicated_clicks_leave_minimizer_unchanged(rng):
    log = random_log(rng, clicks=15)
    doubled = ClickLog(log.records + log.records, log.dataset)
    a = train_proprank(log, TrainConfig(C=3.0, inner_tol=1e-10))
    b = train_proprank(doubled, TrainConfig(C=3.0, inner_tol=1e-10))
    np.testing.assert_allclose(a.w, b.w, rtol=1e-6, atol=1e-9)
    da, _ = train_propdcg(log, TrainConfig(C=3.0))
    db, _ = train_propdcg(doubled, TrainConfig(C=3.0))
    np.testing.assert_allclose(da.w, db.w, rtol=1e-5, atol=1e-8)


def test_pair_data_merges_identical_clicks(rng):
    log = random_log(rng, clicks=10)
    doubled = ClickLog(log.records * 3, log.dataset)
    data = PairData(doubled)
    assert data.n == 30 and data.count.sum() == 30
    w = rng.normal(size=3)
    for lam in (DCG_LN, AVG_RANK):
        assert propdcg_objective(LinearModel(w), doubled, 1.5, lam) == \
            pytest.approx(propdcg_objective(LinearModel(w), log, 1.5, lam), rel=1e-12)


def test_c_sweep_hinge_term_non_increasing():
    log = simulated_log(seed=3, passes=3)
    data = PairData(log)
    sweep = []
    with warnings.catch_warnings():
        # large C is slow for coordinate descent; the duality gap is accounted for below
        warnings.simplefilter("ignore", RuntimeWarning)
        for C in [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3]:
            res = solve_convex_subproblem(data, data.q, C, tol=1e-9)
            hinge = float(np.sum(data.count / data.q * data.slack_sums(res.model.w)))
            sweep.append((C, hinge, res.gap))
    for (c1, h1, g1), (c2, h2, g2) in zip(sweep, sweep[1:]):
        # f_C2(w2) <= f_C2(w1) + g2 and f_C1(w1) <= f_C1(w2) + g1 give this slack
        assert h2 - h1 <= data.n * (g1 + g2) / (c2 - c1) + 1e-9 * h1
    assert sweep[-1][1] < sweep[0][1]


def test_all_propensities_one_is_plain_ranking_svm(rng):
    log = random_log(rng, clicks=12)
    ones = log.with_propensities(np.ones(len(log)))
    data = PairData(ones)
    res = solve_convex_subproblem(data, np.ones(data.num_instances), 2.0, tol=1e-10)
    np.testing.assert_allclose(train_proprank(ones, TrainConfig(C=2.0, inner_tol=1e-10)).w,
                               res.model.w, rtol=1e-12)


def test_surrogate_touches_and_bounds(rng):
    for _ in range(20):
        log = random_log(rng, num_queries=6, dim=3, clicks=15)
        data = PairData(log)
        C = float(rng.uniform(0.1, 10))
        wk = rng.normal(size=3)
        true_k = propdcg_objective(LinearModel(wk), data, C)
        assert abs(ccp_surrogate(data, wk, wk, C) - true_k) <= 1e-9 * max(1, abs(true_k))
        for _ in range(10):
            w = wk + rng.normal(size=3) * rng.uniform(0.01, 3)
            assert propdcg_objective(LinearModel(w), data, C) <= ccp_surrogate(data, w, wk, C) + 1e-12


def test_first_ccp_step_is_proprank_with_qprime():
    log = simulated_log(seed=4)
    data = PairData(log)
    cfg = TrainConfig(C=1.0, max_ccp_iters=1, inner_tol=1e-10)
    model, trace = train_propdcg(log, cfg)
    qp = ccp_qprime(data.slack_sums(np.zeros(data.dim)), data.q)
    ref = solve_convex_subproblem(data, qp, 1.0, tol=1e-10, seed=cfg.seed + 1)
    np.testing.assert_allclose(model.w, ref.model.w, rtol=1e-12)
    assert trace.num_iterations == 1


@pytest.mark.parametrize("seed", range(8))
def test_ccp_monotone_descent(seed):
    rng = np.random.default_rng(seed)
    log = random_log(rng, num_queries=10, dim=4, clicks=40)
    C = float(rng.choice([0.1, 1.0, 10.0, 100.0]))
    model, trace = train_propdcg(log, TrainConfig(C=C))
    objs = trace.objectives
    assert trace.iterations[0].objective == propdcg_objective(LinearModel.zeros(4), log, C)
    for a, b in zip(objs, objs[1:]):
        assert b <= a + 1e-9 * max(1, abs(a))
    assert objs[-1] <= objs[0]
    assert propdcg_objective(model, log, C) == pytest.approx(objs[-1], rel=1e-12)


def test_ccp_divergence_is_reported(monkeypatch):
    log = simulated_log(seed=5)

    def bad_solver(data, weights, C, warm=None, tol=1e-6, max_epochs=1, seed=0):
        w = np.full(data.dim, 50.0)
        return SubproblemResult(LinearModel(w), np.zeros(len(data.pair_a)), np.ones(len(data.pair_a)),
                                0.0, 0.0, 1, True)

    monkeypatch.setattr(linear_ccp, "solve_convex_subproblem", bad_solver)
    with pytest.raises(CcpDivergenceError, match="iteration 1"):
        train_propdcg(log, TrainConfig(C=1.0))


def test_trace_fields_and_csv(tmp_path):
    log = simulated_log(seed=6)
    _, trace = train_propdcg(log, TrainConfig(C=1.0))
    it = trace.iterations[1]
    assert 0 < it.qprime_min <= it.qprime_median <= it.qprime_max
    assert it.inner_epochs >= 0
    assert all(-1.0 <= t.snips_dcg < 0 for t in trace.iterations)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("iteration,objective,snips_dcg")
    assert len(lines) == len(trace.iterations) + 1


def test_training_deterministic():
    log = simulated_log(seed=7)
    a, ta = train_propdcg(log, TrainConfig(C=10.0, seed=3))
    b, tb = train_propdcg(log, TrainConfig(C=10.0, seed=3))
    np.testing.assert_array_equal(a.w, b.w)
    assert ta.objectives == tb.objectives


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hinge_bound_dominates_rank(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 10))
    q = QueryInstance(0, rng.normal(size=(m, 3)))
    model = LinearModel(rng.normal(size=3) * rng.choice([0.1, 1, 10]))
    clicked = int(rng.integers(m))
    rank = rank_by_scores(model.scores(q)).ranks[clicked]
    bound = 1.0 + hinge_slacks(model, q, clicked).sum()
    for lam in (AVG_RANK, DCG, DCG_LN, RankWeighting.prec_at(3), RankWeighting.rbp(0.8)):
        assert weight(lam, rank) <= weight(lam, bound)
