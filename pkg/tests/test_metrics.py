import math

import numpy as np
import pytest

from rarlab import coins, metrics, targets
from rarlab.core import CompleteRandomization, PlayTheWinner, simulate
from rarlab.models import BERNOULLI, NORMAL, EstimatorState, ResponseModel

P = (0.7, 0.4)
U = targets.UrnTarget()


def test_complete_randomization_guessing():
    s = simulate(CompleteRandomization(2), ResponseModel.bernoulli(*P), 200, 500, seed=1)
    assert s.selection_bias() == pytest.approx(0.5)
    assert metrics.mlr(np.full((10, 2), 0.5), [0.5, 0.5]) == 0.0


def test_selection_bias_range():
    rng = np.random.default_rng(2)
    for K in (2, 3, 5):
        trace = rng.dirichlet(np.ones(K), size=(4, 50))
        sb = metrics.selection_bias(trace)
        assert 1 / K <= sb <= 1
    assert metrics.selection_bias(np.eye(3)) == 1.0


def test_reference_examples():
    assert metrics.reference_variance("dl", BERNOULLI, P) == pytest.approx(0.27161, abs=1e-5)
    dbcd = metrics.reference_variance("dbcd", BERNOULLI, P, U, gamma=2)
    assert dbcd == pytest.approx(metrics.urn_target_variance("dbcd", *P, gamma=2))
    assert dbcd == pytest.approx(0.37037, abs=1e-5)
    assert metrics.reference_variance("rpw", BERNOULLI, (0.9, 0.8)) == math.inf
    assert metrics.reference_variance("lb", BERNOULLI, P, U) == pytest.approx(
        metrics.reference_variance("dl", BERNOULLI, P))


def test_reference_rejects_wrong_family():
    with pytest.raises(ValueError):
        metrics.reference_variance("dl", NORMAL, [[0, 1], [1, 1]])
    with pytest.raises(ValueError):
        metrics.reference_variance("smlp", BERNOULLI, P)


def test_rpw_regimes():
    assert metrics.rpw_regime(0.7, 0.4) == "normal"
    assert metrics.rpw_regime(0.75, 0.75) == "log"
    assert metrics.rpw_regime(0.9, 0.8) == "non-normal"
    assert metrics.urn_target_variance("rpw", 0.9, 0.8) == math.inf


def test_dbcd_variance_decreases_to_bound():
    lb = targets.sigma_lb(U, BERNOULLI, P)[0, 0]
    v = [metrics.urn_target_variance("dbcd", *P, gamma=g) for g in (0, 1, 2, 4, 16, 1e6)]
    assert all(a > b for a, b in zip(v, v[1:]))
    assert v[-1] == pytest.approx(lb, rel=1e-5)
    assert v[0] == pytest.approx(metrics.urn_target_variance("smlp", *P))


def test_table1_orderings():
    for p1 in np.linspace(0.1, 0.9, 9):
        for p2 in np.linspace(0.1, 0.9, 9):
            smlp = metrics.urn_target_variance("smlp", p1, p2)
            dbcd = metrics.urn_target_variance("dbcd", p1, p2, gamma=2)
            dl = metrics.urn_target_variance("dl", p1, p2)
            gdl = metrics.urn_target_variance("gdl", p1, p2)
            assert smlp > dbcd > dl
            assert gdl == pytest.approx(2 * dl)
            if p1 + p2 < 1.5:
                assert metrics.urn_target_variance("rpw", p1, p2) > dl


def test_rpw_variance_forms():
    a = metrics.urn_target_variance("rpw", *P, rpw="corollary")
    b = metrics.urn_target_variance("rpw", *P, rpw="table")
    assert a == pytest.approx(0.8889, abs=1e-4)
    assert b == pytest.approx(1.4444, abs=1e-4)


def _stats(arms, y, K=2):
    return EstimatorState.from_data(arms, y, K)


def test_wald_statistic_signs_and_ties():
    even = _stats([0, 0, 1, 1], [1, 0, 1, 0])
    assert metrics.wald_statistic(even, BERNOULLI) == 0.0
    better = _stats([0] * 10 + [1] * 10, [1] * 8 + [0] * 2 + [1] * 3 + [0] * 7)
    assert metrics.wald_statistic(better, BERNOULLI) > 0
    worse = _stats([1] * 10 + [0] * 10, [1] * 8 + [0] * 2 + [1] * 3 + [0] * 7)
    assert metrics.wald_statistic(worse, BERNOULLI) < 0
    with pytest.raises(ValueError):
        metrics.wald_test(_stats([0, 0], [1, 0]), BERNOULLI)


def test_wald_binary_value():
    st = _stats([0] * 10 + [1] * 10, [1] * 8 + [0] * 2 + [1] * 3 + [0] * 7)
    se = math.sqrt(0.8 * 0.2 / 10 + 0.3 * 0.7 / 10)
    assert metrics.wald_statistic(st, BERNOULLI) == pytest.approx(0.5 / se)


def test_type_one_error_under_complete_randomization():
    s = simulate(CompleteRandomization(2), ResponseModel.bernoulli(0.5, 0.5), 1000, 10_000,
                 seed=3, track=False)
    assert s.power(0.05) == pytest.approx(0.05, abs=0.01)


def test_jackknife_matches_direct_leave_one_out():
    rng = np.random.default_rng(4)
    x = rng.normal(size=40)
    loo = np.array([np.var(np.delete(x, i), ddof=1) for i in range(len(x))])
    direct = math.sqrt((len(x) - 1) / len(x) * ((loo - loo.mean()) ** 2).sum())
    assert metrics.jackknife_variance_se(x) == pytest.approx(direct)
    assert math.isnan(metrics.jackknife_variance_se([1.0, 2.0]))


def test_deterministic_alternation_has_no_variance():
    s = simulate(PlayTheWinner(), ResponseModel.bernoulli(0.0, 0.0), 100, 50, seed=5)
    mo = s.moments(0.5)
    assert mo.variance == pytest.approx(0.0, abs=1e-12)
    assert mo.bias == pytest.approx(0.0, abs=1e-12)
    assert mo.mean_failures == 100


def test_merge_is_associative_and_pools():
    m = ResponseModel.bernoulli(*P)
    d = coins.DBCD(U)
    a, b, c = (simulate(d, m, 100, 30, seed=s) for s in (6, 7, 8))
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    for f in ("proportions", "guess_rate", "mlr", "failures", "z"):
        assert np.array_equal(getattr(left, f), getattr(right, f))
    assert left.reps == 90
    with pytest.raises(ValueError):
        a.merge(simulate(d, m, 50, 5, seed=9))


def test_limits():
    assert metrics.sb_limit_lower([2 / 3, 1 / 3]) == pytest.approx(2 / 3)
    assert metrics.sb_limit_erade(0.5, 0.5) == pytest.approx(0.75)
    assert metrics.mlr_limit_erade(1.0, 0.6) == 0.0
    lb = targets.sigma_lb(U, BERNOULLI, P)[0, 0]
    assert metrics.sqrt_n_mlr_limit_dbcd(0, 2 / 3, lb) == pytest.approx(
        math.sqrt(8 / math.pi) * math.sqrt(lb))
    assert metrics.sqrt_n_mlr_limit_rpw(0.9, 0.8) == math.inf


def test_complete_randomization_reference():
    assert metrics.reference_variance("cr", BERNOULLI, P) == pytest.approx(0.25)
    s = simulate(CompleteRandomization(2), ResponseModel.bernoulli(*P), 400, 4000, seed=10, track=False)
    assert s.moments(0.5).variance == pytest.approx(0.25, rel=0.1)
