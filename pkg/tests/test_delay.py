import numpy as np
import pytest

from rarlab import coins, targets, urns
from rarlab.core import Simulation, TrialState, run_trial
from rarlab.delay import DelayModel, RevealQueue, delay_probability, observed_view, reveal_epochs
from rarlab.models import ResponseModel

P = (0.7, 0.4)


def test_delay_probability_values():
    assert delay_probability(1.0, 3.0, 0) == 1.0
    assert delay_probability(2.0, 2.0, 5) == pytest.approx(0.5**5)
    with pytest.raises(ValueError):
        delay_probability(1.0, 1.0, -1)
    with pytest.raises(ValueError):
        delay_probability(0.0, 1.0, 1)


def test_delay_probability_matches_simulation():
    rng = np.random.default_rng(0)
    n, entry_mean, resp_mean = 100_000, 1.0, 1.5
    gaps = rng.exponential(entry_mean, (n, 6))
    resp = rng.exponential(resp_mean, n)
    waited = np.cumsum(gaps, axis=1)
    for lag in range(1, 6):
        still = np.mean(resp > waited[:, lag - 1])
        assert still == pytest.approx(delay_probability(entry_mean, resp_mean, lag), abs=0.01)


def _state(arms, y, t, r, K=2):
    return TrialState(K, np.array(arms), np.array(y, float), np.array(t, float), np.array(r, float),
                      np.full((len(arms), K), 1 / K), np.zeros(len(arms), int))


def test_observed_view_filters_by_arrival():
    # entries at 0,1,2,3 (plus the next arrival at 4)
    st = _state([0, 1, 0, 1], [1, 0, 1, 1], [0, 1, 2, 3, 4], [0.5, 5.0, 0.9, 0.2])
    v = observed_view(st, 2)  # before patient 3 arrives at t=2
    assert list(v.N) == [1, 0] and list(v.S) == [1, 0]
    v = observed_view(st, 4)
    assert list(v.N) == [2, 1]
    full = observed_view(st, None)
    assert list(full.N) == [2, 2] and list(full.S) == [2, 1]


def test_zero_and_infinite_delays():
    m = ResponseModel.bernoulli(*P)
    st = run_trial(coins.DBCD(targets.UrnTarget()), m, 60, delay=DelayModel(1.0, 0.0), seed=1)
    for e in range(61):
        v = observed_view(st, e)
        assert np.array_equal(v.N, np.bincount(st.assignments[:e], minlength=2))
    st = run_trial(coins.DBCD(targets.UrnTarget()), m, 60, delay=DelayModel(1.0, np.inf), seed=1)
    for e in range(61):
        assert observed_view(st, e).N.sum() == 0
    assert observed_view(st, None).N.sum() == 60


def test_engine_sees_exactly_the_observed_view():
    m = ResponseModel.bernoulli(*P)
    make = lambda: Simulation(coins.DBCD(targets.UrnTarget()), m, 200, reps=1, seed=2,
                              delay=DelayModel(1.0, 3.0), record=True)
    st = make().run().trial_state(0)
    sim = make()
    for e in range(200):
        sim.step()  # reveals epoch e, then assigns patient e
        assert np.array_equal(sim.obs.N[0], observed_view(st, e).N)


def test_reveal_epochs_binary_search():
    t = np.array([[0.0, 1.0, 2.0, 3.0, 4.0], [0.0, 0.5, 0.6, 10.0, 11.0]])
    e = reveal_epochs(t, 0, np.array([2.0, 0.55]))
    assert list(e) == [2, 2]
    e = reveal_epochs(t, 1, np.array([99.0, 1.0]))
    assert list(e) == [5, 3]


def test_reveal_queue_groups_by_epoch():
    q = RevealQueue()
    q.push(np.array([3, 1, 3]), np.array([0, 1, 2]), np.array([1, 0, 1]), np.array([1.0, 0.0, 1.0]))
    assert len(q) == 3
    rows, arms, y, inc = q.pop(3)
    assert sorted(rows) == [0, 2] and inc is None
    assert q.pop(2) is None


def test_observed_counts_monotone_and_bounded():
    m = ResponseModel.bernoulli(*P)
    sim = Simulation(urns.GeneralizedDropTheLoser(targets.UrnTarget()), m, 300, reps=20, seed=3,
                     delay=DelayModel(1.0, 2.0))
    prev = np.zeros((20, 2))
    while sim.m < sim.n:
        sim.step()
        obs = sim.obs.N
        assert np.all(obs >= prev) and np.all(obs <= sim.counts)
        prev = obs.copy()


def test_pending_stays_bounded():
    m = ResponseModel.bernoulli(*P)
    sim = Simulation(coins.DBCD(targets.UrnTarget()), m, 2000, reps=200, seed=4,
                     delay=DelayModel(1.0, 1.0)).run()
    pending = (sim.counts - sim.obs.N).mean(axis=0)
    assert np.all(pending < 3)


def test_per_arm_response_means():
    d = DelayModel(1.0, (0.5, 4.0))
    r = d.response_times(np.random.default_rng(5), (50_000, 2))
    assert r.mean(axis=0) == pytest.approx([0.5, 4.0], rel=0.03)
    with pytest.raises(ValueError):
        DelayModel(0.0)


def test_custom_samplers():
    d = DelayModel(entry_sampler=lambda rng, shape: np.full(shape, 2.0),
                   response_sampler=lambda rng, shape: np.full(shape, 3.0))
    rng = np.random.default_rng(0)
    assert d.entry_times(rng, (1, 4))[0] == pytest.approx([2, 4, 6, 8])
    assert np.all(d.response_times(rng, (3, 2)) == 3.0)


def test_immediate_designs_reject_delay():
    from rarlab.core import PlayTheWinner
    with pytest.raises(ValueError):
        Simulation(PlayTheWinner(), ResponseModel.bernoulli(*P), 10, delay=DelayModel())
