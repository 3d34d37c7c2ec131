import math

import numpy as np
import pytest

from fwgraph.fast_slow_sim import (
    CEILING,
    EXIT_BAND,
    EXIT_SADDLE,
    HORIZON,
    REACH_RING,
    ConfigurationError,
    NoiseStream,
    StopSpec,
    ceiling_fraction,
    check_dt,
    coupled_simulation,
    dump_paths_csv,
    edge_resolvent,
    hitting_statistics,
    integrate_ensemble,
    region_sampler,
    resolve_dt,
    ring_sampler,
    run_batched,
    simulate_path,
)
from fwgraph.hamiltonian_model import duffing, harmonic, operator_terms


def test_dt_is_capped_by_fast_scale():
    assert resolve_dt(None, 0.05) == pytest.approx(1e-3)
    assert resolve_dt(1e-4, 0.05) == 1e-4
    assert resolve_dt(1.0, 0.05) == pytest.approx(1e-3)
    check_dt(1e-3, 0.05)
    with pytest.raises(ConfigurationError, match="fast scale"):
        check_dt(2e-3, 0.05)
    with pytest.raises(ConfigurationError):
        check_dt(0.0, 0.05)


def test_noise_stream_independent_of_batching():
    a = NoiseStream(4, [0, 1, 2, 3], block=8)
    b = NoiseStream(4, [2, 3], block=8)
    first = [a.draw(np.arange(4)) for _ in range(20)]
    second = [b.draw(np.arange(2)) for _ in range(20)]
    for x, y in zip(first, second):
        np.testing.assert_array_equal(x[2:], y)


def test_stop_spec_predicates():
    spec = StopSpec(band=(1.0, 2.0), saddle=(0.0, 0.5), ring=(1.5, 1), ceiling=3.0)
    p = spec.predicates(np.array([0.9, 1.6, 3.5]))
    np.testing.assert_array_equal(p[EXIT_BAND], [True, False, True])
    np.testing.assert_array_equal(p[EXIT_SADDLE], [True, True, True])
    np.testing.assert_array_equal(p[REACH_RING], [False, True, True])
    np.testing.assert_array_equal(p[CEILING], [False, False, True])
    below = StopSpec(ring=(1.5, -1)).predicates(np.array([1.4, 1.6]))[REACH_RING]
    np.testing.assert_array_equal(below, [True, False])
    assert not StopSpec().fired(np.array([1.0])).any()


def test_simulation_is_deterministic(s1):
    q0 = np.tile([1.0, 0.0], (50, 1))
    a = integrate_ensemble(s1, q0, 0.2, 1e-3, seed=9, stop=StopSpec(band=(0.4, 0.6)))
    b = integrate_ensemble(s1, q0, 0.2, 1e-3, seed=9, stop=StopSpec(band=(0.4, 0.6)))
    np.testing.assert_array_equal(a.event_time, b.event_time)
    np.testing.assert_array_equal(a.event_state, b.event_state)
    c = integrate_ensemble(s1, q0, 0.2, 1e-3, seed=10, stop=StopSpec(band=(0.4, 0.6)))
    assert not np.array_equal(a.event_state, c.event_state)


def test_results_do_not_depend_on_workers(s1):
    q0 = np.array([1.0, 0.0])

    def run(ids):
        return integrate_ensemble(s1, np.repeat(q0[None], len(ids), 0), 0.1, 1e-3, 3, path_ids=ids).event_state

    one = np.concatenate(run_batched(run, 40, workers=1))
    many = np.concatenate(run_batched(run, 40, workers=4, batch=7))
    np.testing.assert_array_equal(one, many)


def test_noise_free_s1_conserves_h():
    sys = harmonic(noise=0.0, epsilon=0.05)
    q0 = np.array([[1.0, 0.0], [0.3, -2.0]])
    res = integrate_ensemble(sys, q0, 1.0, 1e-3, seed=0)
    np.testing.assert_allclose(sys.H(res.event_state), sys.H(q0), atol=1e-8)
    assert res.count(HORIZON) == 2


def test_start_outside_band_stops_immediately(s1):
    res = integrate_ensemble(s1, np.array([[3.0, 0.0]]), 1.0, 1e-3, seed=0, stop=StopSpec(band=(0.5, 2.0)))
    assert res.event_kind[0] == EXIT_BAND
    assert res.event_time[0] == 0.0


def test_refined_events_sit_on_the_boundary(s1):
    q0 = np.tile([1.0, 0.0], (200, 1))
    res = integrate_ensemble(s1, q0, 1.0, 1e-3, seed=2, stop=StopSpec(band=(0.45, 0.55)))
    done = res.event_kind == EXIT_BAND
    assert done.sum() > 150
    h_ev = s1.H(res.event_state[done])
    h_ex = s1.H(res.exit_state[done])
    dist_ev = np.minimum(np.abs(h_ev - 0.45), np.abs(h_ev - 0.55))
    dist_ex = np.minimum(np.abs(h_ex - 0.45), np.abs(h_ex - 0.55))
    assert np.all(dist_ev <= dist_ex + 1e-15)
    assert np.median(dist_ev) < 0.1 * np.median(dist_ex)
    assert np.all(res.event_time[done] <= res.exit_time[done])


def test_nonfinite_start_is_rejected(s1):
    with pytest.raises(ConfigurationError):
        integrate_ensemble(s1, np.array([[np.nan, 0.0]]), 1.0, 1e-3, seed=0)


def test_recorded_path(tmp_path, s1, s1_graph):
    rec = simulate_path(s1, s1_graph, (1.0, 0.0), 0.5, 1e-3, StopSpec(band=(0.2, 0.8)), rng_seed=4)
    assert rec.times[0] == 0.0 and np.all(np.diff(rec.times) > 0)
    np.testing.assert_allclose(rec.h_values, s1.H(rec.states))
    np.testing.assert_array_equal(rec.edge_ids, 0)
    assert rec.events[-1].kind in (EXIT_BAND, HORIZON)
    out = tmp_path / "p.csv"
    dump_paths_csv(out, [rec])
    assert len(out.read_text().splitlines()) == len(rec.times) + 1


def test_apriori_ceiling_fraction_is_small(s1):
    # H starts at 1 and drifts at rate 1; reaching 16 by t=1 needs an extreme excursion
    p, se = ceiling_fraction(s1, (math.sqrt(2), 0.0), 16.0, 1.0, 2000, 1e-3, rng_seed=3)
    assert p < 0.05
    p_low, _ = ceiling_fraction(s1, (math.sqrt(2), 0.0), 0.5, 1.0, 200, 1e-3, rng_seed=3)
    assert p_low == 1.0


def test_resolvent_functional_constant_f_is_exact(s1, s1_coeffs):
    r = edge_resolvent(s1, s1_coeffs, [2.0], 1.0, (math.sqrt(2), 0.0), (0.5, 2.0), 200, 1e-3, seed=1)
    assert r.raw_estimate == pytest.approx(2.0, abs=1e-12)
    assert r.raw_std_error < 1e-12


def test_resolvent_functional_close_to_f(s1, s1_coeffs):
    r = edge_resolvent(s1, s1_coeffs, [0, 0, 1], 1.0, (math.sqrt(2), 0.0), (0.5, 2.0), 1000, 1e-3, seed=1)
    assert abs(r.estimate - 1.0) < 0.05
    # the control variate is a variance reduction, not a bias
    assert r.std_error < r.raw_std_error
    assert abs(r.estimate - r.raw_estimate) < 4 * r.raw_std_error


def test_resolvent_band_must_fit_in_edge(s1, s1_coeffs):
    with pytest.raises(ConfigurationError):
        edge_resolvent(s1, s1_coeffs, [1.0], 1.0, (1.0, 0.0), (0.5, 9.0), 10, 1e-3, seed=1)


def test_beta_is_a_brownian_motion(s1, s1_coeffs):
    # int V dW with |V| = 1: Var beta_t / t = 1
    cp = coupled_simulation(s1, s1_coeffs, (math.sqrt(2), 0.0), 0.5, 1e-3, 8, (1e-3, 7.9),
                            n_paths=2000, record=True)
    for k in (100, 250, 500):
        t = cp.times[k]
        ratio = np.var(cp.beta[:, k]) / t
        # sample variance of 2000 normals: SE about 0.032
        assert abs(ratio - 1.0) < 0.1


def test_coupling_vanishes_at_small_horizon(s1, s1_coeffs):
    cp = coupled_simulation(s1, s1_coeffs, (1.0, 0.0), 0.005, 1e-3, 5, (0.25, 4.0), n_paths=500)
    assert np.mean(cp.sup_xi_x4) < 1e-6
    assert np.mean(cp.sup_xi_xt4) < 1e-6


def test_coupling_records_period_marks(s1, s1_coeffs):
    cp = coupled_simulation(s1, s1_coeffs, (1.0, 0.0), 0.1, 1e-3, 5, (0.25, 4.0), n_paths=3, record=True)
    marks = np.diff(cp.period_marks[0])
    # eps * T = 0.05 * 2 pi, rounded up to the step grid
    assert np.all(np.abs(marks - 0.05 * 2 * math.pi) <= 1e-3 + 1e-12)
    assert cp.xi.shape == (3, len(cp.times))


def test_coupling_rejects_bad_start(s1, s1_coeffs):
    with pytest.raises(ConfigurationError, match="start level"):
        coupled_simulation(s1, s1_coeffs, (3.0, 0.0), 0.1, 1e-3, 5, (0.25, 4.0))


def test_ring_sampler_sides(s2, s2_graph):
    below = ring_sampler(s2, s2_graph, 2, -0.01)
    above = ring_sampler(s2, s2_graph, 2, 0.01)
    assert len(below.cycles) == 2 and len(above.cycles) == 1
    pts = below.sample(100, np.random.default_rng(0))
    np.testing.assert_allclose(s2.H(pts), -0.01, atol=1e-8)
    with pytest.raises(ConfigurationError):
        ring_sampler(s2, s2_graph, 0, -0.01)


def test_region_sampler_levels(s2, s2_graph):
    rs = region_sampler(s2, s2_graph, 2, 0.01, n_levels=4)
    pts = rs.sample(500, np.random.default_rng(1))
    assert np.all(np.abs(s2.H(pts)) < 0.01)


def test_symmetric_lobe_exits(s2, s2_graph):
    start = ring_sampler(s2, s2_graph, 2, -0.005)
    hs = hitting_statistics(s2, s2_graph, 2, start, 0.05, 2000, 2e-4, rng_seed=6)
    assert hs.n_timeouts == 0
    assert sum(hs.probabilities) == pytest.approx(1.0)
    p0, p1 = hs.prob(0), hs.prob(1)
    # multinomial variance of p0 - p1, covariance term included
    se = math.sqrt((p0 + p1 - (p0 - p1) ** 2) / hs.n_exits)
    assert abs(p0 - p1) < 3 * se
    assert hs.mean_exit_time > 0


def test_mean_time_near_saddle_shrinks_faster_than_delta(s2_graph):
    # the window must be crossed over many fast periods for the averaged shape
    # delta^2 log(1/delta) to show; at eps = 5e-4 the fast period is about 0.005
    sys = duffing(epsilon=5e-4)
    start = ring_sampler(sys, s2_graph, 2, -5e-4)
    times = [hitting_statistics(sys, s2_graph, 2, start, d, 1000, 1e-5, rng_seed=6, horizon=0.5).mean_exit_time
             for d in (0.05, 0.025)]
    # delta^2 log(1/delta) predicts 3.25 for this pair; linear scaling would give 2
    assert 2.0 < times[0] / times[1] < 4.0


class _ItoResidual:
    def __init__(self, sys):
        self.sys, self.res = sys, []

    def step(self, idx, t, h, q_old, q_det, q_new, dw, stopping):
        l0, r0, l0e, r0e = operator_terms(self.sys, q_old, self.sys.epsilon)
        pred = (l0 + l0e) * h + np.sum((r0 + r0e) * dw, axis=1)
        self.res.append(self.sys.H(q_new) - self.sys.H(q_old) - pred)


def test_h_increments_follow_ito_formula():
    sys = duffing(epsilon=0.05, eps_drift=(1.0, 0.0), eps_diffusion=1.0)
    dts = [1e-3, 5e-4, 2.5e-4, 1.25e-4]
    rms, means = [], []
    for dt in dts:
        obs = _ItoResidual(sys)
        integrate_ensemble(sys, np.tile([1.5, 0.0], (100, 1)), 0.05, dt, 1, observer=obs)
        r = np.concatenate(obs.res)
        rms.append(np.sqrt(np.mean(r ** 2)))
        means.append(abs(r.mean()))
    # per-step residual is the O(dt) remainder of the Ito-Taylor expansion
    slope = np.polyfit(np.log(dts), np.log(rms), 1)[0]
    assert 0.9 < slope < 1.1
    assert means[-1] < means[0]
