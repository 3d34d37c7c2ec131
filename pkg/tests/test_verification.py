import dataclasses
import json

import pytest

from fwgraph.verification import (
    FAIL,
    INCONCLUSIVE,
    PASS,
    S1_MODEL,
    S2_MODEL,
    AprioriTestConfig,
    ConfigError,
    CouplingTestConfig,
    EdgeTestConfig,
    GluingTestConfig,
    ModelConfig,
    apriori_bound_test,
    config_from_dict,
    coupling_decay_test,
    edge_convergence_test,
    gluing_test,
    loglog_slope,
    rung_seed,
    run_test,
    start_insensitivity,
    strictly_decreasing,
    total_variation,
)


def s1_model(**params):
    m = dict(S1_MODEL)
    m["params"] = {**m["params"], **params}
    return ModelConfig(**m)


def test_helpers():
    assert strictly_decreasing([3, 2, 1]) and not strictly_decreasing([3, 3, 1])
    assert loglog_slope([0.1, 0.2, 0.4], [0.01, 0.04, 0.16]) == pytest.approx(2.0)
    assert total_variation({0: 0.5, 1: 0.5}, {0: 0.25, 1: 0.25, 2: 0.5}) == pytest.approx(0.5)
    assert len({rung_seed(3, k) for k in range(10)}) == 10
    assert rung_seed(3, 1) == rung_seed(3, 1)


def test_reports_are_reproducible():
    cfg = AprioriTestConfig(ceilings=(4.0, 8.0), n_paths=300)
    a, b = apriori_bound_test(cfg), apriori_bound_test(cfg)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert "runtime" not in d and d["config"]["n_paths"] == 300
    assert a.text().startswith("apriori_bound: ")


def test_standard_errors_scale_with_paths_multiplier():
    cfg = AprioriTestConfig(ceilings=(4.0,), n_paths=2000)
    se1 = run_test("apriori_bound", cfg).rungs[0]["std_error"]
    se4 = run_test("apriori_bound", cfg, paths_multiplier=4).rungs[0]["std_error"]
    assert 1.8 <= se1 / se4 <= 2.2


def test_apriori_noise_free_never_hits():
    cfg = AprioriTestConfig(model=s1_model(noise=0.0), n_paths=50)
    rep = apriori_bound_test(cfg)
    assert [r["fraction"] for r in rep.rungs] == [0.0, 0.0, 0.0]
    assert rep.verdict == PASS


def test_apriori_ceiling_below_start_always_hits():
    rep = apriori_bound_test(AprioriTestConfig(ceilings=(0.5, 0.9), n_paths=50))
    assert [r["fraction"] for r in rep.rungs] == [1.0, 1.0]
    assert rep.verdict == FAIL


def test_edge_constant_f_has_no_gap():
    cfg = EdgeTestConfig(f_coefs=(3.0,), ladder=(0.2, 0.1), n_paths=100)
    rep = edge_convergence_test(cfg)
    for r in rep.rungs:
        assert r["raw_estimate"] == pytest.approx(3.0, abs=1e-12)
        assert r["gap"] < 1e-12


@pytest.mark.parametrize("band", [(0.5, 9.0), (0.0, 2.0)])
def test_edge_band_reaching_a_vertex_is_refused(band):
    with pytest.raises(ConfigError) as info:
        edge_convergence_test(EdgeTestConfig(band=band, n_paths=10))
    assert info.value.key == "band"


def test_edge_inconclusive_with_too_few_paths():
    rep = edge_convergence_test(EdgeTestConfig(ladder=(0.2, 0.1), n_paths=4, tolerance=1e-4))
    assert rep.verdict == INCONCLUSIVE


def test_gluing_without_interior_vertex_is_inconclusive():
    rep = gluing_test(GluingTestConfig(model=ModelConfig(**S1_MODEL), n_paths=10))
    assert rep.verdict == INCONCLUSIVE
    assert rep.rungs == []


def test_gluing_law_invariant_under_noise_scaling():
    base = GluingTestConfig(ladder=(0.04, 0.02), n_paths=200)
    m = dict(S2_MODEL)
    m["params"] = {"noise": 2.0}
    scaled = dataclasses.replace(base, model=ModelConfig(**m))
    a, b = gluing_test(base), gluing_test(scaled)
    for x, y in zip(a.summary["probs"], b.summary["probs"]):
        assert x == pytest.approx(y, abs=1e-10)
    assert a.summary["probs"] == pytest.approx([0.25, 0.25, 0.5], abs=0.01)


def test_start_insensitivity():
    cfg = GluingTestConfig(ladder=(0.04, 0.02), n_paths=3000)
    out = start_insensitivity(cfg)
    assert out["consistent"], out


def test_coupling_moments_decay_with_perturbation():
    # with sigma_eps = eps I the xi - x_tilde moment still rises from eps = 0.2 to 0.1,
    # so the ladder starts where the decay has set in
    cfg = CouplingTestConfig(model=s1_model(eps_drift=(1.0, 1.0), eps_diffusion=1.0),
                             ladder=(0.1, 0.05, 0.02), n_paths=1000)
    rep = coupling_decay_test(cfg)
    assert rep.summary["xi_x_decreasing"] and rep.summary["xi_xt_decreasing"]


def test_coupling_moments_vanish_at_small_horizon():
    rep = coupling_decay_test(CouplingTestConfig(ladder=(0.2, 0.1), horizon=0.005, n_paths=200))
    for r in rep.rungs:
        assert r["sup_xi_x4"] < 1e-6 and r["sup_xi_xt4"] < 1e-6


def test_config_from_dict():
    cfg = config_from_dict("edge_convergence", {"ladder": [0.2, 0.1], "model": dict(S1_MODEL)})
    assert cfg.ladder == (0.2, 0.1) and cfg.model.name == "harmonic"
    assert config_from_dict("gluing", None) == GluingTestConfig()


@pytest.mark.parametrize("kind, data, key", [
    ("edge_convergence", {"bogus": 1}, "verify.bogus"),
    ("edge_convergence", {"ladder": [0.1, 0.2]}, "verify.ladder"),
    ("edge_convergence", {"ladder": [0.1]}, "verify.ladder"),
    ("edge_convergence", {"band": [2.0, 0.5]}, "verify.band"),
    ("gluing", {"delta_prime": 0.1}, "verify.delta_prime"),
    ("apriori_bound", {"n_paths": 1}, "verify.n_paths"),
    ("coupling_decay", {"model": {"params": {}}}, "verify.model.name"),
    ("coupling_decay", {"model": {"name": "harmonic", "colour": 1}}, "verify.model.colour"),
])
def test_config_errors_name_the_key(kind, data, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(kind, data, prefix="verify.")
    assert info.value.key == key
    assert str(info.value).startswith(key + ":")
