"""Desk-scale statistical checks of the averaging limit.

Each test takes a plain config dataclass and returns a ``ComparisonReport``.
Reports hold only the numbers their verdicts were derived from; wall-clock
runtime is kept on the report object but left out of its JSON so that reruns
with the same config and seed are byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .fast_slow_sim import (ceiling_fraction, coupled_simulation, edge_resolvent, hitting_statistics,
                            region_sampler, resolve_dt, ring_sampler)
from .hamiltonian_model import HamiltonianSystem, make_model
from .level_integrals import edge_coefficients, gluing_probabilities, point_on_level
from .topology import ReebGraph, analyse, identify

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"


@dataclass
class ComparisonReport:
    name: str
    ladder: list
    rungs: list
    verdict: str
    summary: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    runtime: float = 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("runtime")
        return d

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def text(self) -> str:
        lines = [f"{self.name}: {self.verdict.upper()}"]
        for r in self.rungs:
            lines.append("  " + ", ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
        for k, v in self.summary.items():
            lines.append(f"  {k}: {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def rung_seed(seed: int, rung: int) -> int:
    """Independent per-rung seed derived from the master seed."""
    return int(np.random.SeedSequence([int(seed), int(rung)]).generate_state(1)[0])


def strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def decreasing_within_noise(values, std_errors, n_se: float = 3.0) -> bool:
    """No rung-to-rung increase larger than ``n_se`` combined standard errors."""
    pairs = zip(values, values[1:], std_errors, std_errors[1:])
    return all(b < a + n_se * math.hypot(sa, sb) for a, b, sa, sb in pairs)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


# -- configs ----------------------------------------------------------------------------

@dataclass
class ModelConfig:
    name: str
    params: dict = field(default_factory=dict)
    h_max: float = 8.0
    search_box: tuple = (-5.0, 5.0, -5.0, 5.0)
    levels_per_edge: int = 64

    def system(self, eps: float) -> HamiltonianSystem:
        return make_model(self.name, epsilon=float(eps), **self.params)

    def graph(self) -> ReebGraph:
        return analyse(self.system(1.0), self.h_max, tuple(self.search_box))


S1_MODEL = dict(name="harmonic", params={"noise": 1.0}, h_max=8.0, search_box=(-4.5, 4.5, -4.5, 4.5))
S2_MODEL = dict(name="duffing", params={"noise": 1.0}, h_max=2.0, search_box=(-3.0, 3.0, -3.0, 3.0))


@dataclass
class EdgeTestConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**S1_MODEL))
    ladder: tuple = (0.2, 0.1, 0.05)
    f_coefs: tuple = (0.0, 0.0, 1.0)
    lam: float = 1.0
    band: tuple = (0.5, 2.0)
    x0: float = 1.0
    n_paths: int = 5000
    horizon: float = 2.0
    tolerance: float = 0.05
    seed: int = 11
    workers: int = 1


@dataclass
class GluingTestConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**S2_MODEL))
    ladder: tuple = (0.04, 0.02, 0.01)
    vertex_id: int | None = None
    # exits at |H - c| = delta favour the outer edge by about 6 delta / beta_outer,
    # so delta is picked to keep that shift inside bias_budget
    delta: float = 0.02
    delta_prime: float = 0.002
    n_paths: int = 10000
    horizon: float = 5.0
    kappa: float = 0.03
    bias_budget: float = 0.02
    seed: int = 3
    workers: int = 1


@dataclass
class AprioriTestConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**S1_MODEL))
    epsilon: float = 0.05
    ceilings: tuple = (4.0, 8.0, 16.0)
    q0: tuple = (math.sqrt(2.0), 0.0)
    horizon: float = 1.0
    eta: float = 0.05
    n_paths: int = 10000
    seed: int = 3
    workers: int = 1


@dataclass
class CouplingTestConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(**S1_MODEL))
    ladder: tuple = (0.2, 0.1, 0.05, 0.02)
    q0: tuple = (1.0, 0.0)
    band: tuple = (0.25, 4.0)
    horizon: float = 1.0
    min_slope: float = 1.5
    n_paths: int = 4000
    seed: int = 5
    workers: int = 1


CONFIG_TYPES = {
    "edge_convergence": EdgeTestConfig,
    "gluing": GluingTestConfig,
    "apriori_bound": AprioriTestConfig,
    "coupling_decay": CouplingTestConfig,
}


class ConfigError(ValueError):
    """Invalid config; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def config_from_dict(kind: str, data: dict | None, prefix: str = ""):
    """Build a test config from a plain mapping, rejecting unknown keys."""
    cls = CONFIG_TYPES[kind]
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{prefix}{k}", "unknown key")
    if "model" in data:
        m = data["model"]
        if not isinstance(m, dict) or "name" not in m:
            raise ConfigError(f"{prefix}model.name", "required")
        mnames = {f.name for f in dataclasses.fields(ModelConfig)}
        for k in m:
            if k not in mnames:
                raise ConfigError(f"{prefix}model.{k}", "unknown key")
        data["model"] = ModelConfig(**m)
    for k, v in list(data.items()):
        if isinstance(v, list):
            data[k] = tuple(v)
    cfg = cls(**data)
    validate_config(cfg, prefix)
    return cfg


def validate_config(cfg, prefix: str = "") -> None:
    if getattr(cfg, "n_paths", 1) < 2:
        raise ConfigError(f"{prefix}n_paths", "must be at least 2")
    ladder = getattr(cfg, "ladder", None)
    if ladder is not None:
        if len(ladder) < 2 or any(e <= 0 for e in ladder):
            raise ConfigError(f"{prefix}ladder", "needs at least two positive values")
        if not strictly_decreasing(list(ladder)):
            raise ConfigError(f"{prefix}ladder", "must be strictly descending")
    band = getattr(cfg, "band", None)
    if band is not None and not band[0] < band[1]:
        raise ConfigError(f"{prefix}band", "lower end must be below the upper end")
    if hasattr(cfg, "delta_prime") and not 0 < cfg.delta_prime < cfg.delta:
        raise ConfigError(f"{prefix}delta_prime", "must lie in (0, delta)")


def scale_paths(cfg, multiplier: float):
    """Copy of ``cfg`` with ``n_paths`` multiplied (standard errors shrink like 1/sqrt)."""
    return dataclasses.replace(cfg, n_paths=max(2, int(round(cfg.n_paths * multiplier))))


def _finish(report: ComparisonReport, t0: float, cfg) -> ComparisonReport:
    report.config = _plain(dataclasses.asdict(cfg))
    report.runtime = time.perf_counter() - t0
    return report


# -- tests ------------------------------------------------------------------------------

def edge_convergence_test(cfg: EdgeTestConfig) -> ComparisonReport:
    """Resolvent identity on full-system paths, stopped at the exit of a band inside one edge."""
    t0 = time.perf_counter()
    graph = cfg.model.graph()
    sys1 = cfg.model.system(1.0)
    e = _edge_containing(graph, cfg.x0)
    if not (e.h_interval[0] < cfg.band[0] and cfg.band[1] <= e.h_interval[1]):
        raise ConfigError("band", f"{tuple(cfg.band)} is not contained in edge {e.id} {e.h_interval}")
    coeffs = edge_coefficients(sys1, graph, e.id, cfg.model.levels_per_edge, with_defect=False)
    q0 = point_on_level(sys1, graph, e.id, cfg.x0)
    target = float(np.polynomial.Polynomial(cfg.f_coefs)(cfg.x0))
    rungs, gaps = [], []
    for k, eps in enumerate(cfg.ladder):
        sys = cfg.model.system(eps)
        r = edge_resolvent(sys, coeffs, cfg.f_coefs, cfg.lam, q0, tuple(cfg.band), cfg.n_paths,
                           resolve_dt(None, eps), rung_seed(cfg.seed, k), cfg.horizon, cfg.workers)
        gap = abs(r.estimate - target)
        gaps.append(gap)
        rungs.append({"epsilon": eps, "estimate": r.estimate, "std_error": r.std_error,
                      "raw_estimate": r.raw_estimate, "raw_std_error": r.raw_std_error,
                      "reference": target, "gap": gap, "mean_exit_time": r.mean_exit_time,
                      "verdict": PASS if gap < cfg.tolerance else FAIL})
    final_se = rungs[-1]["std_error"]
    # gaps this small are dominated by Monte Carlo noise, so the trend is judged within 3 SE
    trend = decreasing_within_noise(gaps, [r["std_error"] for r in rungs])
    if final_se > cfg.tolerance / 3:
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if trend and gaps[-1] < cfg.tolerance else FAIL
    summary = {"strictly_decreasing": strictly_decreasing(gaps), "decreasing_within_noise": trend,
               "final_gap": gaps[-1], "tolerance": cfg.tolerance}
    return _finish(ComparisonReport("edge_convergence", list(cfg.ladder), rungs, verdict, summary), t0, cfg)


def _edge_containing(graph: ReebGraph, h: float):
    """First edge whose open level interval contains ``h``."""
    for e in graph.edges:
        if e.h_interval[0] < h < e.h_interval[1]:
            return e
    raise ConfigError("x0", f"level {h} is not inside any edge")


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * float(sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys))


def gluing_test(cfg: GluingTestConfig) -> ComparisonReport:
    """Exit law from a saddle neighbourhood against the gluing probabilities."""
    t0 = time.perf_counter()
    graph = cfg.model.graph()
    sys1 = cfg.model.system(1.0)
    interior = graph.interior_vertices()
    if not interior:
        report = ComparisonReport("gluing", list(cfg.ladder), [], INCONCLUSIVE,
                                  {"reason": "graph has no interior vertex"})
        return _finish(report, t0, cfg)
    vid = interior[0].id if cfg.vertex_id is None else cfg.vertex_id
    glue = gluing_probabilities(sys1, graph, vid)
    start = region_sampler(sys1, graph, vid, cfg.delta_prime)
    rungs, tvs = [], []
    for k, eps in enumerate(cfg.ladder):
        sys = cfg.model.system(eps)
        hs = hitting_statistics(sys, graph, vid, start, cfg.delta, cfg.n_paths, resolve_dt(None, eps),
                                rung_seed(cfg.seed, k), cfg.horizon, cfg.workers)
        emp = {e: hs.prob(e) for e in hs.edge_ids}
        tv = total_variation(emp, glue.probs)
        tvs.append(tv)
        within = all(abs(emp[e] - glue.probs[e]) <= 3 * se + cfg.bias_budget
                     for e, se in zip(hs.edge_ids, hs.std_errors))
        rungs.append({"epsilon": eps, "edges": list(hs.edge_ids), "empirical": list(hs.probabilities),
                      "std_errors": list(hs.std_errors), "reference": [glue.probs[e] for e in hs.edge_ids],
                      "tv": tv, "within_budget": within, "timeouts": hs.n_timeouts,
                      "mean_exit_time": hs.mean_exit_time,
                      "verdict": PASS if tv < cfg.kappa else FAIL})
    if rungs[-1]["timeouts"] > 0.01 * cfg.n_paths:
        verdict = INCONCLUSIVE
    else:
        verdict = PASS if strictly_decreasing(tvs) and tvs[-1] < cfg.kappa else FAIL
    summary = {"vertex_id": vid, "betas": [glue.betas[e] for e in sorted(glue.betas)],
               "probs": [glue.probs[e] for e in sorted(glue.probs)], "decreasing": strictly_decreasing(tvs),
               "final_tv": tvs[-1], "kappa": cfg.kappa,
               "final_within_budget": rungs[-1]["within_budget"]}
    return _finish(ComparisonReport("gluing", list(cfg.ladder), rungs, verdict, summary), t0, cfg)


def start_insensitivity(cfg: GluingTestConfig, offsets=None) -> dict:
    """Exit laws from two rings on opposite sides of the vertex at the last ladder rung.

    ``offsets`` default to ``+-0.1 delta'``; the gap between the two laws grows
    like ``offset / delta`` so rings far out in the region separate by design.
    """
    graph = cfg.model.graph()
    sys1 = cfg.model.system(1.0)
    vid = graph.interior_vertices()[0].id if cfg.vertex_id is None else cfg.vertex_id
    offsets = offsets or (0.1 * cfg.delta_prime, -0.1 * cfg.delta_prime)
    eps = cfg.ladder[-1]
    sys = cfg.model.system(eps)
    out = []
    for k, off in enumerate(offsets):
        hs = hitting_statistics(sys, graph, vid, ring_sampler(sys1, graph, vid, off), cfg.delta, cfg.n_paths,
                                resolve_dt(None, eps), rung_seed(cfg.seed, 100 + k), cfg.horizon, cfg.workers)
        out.append(hs)
    a, b = out
    worst = max(abs(pa - pb) / math.sqrt(sa ** 2 + sb ** 2)
                for pa, pb, sa, sb in zip(a.probabilities, b.probabilities, a.std_errors, b.std_errors))
    return {"offsets": list(offsets), "laws": [list(a.probabilities), list(b.probabilities)],
            "max_z": worst, "consistent": worst <= 3.0}


def apriori_bound_test(cfg: AprioriTestConfig) -> ComparisonReport:
    """Fraction of paths reaching ``H >= H0`` before the horizon, along a ladder of ``H0``."""
    t0 = time.perf_counter()
    sys = cfg.model.system(cfg.epsilon)
    dt = resolve_dt(None, cfg.epsilon)
    rungs, fr = [], []
    for k, h0 in enumerate(cfg.ceilings):
        p, se = ceiling_fraction(sys, cfg.q0, h0, cfg.horizon, cfg.n_paths, dt, rung_seed(cfg.seed, k), cfg.workers)
        fr.append(p)
        rungs.append({"ceiling": h0, "fraction": p, "std_error": se})
    monotone = all(b < a or a == b == 0.0 for a, b in zip(fr, fr[1:]))
    verdict = PASS if monotone and fr[-1] < cfg.eta else FAIL
    summary = {"monotone": monotone, "top_fraction": fr[-1], "eta": cfg.eta}
    return _finish(ComparisonReport("apriori_bound", list(cfg.ceilings), rungs, verdict, summary), t0, cfg)


def coupling_decay_test(cfg: CouplingTestConfig) -> ComparisonReport:
    """Fourth moments of the auxiliary-process gaps along the eps ladder."""
    t0 = time.perf_counter()
    graph = cfg.model.graph()
    sys1 = cfg.model.system(1.0)
    edge = identify(graph, sys1, cfg.q0).edge_id
    coeffs = edge_coefficients(sys1, graph, edge, cfg.model.levels_per_edge, with_defect=False)
    rungs, m1, m2 = [], [], []
    for k, eps in enumerate(cfg.ladder):
        sys = cfg.model.system(eps)
        cp = coupled_simulation(sys, coeffs, cfg.q0, cfg.horizon, resolve_dt(None, eps), rung_seed(cfg.seed, k),
                                tuple(cfg.band), cfg.n_paths, workers=cfg.workers)
        se = lambda v: float(np.std(v, ddof=1) / math.sqrt(len(v)))
        m1.append(float(cp.sup_xi_x4.mean()))
        m2.append(float(cp.sup_xi_xt4.mean()))
        rungs.append({"epsilon": eps, "sup_xi_x4": m1[-1], "sup_xi_x4_se": se(cp.sup_xi_x4),
                      "sup_xi_xt4": m2[-1], "sup_xi_xt4_se": se(cp.sup_xi_xt4)})
    slope_x = loglog_slope(cfg.ladder, m1)
    slope_xt = loglog_slope(cfg.ladder, m2)
    ok = strictly_decreasing(m1) and strictly_decreasing(m2) and slope_xt >= cfg.min_slope
    summary = {"slope_xi_x": slope_x, "slope_xi_xt": slope_xt, "min_slope": cfg.min_slope,
               "xi_x_decreasing": strictly_decreasing(m1), "xi_xt_decreasing": strictly_decreasing(m2)}
    return _finish(ComparisonReport("coupling_decay", list(cfg.ladder), rungs, PASS if ok else FAIL, summary),
                   t0, cfg)


TESTS = {
    "edge_convergence": edge_convergence_test,
    "gluing": gluing_test,
    "apriori_bound": apriori_bound_test,
    "coupling_decay": coupling_decay_test,
}


def run_test(kind: str, cfg, paths_multiplier: float = 1.0) -> ComparisonReport:
    if paths_multiplier != 1.0:
        cfg = scale_paths(cfg, paths_multiplier)
    return TESTS[kind](cfg)
