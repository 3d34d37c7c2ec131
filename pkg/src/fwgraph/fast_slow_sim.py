"""Monte Carlo simulation of the fast-slow SDE and its projection onto the graph.

Each step splits the dynamics: the deterministic part
``g/eps + b + b_eps`` is advanced by one classical RK4 step, after which the
noise increment ``(sigma + sigma_eps)(q) dW`` is added. With plain
Euler-Maruyama the stiff rotation ``g/eps`` would inflate ``H`` by a few
percent per fast period; the RK4 sub-step keeps ``H`` conserved by the fast
flow to high order.

Paths are simulated as a vectorised ensemble. Every path owns a counter-based
generator keyed by ``(seed, path index)``, so results do not depend on how
paths are batched or scheduled.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian_model import HamiltonianSystem, rk4_step
from .level_integrals import EdgeCoefficients, trace_cycle
from .topology import OutOfChart, ReebGraph, identify_many

C_STEP = 1.0 / 50.0
REFINE_TOL = 1e-3
V_DEGENERATE = 1e-12

EXIT_BAND = "exit_energy_band"
EXIT_SADDLE = "exit_saddle_nbhd"
REACH_RING = "reach_level_ring"
CEILING = "energy_ceiling"
HORIZON = "horizon"
BLOWUP = "blowup"


class ConfigurationError(ValueError):
    pass


class PeriodEstimationError(RuntimeError):
    pass


def resolve_dt(dt: float | None, eps: float, c_step: float = C_STEP) -> float:
    """Step actually used: ``min(dt, c_step * eps)``."""
    cap = c_step * eps
    return cap if dt is None else min(float(dt), cap)


def check_dt(dt: float, eps: float, c_step: float = C_STEP) -> None:
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    if dt > c_step * eps * (1 + 1e-12):
        raise ConfigurationError(f"fast scale unresolved: dt={dt} exceeds {c_step:g}*eps={c_step * eps:g}")


# -- noise -----------------------------------------------------------------

def path_generator(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


class NoiseStream:
    """Standard normal 2-vectors, one per step, from per-path Philox streams."""

    def __init__(self, seed: int, path_ids, block: int = 128):
        self.gens = [path_generator(seed, i) for i in path_ids]
        self.block = block
        self.buf = np.empty((len(self.gens), block, 2))
        self.pos = block

    def draw(self, active: np.ndarray) -> np.ndarray:
        if self.pos == self.block:
            for k in active:
                self.buf[k] = self.gens[k].standard_normal((self.block, 2))
            self.pos = 0
        out = self.buf[active, self.pos]
        self.pos += 1
        return out


# -- stopping rules -----------------------------------------------------------

@dataclass(frozen=True)
class StopSpec:
    """Stopping rules checked after every step.

    ``band=(H1, H2)`` fires when ``H <= H1`` or ``H >= H2``; ``saddle=(c, delta)``
    when ``|H - c| >= delta``; ``ring=(level, direction)`` when ``H`` reaches the
    level from below (``direction=+1``) or above (``-1``); ``ceiling=H0`` when
    ``H >= H0``.
    """
    band: tuple[float, float] | None = None
    saddle: tuple[float, float] | None = None
    ring: tuple[float, int] | None = None
    ceiling: float | None = None

    def predicates(self, h: np.ndarray) -> dict:
        out = {}
        if self.band is not None:
            out[EXIT_BAND] = (h <= self.band[0]) | (h >= self.band[1])
        if self.saddle is not None:
            out[EXIT_SADDLE] = np.abs(h - self.saddle[0]) >= self.saddle[1]
        if self.ring is not None:
            level, direction = self.ring
            out[REACH_RING] = h >= level if direction > 0 else h <= level
        if self.ceiling is not None:
            out[CEILING] = h >= self.ceiling
        return out

    def fired(self, h: np.ndarray) -> np.ndarray:
        preds = self.predicates(h)
        if not preds:
            return np.zeros(np.shape(h), dtype=bool)
        return np.logical_or.reduce(list(preds.values()))


@dataclass(frozen=True)
class StoppingEvent:
    kind: str
    time: float
    state: tuple[float, float]


def _refine(sys: HamiltonianSystem, stop: StopSpec, q_old, q_new, tol: float = REFINE_TOL):
    """Bisection on the chord ``q_old -> q_new``; returns ``(theta, kinds)`` per path."""
    lo = np.zeros(len(q_old))
    hi = np.ones(len(q_old))
    for _ in range(int(math.ceil(math.log2(1.0 / tol)))):
        mid = 0.5 * (lo + hi)
        f = stop.fired(sys.H(q_old + mid[:, None] * (q_new - q_old)))
        hi = np.where(f, mid, hi)
        lo = np.where(f, lo, mid)
    preds = stop.predicates(sys.H(q_old + hi[:, None] * (q_new - q_old)))
    kinds = []
    for k in range(len(q_old)):
        kinds.append(next(name for name, mask in preds.items() if mask[k]))
    return hi, kinds


# -- ensemble engine -----------------------------------------------------------

@dataclass
class EnsembleResult:
    """Per-path outcome; ``event_kind`` is ``horizon`` for paths that ran to the end."""
    path_ids: np.ndarray
    event_kind: np.ndarray
    event_time: np.ndarray
    event_state: np.ndarray
    exit_time: np.ndarray
    exit_state: np.ndarray
    n_steps: int

    def count(self, kind: str) -> int:
        return int(np.sum(self.event_kind == kind))


def integrate_ensemble(sys: HamiltonianSystem, q0, horizon: float, dt: float, seed: int,
                       stop: StopSpec | None = None, observer=None, path_ids=None,
                       eps: float | None = None, c_step: float = C_STEP, block: int = 128,
                       refine: bool = True) -> EnsembleResult:
    """Simulate an ensemble of paths of the full SDE until a stopping rule or the horizon.

    ``observer.step(idx, t, h, q_old, q_det, q_new, dw, stopping)`` is called after
    every step with the indices of the active paths, the step start time and
    length, the pre-step state, the state after the deterministic sub-step, the
    new state, the Wiener increments and a mask of paths stopped by this step.
    ``exit_time``/``exit_state`` are the unrefined first post-exit step.
    """
    eps = sys.epsilon if eps is None else eps
    check_dt(dt, eps, c_step)
    q = np.array(q0, dtype=float).reshape(-1, 2)
    n = len(q)
    path_ids = np.arange(n) if path_ids is None else np.asarray(path_ids)
    if not np.all(np.isfinite(q)):
        raise ConfigurationError("initial states must be finite")
    stop = stop or StopSpec()
    kind = np.full(n, HORIZON, dtype=object)
    ev_t = np.full(n, float(horizon))
    ev_q = q.copy()
    ex_t = np.full(n, float(horizon))
    ex_q = q.copy()

    alive = ~stop.fired(sys.H(q))
    for k in np.flatnonzero(~alive):
        preds = stop.predicates(sys.H(q[k:k + 1]))
        kind[k] = next(name for name, m in preds.items() if m[0])
        ev_t[k] = ex_t[k] = 0.0

    noise = NoiseStream(seed, path_ids, block)

    def drift(z):
        return sys.g(z) / eps + sys.b(z) + sys.b_eps(z, eps)

    n_steps = int(math.ceil(horizon / dt - 1e-9))
    t = 0.0
    for step in range(n_steps):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        h = min(dt, horizon - t)
        z = q[idx]
        dw = noise.draw(idx) * math.sqrt(h)
        z_det = rk4_step(drift, z, h)
        sig = sys.sigma(z) + sys.sigma_eps(z, eps)
        z_new = z_det + np.einsum("nij,nj->ni", sig, dw)
        finite = np.all(np.isfinite(z_new), axis=1)
        hit = np.zeros(len(idx), dtype=bool)
        hit[finite] = stop.fired(sys.H(z_new[finite]))
        last = step == n_steps - 1
        stopping = hit | ~finite
        if observer is not None:
            observer.step(idx, t, h, z, z_det, z_new, dw, stopping)
        t_new = horizon if last else t + h

        for k in np.flatnonzero(~finite):
            g = idx[k]
            kind[g], ev_t[g], ev_q[g], ex_t[g], ex_q[g] = BLOWUP, t, z[k], t, z[k]
        sel = np.flatnonzero(hit)
        if len(sel):
            g = idx[sel]
            ex_t[g], ex_q[g] = t_new, z_new[sel]
            if refine:
                theta, kinds = _refine(sys, stop, z[sel], z_new[sel])
                ev_q[g] = z[sel] + theta[:, None] * (z_new[sel] - z[sel])
                ev_t[g] = t + theta * h
                kind[g] = kinds
            else:
                ev_q[g], ev_t[g] = z_new[sel], t_new
                preds = stop.predicates(sys.H(z_new[sel]))
                kind[g] = [next(nm for nm, m in preds.items() if m[j]) for j in range(len(sel))]
        q[idx] = z_new
        alive[idx[stopping]] = False
        t = t_new
    live = np.flatnonzero(alive)
    ev_q[live] = q[live]
    ex_q[live] = q[live]
    return EnsembleResult(path_ids, kind, ev_t, ev_q, ex_t, ex_q, n_steps)


def run_batched(fn, n_paths: int, workers: int = 1, batch: int | None = None):
    """Split ``range(n_paths)`` into contiguous batches and run ``fn(path_ids)`` on each.

    Results are returned in batch order, so the outcome does not depend on ``workers``.
    """
    if batch is None:
        batch = n_paths if workers <= 1 else max(1, -(-n_paths // workers))
    chunks = [np.arange(s, min(s + batch, n_paths)) for s in range(0, n_paths, batch)]
    if workers <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


# -- single recorded path -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathRecord:
    dt: float
    times: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    h_values: np.ndarray = field(repr=False)
    edge_ids: np.ndarray = field(repr=False)
    events: tuple[StoppingEvent, ...]


class _Recorder:
    def __init__(self):
        self.times, self.states = [], []

    def step(self, idx, t, h, q_old, q_det, q_new, dw, stopping):
        if not stopping[0]:
            self.times.append(t + h)
            self.states.append(q_new[0].copy())


def _project(graph: ReebGraph | None, sys: HamiltonianSystem, states: np.ndarray) -> np.ndarray:
    edges = np.full(len(states), -1, dtype=int)
    if graph is None or len(states) == 0:
        return edges
    ok = np.all(np.isfinite(states), axis=1) & (sys.H(states) <= graph.h_max)
    if ok.any():
        try:
            edges[ok] = identify_many(graph, sys, states[ok])[1]
        except OutOfChart:
            pass
    return edges


def simulate_path(sys: HamiltonianSystem, graph: ReebGraph | None, q0, horizon: float, dt: float,
                  stop_spec: StopSpec | None = None, rng_seed: int = 0, path_index: int = 0) -> PathRecord:
    """Simulate and record one path; the record ends at the first stopping event."""
    check_dt(dt, sys.epsilon)
    q0 = np.asarray(q0, dtype=float)
    rec = _Recorder()
    res = integrate_ensemble(sys, q0[None, :], horizon, dt, rng_seed, stop_spec, rec, [path_index])
    times = [0.0] + rec.times
    states = [q0] + rec.states
    kind = res.event_kind[0]
    events = ()
    if kind != HORIZON or res.event_time[0] < horizon:
        events = (StoppingEvent(kind, float(res.event_time[0]), tuple(map(float, res.event_state[0]))),)
        if res.event_time[0] > times[-1]:
            times.append(float(res.event_time[0]))
            states.append(res.event_state[0])
    else:
        events = (StoppingEvent(HORIZON, float(horizon), tuple(map(float, res.event_state[0]))),)
    states = np.array(states)
    return PathRecord(dt, np.array(times), states, sys.H(states), _project(graph, sys, states), events)


def dump_paths_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t", "q1", "q2", "h", "edge"])
        for k, rec in enumerate(records):
            for t, q, hv, e in zip(rec.times, rec.states, rec.h_values, rec.edge_ids):
                w.writerow([k, repr(float(t)), repr(float(q[0])), repr(float(q[1])), repr(float(hv)), int(e)])


# -- edge resolvent functional ----------------------------------------------------------

def _poly(coefs):
    p = np.polynomial.Polynomial(coefs)
    return p, p.deriv(1), p.deriv(2)


class _ResolventObserver:
    """Accumulates ``e^{-lam tau} f(x_tau) - int_0^tau e^{-lam s} (-lam f + L f)(x_s) ds``.

    Also accumulates a zero-mean control variate built from the second-order
    Ito expansion of ``f(H)`` over each noise increment.
    """

    def __init__(self, sys, coeffs, f_coefs, lam, n, eps):
        self.sys, self.coeffs, self.lam, self.eps = sys, coeffs, lam, eps
        self.f, self.df, self.d2f = _poly(f_coefs)
        self.integral = np.zeros(n)
        self.terminal = np.zeros(n)
        self.cv = np.zeros(n)

    def step(self, idx, t, h, q_old, q_det, q_new, dw, stopping):
        lam, sys = self.lam, self.sys
        x = sys.H(q_old)
        gen = -lam * self.f(x) + self.coeffs.B(x) * self.df(x) + 0.5 * self.coeffs.A(x) * self.d2f(x)
        w = math.exp(-lam * t) * (-math.expm1(-lam * h)) / lam
        self.integral[idx] += w * gen
        # martingale increment of f(H) across the noise kick at q_det
        sig = sys.sigma(q_old) + sys.sigma_eps(q_old, self.eps)
        r = np.einsum("ni,nij->nj", sys.grad(q_det), sig)
        m = np.einsum("nki,nkl,nlj->nij", sig, sys.hess(q_det), sig)
        rdw = np.sum(r * dw, axis=1)
        quad_ = np.einsum("ni,nij,nj->n", dw, m, dw) - np.trace(m, axis1=1, axis2=2) * h
        xd = sys.H(q_det)
        mart = self.df(xd) * (rdw + 0.5 * quad_) + 0.5 * self.d2f(xd) * (rdw ** 2 - np.sum(r * r, axis=1) * h)
        self.cv[idx] += math.exp(-lam * (t + h)) * mart
        done = idx[stopping]
        if len(done):
            self.terminal[done] = math.exp(-lam * (t + h)) * self.f(sys.H(q_new[stopping]))

    def finish(self, res: EnsembleResult, horizon: float):
        live = res.event_kind == HORIZON
        self.terminal[live] = math.exp(-self.lam * horizon) * self.f(self.sys.H(res.exit_state[live]))


@dataclass(frozen=True)
class ResolventEstimate:
    estimate: float
    std_error: float
    raw_estimate: float
    raw_std_error: float
    n_paths: int
    mean_exit_time: float


def edge_resolvent(sys: HamiltonianSystem, coeffs: EdgeCoefficients, f_coefs, lam: float, q0,
                   band: tuple[float, float], n_paths: int, dt: float, seed: int,
                   horizon: float = 2.0, workers: int = 1) -> ResolventEstimate:
    """Monte Carlo of the resolvent functional for ``x = H(q)`` stopped at the band exit.

    ``f`` is a polynomial given by its coefficients (lowest degree first). The
    functional equals ``f(x0)`` for the limit diffusion; here it is evaluated on
    paths of the full system.
    """
    lo, hi = coeffs.h_interval
    if not (lo + 1e-9 * (hi - lo) < band[0] < band[1] <= hi):
        raise ConfigurationError(f"band {band} is not contained in edge {coeffs.edge_id} {coeffs.h_interval}")
    eps = sys.epsilon
    q0 = np.asarray(q0, dtype=float)
    stop = StopSpec(band=band)

    def run(ids):
        obs = _ResolventObserver(sys, coeffs, f_coefs, lam, len(ids), eps)
        res = integrate_ensemble(sys, np.repeat(q0[None, :], len(ids), 0), horizon, dt, seed, stop, obs, ids,
                                 refine=False)
        obs.finish(res, horizon)
        raw = obs.terminal - obs.integral
        return raw, raw - obs.cv, res.exit_time

    parts = run_batched(run, n_paths, workers, batch=min(n_paths, 5000))
    raw = np.concatenate([p[0] for p in parts])
    cv = np.concatenate([p[1] for p in parts])
    tau = np.concatenate([p[2] for p in parts])
    se = lambda v: float(np.std(v, ddof=1) / math.sqrt(len(v)))
    return ResolventEstimate(float(cv.mean()), se(cv), float(raw.mean()), se(raw), n_paths, float(tau.mean()))


# -- coupled auxiliary processes --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoupledPaths:
    """Auxiliary processes on a shared noise stream.

    ``xi``, ``x_tilde``, ``x`` and ``beta`` are sampled on ``times`` (when
    ``record`` was requested), ``period_marks`` lists the mark times of each
    recorded path. ``sup_xi_x4``/``sup_xi_xt4`` are per-path suprema of the
    fourth powers over ``[0, tau]``.
    """
    times: np.ndarray | None = field(repr=False)
    xi: np.ndarray | None = field(repr=False)
    x_tilde: np.ndarray | None = field(repr=False)
    x: np.ndarray | None = field(repr=False)
    beta: np.ndarray | None = field(repr=False)
    period_marks: list = field(repr=False)
    sup_xi_x4: np.ndarray = field(repr=False)
    sup_xi_xt4: np.ndarray = field(repr=False)
    stop_time: np.ndarray = field(repr=False)


class _CouplingObserver:
    def __init__(self, sys, coeffs, x0, n, eps, horizon, record: bool, period_fn=None):
        self.sys, self.coeffs, self.eps = sys, coeffs, eps
        self.period_fn = period_fn or (lambda x: eps * coeffs.T(x))
        self.x = np.full(n, x0)
        self.xi = np.full(n, x0)
        self.xt = np.full(n, x0)
        self.beta = np.zeros(n)
        self.mark_beta = np.zeros(n)
        self.mark_t = np.zeros(n)
        self.mark_x = np.full(n, x0)
        self.next_mark = self.period_fn(self.x)
        self.frozen_b = coeffs.B(self.x)
        self.frozen_sa = np.sqrt(np.maximum(coeffs.A(self.x), 0.0))
        self.sup1 = np.zeros(n)
        self.sup2 = np.zeros(n)
        self.record = record
        self.trace = [] if record else None
        self.marks = [[0.0] for _ in range(n)] if record else None
        if record:
            self.trace.append((0.0, self.xi.copy(), self.xt.copy(), self.x.copy(), self.beta.copy()))

    def step(self, idx, t, h, q_old, q_det, q_new, dw, stopping):
        sys, c = self.sys, self.coeffs
        sig = sys.sigma(q_old)
        r = np.einsum("ni,nij->nj", sys.grad(q_det), sig)
        norm = np.linalg.norm(r, axis=1)
        v = np.where(norm[:, None] > V_DEGENERATE, r / np.maximum(norm, 1e-300)[:, None], np.array([1.0, 0.0]))
        dbeta = np.sum(v * dw, axis=1)
        xt = self.xt[idx]
        self.xt[idx] = xt + c.B(xt) * h + np.sqrt(np.maximum(c.A(xt), 0.0)) * dbeta
        self.beta[idx] += dbeta
        t_new = t + h
        self.x[idx] = sys.H(q_new)
        self.xi[idx] = (self.mark_x[idx] + self.frozen_b[idx] * (t_new - self.mark_t[idx])
                        + self.frozen_sa[idx] * (self.beta[idx] - self.mark_beta[idx]))
        keep = ~stopping
        live = idx[keep]
        d1 = (self.xi[live] - self.x[live]) ** 4
        d2 = (self.xi[live] - self.xt[live]) ** 4
        self.sup1[live] = np.maximum(self.sup1[live], d1)
        self.sup2[live] = np.maximum(self.sup2[live], d2)
        # period marks: restart xi from x and freeze the coefficients
        hit = live[t_new >= self.next_mark[live] - 1e-12]
        if len(hit):
            xs = self.x[hit]
            self.mark_t[hit] = t_new
            self.mark_x[hit] = xs
            self.mark_beta[hit] = self.beta[hit]
            self.xi[hit] = xs
            self.frozen_b[hit] = c.B(xs)
            self.frozen_sa[hit] = np.sqrt(np.maximum(c.A(xs), 0.0))
            per = self.period_fn(xs)
            if not np.all(np.isfinite(per) & (per > 0)):
                raise PeriodEstimationError("period estimation failed (orbit stalls)")
            self.next_mark[hit] = t_new + per
            if self.record:
                for k in hit:
                    self.marks[k].append(t_new)
        if self.record:
            self.trace.append((t_new, self.xi.copy(), self.xt.copy(), self.x.copy(), self.beta.copy()))


def coupled_simulation(sys: HamiltonianSystem, coeffs: EdgeCoefficients, q0, horizon: float, dt: float,
                       rng_seed: int, band: tuple[float, float], n_paths: int = 1, record: bool = False,
                       workers: int = 1, period_fn=None) -> CoupledPaths:
    """Simulate ``q``, ``beta = int V dW``, ``xi`` and ``x_tilde`` on one noise stream.

    ``V`` is the unit vector along ``R0 H`` evaluated where the noise acts.
    Period marks are spaced by ``eps * T(x)`` taken from the coefficient table
    (override with ``period_fn``). Every process is truncated at the first exit
    of ``H`` from ``band``.
    """
    q0 = np.asarray(q0, dtype=float)
    x0 = float(sys.H(q0))
    if not (band[0] < x0 < band[1]):
        raise ConfigurationError(f"start level {x0} is not inside the band {band}")
    lo, hi = coeffs.h_interval
    if not (lo < band[0] and band[1] <= hi):
        raise ConfigurationError(f"band {band} is not contained in edge {coeffs.edge_id}")
    if np.min(coeffs.A(np.linspace(band[0], band[1], 64))) <= 0:
        raise ConfigurationError("A is not bounded below on the band")
    stop = StopSpec(band=band)
    if record and workers > 1:
        workers = 1

    def run(ids):
        obs = _CouplingObserver(sys, coeffs, x0, len(ids), sys.epsilon, horizon, record, period_fn)
        res = integrate_ensemble(sys, np.repeat(q0[None, :], len(ids), 0), horizon, dt, rng_seed, stop, obs, ids,
                                 refine=False)
        return obs, res

    parts = run_batched(run, n_paths, workers, batch=min(n_paths, 5000))
    sup1 = np.concatenate([p[0].sup1 for p in parts])
    sup2 = np.concatenate([p[0].sup2 for p in parts])
    tau = np.concatenate([p[1].exit_time for p in parts])
    if record:
        obs = parts[0][0]
        times = np.array([r[0] for r in obs.trace])
        stack = lambda j: np.array([r[j] for r in obs.trace]).T
        return CoupledPaths(times, stack(1), stack(2), stack(3), stack(4), obs.marks, sup1, sup2, tau)
    return CoupledPaths(None, None, None, None, None, [], sup1, sup2, tau)


# -- exit statistics near an interior vertex ------------------------------------------------

@dataclass(frozen=True)
class StartSampler:
    """Orbit-time measure on a union of cycles; ``weights`` are the cycle masses."""
    cycles: tuple
    weights: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.weights / self.weights.sum()
        which = rng.choice(len(self.cycles), size=n, p=p)
        out = np.empty((n, 2))
        for k in np.unique(which):
            sel = np.flatnonzero(which == k)
            cyc = self.cycles[k]
            out[sel] = cyc.samples[rng.integers(0, len(cyc.samples), size=len(sel))]
        return out


def ring_sampler(sys: HamiltonianSystem, graph: ReebGraph, vertex_id: int, offset: float) -> StartSampler:
    """Cycles at ``H = c + offset`` on the incident edges on that side of the vertex."""
    c = graph.vertices[vertex_id].h_value
    cycles = []
    for e in graph.incident_edges(vertex_id):
        above = e.lower_vertex == vertex_id
        if (offset > 0) == above:
            cycles.append(trace_cycle(sys, graph, e.id, c + offset, check_range=False))
    if not cycles:
        raise ConfigurationError(f"no incident edge of vertex {vertex_id} on the side of offset {offset}")
    return StartSampler(tuple(cycles), np.array([cy.period for cy in cycles]))


def region_sampler(sys: HamiltonianSystem, graph: ReebGraph, vertex_id: int, delta_prime: float,
                   n_levels: int = 16) -> StartSampler:
    """Invariant (orbit-time) measure on ``{|H - c| < delta'}`` near the vertex.

    Levels are midpoints of ``n_levels`` cells on each side; each cycle is
    weighted by its period times the cell width.
    """
    c = graph.vertices[vertex_id].h_value
    width = delta_prime / n_levels
    cycles, weights = [], []
    for e in graph.incident_edges(vertex_id):
        sign = 1.0 if e.lower_vertex == vertex_id else -1.0
        for j in range(n_levels):
            cyc = trace_cycle(sys, graph, e.id, c + sign * (j + 0.5) * width, check_range=False)
            cycles.append(cyc)
            weights.append(cyc.period * width)
    return StartSampler(tuple(cycles), np.array(weights))


@dataclass(frozen=True)
class HittingSummary:
    vertex_id: int
    edge_ids: tuple[int, ...]
    probabilities: tuple[float, ...]
    std_errors: tuple[float, ...]
    mean_exit_time: float
    exit_time_se: float
    n_paths: int
    n_exits: int
    n_timeouts: int

    def prob(self, edge_id: int) -> float:
        return self.probabilities[self.edge_ids.index(edge_id)]

    def to_dict(self) -> dict:
        return {"vertex_id": self.vertex_id, "edge_ids": list(self.edge_ids),
                "probabilities": list(self.probabilities), "std_errors": list(self.std_errors),
                "mean_exit_time": self.mean_exit_time, "exit_time_se": self.exit_time_se,
                "n_paths": self.n_paths, "n_exits": self.n_exits, "n_timeouts": self.n_timeouts}


def hitting_statistics(sys: HamiltonianSystem, graph: ReebGraph, vertex_id: int, start: StartSampler,
                       delta: float, n_paths: int, dt: float, rng_seed: int, horizon: float = 5.0,
                       workers: int = 1) -> HittingSummary:
    """Exit distribution of ``q`` from ``{|H - c| < delta}`` over the incident edges.

    Start points are drawn from ``start``; paths still inside at ``horizon``
    are reported as timeouts and excluded from the probabilities.
    """
    c = graph.vertices[vertex_id].h_value
    starts = start.sample(n_paths, np.random.default_rng([int(rng_seed), 0x5EED]))
    stop = StopSpec(saddle=(c, delta))

    def run(ids):
        return integrate_ensemble(sys, starts[ids], horizon, dt, rng_seed, stop, None, ids)

    parts = run_batched(run, n_paths, workers, batch=min(n_paths, 5000))
    kinds = np.concatenate([p.event_kind for p in parts])
    times = np.concatenate([p.event_time for p in parts])
    states = np.concatenate([p.event_state for p in parts])
    done = kinds == EXIT_SADDLE
    incident = tuple(e.id for e in graph.incident_edges(vertex_id))
    edges = _project(graph, sys, states[done])
    n_exit = int(done.sum())
    probs, ses = [], []
    for eid in incident:
        p = float(np.mean(edges == eid)) if n_exit else float("nan")
        probs.append(p)
        ses.append(math.sqrt(p * (1 - p) / n_exit) if n_exit else float("nan"))
    if n_exit and not np.all(np.isin(edges, incident)):
        raise RuntimeError("exit point identified on an edge not incident to the vertex")
    t_exit = times[done]
    return HittingSummary(vertex_id, incident, tuple(probs), tuple(ses),
                          float(t_exit.mean()) if n_exit else float("nan"),
                          float(t_exit.std(ddof=1) / math.sqrt(n_exit)) if n_exit > 1 else float("nan"),
                          n_paths, n_exit, int(np.sum(kinds == HORIZON)))


def ceiling_fraction(sys: HamiltonianSystem, q0, ceiling: float, horizon: float, n_paths: int, dt: float,
                     rng_seed: int, workers: int = 1) -> tuple[float, float]:
    """Fraction of paths with ``H >= ceiling`` before ``horizon`` and its standard error."""
    q0 = np.asarray(q0, dtype=float)
    stop = StopSpec(ceiling=ceiling)

    def run(ids):
        return integrate_ensemble(sys, np.repeat(q0[None, :], len(ids), 0), horizon, dt, rng_seed, stop, None, ids)

    parts = run_batched(run, n_paths, workers, batch=min(n_paths, 5000))
    hits = np.concatenate([p.event_kind for p in parts]) == CEILING
    p = float(hits.mean())
    return p, math.sqrt(max(p * (1 - p), 0.0) / n_paths)

