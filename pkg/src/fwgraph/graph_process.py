"""The limiting diffusion on the Reeb graph.

Inside edge ``i`` the level ``h`` follows ``dh = B_i(h) dt + sqrt(A_i(h)) dW``
(Euler-Maruyama). A path that reaches an interior vertex is re-emitted at
distance ``delta_v`` from it on an incident edge drawn with the gluing
probabilities. Extremal vertices reflect, and the truncation level at the
infinity vertex absorbs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .fast_slow_sim import ConfigurationError, NoiseStream, ResolventEstimate, run_batched
from .level_integrals import EdgeCoefficients
from .topology import EXTERIOR, INFINITY, INTERIOR, GraphPoint, ReebGraph

A_FLOOR_REL = 1e-9


class GraphProcessError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GraphDiffusionSpec:
    graph: ReebGraph
    coeffs: dict
    gluing: dict
    vertex_offset: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in self.graph.interior_vertices():
            if v.id not in self.gluing:
                raise GraphProcessError(f"interior vertex {v.id} has no gluing data")
            total = sum(self.gluing[v.id].probs.values())
            if abs(total - 1.0) > 1e-9:
                raise GraphProcessError(f"gluing probabilities at vertex {v.id} sum to {total}")
        missing = [e.id for e in self.graph.edges if e.id not in self.coeffs]
        if missing:
            raise GraphProcessError(f"no coefficients for edges {missing}")
        for v in self.graph.vertices:
            if v.id not in self.vertex_offset:
                spans = [e.span for e in self.graph.incident_edges(v.id)]
                self.vertex_offset[v.id] = 1e-3 * min(spans)

    def a_max(self, edge_id: int) -> float:
        return float(np.max(self.coeffs[edge_id].a_table))

    def check_dt(self, dt: float, factor: float = 1e-2) -> None:
        for e in self.graph.edges:
            if dt * self.a_max(e.id) > factor * e.span ** 2:
                raise ConfigurationError(
                    f"dt={dt} does not resolve edge {e.id}: dt*max A = {dt * self.a_max(e.id):.3g} "
                    f"exceeds {factor:g}*span^2 = {factor * e.span ** 2:.3g}")


def build_spec(graph: ReebGraph, coeffs: dict, gluing: dict, vertex_offset: float | None = None):
    offsets = {}
    if vertex_offset is not None:
        offsets = {v.id: vertex_offset for v in graph.vertices}
    return GraphDiffusionSpec(graph, coeffs, gluing, offsets)


@dataclass(frozen=True, eq=False)
class GraphPath:
    times: np.ndarray = field(repr=False)
    points: list = field(repr=False)
    vertex_visits: list
    absorbed: bool = False


class _Walker:
    """Vectorised state ``(h, edge)`` of an ensemble of graph paths."""

    def __init__(self, spec: GraphDiffusionSpec, h, edge):
        self.spec = spec
        self.h = np.array(h, dtype=float)
        self.edge = np.array(edge, dtype=int)
        g = spec.graph
        self.lo = np.array([e.h_interval[0] for e in g.edges])
        self.hi = np.array([e.h_interval[1] for e in g.edges])

    def coefficients(self, idx):
        a = np.empty(len(idx))
        b = np.empty(len(idx))
        for eid in np.unique(self.edge[idx]):
            sel = self.edge[idx] == eid
            c = self.spec.coeffs[eid]
            a[sel] = c.A(self.h[idx][sel])
            b[sel] = c.B(self.h[idx][sel])
            floor = -A_FLOOR_REL * self.spec.a_max(eid)
            if np.any(a[sel] < floor):
                raise GraphProcessError(f"A on edge {eid} fell below the floor: {a[sel].min():.3g}")
        return np.maximum(a, 0.0), b

    def emit(self, k: int, vertex_id: int, u: float):
        """Re-emit path ``k`` from an interior vertex on an edge drawn with the gluing law."""
        glue = self.spec.gluing[vertex_id]
        ids = sorted(glue.probs)
        cum = np.cumsum([glue.probs[i] for i in ids])
        j = ids[min(int(np.searchsorted(cum, u * cum[-1], side="right")), len(ids) - 1)]
        e = self.spec.graph.edges[j]
        c = self.spec.graph.vertices[vertex_id].h_value
        off = self.spec.vertex_offset[vertex_id]
        self.edge[k] = j
        self.h[k] = c + off if e.lower_vertex == vertex_id else c - off
        return j

    def settle(self, k: int, u: float, t: float, visits: list | None):
        """Resolve a path that left its edge interval; returns ``True`` if absorbed."""
        g = self.spec.graph
        for _ in range(64):
            e = g.edges[self.edge[k]]
            if self.lo[e.id] < self.h[k] < self.hi[e.id]:
                return False
            vid = e.lower_vertex if self.h[k] <= self.lo[e.id] else e.upper_vertex
            v = g.vertices[vid]
            if v.kind == INFINITY:
                self.h[k] = v.h_value
                return True
            if v.kind == EXTERIOR:
                mirrored = 2 * v.h_value - self.h[k]
                inside = self.lo[e.id] < mirrored < self.hi[e.id]
                self.h[k] = mirrored if inside else v.h_value + np.sign(mirrored - v.h_value) * self.spec.vertex_offset[vid]
                if inside:
                    return False
                continue
            j = self.emit(k, vid, u)
            if visits is not None:
                visits.append((vid, t, j))
        raise GraphProcessError("could not settle a path inside an edge")


def _start_state(spec: GraphDiffusionSpec, start: GraphPoint):
    return float(start.h), int(start.edge_id)


def simulate_graph_ensemble(spec: GraphDiffusionSpec, start: GraphPoint, horizon: float, dt: float,
                            rng_seed: int, path_ids, observer=None, band=None, check: bool = True):
    """Simulate paths ``path_ids`` from ``start``; returns ``(h, edge, stop_time, absorbed, visits)``.

    ``band=(edge, lo, hi)`` stops a path when it leaves ``(lo, hi)`` on that edge.
    ``observer.step(idx, t, h, x, a, b, dw, x_new, edge_new, stopping)`` sees every
    step; ``visits`` lists ``(vertex, time, new_edge)`` per path.
    """
    if check:
        spec.check_dt(dt)
    n = len(path_ids)
    h0, e0 = _start_state(spec, start)
    w = _Walker(spec, np.full(n, h0), np.full(n, e0))
    visits = [[] for _ in range(n)]
    noise = NoiseStream(rng_seed, path_ids)
    alive = np.ones(n, dtype=bool)
    absorbed = np.zeros(n, dtype=bool)
    stop_t = np.full(n, float(horizon))
    if start.vertex_id is not None:
        v = spec.graph.vertices[start.vertex_id]
        if v.kind == INTERIOR:
            u0 = ndtr(noise.draw(np.arange(n))[:, 1])
            for k in range(n):
                visits[k].append((v.id, 0.0, w.emit(k, v.id, u0[k])))
    for k in range(n):
        absorbed[k] = w.settle(k, 0.5, 0.0, visits[k])
    alive &= ~absorbed
    stop_t[absorbed] = 0.0
    t = 0.0
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    for _ in range(n_steps):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        hstep = min(dt, horizon - t)
        z = noise.draw(idx)
        dw = z[:, 0] * math.sqrt(hstep)
        a, b = w.coefficients(idx)
        x = w.h[idx].copy()
        x_new = x + b * hstep + np.sqrt(a) * dw
        w.h[idx] = x_new
        t_new = t + hstep
        out = np.flatnonzero((x_new <= w.lo[w.edge[idx]]) | (x_new >= w.hi[w.edge[idx]]))
        u = ndtr(z[:, 1])
        for j in out:
            k = idx[j]
            if w.settle(k, u[j], t_new, visits[k]):
                absorbed[k] = True
        stopping = absorbed[idx].copy()
        if band is not None:
            be, blo, bhi = band
            stopping |= (w.edge[idx] != be) | (w.h[idx] <= blo) | (w.h[idx] >= bhi)
        if observer is not None:
            observer.step(idx, t, hstep, x, a, b, dw, w.h[idx], w.edge[idx], stopping)
        alive[idx[stopping]] = False
        stop_t[idx[stopping]] = t_new
        t = t_new
    return w.h, w.edge, stop_t, absorbed, visits


def simulate_graph_path(spec: GraphDiffusionSpec, start: GraphPoint, horizon: float, dt: float,
                        rng_seed: int, path_index: int = 0) -> GraphPath:
    """One recorded path; ``points`` holds a ``GraphPoint`` per step."""
    times, points = [0.0], [GraphPoint(float(start.h), int(start.edge_id), start.vertex_id)]

    class Rec:
        def step(self, idx, t, h, x, a, b, dw, x_new, edge_new, stopping):
            times.append(t + h)
            points.append(GraphPoint(float(x_new[0]), int(edge_new[0])))

    _, _, _, absorbed, visits = simulate_graph_ensemble(spec, start, horizon, dt, rng_seed, [path_index], Rec())
    return GraphPath(np.array(times), points, visits[0], bool(absorbed[0]))


def _poly(coefs):
    p = np.polynomial.Polynomial(coefs)
    return p, p.deriv(1), p.deriv(2)


class _GraphResolventObserver:
    def __init__(self, coeffs: EdgeCoefficients, f_coefs, lam: float, n: int):
        self.coeffs, self.lam = coeffs, lam
        self.f, self.df, self.d2f = _poly(f_coefs)
        self.integral = np.zeros(n)
        self.terminal = np.zeros(n)
        self.cv = np.zeros(n)
        self.final = np.full(n, np.nan)

    def step(self, idx, t, h, x, a, b, dw, x_new, edge_new, stopping):
        lam = self.lam
        gen = -lam * self.f(x) + b * self.df(x) + 0.5 * a * self.d2f(x)
        self.integral[idx] += math.exp(-lam * t) * (-math.expm1(-lam * h)) / lam * gen
        mart = self.df(x) * np.sqrt(a) * dw + 0.5 * self.d2f(x) * a * (dw ** 2 - h)
        self.cv[idx] += math.exp(-lam * (t + h)) * mart
        self.final[idx] = x_new
        done = idx[stopping]
        if len(done):
            self.terminal[done] = math.exp(-lam * (t + h)) * self.f(x_new[stopping])


def resolvent_apply(spec: GraphDiffusionSpec, f_coefs, lam: float, start: GraphPoint,
                    band: tuple[int, float, float], n_paths: int, dt: float, rng_seed: int,
                    horizon: float = 20.0, workers: int = 1) -> ResolventEstimate:
    """Monte Carlo of ``E[e^{-lam tau} f(x_tau) - int_0^tau e^{-lam s}(-lam f + L f)(x_s) ds]``.

    ``band=(edge, lo, hi)`` must lie inside one edge; ``tau`` is its exit time
    capped at ``horizon``. The value equals ``f(start)`` for any smooth ``f``,
    which makes it a direct check of the generator.
    """
    edge_id, lo, hi = band
    e = spec.graph.edges[edge_id]
    # vertex levels carry round-off, so the band must clear them by a relative margin
    margin = 1e-9 * e.span
    if not (e.h_interval[0] + margin < lo < hi < e.h_interval[1] - margin):
        raise ConfigurationError(f"band {band} reaches a vertex of edge {edge_id} {e.h_interval}")
    if start.edge_id != edge_id or not (lo < start.h < hi):
        raise ConfigurationError("start point is not inside the band")
    coeffs = spec.coeffs[edge_id]

    def run(ids):
        obs = _GraphResolventObserver(coeffs, f_coefs, lam, len(ids))
        _, _, stop_t, _, _ = simulate_graph_ensemble(spec, start, horizon, dt, rng_seed, ids, obs,
                                                     band=band, check=False)
        live = stop_t >= horizon
        obs.terminal[live] = math.exp(-lam * horizon) * obs.f(obs.final[live])
        raw = obs.terminal - obs.integral
        return raw, raw - obs.cv, stop_t

    spec.check_dt(dt)
    parts = run_batched(run, n_paths, workers, batch=min(n_paths, 5000))
    raw = np.concatenate([p[0] for p in parts])
    cv = np.concatenate([p[1] for p in parts])
    tau = np.concatenate([p[2] for p in parts])
    se = lambda v: float(np.std(v, ddof=1) / math.sqrt(len(v)))
    return ResolventEstimate(float(cv.mean()), se(cv), float(raw.mean()), se(raw), n_paths, float(tau.mean()))


# -- analytic oracles on one edge ---------------------------------------------------------

def scale_function(coeffs: EdgeCoefficients, x0: float):
    """``u(x) = int_{x0}^x u'(y) dy`` with ``u' = 1 / Abar``.

    This is the scale function of the edge diffusion whenever the area defect
    vanishes on the edge (``Abar' = 2 T B``).
    """
    def u(x):
        return integrate.quad(coeffs.u_prime, x0, x, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
    return u


def exit_probability_upper(coeffs: EdgeCoefficients, band: tuple[float, float], x: float) -> float:
    """Probability of leaving ``band`` through its upper end, from the scale function."""
    a, b = band
    u = scale_function(coeffs, a)
    return u(x) / u(b)


def expected_occupation(coeffs: EdgeCoefficients, band: tuple[float, float], x: float, f=None) -> float:
    """``E_x int_0^tau f(x_s) ds`` for the band exit time, via the Green function.

    ``w(x) = 2 int G(x, y) f(y) v'(y) dy`` with
    ``G(x, y) = (u(x^y) - u(a)) (u(b) - u(x v y)) / (u(b) - u(a))``.
    ``f`` defaults to 1, giving the mean exit time.
    """
    a, b = band
    f = (lambda y: 1.0) if f is None else f
    u = scale_function(coeffs, a)
    ub, ux = u(b), u(x)
    left = integrate.quad(lambda y: u(y) * f(y) * coeffs.v_prime(y), a, x, epsrel=1e-9, limit=200)[0]
    right = integrate.quad(lambda y: (ub - u(y)) * f(y) * coeffs.v_prime(y), x, b, epsrel=1e-9, limit=200)[0]
    return 2.0 * ((ub - ux) * left + ux * right) / ub


def vertex_choice_counts(paths_visits, vertex_id: int) -> dict:
    """Counts of the edges chosen at ``vertex_id`` over a collection of visit lists."""
    counts: dict = {}
    for visits in paths_visits:
        for vid, _, j in visits:
            if vid == vertex_id:
                counts[j] = counts.get(j, 0) + 1
    return counts


def occupation_near_vertex(spec: GraphDiffusionSpec, start: GraphPoint, vertex_id: int, delta: float,
                           horizon: float, dt: float, n_paths: int, rng_seed: int) -> tuple[float, float]:
    """Mean and standard error of the time spent with ``|h - c| < delta`` on edges at ``vertex_id``."""
    c = spec.graph.vertices[vertex_id].h_value
    near_edges = np.array([e.id for e in spec.graph.incident_edges(vertex_id)])
    occ = np.zeros(n_paths)

    class Obs:
        def step(self, idx, t, h, x, a, b, dw, x_new, edge_new, stopping):
            occ[idx] += h * ((np.abs(x_new - c) < delta) & np.isin(edge_new, near_edges))

    simulate_graph_ensemble(spec, start, horizon, dt, rng_seed, np.arange(n_paths), Obs())
    return float(occ.mean()), float(occ.std(ddof=1) / math.sqrt(n_paths))
