"""Level cycles and the line and area integrals taken over them.

Every cycle integral is computed in orbit time: along ``dz/dt = g(z)`` one has
``dl/|g| = dt``, so ``oint f dl/|g| = int_0^T f(z_t) dt``. The orbit is sampled
at equally spaced times, where the periodic trapezoid rule converges
spectrally.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.interpolate import CubicSpline

from .hamiltonian_model import HamiltonianSystem, operator_terms
from .topology import INFINITY, ReebGraph, transport_to_level

DELTA_TRACE = 1e-4
DELTA_SEP = (1e-3, 5e-4)
TOL_BETA = 0.05


class LevelIntegralError(Exception):
    pass


class PeriodOverflow(LevelIntegralError):
    pass


class ConservationFailure(LevelIntegralError):
    pass


class SeparatrixNotConverged(LevelIntegralError):
    pass


class SingularPathError(LevelIntegralError):
    def __init__(self, message: str, suggested_offset: float):
        super().__init__(message)
        self.suggested_offset = suggested_offset


@dataclass(frozen=True, eq=False)
class LevelCycle:
    """Closed orbit of ``dz/dt = g(z)`` sampled at ``N`` equally spaced times."""
    edge_id: int
    h: float
    samples: np.ndarray = field(repr=False)
    period: float
    dt_weights: np.ndarray = field(repr=False)

    def integrate(self, values) -> float:
        """Orbit-time integral ``int_0^T f dt`` from samples ``values``."""
        return float(np.dot(self.dt_weights, values))

    def average(self, values) -> float:
        return self.integrate(values) / self.period

    def time_of(self, k):
        return np.asarray(k) * (self.period / len(self.samples))


def _edge_limits(graph: ReebGraph, edge_id: int, delta_trace: float):
    e = graph.edges[edge_id]
    lo, hi = e.h_interval
    span = hi - lo
    lo_lim = lo + delta_trace * span
    hi_lim = hi if graph.vertices[e.upper_vertex].kind == INFINITY else hi - delta_trace * span
    return lo_lim, hi_lim


def point_on_level(sys: HamiltonianSystem, graph: ReebGraph, edge_id: int, h: float) -> np.ndarray:
    """A point with ``H = h`` on the cycle family of ``edge_id``."""
    e = graph.edges[edge_id]
    box = graph.search_box
    max_step = 0.02 * max(box[1] - box[0], box[3] - box[2])
    z, ok = transport_to_level(sys, np.asarray(e.seed_point), h, max_step, graph.critical_locations, tol=1e-15)
    if not ok[0] and abs(sys.H(z[0]) - h) > 1e-12 * (1 + abs(h)):
        raise LevelIntegralError(f"could not place a start point on level {h} of edge {edge_id}")
    return z[0]


def trace_cycle(sys: HamiltonianSystem, graph: ReebGraph, edge_id: int, h: float,
                delta_trace: float = DELTA_TRACE, max_time: float = 1000.0, rtol: float = 1e-11,
                tol_cons: float = 1e-8, n_min: int = 256, n_max: int = 1 << 15,
                check_range: bool = True) -> LevelCycle:
    """Trace the cycle ``C_i(h)`` of edge ``edge_id``.

    The orbit is integrated with an 8th order Runge-Kutta method until it
    crosses the section through the start point (normal to ``g``) close to the
    start; the dense output is then resampled at ``N`` uniform times, with ``N``
    doubled until halving it changes the cycle averages by less than ``1e-11``.
    """
    lo_lim, hi_lim = _edge_limits(graph, edge_id, delta_trace)
    if check_range and not (lo_lim <= h <= hi_lim):
        raise LevelIntegralError(
            f"level {h} of edge {edge_id} is outside [{lo_lim}, {hi_lim}] (too close to a vertex)")
    z0 = point_on_level(sys, graph, edge_id, h)
    g0 = sys.g(z0)
    if not np.linalg.norm(g0) > 0:
        raise LevelIntegralError(f"start point {z0} is stationary")
    crit = graph.critical_locations
    r0 = np.min(np.linalg.norm(crit - z0, axis=-1)) if len(crit) else 1.0
    close_tol = 1e-3 * min(1.0, r0)

    def rhs(t, z):
        return sys.g(z)

    def section(t, z):
        return float(np.dot(z - z0, g0))
    section.direction = 1.0

    pieces, t0, z_start, period = [], 0.0, z0, None
    chunk = 10.0
    while t0 < max_time:
        t1 = min(t0 + chunk, max_time)
        sol = solve_ivp(rhs, (t0, t1), z_start, method="DOP853", rtol=rtol, atol=rtol * 1e-2,
                        events=section, dense_output=True)
        if sol.status < 0:
            raise LevelIntegralError(f"orbit integration failed on level {h}: {sol.message}")
        pieces.append(sol.sol)
        for te, ze in zip(sol.t_events[0], sol.y_events[0]):
            if te > 0 and np.linalg.norm(ze - z0) < close_tol:
                period = float(te)
                break
        if period is not None:
            break
        t0, z_start = t1, sol.y[:, -1]
        chunk *= 2.0
    if period is None:
        raise PeriodOverflow(f"period overflow near separatrix: no return within {max_time} on level {h}")

    bounds = np.array([p.t_max for p in pieces])

    def sample(n):
        ts = np.arange(n) * (period / n)
        out = np.empty((n, 2))
        which = np.minimum(np.searchsorted(bounds, ts, side="left"), len(pieces) - 1)
        for k in np.unique(which):
            sel = which == k
            out[sel] = pieces[k](ts[sel]).T
        return out

    n = n_min
    pts = sample(n)
    while True:
        l0, r0h, _, _ = operator_terms(sys, pts, 0.0)
        f = np.stack([np.sum(r0h * r0h, axis=-1), l0, np.linalg.norm(sys.grad(pts), axis=-1)])
        full = f.mean(axis=1)
        half = f[:, ::2].mean(axis=1)
        if np.all(np.abs(full - half) <= 1e-11 * (1 + np.abs(full))) or n >= n_max:
            break
        n *= 2
        pts = sample(n)

    drift = np.max(np.abs(sys.H(pts) - h))
    if drift > tol_cons * (1 + abs(h)):
        raise ConservationFailure(f"conservation failure on level {h}: |H - h| = {drift:.3g}")
    end = pieces[-1](period) if period <= bounds[-1] else pts[0]
    if np.linalg.norm(end - z0) > close_tol:
        raise LevelIntegralError(f"cycle on level {h} does not close")
    return LevelCycle(edge_id, float(h), pts, period, np.full(n, period / n))


def geometric_cycle_integral(sys: HamiltonianSystem, cycle: LevelCycle, f, n: int = 20000) -> float:
    """``oint f dl/|g|`` by arc length on a dense periodic-spline resample of the cycle."""
    pts = np.vstack([cycle.samples, cycle.samples[:1]])
    t = np.linspace(0.0, cycle.period, len(pts))
    spline = CubicSpline(t, pts, bc_type="periodic")
    dense = spline(np.linspace(0.0, cycle.period, n + 1))
    seg = np.diff(dense, axis=0)
    mid = 0.5 * (dense[1:] + dense[:-1])
    dl = np.linalg.norm(seg, axis=-1)
    return float(np.sum(f(mid) / np.linalg.norm(sys.g(mid), axis=-1) * dl))


# -- adjoint operator ---------------------------------------------------------

def adjoint_step(sys: HamiltonianSystem) -> float:
    """Difference step for second derivatives of ``a^-1``; wider if ``grad H`` is itself differenced."""
    return 1e-4 if sys.grad_h is not None else 2e-3


def adjoint_l0(sys: HamiltonianSystem, phi, z, step: float | None = None, which: str = "l0",
               extra_drift=None):
    """Finite-difference ``L0* phi = 1/2 sum d_i d_j (Q_ij phi) - sum d_i (b_i phi)``.

    ``which="eps"`` uses the perturbation operator (drift ``b_eps`` and
    diffusion ``sigma sigma_eps^T + sigma_eps sigma^T + sigma_eps sigma_eps^T``).
    ``extra_drift`` is added to the drift (used for the compensated operator).
    """
    z = np.asarray(z, dtype=float)
    step = adjoint_step(sys) if step is None else step

    def qb(p):
        s = sys.sigma(p)
        if which == "eps":
            se = sys.sigma_eps(p)
            st, set_ = np.swapaxes(s, -1, -2), np.swapaxes(se, -1, -2)
            q = s @ set_ + se @ st + se @ set_
            b = sys.b_eps(p)
        else:
            q = s @ np.swapaxes(s, -1, -2)
            b = sys.b(p)
        if extra_drift is not None:
            b = b + extra_drift(p)
        ph = phi(p)
        return q * ph[..., None, None], b * ph[..., None]

    e = np.eye(2) * step
    total = 0.0
    for i in range(2):
        qp, bp = qb(z + e[i])
        qm, bm = qb(z - e[i])
        qc, _ = qb(z)
        total = total - (bp[..., i] - bm[..., i]) / (2 * step)
        total = total + 0.5 * (qp[..., i, i] - 2 * qc[..., i, i] + qm[..., i, i]) / step ** 2
    qpp, _ = qb(z + e[0] + e[1])
    qpm, _ = qb(z + e[0] - e[1])
    qmp, _ = qb(z - e[0] + e[1])
    qmm, _ = qb(z - e[0] - e[1])
    cross = (qpp - qpm - qmp + qmm) / (4 * step ** 2)
    total = total + 0.5 * (cross[..., 0, 1] + cross[..., 1, 0])
    return total


def l0_adjoint_a_inv(sys: HamiltonianSystem, z, which: str = "l0"):
    return adjoint_l0(sys, sys.a_inv, z, which=which)


# -- region integrals by the layer-cake formula ---------------------------------

def _graded_nodes(a: float, b: float, n: int = 48):
    """Gauss-Legendre nodes graded towards both ends (cubic endpoint clustering)."""
    s, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s + 1.0)
    w = 0.5 * w
    num = s ** 3
    den = s ** 3 + (1 - s) ** 3
    phi = num / den
    dphi = (3 * s ** 2 * den - num * (3 * s ** 2 - 3 * (1 - s) ** 2)) / den ** 2
    return a + (b - a) * phi, (b - a) * w * dphi


def region_side(graph: ReebGraph, edge_id: int) -> int:
    """+1 if the region enclosed by a cycle of the edge lies below it in H, else -1."""
    e = graph.edges[edge_id]
    return 1 if graph.inner_end(edge_id) == e.lower_vertex else -1


def cycle_layer_density(sys: HamiltonianSystem, cycle: LevelCycle, density) -> float:
    """``oint F dl/|grad H| = int_0^T F a dt``: derivative in ``h`` of the enclosed integral."""
    return cycle.integrate(density(cycle.samples) * sys.a(cycle.samples))


def region_integral(sys: HamiltonianSystem, graph: ReebGraph, edge_id: int, x: float, density,
                    n_nodes: int = 48) -> float:
    """``int_{D_i(x)} F`` over the region enclosed by the cycle ``C_i(x)``.

    The enclosed region is the union of the regions of the edges beyond the
    inner vertex plus the layers between the vertex level and ``x``.
    """
    inner = graph.inner_end(edge_id)
    c = graph.vertices[inner].h_value
    total = 0.0
    for child in graph.incident_edges(inner):
        if child.id != edge_id:
            total += region_integral(sys, graph, child.id, c, density, n_nodes)
    if x != c:
        hs, ws = _graded_nodes(c, x, n_nodes)
        vals = [cycle_layer_density(sys, trace_cycle(sys, graph, edge_id, float(hh), check_range=False), density)
                for hh in hs]
        total += region_side(graph, edge_id) * float(np.dot(ws, vals))
    return total


# -- edge coefficient tables --------------------------------------------------

def _spline(x, y):
    return CubicSpline(x, y, extrapolate=True)


@dataclass(frozen=True, eq=False)
class EdgeCoefficients:
    """Tabulated cycle coefficients of one edge with cubic interpolation.

    ``abar_table`` is ``T A`` (the cycle integral of ``|R0 H|^2``),
    ``j_table`` the layer density ``oint L0* a^-1 dl/|grad H|`` and
    ``defect_table`` the signed enclosed integral of ``L0* a^-1``.
    """
    edge_id: int
    h_interval: tuple[float, float]
    h_grid: np.ndarray = field(repr=False)
    t_table: np.ndarray = field(repr=False)
    a_table: np.ndarray = field(repr=False)
    b_table: np.ndarray = field(repr=False)
    u_density: np.ndarray = field(repr=False)
    v_density: np.ndarray = field(repr=False)
    abar_table: np.ndarray = field(repr=False)
    j_table: np.ndarray = field(repr=False)
    defect_table: np.ndarray = field(repr=False)
    side: int = 1

    @functools.cached_property
    def _splines(self):
        return {name: _spline(self.h_grid, getattr(self, name))
                for name in ("t_table", "a_table", "b_table", "abar_table", "j_table", "defect_table")
                if np.all(np.isfinite(getattr(self, name)))}

    def _linear_ends(self, name, h):
        """Spline inside the grid, linear continuation outside it."""
        h = np.asarray(h, dtype=float)
        sp = self._splines[name]
        x0, x1 = self.h_grid[0], self.h_grid[-1]
        out = sp(np.clip(h, x0, x1))
        lo, hi = h < x0, h > x1
        if np.any(lo) or np.any(hi):
            d = sp.derivative()
            out = np.where(lo, sp(x0) + d(x0) * (h - x0), out)
            out = np.where(hi, sp(x1) + d(x1) * (h - x1), out)
        return out

    def T(self, h):
        return self._splines["t_table"](h)

    def A(self, h):
        return self._linear_ends("a_table", h)

    def B(self, h):
        return self._linear_ends("b_table", h)

    def Abar(self, h):
        return self._splines["abar_table"](h)

    def u_prime(self, h):
        return 1.0 / self.Abar(h)

    def v_prime(self, h):
        return self.T(h)

    def defect(self, h):
        if "defect_table" not in self._splines:
            raise LevelIntegralError(f"edge {self.edge_id}: coefficients were built without the defect table")
        return self._splines["defect_table"](h)

    def to_dict(self) -> dict:
        out = {"edge_id": self.edge_id, "h_interval": list(self.h_interval), "side": self.side}
        for name in ("h_grid", "t_table", "a_table", "b_table", "u_density", "v_density",
                     "abar_table", "j_table", "defect_table"):
            out[name] = np.asarray(getattr(self, name)).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeCoefficients":
        arrays = {k: np.asarray(v, dtype=float) for k, v in d.items()
                  if k not in ("edge_id", "h_interval", "side")}
        return cls(d["edge_id"], tuple(d["h_interval"]), side=d["side"], **arrays)


def level_grid(graph: ReebGraph, edge_id: int, n: int = 64, delta_trace: float = DELTA_TRACE) -> np.ndarray:
    """Chebyshev-Lobatto levels between the traceable limits of an edge (ascending)."""
    lo, hi = _edge_limits(graph, edge_id, delta_trace)
    k = np.arange(n)
    grid = np.sort(0.5 * (lo + hi) - 0.5 * (hi - lo) * np.cos(np.pi * k / (n - 1)))
    grid[0], grid[-1] = lo, hi
    return grid


def cycle_coefficients(sys: HamiltonianSystem, cycle: LevelCycle, with_j: bool = True) -> dict:
    l0, r0, _, _ = operator_terms(sys, cycle.samples, 0.0)
    abar = cycle.integrate(np.sum(r0 * r0, axis=-1))
    out = {"T": cycle.period, "Abar": abar, "A": abar / cycle.period, "B": cycle.average(l0)}
    if with_j:
        out["J"] = cycle_layer_density(sys, cycle, lambda z: l0_adjoint_a_inv(sys, z))
    return out


def edge_coefficients(sys: HamiltonianSystem, graph: ReebGraph, edge_id: int, levels_per_edge: int = 64,
                      delta_trace: float = DELTA_TRACE, with_defect: bool = True,
                      n_region: int = 48) -> EdgeCoefficients:
    """Tabulate ``T, A, B, u', v'`` (and the area defect) on a level grid of the edge."""
    grid = level_grid(graph, edge_id, levels_per_edge, delta_trace)
    rows = []
    for h in grid:
        try:
            rows.append(cycle_coefficients(sys, trace_cycle(sys, graph, edge_id, float(h), delta_trace),
                                           with_j=with_defect))
        except LevelIntegralError as exc:
            raise type(exc)(f"edge {edge_id}, grid level {h:.10g}: {exc}") from exc
    t = np.array([r["T"] for r in rows])
    a = np.array([r["A"] for r in rows])
    b = np.array([r["B"] for r in rows])
    abar = np.array([r["Abar"] for r in rows])
    side = region_side(graph, edge_id)
    if with_defect:
        j = np.array([r["J"] for r in rows])
        defect = _defect_table(sys, graph, edge_id, grid, j, side, n_region)
    else:
        j = np.full(len(grid), np.nan)
        defect = np.full(len(grid), np.nan)
    with np.errstate(divide="ignore"):
        u = 1.0 / abar
    e = graph.edges[edge_id]
    return EdgeCoefficients(edge_id, tuple(e.h_interval), grid, t, a, b, u, t.copy(), abar, j, defect, side)


def _defect_table(sys, graph, edge_id, grid, j, side, n_region):
    """``s * int_{D_i(h)} L0* a^-1`` on the grid, by the layer-cake formula."""
    density = functools.partial(l0_adjoint_a_inv, sys)
    inner = graph.inner_end(edge_id)
    c = graph.vertices[inner].h_value
    base = 0.0
    for child in graph.incident_edges(inner):
        if child.id != edge_id:
            base += region_integral(sys, graph, child.id, c, density, n_region)
    # from the vertex to the nearest grid level, then along the spline of J
    near = grid[0] if side > 0 else grid[-1]
    hs, ws = _graded_nodes(c, float(near), 16)
    first = float(np.dot(ws, [cycle_layer_density(sys, trace_cycle(sys, graph, edge_id, float(hh),
                                                                   check_range=False), density)
                              for hh in hs]))
    cum = _spline(grid, j).antiderivative()
    return side * base + first + (cum(grid) - cum(near))


# -- generalized differential operator ------------------------------------------

def _derivatives(f, h: float, df=None, d2f=None, step: float = 1e-4):
    if df is None and hasattr(f, "deriv"):
        df, d2f = f.deriv(1), f.deriv(2)
    if df is None:
        df = lambda x: (f(x + step) - f(x - step)) / (2 * step)
    if d2f is None:
        d2f = lambda x: (f(x + step) - 2 * f(x) + f(x - step)) / step ** 2
    return df, d2f


def generalized_operator_residual(sys: HamiltonianSystem, graph: ReebGraph, coeffs: EdgeCoefficients, f,
                                  h: float, df=None, d2f=None, eta: float | None = None) -> float:
    """Residual of ``d/dv (df/du) = 2 L f + (2/T) defect f'`` at level ``h``.

    ``df/du = f' / u' = f' Abar`` is differenced at ``h +- eta`` against the
    speed measure ``v(h + eta) - v(h - eta) = int T``; cycle quantities at these
    levels are traced directly. ``f`` may be a numpy ``Polynomial``, or a callable
    with optional derivatives ``df``/``d2f``.
    """
    df, d2f = _derivatives(f, h, df, d2f)
    lo, hi = coeffs.h_interval
    if eta is None:
        eta = 1e-3 * min(hi - lo, h - lo, hi - h) if np.isfinite(hi) else 1e-3 * (h - lo)

    def at(x):
        return cycle_coefficients(sys, trace_cycle(sys, graph, coeffs.edge_id, float(x), check_range=False),
                                  with_j=False)

    plus, minus, mid = at(h + eta), at(h - eta), at(h)
    gl, gw = np.polynomial.legendre.leggauss(4)
    dv = eta * sum(w * at(h + eta * s)["T"] for s, w in zip(gl, gw))
    lhs = (df(h + eta) * plus["Abar"] - df(h - eta) * minus["Abar"]) / dv
    two_lf = 2.0 * (mid["B"] * df(h) + 0.5 * mid["A"] * d2f(h))
    correction = 2.0 / mid["T"] * float(coeffs.defect(h)) * df(h)
    return float(lhs - two_lf - correction)


# -- gluing at interior vertices -------------------------------------------------

@dataclass(frozen=True)
class GluingData:
    vertex_id: int
    betas: dict
    probs: dict
    raw_betas: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {"vertex_id": self.vertex_id,
                "betas": {str(k): v for k, v in self.betas.items()},
                "probs": {str(k): v for k, v in self.probs.items()},
                "raw_betas": {str(k): list(v) for k, v in self.raw_betas.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "GluingData":
        return cls(d["vertex_id"], {int(k): v for k, v in d["betas"].items()},
                   {int(k): v for k, v in d["probs"].items()},
                   {int(k): tuple(v) for k, v in d.get("raw_betas", {}).items()})


def near_vertex_level(graph: ReebGraph, vertex_id: int, edge_id: int, offset: float) -> float:
    """Level at relative distance ``offset`` (in edge span) from the vertex, on the edge side."""
    e = graph.edges[edge_id]
    c = graph.vertices[vertex_id].h_value
    return c + offset * e.span if e.lower_vertex == vertex_id else c - offset * e.span


def gluing_probabilities(sys: HamiltonianSystem, graph: ReebGraph, vertex_id: int,
                         delta_sep=DELTA_SEP, tol_beta: float = TOL_BETA) -> GluingData:
    """``beta_ki`` and ``p_ki = beta_ki / sum_i beta_ki`` at an interior vertex.

    ``beta_ki`` is the cycle integral of ``(grad H)^T sigma sigma^T grad H`` on the
    separatrix lobe facing edge ``i``, extrapolated (Richardson, linear in the
    offset) from cycles at two offsets from the vertex level.
    """
    v = graph.vertices[vertex_id]
    if v.kind != "interior":
        raise LevelIntegralError(f"vertex {vertex_id} is not interior")
    d1, d2 = delta_sep
    betas, raw = {}, {}
    for e in graph.incident_edges(vertex_id):
        vals = []
        for d in (d1, d2):
            x = near_vertex_level(graph, vertex_id, e.id, d)
            cyc = trace_cycle(sys, graph, e.id, x, check_range=False)
            _, r0, _, _ = operator_terms(sys, cyc.samples, 0.0)
            vals.append(cyc.integrate(np.sum(r0 * r0, axis=-1)))
        beta = vals[1] + (vals[1] - vals[0]) * d2 / (d1 - d2)
        if abs(beta - vals[1]) > tol_beta * abs(beta):
            raise SeparatrixNotConverged(
                f"separatrix integral not converged on edge {e.id}: {vals} -> {beta}")
        betas[e.id] = float(beta)
        raw[e.id] = (float(vals[0]), float(vals[1]))
    total = sum(betas.values())
    if not total > 0:
        raise LevelIntegralError(f"vanishing separatrix integrals at vertex {vertex_id}")
    probs = {k: b / total for k, b in betas.items()}
    return GluingData(vertex_id, betas, probs, raw)


# -- compensating drift ----------------------------------------------------------

def _check_path(sys: HamiltonianSystem, z, critical_locations, min_distance: float):
    z1, z2 = float(z[0]), float(z[1])
    if critical_locations is None:
        xs = np.linspace(0.0, z1, 2001)
        pts = np.stack([xs, np.full_like(xs, z2)], axis=-1)
        gn = np.linalg.norm(sys.grad(pts), axis=-1)
        k = int(np.argmin(gn))
        if gn[k] < 1e-8:
            raise SingularPathError(f"singular path: integration segment meets a critical point near {pts[k]}",
                                    min_distance)
        return
    for c in np.asarray(critical_locations, dtype=float).reshape(-1, 2):
        if min(0.0, z1) - min_distance <= c[0] <= max(0.0, z1) + min_distance and abs(c[1] - z2) < min_distance:
            offset = min_distance - abs(c[1] - z2)
            raise SingularPathError(
                f"singular path: segment from (0, {z2}) to {tuple(z)} passes within {abs(c[1] - z2):.3g} "
                f"of the critical point {tuple(c)}; shift z2 by at least {offset:.3g}", offset)


def compensating_drift(sys: HamiltonianSystem, z, which: str = "l0", critical_locations=None,
                       min_distance: float = 1e-3) -> np.ndarray:
    """``b_hat(z) = (a(z) int_0^{z1} L0*[a^-1](u, z2) du, 0)`` by adaptive quadrature.

    ``which="eps"`` builds the analogous field from the perturbation operator.
    """
    z = np.asarray(z, dtype=float)
    _check_path(sys, z, critical_locations, min_distance)
    integrand = lambda u: float(adjoint_l0(sys, sys.a_inv, np.array([u, z[1]]), which=which))
    val, _ = quad(integrand, 0.0, float(z[0]), epsabs=1e-10, epsrel=1e-8, limit=200)
    return np.array([float(sys.a(z)) * val, 0.0])


def compensating_drift_many(sys: HamiltonianSystem, z, which: str = "l0", n_nodes: int = 64) -> np.ndarray:
    """Vectorised ``b_hat`` with fixed Gauss-Legendre quadrature along each segment."""
    z = np.asarray(z, dtype=float)
    s, w = np.polynomial.legendre.leggauss(n_nodes)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    z1 = z[..., 0][..., None]
    nodes = np.stack([z1 * s, np.broadcast_to(z[..., 1][..., None], z1.shape[:-1] + (n_nodes,))], axis=-1)
    vals = adjoint_l0(sys, sys.a_inv, nodes, which=which)
    integral = z[..., 0] * np.sum(w * vals, axis=-1)
    out = np.zeros(z.shape)
    out[..., 0] = sys.a(z) * integral
    return out


def compensator_residual(sys: HamiltonianSystem, z, which: str = "l0", step: float | None = None) -> np.ndarray:
    """Finite-difference ``(L0 + b_hat . grad)* [a^-1]`` at points ``z``."""
    return adjoint_l0(sys, sys.a_inv, z, step=step, which=which,
                      extra_drift=lambda p: compensating_drift_many(sys, p, which))


def dump_coefficients(path, coeffs: dict, gluing: dict | None = None) -> None:
    payload = {"edges": {str(k): c.to_dict() for k, c in sorted(coeffs.items())},
               "gluing": {str(k): g.to_dict() for k, g in sorted((gluing or {}).items())}}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
