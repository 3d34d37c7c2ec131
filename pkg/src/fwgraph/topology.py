"""Critical points, the Reeb graph of H and the identification map onto it.

The graph is built by a sweep over the critical values. Between two
consecutive critical values (a *slab*) the level set at the slab mid-level
is contoured on a grid; every closed contour is one component. Components of
adjacent slabs are linked by transporting seed points along the gradient flow
of ``H`` across the separating critical level: a component that continues
one-to-one belongs to the same edge, everything else is attached to the
critical point at that level.
"""

from __future__ import annotations

import functools
import json
import warnings
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import find_contours

from .hamiltonian_model import HamiltonianSystem

TOL_CRIT = 1e-9
SNAP_TOL = 1e-7

MINIMUM, MAXIMUM, SADDLE = "minimum", "maximum", "saddle"
INTERIOR, EXTERIOR, INFINITY = "interior", "exterior", "infinity"


class TopologyError(Exception):
    pass


class DegenerateCriticalPoint(TopologyError):
    pass


class ReebGraphError(TopologyError):
    pass


class OutOfChart(TopologyError):
    pass


@dataclass(frozen=True)
class CriticalPoint:
    location: tuple[float, float]
    value: float
    kind: str


@dataclass(frozen=True)
class Vertex:
    id: int
    kind: str
    h_value: float
    location: tuple[float, float] | None = None
    critical_kind: str | None = None


@dataclass(frozen=True)
class Edge:
    id: int
    lower_vertex: int
    upper_vertex: int
    h_interval: tuple[float, float]
    seed_point: tuple[float, float]

    @property
    def span(self) -> float:
        return self.h_interval[1] - self.h_interval[0]

    def contains(self, h, closed: bool = False):
        lo, hi = self.h_interval
        if closed:
            return (h >= lo) & (h <= hi)
        return (h > lo) & (h < hi)


@dataclass(frozen=True)
class Slab:
    """Components of the level set at ``level``, strictly between ``lo`` and ``hi``."""
    lo: float
    hi: float
    level: float
    edge_ids: tuple[int, ...]
    polygons: tuple[np.ndarray, ...] = field(repr=False)


@dataclass(frozen=True)
class GraphPoint:
    h: float
    edge_id: int
    vertex_id: int | None = None


@dataclass(frozen=True, eq=False)
class ReebGraph:
    vertices: tuple[Vertex, ...]
    edges: tuple[Edge, ...]
    slabs: tuple[Slab, ...] = field(repr=False)
    h_max: float
    search_box: tuple[float, float, float, float]

    @property
    def infinity(self) -> Vertex:
        return self.vertices[-1]

    @functools.cached_property
    def critical_values(self) -> np.ndarray:
        return np.array([v.h_value for v in self.vertices[:-1]])

    @functools.cached_property
    def critical_locations(self) -> np.ndarray:
        return np.array([v.location for v in self.vertices[:-1]], dtype=float).reshape(-1, 2)

    def incident_edges(self, vertex_id: int) -> list[Edge]:
        return [e for e in self.edges if vertex_id in (e.lower_vertex, e.upper_vertex)]

    def interior_vertices(self) -> list[Vertex]:
        return [v for v in self.vertices if v.kind == INTERIOR]

    @functools.cached_property
    def _nx(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        for v in self.vertices:
            g.add_node(v.id)
        for e in self.edges:
            g.add_edge(e.lower_vertex, e.upper_vertex, key=e.id, weight=e.span)
        return g

    @functools.cached_property
    def vertex_distances(self) -> dict:
        return dict(nx.all_pairs_dijkstra_path_length(self._nx, weight="weight"))

    @functools.cached_property
    def _slab_trees(self):
        out = []
        for slab in self.slabs:
            pts = np.concatenate(slab.polygons)
            labels = np.concatenate([np.full(len(p), e) for p, e in zip(slab.polygons, slab.edge_ids)])
            out.append((cKDTree(pts), labels))
        return out

    def inner_end(self, edge_id: int) -> int:
        """Endpoint of the edge on the bounded side (away from the infinity vertex)."""
        e = self.edges[edge_id]
        g = nx.MultiGraph(self._nx)
        g.remove_edge(e.lower_vertex, e.upper_vertex, key=e.id)
        inf_side = nx.node_connected_component(g, self.infinity.id)
        return e.upper_vertex if e.lower_vertex in inf_side else e.lower_vertex

    def subtree_edges(self, edge_id: int) -> list[int]:
        """Edges beyond the inner end of ``edge_id`` (the region it encloses)."""
        inner = self.inner_end(edge_id)
        out, stack = [], [(inner, edge_id)]
        while stack:
            v, came = stack.pop()
            for e in self.incident_edges(v):
                if e.id == came:
                    continue
                out.append(e.id)
                nxt = e.upper_vertex if e.lower_vertex == v else e.lower_vertex
                stack.append((nxt, e.id))
        return sorted(out)

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "h_max": self.h_max,
            "search_box": list(self.search_box),
            "vertices": [
                {"id": v.id, "kind": v.kind, "h_value": v.h_value,
                 "location": None if v.location is None else list(v.location),
                 "critical_kind": v.critical_kind}
                for v in self.vertices
            ],
            "edges": [
                {"id": e.id, "lower_vertex": e.lower_vertex, "upper_vertex": e.upper_vertex,
                 "h_interval": list(e.h_interval), "seed_point": list(e.seed_point)}
                for e in self.edges
            ],
            "slabs": [
                {"lo": s.lo, "hi": s.hi, "level": s.level, "edge_ids": list(s.edge_ids),
                 "polygons": [p.tolist() for p in s.polygons]}
                for s in self.slabs
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReebGraph":
        vertices = tuple(
            Vertex(v["id"], v["kind"], v["h_value"],
                   None if v["location"] is None else tuple(v["location"]), v.get("critical_kind"))
            for v in d["vertices"]
        )
        edges = tuple(
            Edge(e["id"], e["lower_vertex"], e["upper_vertex"], tuple(e["h_interval"]), tuple(e["seed_point"]))
            for e in d["edges"]
        )
        slabs = tuple(
            Slab(s["lo"], s["hi"], s["level"], tuple(s["edge_ids"]),
                 tuple(np.asarray(p, dtype=float) for p in s["polygons"]))
            for s in d["slabs"]
        )
        return cls(vertices, edges, slabs, d["h_max"], tuple(d["search_box"]))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ReebGraph":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- critical points -------------------------------------------------------

def _newton_root(sys: HamiltonianSystem, z0: np.ndarray, box, max_iter: int = 60):
    z = z0.copy()
    for _ in range(max_iter):
        gr = sys.grad(z)
        if np.linalg.norm(gr) < TOL_CRIT * 1e-3:
            break
        try:
            dz = np.linalg.solve(sys.hess(z), gr)
        except np.linalg.LinAlgError:
            return None
        z = z - dz
        if not np.all(np.isfinite(z)):
            return None
        if np.linalg.norm(dz) < 1e-15 * (1 + np.linalg.norm(z)):
            break
    xmin, xmax, ymin, ymax = box
    pad = 1e-9 * max(xmax - xmin, ymax - ymin)
    if not (xmin - pad <= z[0] <= xmax + pad and ymin - pad <= z[1] <= ymax + pad):
        return None
    if np.linalg.norm(sys.grad(z)) >= TOL_CRIT:
        return None
    return z


def classify_critical_point(sys: HamiltonianSystem, z, eig_tol: float = 1e-4) -> str:
    """Morse type from the Hessian eigenvalues.

    A root found by Newton's method on a degenerate critical point converges only
    linearly, so its smallest Hessian eigenvalue is left at about ``sqrt(TOL_CRIT)``;
    anything below ``eig_tol`` times the largest eigenvalue is rejected.
    """
    hs = np.asarray(sys.hess(np.asarray(z, dtype=float)))
    lam = np.linalg.eigvalsh(0.5 * (hs + hs.T))
    if np.min(np.abs(lam)) <= eig_tol * max(1.0, np.max(np.abs(lam))):
        raise DegenerateCriticalPoint(f"degenerate Hessian at {tuple(z)} (eigenvalues {lam})")
    if lam[0] < 0 < lam[1]:
        return SADDLE
    return MINIMUM if lam[0] > 0 else MAXIMUM


def find_critical_points(sys: HamiltonianSystem, search_box, grid_n: int = 101,
                         dedup_tol: float = 1e-6) -> list[CriticalPoint]:
    """Locate all critical points in ``search_box = (xmin, xmax, ymin, ymax)``.

    Newton's method is started from the centre of every grid cell on which both
    gradient components change sign (zeros on the cell boundary count).
    """
    xmin, xmax, ymin, ymax = map(float, search_box)
    xs = np.linspace(xmin, xmax, grid_n)
    ys = np.linspace(ymin, ymax, grid_n)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    gr = sys.grad(np.stack([xx, yy], axis=-1))
    cells = []
    for comp in (0, 1):
        c = gr[..., comp]
        corners = np.stack([c[:-1, :-1], c[1:, :-1], c[:-1, 1:], c[1:, 1:]])
        cells.append((corners.min(axis=0) <= 0) & (corners.max(axis=0) >= 0))
    candidates = np.argwhere(cells[0] & cells[1])

    roots: list[np.ndarray] = []
    for i, j in candidates:
        centre = np.array([0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])])
        z = _newton_root(sys, centre, (xmin, xmax, ymin, ymax))
        if z is None:
            for corner in ((xs[i], ys[j]), (xs[i + 1], ys[j + 1])):
                z = _newton_root(sys, np.array(corner), (xmin, xmax, ymin, ymax))
                if z is not None:
                    break
        if z is None:
            warnings.warn(f"Newton diverged from all seeds in sign-change cell near {tuple(centre)}")
            continue
        if all(np.linalg.norm(z - r) > dedup_tol for r in roots):
            roots.append(z)

    out = [CriticalPoint((float(z[0]), float(z[1])), float(sys.H(z)), classify_critical_point(sys, z))
           for z in roots]
    out.sort(key=lambda c: (c.value, c.location))
    return out


# -- gradient transport ------------------------------------------------------

def transport_to_level(sys: HamiltonianSystem, points, level, max_step: float = 0.05,
                       critical_locations=None, tol: float = 1e-13, max_iter: int = 800):
    """Move points along the gradient of H onto the level ``H = level``.

    Clipped Newton steps along ``grad H``; step length is also capped at half the
    distance to the nearest critical point so that saddles are never jumped.
    Returns ``(points, converged_mask)``.
    """
    z = np.array(points, dtype=float, copy=True).reshape(-1, 2)
    level = np.broadcast_to(np.asarray(level, dtype=float), (len(z),)).copy()
    converged = np.zeros(len(z), dtype=bool)
    failed = np.zeros(len(z), dtype=bool)
    crit = None if critical_locations is None or len(critical_locations) == 0 \
        else np.asarray(critical_locations, dtype=float).reshape(-1, 2)
    for _ in range(max_iter):
        active = ~(converged | failed)
        if not active.any():
            break
        za = z[active]
        r = level[active] - sys.H(za)
        done = np.abs(r) <= tol * (1.0 + np.abs(level[active]))
        idx = np.flatnonzero(active)
        converged[idx[done]] = True
        idx, za, r = idx[~done], za[~done], r[~done]
        if len(idx) == 0:
            break
        gh = sys.grad(za)
        n2 = np.sum(gh * gh, axis=-1)
        bad = ~(n2 > 1e-300) | ~np.isfinite(n2)
        failed[idx[bad]] = True
        idx, za, r, gh, n2 = idx[~bad], za[~bad], r[~bad], gh[~bad], n2[~bad]
        step = (r / n2)[:, None] * gh
        length = np.linalg.norm(step, axis=-1)
        cap = np.full(len(idx), max_step)
        if crit is not None:
            d = np.min(np.linalg.norm(za[:, None, :] - crit[None, :, :], axis=-1), axis=1)
            cap = np.minimum(cap, 0.5 * d)
        scale = np.minimum(1.0, cap / np.maximum(length, 1e-300))
        z[idx] = za + scale[:, None] * step
    return z, converged


# -- Reeb graph construction --------------------------------------------------

def _auto_box(sys: HamiltonianSystem, critical_points, h_max: float):
    locs = np.array([c.location for c in critical_points]).reshape(-1, 2)
    lo = locs.min(axis=0) - 1.0 if len(locs) else np.array([-1.0, -1.0])
    hi = locs.max(axis=0) + 1.0 if len(locs) else np.array([1.0, 1.0])
    for _ in range(40):
        t = np.linspace(0, 1, 200)
        edges_ = [np.stack([lo[0] + (hi[0] - lo[0]) * t, np.full_like(t, y)], -1) for y in (lo[1], hi[1])]
        edges_ += [np.stack([np.full_like(t, x), lo[1] + (hi[1] - lo[1]) * t], -1) for x in (lo[0], hi[0])]
        if np.min(sys.H(np.concatenate(edges_))) > h_max + 0.05 * (abs(h_max) + 1):
            return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))
        c = 0.5 * (lo + hi)
        lo, hi = c - (hi - lo), c + (hi - lo)
    raise ReebGraphError("could not find a box enclosing the level set H = h_max")


def _slab_components(sys, grid, box, level):
    xx, yy, hh = grid
    xmin, xmax, ymin, ymax = box
    n0, n1 = hh.shape
    dx, dy = (xmax - xmin) / (n0 - 1), (ymax - ymin) / (n1 - 1)
    polys = []
    for c in find_contours(hh, level):
        if np.linalg.norm(c[0] - c[-1]) > 1e-9:
            raise ReebGraphError(f"level set H={level:.6g} leaves the search box")
        p = np.stack([xmin + c[:, 0] * dx, ymin + c[:, 1] * dy], axis=-1)[:-1]
        if len(p) >= 3:
            polys.append(p)
    return polys


def _nearest_component(trees_labels, pts):
    tree, labels = trees_labels
    _, k = tree.query(pts)
    return labels[k]


def _seed_points(poly: np.ndarray, k: int) -> np.ndarray:
    idx = np.linspace(0, len(poly), k, endpoint=False).astype(int)
    return poly[idx]


def build_reeb_graph(sys: HamiltonianSystem, critical_points: list[CriticalPoint], h_max: float,
                     search_box=None, grid_n: int = 401, seeds_per_component: int = 24) -> ReebGraph:
    """Build the Reeb graph of ``H`` restricted to ``{H <= h_max}``."""
    cps = sorted(critical_points, key=lambda c: c.value)
    if not cps:
        raise ReebGraphError("no critical points supplied")
    values = np.array([c.value for c in cps])
    gaps = np.diff(values)
    tied = gaps <= 1e-9 * (1 + np.abs(values[1:]))
    if np.any(tied & (gaps > 1e-12 * (1 + np.abs(values[1:])))):
        raise ReebGraphError("critical values nearly coincide; refine the critical points")
    levels = [float(values[0])] + [float(v) for v, t in zip(values[1:], tied) if not t]
    if not h_max > values[-1]:
        raise ReebGraphError("h_max must exceed every critical value")
    box = tuple(search_box) if search_box is not None else _auto_box(sys, cps, h_max)
    xmin, xmax, ymin, ymax = box
    xx, yy = np.meshgrid(np.linspace(xmin, xmax, grid_n), np.linspace(ymin, ymax, grid_n), indexing="ij")
    hh = sys.H(np.stack([xx, yy], axis=-1))
    grid = (xx, yy, hh)
    crit_locs = np.array([c.location for c in cps])
    max_step = 0.02 * max(xmax - xmin, ymax - ymin)

    bounds = levels + [float(h_max)]
    n_slabs = len(levels)
    vertex_values = [c.value for c in cps] + [float(h_max)]
    slab_levels = [0.5 * (bounds[s] + bounds[s + 1]) for s in range(n_slabs)]
    slab_polys = [_slab_components(sys, grid, box, m) for m in slab_levels]
    trees = []
    for polys in slab_polys:
        if not polys:
            trees.append(None)
            continue
        pts = np.concatenate(polys)
        labels = np.concatenate([np.full(len(p), i) for i, p in enumerate(polys)])
        trees.append((cKDTree(pts), labels))

    def flow_targets(s_from, s_to):
        """For each component of slab ``s_from``: set of slab ``s_to`` components reached."""
        out = []
        for poly in slab_polys[s_from]:
            seeds = _seed_points(poly, seeds_per_component)
            z, ok = transport_to_level(sys, seeds, slab_levels[s_to], max_step, crit_locs)
            ok &= np.abs(sys.H(z) - slab_levels[s_to]) < 1e-9
            if trees[s_to] is None or not ok.any():
                out.append(set())
                continue
            out.append(set(_nearest_component(trees[s_to], z[ok]).tolist()))
        return out

    # union-find over (slab, component)
    parent: dict = {(s, i): (s, i) for s in range(n_slabs) for i in range(len(slab_polys[s]))}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    up_linked = {k: False for k in parent}
    down_linked = {k: False for k in parent}
    for s in range(n_slabs - 1):
        ups = flow_targets(s, s + 1)
        downs = flow_targets(s + 1, s)
        for i, targets in enumerate(ups):
            if len(targets) == 1:
                j = next(iter(targets))
                if downs[j] == {i}:
                    parent[find((s, i))] = find((s + 1, j))
                    up_linked[(s, i)] = True
                    down_linked[(s + 1, j)] = True

    # attach unlinked component ends to critical points
    chains: dict = {}
    for key in parent:
        chains.setdefault(find(key), []).append(key)
    lower_of, upper_of = {}, {}
    for s_level in range(n_slabs):
        c = bounds[s_level]
        group = [k for k, cp in enumerate(cps) if abs(cp.value - c) <= 1e-9 * (1 + abs(c))]
        below = [key for key in parent if key[0] == s_level - 1 and not up_linked[key]]
        above = [key for key in parent if key[0] == s_level and not down_linked[key]]
        owner = {}
        for key in below + above:
            if len(group) == 1:
                owner[key] = group[0]
                continue
            # several critical points share this value: pick the closest one
            gap = abs(slab_levels[key[0]] - c)
            target = c + np.sign(slab_levels[key[0]] - c) * 1e-4 * gap
            seeds = _seed_points(slab_polys[key[0]][key[1]], seeds_per_component)
            z, _ = transport_to_level(sys, seeds, target, max_step, crit_locs)
            d = [np.min(np.linalg.norm(z - crit_locs[k], axis=-1)) for k in group]
            owner[key] = group[int(np.argmin(d))]
        for k in group:
            cp = cps[k]
            nb = sum(1 for key in below if owner[key] == k)
            na = sum(1 for key in above if owner[key] == k)
            if cp.kind == SADDLE:
                ok = nb + na == 3 and nb in (1, 2)
            else:
                ok = (nb, na) == {MINIMUM: (0, 1), MAXIMUM: (1, 0)}[cp.kind]
            if not ok:
                raise ReebGraphError(
                    f"missed critical point: {cp.kind} at {cp.location} has {nb} components "
                    f"ending below and {na} starting above")
        for key in below:
            upper_of[find(key)] = owner[key]
        for key in above:
            lower_of[find(key)] = owner[key]
    top = [key for key in parent if key[0] == n_slabs - 1 and not up_linked[key]]
    if len(top) != 1:
        raise ReebGraphError(f"expected one unbounded component below h_max, found {len(top)}")
    upper_of[find(top[0])] = len(cps)

    raw_edges = []
    for root, members in chains.items():
        if root not in lower_of or root not in upper_of:
            raise ReebGraphError("component family without both end vertices (missed critical point)")
        members.sort()
        mid_slab, comp = members[len(members) // 2]
        poly = slab_polys[mid_slab][comp]
        gn = np.linalg.norm(sys.grad(poly), axis=-1)
        seed, ok = transport_to_level(sys, poly[int(np.argmax(gn))], slab_levels[mid_slab], max_step, crit_locs)
        raw_edges.append((lower_of[root], upper_of[root], tuple(float(v) for v in seed[0]), members))
    raw_edges.sort(key=lambda r: (vertex_values[r[0]], vertex_values[r[1]], r[2]))

    vertices = []
    for k, cp in enumerate(cps):
        kind = INTERIOR if cp.kind == SADDLE else EXTERIOR
        vertices.append(Vertex(k, kind, cp.value, cp.location, cp.kind))
    vertices.append(Vertex(len(cps), INFINITY, float(h_max)))

    edges, comp_edge = [], {}
    for eid, (lo, hi, seed, members) in enumerate(raw_edges):
        edges.append(Edge(eid, lo, hi, (vertex_values[lo], vertex_values[hi]), seed))
        for key in members:
            comp_edge[key] = eid

    slabs = []
    for s in range(n_slabs):
        polys = []
        for p in slab_polys[s]:
            step = max(1, len(p) // 1024)
            polys.append(np.ascontiguousarray(p[::step]))
        slabs.append(Slab(bounds[s], bounds[s + 1], slab_levels[s],
                          tuple(comp_edge[(s, i)] for i in range(len(polys))), tuple(polys)))

    graph = ReebGraph(tuple(vertices), tuple(edges), tuple(slabs), float(h_max), box)
    _check_graph(graph, cps)
    return graph


def _check_graph(graph: ReebGraph, cps: list[CriticalPoint]) -> None:
    for v in graph.interior_vertices():
        n = len(graph.incident_edges(v.id))
        if n != 3:
            raise ReebGraphError(f"interior vertex {v.id} has {n} incident edges, expected 3")
    if len(graph.edges) != len(graph.vertices) - 1 or not nx.is_connected(graph._nx):
        raise ReebGraphError("Reeb graph of a proper planar Morse function must be a tree")
    kinds = [c.kind for c in cps]
    euler = kinds.count(MINIMUM) + kinds.count(MAXIMUM) - kinds.count(SADDLE)
    if euler != 1:
        raise ReebGraphError(f"Euler characteristic {euler} != 1: critical points missing")


def analyse(sys: HamiltonianSystem, h_max: float, search_box, grid_n: int = 401,
            crit_grid_n: int = 101) -> ReebGraph:
    """Convenience: find critical points in ``search_box`` and build the graph."""
    cps = find_critical_points(sys, search_box, crit_grid_n)
    return build_reeb_graph(sys, cps, h_max, search_box, grid_n)


# -- identification map --------------------------------------------------------

def identify_many(graph: ReebGraph, sys: HamiltonianSystem, points, snap_tol: float = SNAP_TOL):
    """Vectorised identification map: returns ``(h, edge_ids, vertex_ids)``.

    ``vertex_ids`` is -1 for points that are not snapped onto a vertex.
    """
    z = np.asarray(points, dtype=float).reshape(-1, 2)
    h = sys.H(z)
    if np.any(h > graph.h_max + snap_tol):
        k = int(np.argmax(h))
        raise OutOfChart(f"point {z[k]} has H={h[k]:.6g} above h_max={graph.h_max}")
    edge_ids = np.full(len(z), -1, dtype=int)
    vertex_ids = np.full(len(z), -1, dtype=int)
    crit_locs = graph.critical_locations
    vertex_values = np.array([v.h_value for v in graph.vertices])
    slab_lo = np.array([sl.lo for sl in graph.slabs])
    slab_hi = np.array([sl.hi for sl in graph.slabs])
    max_step = 0.02 * max(graph.search_box[1] - graph.search_box[0], graph.search_box[3] - graph.search_box[2])

    # points sitting on a vertex level are transported into an adjacent slab
    near = np.abs(h[:, None] - vertex_values[None, :]) < snap_tol
    snapped = near.any(axis=1)
    target_slab = np.clip(np.searchsorted(slab_lo, h, side="right") - 1, 0, len(graph.slabs) - 1)
    for i in np.flatnonzero(snapped):
        ks = np.flatnonzero(near[i])
        at = [k for k in ks if k < len(crit_locs) and np.linalg.norm(z[i] - crit_locs[k]) < 1e-6]
        if at:
            edge_ids[i] = graph.incident_edges(at[0])[0].id
            vertex_ids[i] = at[0]
            continue
        c = vertex_values[ks[0]]
        up = np.flatnonzero(np.abs(slab_lo - c) <= 1e-9 * (1 + abs(c)))
        target_slab[i] = up[0] if len(up) else int(np.flatnonzero(np.abs(slab_hi - c) <= 1e-9 * (1 + abs(c)))[0])

    todo = edge_ids < 0
    for s, slab in enumerate(graph.slabs):
        sel = np.flatnonzero(todo & (target_slab == s))
        if len(sel) == 0:
            continue
        if len(slab.edge_ids) == 1:
            edge_ids[sel] = slab.edge_ids[0]
            continue
        moved, ok = transport_to_level(sys, z[sel], slab.level, max_step, crit_locs)
        if not ok.all():
            raise TopologyError(f"identification transport failed for {int((~ok).sum())} points")
        edge_ids[sel] = _nearest_component(graph._slab_trees[s], moved)

    for i in np.flatnonzero(snapped & (vertex_ids < 0)):
        e = graph.edges[edge_ids[i]]
        for k in np.flatnonzero(near[i]):
            if k in (e.lower_vertex, e.upper_vertex):
                vertex_ids[i] = k
    h_out = h.copy()
    on_vertex = vertex_ids >= 0
    h_out[on_vertex] = vertex_values[vertex_ids[on_vertex]]
    return h_out, edge_ids, vertex_ids


def identify(graph: ReebGraph, sys: HamiltonianSystem, z) -> GraphPoint:
    """Identification map ``z -> (H(z), edge)``; vertex levels snap onto the vertex."""
    h, e, v = identify_many(graph, sys, np.asarray(z, dtype=float)[None, :])
    return GraphPoint(float(h[0]), int(e[0]), None if v[0] < 0 else int(v[0]))


def graph_distance(graph: ReebGraph, p: GraphPoint, q: GraphPoint) -> float:
    """Path metric on the graph with edge length equal to the H-span."""
    if p.vertex_id is not None and q.vertex_id is not None:
        return float(graph.vertex_distances[p.vertex_id][q.vertex_id])
    if p.edge_id == q.edge_id:
        return abs(p.h - q.h)
    dist = graph.vertex_distances

    def ends(pt: GraphPoint):
        if pt.vertex_id is not None:
            return [(pt.vertex_id, 0.0)]
        e = graph.edges[pt.edge_id]
        return [(e.lower_vertex, abs(pt.h - e.h_interval[0])), (e.upper_vertex, abs(e.h_interval[1] - pt.h))]

    return float(min(dp + dist[v][w] + dq for v, dp in ends(p) for w, dq in ends(q)))
