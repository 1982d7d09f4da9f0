"""Costmap fusion and the three global planners: grid Dijkstra, RRT*, PRM."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from .errors import ConfigError, NoPath
from .sim_world import PrebuiltMap, Scan

RESOLUTION = 0.25
INFLATION = 1.0
SCAN_DISC = 0.3
ON_MAP_TOL = 0.01
WAYPOINT_SPACING = 1.0
CHECK_STEP = 0.05
SQRT2 = math.sqrt(2.0)


@dataclass
class Costmap:
    """Boolean occupancy lattice, ``occupancy[i, j]`` is the cell at column ``i`` (x) and row ``j`` (y)."""

    resolution: float
    occupancy: np.ndarray
    inflation_radius: float = INFLATION
    origin: tuple[float, float] = (0.0, 0.0)
    world_map: PrebuiltMap | None = field(default=None, repr=False, compare=False)
    sensed: np.ndarray | None = field(default=None, repr=False, compare=False)  # scan-only layer
    _clearance: np.ndarray | None = field(default=None, repr=False, compare=False)
    _depth: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupancy.shape

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.floor((points - np.asarray(self.origin)) / self.resolution).astype(int)

    def center_of(self, cells: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(cells) + 0.5) * self.resolution + np.asarray(self.origin)

    def in_bounds(self, cells: np.ndarray) -> np.ndarray:
        nx, ny = self.shape
        return (cells[:, 0] >= 0) & (cells[:, 0] < nx) & (cells[:, 1] >= 0) & (cells[:, 1] < ny)

    def is_free(self, points: np.ndarray) -> np.ndarray:
        """Lookup by containing cell; points off the lattice count as occupied."""
        cells = self.cell_of(points)
        ok = self.in_bounds(cells)
        out = np.zeros(len(cells), dtype=bool)
        out[ok] = ~self.occupancy[cells[ok, 0], cells[ok, 1]]
        return out

    @property
    def clearance(self) -> np.ndarray:
        """Per-cell distance (m) from a free cell center to the nearest occupied cell center."""
        if self._clearance is None:
            self._clearance = ndimage.distance_transform_edt(~self.occupancy) * self.resolution
        return self._clearance

    @property
    def depth(self) -> np.ndarray:
        """Per-cell distance (m) from an occupied cell center to the nearest free cell center."""
        if self._depth is None:
            self._depth = ndimage.distance_transform_edt(self.occupancy) * self.resolution
        return self._depth

    def sample_field(self, grid: np.ndarray, points: np.ndarray, off_value: float) -> np.ndarray:
        cells = self.cell_of(points)
        ok = self.in_bounds(cells)
        out = np.full(len(cells), off_value, dtype=float)
        out[ok] = grid[cells[ok, 0], cells[ok, 1]]
        return out


@dataclass
class ReferencePath:
    waypoints: np.ndarray  # (N, 2)
    planned_at: float = 0.0
    cost: float = float("nan")

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def __len__(self) -> int:
        return len(self.waypoints)


# --------------------------------------------------------------------------- costmap

@lru_cache(maxsize=16)
def _static_occupancy(field_size: float, centers: tuple, side: float, resolution: float, inflation: float) -> np.ndarray:
    n = int(round(field_size / resolution))
    ticks = (np.arange(n) + 0.5) * resolution
    xs, ys = np.meshgrid(ticks, ticks, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    m = PrebuiltMap(field_size, np.array(centers, dtype=float).reshape(-1, 2), side, len(centers))
    occ = (m.distance_to_boundary(pts) <= inflation) | (m.distance_to_pillars(pts) <= inflation)
    occ = occ.reshape(n, n)
    occ.setflags(write=False)
    return occ


def static_occupancy(world_map: PrebuiltMap, resolution: float = RESOLUTION, inflation: float = INFLATION) -> np.ndarray:
    centers = tuple(map(tuple, world_map.pillar_centers.tolist()))
    return _static_occupancy(world_map.field_size, centers, world_map.pillar_side, resolution, inflation)


def _stencil(radius: float, resolution: float) -> np.ndarray:
    k = int(math.ceil(radius / resolution)) + 1
    r = np.arange(-k, k + 1)
    a, b = np.meshgrid(r, r, indexing="ij")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def build_costmap(world_map: PrebuiltMap, scan: Scan | None = None, resolution: float = RESOLUTION,
                  inflation: float = INFLATION, scan_disc: float = SCAN_DISC) -> Costmap:
    occ = static_occupancy(world_map, resolution, inflation).copy()
    cm = Costmap(resolution, occ, inflation, world_map=world_map)
    if scan is None:
        return cm
    cm.sensed = np.zeros_like(occ)
    pts = scan.points[scan.hit_mask]
    if len(pts):
        # returns from known geometry are already on the static layer
        on_map = (world_map.distance_to_pillars(pts) <= ON_MAP_TOL) | \
                 (np.abs(world_map.distance_to_boundary(pts)) <= ON_MAP_TOL)
        pts = pts[~on_map]
    if len(pts):
        reach = scan_disc + inflation
        cells = cm.cell_of(pts)[:, None, :] + _stencil(reach, resolution)[None, :, :]
        cells = cells.reshape(-1, 2)
        owner = np.repeat(pts, len(cells) // len(pts), axis=0)
        ok = cm.in_bounds(cells)
        cells, owner = cells[ok], owner[ok]
        near = np.linalg.norm(cm.center_of(cells) - owner, axis=1) <= reach
        cells = cells[near]
        occ[cells[:, 0], cells[:, 1]] = True
        cm.sensed[cells[:, 0], cells[:, 1]] = True
    return cm


# --------------------------------------------------------------------------- helpers

def segments_free(costmap: Costmap, a: np.ndarray, b: np.ndarray, step: float = CHECK_STEP) -> np.ndarray:
    """Check segments ``a[k] -> b[k]`` sampled at most ``step`` apart, endpoints included."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if len(a) == 0:
        return np.zeros(0, dtype=bool)
    n = int(math.ceil(np.linalg.norm(b - a, axis=1).max() / step)) + 1
    t = np.linspace(0.0, 1.0, max(n, 2))
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return costmap.is_free(pts.reshape(-1, 2)).reshape(len(a), -1).all(axis=1)


def densify(waypoints: np.ndarray, spacing: float) -> np.ndarray:
    """Insert evenly spaced points so no two consecutive points are more than ``spacing`` apart."""
    out = [waypoints[0]]
    for p, q in zip(waypoints[:-1], waypoints[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(q - p) / spacing - 1e-12)))
        for k in range(1, n + 1):
            out.append(p + (q - p) * (k / n))
    return np.array(out)


def path_is_free(costmap: Costmap, waypoints: np.ndarray, step: float = CHECK_STEP) -> bool:
    return bool(segments_free(costmap, waypoints[:-1], waypoints[1:], step).all()) if len(waypoints) > 1 \
        else bool(costmap.is_free(waypoints).all())


# --------------------------------------------------------------------------- Dijkstra

_OFFSETS = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def _shift(d: int, n: int) -> tuple[slice, slice]:
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n - max(0, -d))


def lattice_graph(occupancy: np.ndarray, resolution: float = 1.0) -> sparse.csr_matrix:
    """8-connected graph over free cells; diagonal moves need both flanking cells free."""
    nx, ny = occupancy.shape
    free = ~occupancy
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols, w = [], [], []
    for dx, dy in _OFFSETS:
        xs, xt = _shift(dx, nx)
        ys, yt = _shift(dy, ny)
        ok = free[xs, ys] & free[xt, yt]
        if dx and dy:
            ok &= free[xt, ys] & free[xs, yt]
            cost = SQRT2 * resolution
        else:
            cost = resolution
        rows.append(idx[xs, ys][ok])
        cols.append(idx[xt, yt][ok])
        w.append(np.full(int(ok.sum()), cost))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    w = np.concatenate(w)
    return sparse.csr_matrix((w, (rows, cols)), shape=(nx * ny, nx * ny))


def nearest_free_cell(costmap: Costmap, point: np.ndarray, max_dist: float = 1.0) -> np.ndarray | None:
    base = costmap.cell_of(point)[0]
    cand = base[None, :] + _stencil(max_dist, costmap.resolution)
    cand = cand[costmap.in_bounds(cand)]
    cand = cand[~costmap.occupancy[cand[:, 0], cand[:, 1]]]
    if not len(cand):
        return None
    d = np.linalg.norm(costmap.center_of(cand) - point, axis=1)
    ok = d <= max_dist
    if not ok.any():
        return None
    cand, d = cand[ok], d[ok]
    order = np.lexsort((cand[:, 1], cand[:, 0], d))
    return cand[order[0]]


def dijkstra_cells(occupancy: np.ndarray, start_cell, goal_cell) -> list[tuple[int, int]]:
    """Cell chain of an optimal lattice path, or ``NoPath``."""
    nx, ny = occupancy.shape
    s = int(start_cell[0]) * ny + int(start_cell[1])
    g = int(goal_cell[0]) * ny + int(goal_cell[1])
    if occupancy[tuple(start_cell)] or occupancy[tuple(goal_cell)]:
        raise NoPath("start or goal cell occupied")
    if s == g:
        return [tuple(map(int, start_cell))]
    graph = lattice_graph(occupancy)
    dist, pred = csgraph.dijkstra(graph, directed=True, indices=s, return_predecessors=True)
    if not np.isfinite(dist[g]):
        raise NoPath("goal unreachable on the lattice")
    chain = [g]
    while chain[-1] != s:
        chain.append(int(pred[chain[-1]]))
    chain.reverse()
    return [(c // ny, c % ny) for c in chain]


def chain_moves(chain) -> tuple[int, int]:
    """Number of straight and diagonal moves along a cell chain."""
    c = np.asarray(chain)
    if len(c) < 2:
        return 0, 0
    diag = int((np.abs(np.diff(c, axis=0)).sum(axis=1) == 2).sum())
    return len(c) - 1 - diag, diag


def extract_waypoints(costmap: Costmap, pts: np.ndarray, spacing: float = WAYPOINT_SPACING) -> np.ndarray:
    """Greedy thinning of a dense free polyline: keep the farthest point within ``spacing`` of arc length
    whose chord stays free."""
    if len(pts) <= 2:
        return pts.copy()
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    keep = [0]
    i = 0
    while i < len(pts) - 1:
        j_max = int(np.searchsorted(arc, arc[i] + spacing + 1e-12, side="right")) - 1
        j_max = max(j_max, i + 1)
        cand = np.arange(i + 1, j_max + 1)
        ok = segments_free(costmap, np.repeat(pts[i:i + 1], len(cand), axis=0), pts[cand])
        good = cand[ok]
        j = int(good.max()) if len(good) else i + 1
        keep.append(j)
        i = j
    return pts[keep]


def plan_dijkstra(costmap: Costmap, start, goal, planned_at: float = 0.0) -> ReferencePath:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    s_cell = costmap.cell_of(start)[0]
    substituted = False
    if not costmap.in_bounds(s_cell[None])[0] or costmap.occupancy[tuple(s_cell)]:
        s_cell = nearest_free_cell(costmap, start)
        if s_cell is None:
            raise NoPath("no free cell within 1.0 m of start")
        substituted = True
    g_cell = costmap.cell_of(goal)[0]
    if not costmap.in_bounds(g_cell[None])[0]:
        raise NoPath("goal outside lattice")
    chain = dijkstra_cells(costmap.occupancy, s_cell, g_cell)
    n_str, n_diag = chain_moves(chain)
    cost = costmap.resolution * (n_str + SQRT2 * n_diag)

    pts = costmap.center_of(np.array(chain))
    first = pts[0] if substituted else start
    if len(chain) == 1:
        return ReferencePath(np.array([first, goal]), planned_at, cost)
    pts[0] = first
    pts[-1] = goal
    return ReferencePath(extract_waypoints(costmap, pts), planned_at, cost)


# --------------------------------------------------------------------------- RRT*

@dataclass
class RRTStarParams:
    iterations: int = 2000
    step: float = 1.0
    goal_bias: float = 0.05
    gamma: float = 6.0
    max_radius: float = 1.0


class _Tree:
    def __init__(self, root: np.ndarray, capacity: int):
        self.xy = np.zeros((capacity + 1, 2))
        self.parent = np.full(capacity + 1, -1, dtype=int)
        self.cost = np.zeros(capacity + 1)
        self.children: list[list[int]] = [[]]
        self.xy[0] = root
        self.n = 1

    def add(self, p, parent, cost) -> int:
        k = self.n
        self.xy[k] = p
        self.parent[k] = parent
        self.cost[k] = cost
        self.children.append([])
        self.children[parent].append(k)
        self.n += 1
        return k

    def reparent(self, k, new_parent, new_cost):
        self.children[self.parent[k]].remove(k)
        self.children[new_parent].append(k)
        self.parent[k] = new_parent
        delta = new_cost - self.cost[k]
        stack = [k]
        while stack:
            u = stack.pop()
            self.cost[u] += delta
            stack.extend(self.children[u])

    def chain(self, k) -> list[int]:
        out = [k]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]


def _rrt_star(costmap: Costmap, start, goal, seed: int, params: RRTStarParams):
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    rng = np.random.default_rng(seed)
    nx, ny = costmap.shape
    lo = np.asarray(costmap.origin, dtype=float)
    hi = lo + costmap.resolution * np.array([nx, ny])
    tree = _Tree(start, params.iterations)
    goal_nodes: list[int] = []

    for _ in range(params.iterations):
        if rng.random() < params.goal_bias:
            q = goal
        else:
            q = rng.uniform(lo, hi)
        pts = tree.xy[:tree.n]
        d = np.linalg.norm(pts - q, axis=1)
        near_idx = int(np.argmin(d))
        if d[near_idx] < 1e-9:
            continue
        p_near = pts[near_idx]
        new = p_near + (q - p_near) * min(1.0, params.step / d[near_idx])
        if not costmap.is_free(new[None])[0]:
            continue

        card = tree.n + 1
        radius = min(params.gamma * math.sqrt(math.log(card) / card), params.max_radius)
        dn = np.linalg.norm(pts - new, axis=1)
        near = np.flatnonzero(dn <= radius)
        if near_idx not in near:
            near = np.append(near, near_idx)
        free = segments_free(costmap, pts[near], np.repeat(new[None], len(near), axis=0))
        if not free.any():
            continue
        near = near[free]
        through = tree.cost[near] + dn[near]
        best = int(np.argmin(through))
        k = tree.add(new, int(near[best]), float(through[best]))

        # rewire
        for j in near:
            if j == tree.parent[k]:
                continue
            c = tree.cost[k] + dn[j]
            if c < tree.cost[j] - 1e-12:
                tree.reparent(int(j), k, c)

        if np.linalg.norm(goal - new) <= params.step and segments_free(costmap, new[None], goal[None])[0]:
            goal_nodes.append(k)
    return tree, goal_nodes


def rrt_star_best_cost(costmap: Costmap, start, goal, seed: int, iterations: int) -> float:
    tree, goal_nodes = _rrt_star(costmap, start, goal, seed, RRTStarParams(iterations=iterations))
    if not goal_nodes:
        return float("inf")
    g = np.asarray(goal, dtype=float)
    gn = np.array(goal_nodes)
    return float((tree.cost[gn] + np.linalg.norm(tree.xy[gn] - g, axis=1)).min())


def plan_rrt_star(costmap: Costmap, start, goal, seed: int, params: RRTStarParams | None = None,
                  planned_at: float = 0.0) -> ReferencePath:
    params = params or RRTStarParams()
    if not costmap.is_free(np.atleast_2d(start))[0]:
        raise NoPath("start not free")
    goal = np.asarray(goal, dtype=float)
    tree, goal_nodes = _rrt_star(costmap, start, goal, seed, params)
    if not goal_nodes:
        raise NoPath("RRT* found no goal connection")
    gn = np.array(goal_nodes)
    total = tree.cost[gn] + np.linalg.norm(tree.xy[gn] - goal, axis=1)
    best = int(gn[np.argmin(total)])
    pts = np.vstack([tree.xy[tree.chain(best)], goal[None]])
    return ReferencePath(densify(pts, WAYPOINT_SPACING), planned_at, float(total.min()))


# --------------------------------------------------------------------------- PRM

@dataclass(frozen=True)
class Roadmap:
    nodes: np.ndarray  # (N, 2)
    edges: np.ndarray  # (E, 2) node index pairs, i < j
    lengths: np.ndarray  # (E,)


def prm_build(costmap_static: Costmap, seed: int, n_samples: int = 500, k: int = 10) -> Roadmap:
    rng = np.random.default_rng(seed)
    nx, ny = costmap_static.shape
    lo = np.asarray(costmap_static.origin, dtype=float)
    hi = lo + costmap_static.resolution * np.array([nx, ny])
    nodes = np.zeros((0, 2))
    while len(nodes) < n_samples:
        cand = rng.uniform(lo, hi, size=(n_samples, 2))
        nodes = np.vstack([nodes, cand[costmap_static.is_free(cand)]])
    nodes = nodes[:n_samples]

    d = np.linalg.norm(nodes[:, None, :] - nodes[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    pairs = np.stack([np.repeat(np.arange(len(nodes)), k), nbrs.ravel()], axis=1)
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    ok = segments_free(costmap_static, nodes[pairs[:, 0]], nodes[pairs[:, 1]])
    pairs = pairs[ok]
    lengths = np.linalg.norm(nodes[pairs[:, 0]] - nodes[pairs[:, 1]], axis=1)
    return Roadmap(nodes, pairs, lengths)


def _attach(roadmap: Roadmap, costmap: Costmap, p: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    d = np.linalg.norm(roadmap.nodes - p, axis=1)
    cand = np.argsort(d, kind="stable")[:k]
    ok = segments_free(costmap, np.repeat(p[None], len(cand), axis=0), roadmap.nodes[cand])
    return cand[ok], d[cand[ok]]


def prm_query(roadmap: Roadmap, costmap_now: Costmap, start, goal, k: int = 10,
              planned_at: float = 0.0) -> ReferencePath:
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    n = len(roadmap.nodes)
    active = segments_free(costmap_now, roadmap.nodes[roadmap.edges[:, 0]], roadmap.nodes[roadmap.edges[:, 1]])
    s_nodes, s_d = _attach(roadmap, costmap_now, start, k)
    g_nodes, g_d = _attach(roadmap, costmap_now, goal, k)
    if not len(s_nodes) or not len(g_nodes):
        raise NoPath("start or goal cannot connect to the roadmap")
    e = roadmap.edges[active]
    w = roadmap.lengths[active]
    S, G = n, n + 1
    rows = np.concatenate([e[:, 0], e[:, 1], np.full(len(s_nodes), S), g_nodes])
    cols = np.concatenate([e[:, 1], e[:, 0], s_nodes, np.full(len(g_nodes), G)])
    # zero-length edges would vanish from the sparse matrix
    wts = np.maximum(np.concatenate([w, w, s_d, g_d]), 1e-12)
    graph = sparse.csr_matrix((wts, (rows, cols)), shape=(n + 2, n + 2))
    dist, pred = csgraph.dijkstra(graph, directed=True, indices=S, return_predecessors=True)
    if not np.isfinite(dist[G]):
        raise NoPath("roadmap disconnected under current costmap")
    chain = [G]
    while chain[-1] != S:
        chain.append(int(pred[chain[-1]]))
    chain.reverse()
    pts = np.array([start if c == S else goal if c == G else roadmap.nodes[c] for c in chain])
    return ReferencePath(densify(pts, WAYPOINT_SPACING), planned_at, float(dist[G]))


# --------------------------------------------------------------------------- planner objects

class DijkstraPlanner:
    name = "dijkstra"

    def prepare(self, world_map: PrebuiltMap, seed: int) -> None:
        pass

    def plan(self, costmap: Costmap, start, goal, planned_at: float = 0.0) -> ReferencePath:
        return plan_dijkstra(costmap, start, goal, planned_at)


class RRTStarPlanner:
    """Each call draws a fresh seed from an episode-local stream."""

    name = "rrt_star"

    def __init__(self, params: RRTStarParams | None = None):
        self.params = params or RRTStarParams()
        self._seeds = np.random.default_rng(0)

    def prepare(self, world_map: PrebuiltMap, seed: int) -> None:
        self._seeds = np.random.default_rng([seed, 1])

    def plan(self, costmap: Costmap, start, goal, planned_at: float = 0.0) -> ReferencePath:
        seed = int(self._seeds.integers(2**31))
        return plan_rrt_star(costmap, start, goal, seed, self.params, planned_at)


class PRMPlanner:
    """Roadmap built once per episode from the pillar-only costmap."""

    name = "prm"

    def __init__(self, n_samples: int = 500, k: int = 10):
        self.n_samples = n_samples
        self.k = k
        self.roadmap: Roadmap | None = None

    def prepare(self, world_map: PrebuiltMap, seed: int) -> None:
        self.roadmap = prm_build(build_costmap(world_map), seed, self.n_samples, self.k)

    def plan(self, costmap: Costmap, start, goal, planned_at: float = 0.0) -> ReferencePath:
        if self.roadmap is None:
            raise ConfigError("PRMPlanner.prepare() must run before plan()")
        return prm_query(self.roadmap, costmap, start, goal, self.k, planned_at)


GLOBAL_PLANNERS = {"dijkstra": DijkstraPlanner, "rrt_star": RRTStarPlanner, "prm": PRMPlanner}


def make_global_planner(name: str):
    try:
        return GLOBAL_PLANNERS[name]()
    except KeyError:
        raise ConfigError(f"unknown global planner {name!r}; choose from {sorted(GLOBAL_PLANNERS)}") from None
