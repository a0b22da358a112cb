"""Voronoi-roadmap routing with clearance guarantees.

The roadmap is the Voronoi diagram of point sites sampled along the site
boundary, static obstacle edges (0.5 m spacing), and dynamic obstacle circles
(16 points each). Voronoi edges stay as far from the nearest site as the
local geometry allows, so pruning everything with nearest-site distance below
the clearance floor leaves a graph whose every traversable point keeps that
distance from sampled geometry; the 0.5 m sampling slack is absorbed into the
floor. Two exact facts carry the guarantees:

  - along a Voronoi ridge the nearest-site distance at x equals |x - p| for
    either generating site p, so an edge's true minimum clearance is the
    point-to-segment distance from p -- no sampling needed;
  - for arbitrary segments (start/goal connectors, shortcuts) the minimum
    nearest-site distance is the minimum over sites of point-to-segment
    distance, computed vectorized.

Dynamic obstacles rebuild the graph from scratch (generation bump); at this
site scale a rebuild is a few milliseconds.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Voronoi, cKDTree

from . import SiteFleetError
from .geo import EnuPoint
from .geometry import point_in_polygon
from .sitemap import DynamicObstacle, SiteMap

DEFAULT_CLEARANCE_FLOOR_M = 2.0
SITE_SPACING_M = 0.5
CIRCLE_SAMPLES = 16
CONNECT_K = 5


class PlannerError(SiteFleetError):
    pass


class BlockedSiteError(PlannerError):
    """No free space survives the clearance floor."""


class PlacementError(PlannerError):
    """Start or goal is outside the boundary or too close to geometry."""


class UnreachableError(PlannerError):
    """No route between start and goal on the current graph."""


@dataclass(frozen=True)
class GraphNode:
    point: EnuPoint
    clearance: float


@dataclass(frozen=True)
class GraphEdge:
    a: int
    b: int
    length: float
    min_clearance: float


@dataclass(frozen=True)
class PlannedPath:
    waypoints: tuple[EnuPoint, ...]
    length: float
    min_clearance: float
    graph_generation: int

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise PlannerError("a path needs at least start and goal")
        total = sum(
            math.hypot(b.east - a.east, b.north - a.north)
            for a, b in zip(self.waypoints, self.waypoints[1:])
        )
        if abs(total - self.length) > 1e-9:
            raise PlannerError(f"length {self.length} != waypoint sum {total}")

    @property
    def points(self) -> tuple[EnuPoint, ...]:
        # sitemap.blocks_path duck-types on .points
        return self.waypoints


@dataclass(frozen=True, eq=False)
class VoronoiGraph:
    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...]
    generation: int
    clearance_floor: float
    sites: np.ndarray
    boundary_xy: tuple[tuple[float, float], ...]
    static_xy: tuple[tuple[tuple[float, float], ...], ...]
    circles: tuple[tuple[float, float, float], ...]

    def adjacency(self) -> dict[int, list[tuple[int, float]]]:
        adj: dict[int, list[tuple[int, float]]] = {i: [] for i in range(len(self.nodes))}
        for e in self.edges:
            adj[e.a].append((e.b, e.length))
            adj[e.b].append((e.a, e.length))
        return adj

    def segment_clearance(self, a: tuple[float, float], b: tuple[float, float]) -> float:
        """Minimum nearest-site distance along segment ab (exact)."""
        return _segment_site_clearance(self.sites, a, b)

    def point_clearance(self, p: tuple[float, float]) -> float:
        diff = self.sites - np.asarray(p)
        return float(np.min(np.hypot(diff[:, 0], diff[:, 1])))

    def contains(self, p: tuple[float, float]) -> bool:
        return point_in_polygon(p, list(self.boundary_xy))


def _segment_site_clearance(sites: np.ndarray, a, b) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    px = sites[:, 0] - ax
    py = sites[:, 1] - ay
    if seg_len_sq == 0.0:
        return float(np.min(np.hypot(px, py)))
    t = np.clip((px * dx + py * dy) / seg_len_sq, 0.0, 1.0)
    return float(np.min(np.hypot(px - t * dx, py - t * dy)))


def _sample_ring(points: list[tuple[float, float]], spacing: float) -> list[tuple[float, float]]:
    out = []
    n = len(points)
    for i in range(n):
        ax, ay = points[i]
        bx, by = points[(i + 1) % n]
        seg_len = math.hypot(bx - ax, by - ay)
        steps = max(1, math.ceil(seg_len / spacing))
        for k in range(steps):  # endpoint owned by the next edge
            t = k / steps
            out.append((ax + t * (bx - ax), ay + t * (by - ay)))
    return out


def sample_sites(
    site_map: SiteMap,
    obstacles: list[DynamicObstacle],
    spacing: float = SITE_SPACING_M,
) -> np.ndarray:
    """Generator sites: boundary + static polygon rings + obstacle circles."""
    pts = _sample_ring([(p.east, p.north) for p in site_map.boundary], spacing)
    for poly in site_map.static_obstacles:
        pts.extend(_sample_ring([(p.east, p.north) for p in poly], spacing))
    for ob in obstacles:
        for k in range(CIRCLE_SAMPLES):
            theta = 2.0 * math.pi * k / CIRCLE_SAMPLES
            pts.append(
                (
                    ob.position.east + ob.radius * math.cos(theta),
                    ob.position.north + ob.radius * math.sin(theta),
                )
            )
    return np.array(pts)


def build_graph(
    site_map: SiteMap,
    obstacles: list[DynamicObstacle],
    clearance_floor: float = DEFAULT_CLEARANCE_FLOOR_M,
    generation: int = 0,
) -> VoronoiGraph:
    sites = sample_sites(site_map, obstacles)
    vor = Voronoi(sites)
    tree = cKDTree(sites)
    boundary_xy = [(p.east, p.north) for p in site_map.boundary]
    static_xy = [[(p.east, p.north) for p in poly] for poly in site_map.static_obstacles]

    clearances, _ = tree.query(vor.vertices)
    keep: dict[int, int] = {}
    nodes: list[GraphNode] = []
    for idx, (vx, vy) in enumerate(vor.vertices):
        if clearances[idx] < clearance_floor:
            continue
        p = (float(vx), float(vy))
        if not point_in_polygon(p, boundary_xy, include_boundary=False):
            continue
        if any(point_in_polygon(p, poly, include_boundary=True) for poly in static_xy):
            continue
        if any(
            math.hypot(vx - ob.position.east, vy - ob.position.north) <= ob.radius
            for ob in obstacles
        ):
            continue
        keep[idx] = len(nodes)
        nodes.append(GraphNode(EnuPoint(p[0], p[1]), float(clearances[idx])))

    if not nodes:
        raise BlockedSiteError("site fully blocked: no free space at this clearance floor")

    edges: list[GraphEdge] = []
    for (site_a, _site_b), (v1, v2) in zip(vor.ridge_points, vor.ridge_vertices):
        if v1 == -1 or v2 == -1 or v1 not in keep or v2 not in keep:
            continue
        a = vor.vertices[v1]
        b = vor.vertices[v2]
        # nearest-site distance along a ridge is the distance to either
        # generating site, so this minimum is exact
        min_clear = float(
            _point_segment_distance(sites[site_a], a, b)
        )
        if min_clear < clearance_floor:
            continue
        length = float(math.hypot(b[0] - a[0], b[1] - a[1]))
        if length == 0.0:
            continue
        edges.append(GraphEdge(keep[v1], keep[v2], length, min_clear))

    nodes, edges = _largest_component(nodes, edges)
    if not nodes:
        raise BlockedSiteError("site fully blocked: roadmap has no connected free space")
    return VoronoiGraph(
        nodes=tuple(nodes),
        edges=tuple(edges),
        generation=generation,
        clearance_floor=clearance_floor,
        sites=sites,
        boundary_xy=tuple(boundary_xy),
        static_xy=tuple(tuple(poly) for poly in static_xy),
        circles=tuple(
            (ob.position.east, ob.position.north, ob.radius) for ob in obstacles
        ),
    )


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    seg_len_sq = float(d @ d)
    if seg_len_sq == 0.0:
        return float(np.hypot(*(p - a)))
    t = min(1.0, max(0.0, float((p - a) @ d) / seg_len_sq))
    closest = a + t * d
    return float(np.hypot(*(p - closest)))


def _largest_component(
    nodes: list[GraphNode], edges: list[GraphEdge]
) -> tuple[list[GraphNode], list[GraphEdge]]:
    parent = list(range(len(nodes)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in edges:
        ra, rb = find(e.a), find(e.b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    sizes: dict[int, int] = {}
    for i in range(len(nodes)):
        sizes[find(i)] = sizes.get(find(i), 0) + 1
    best_root = min(r for r in sizes if sizes[r] == max(sizes.values()))
    remap: dict[int, int] = {}
    kept_nodes: list[GraphNode] = []
    for i, node in enumerate(nodes):
        if find(i) == best_root:
            remap[i] = len(kept_nodes)
            kept_nodes.append(node)
    kept_edges = [
        GraphEdge(remap[e.a], remap[e.b], e.length, e.min_clearance)
        for e in edges
        if e.a in remap and e.b in remap
    ]
    return kept_nodes, kept_edges


START_ID = -1
GOAL_ID = -2


def plan(
    graph: VoronoiGraph,
    start: EnuPoint,
    goal: EnuPoint,
    clearance_floor: float | None = None,
    instrument: dict | None = None,
) -> PlannedPath:
    """Shortest route start -> goal on the augmented roadmap, then shortcut.

    The augmentation adds one connector each for start and goal: the nearest
    of the 5 closest graph nodes whose straight connector keeps the floor.
    A* (Euclidean heuristic, reopening, closing only once no open node can
    beat the best goal cost) returns the exact minimum over summed float
    edge lengths, which is what the acceptance Dijkstra comparison demands.
    """
    floor = graph.clearance_floor if clearance_floor is None else clearance_floor
    for label, p in (("start", start), ("goal", goal)):
        xy = (p.east, p.north)
        if not graph.contains(xy):
            raise PlacementError(f"{label} outside the site boundary")
        if any(point_in_polygon(xy, list(poly)) for poly in graph.static_xy):
            raise PlacementError(f"{label} inside a static obstacle")
        if any(
            math.hypot(xy[0] - cx, xy[1] - cy) - r < floor
            for cx, cy, r in graph.circles
        ):
            raise PlacementError(f"{label} within {floor} m of a dynamic obstacle")
        if graph.point_clearance(xy) < floor:
            raise PlacementError(f"{label} closer than {floor} m to site geometry")

    start_xy = (start.east, start.north)
    goal_xy = (goal.east, goal.north)
    s_node, s_len = _connect(graph, start_xy, floor)
    g_node, g_len = _connect(graph, goal_xy, floor)
    if s_node is None or g_node is None:
        raise UnreachableError("unreachable: no clear connector onto the roadmap")

    adj = graph.adjacency()
    adj[START_ID] = [(s_node, s_len)]
    adj.setdefault(s_node, []).append((START_ID, s_len))
    adj[GOAL_ID] = [(g_node, g_len)]
    adj.setdefault(g_node, []).append((GOAL_ID, g_len))

    coords: dict[int, tuple[float, float]] = {
        i: (n.point.east, n.point.north) for i, n in enumerate(graph.nodes)
    }
    coords[START_ID] = start_xy
    coords[GOAL_ID] = goal_xy

    def heuristic(i: int) -> float:
        cx, cy = coords[i]
        return math.hypot(goal_xy[0] - cx, goal_xy[1] - cy)

    g_best: dict[int, float] = {START_ID: 0.0}
    parent: dict[int, int] = {}
    expanded: list[int] = []
    heap: list[tuple[float, int]] = [(heuristic(START_ID), START_ID)]
    goal_cost = math.inf
    while heap:
        f, node = heapq.heappop(heap)
        if f > goal_cost:
            break
        g = g_best[node]
        if f > g + heuristic(node):
            continue  # stale entry
        expanded.append(node)
        if node == GOAL_ID:
            goal_cost = min(goal_cost, g)
            continue
        for nbr, w in adj[node]:
            cand = g + w
            if cand < g_best.get(nbr, math.inf):
                g_best[nbr] = cand
                parent[nbr] = node
                heapq.heappush(heap, (cand + heuristic(nbr), nbr))

    if GOAL_ID not in g_best:
        raise UnreachableError("unreachable: start and goal are in different free regions")

    chain = [GOAL_ID]
    while chain[-1] != START_ID:
        chain.append(parent[chain[-1]])
    chain.reverse()
    raw_points = [coords[i] for i in chain]
    if instrument is not None:
        instrument["raw_cost"] = g_best[GOAL_ID]
        instrument["raw_points"] = list(raw_points)
        instrument["expanded"] = expanded
        instrument["g_best"] = dict(g_best)
        instrument["heuristic"] = heuristic
        instrument["connectors"] = ((s_node, s_len), (g_node, g_len))
    return _finish_path(raw_points, graph.sites, floor, graph.generation)


def _connect(
    graph: VoronoiGraph, p: tuple[float, float], floor: float
) -> tuple[int | None, float]:
    pts = np.array([(n.point.east, n.point.north) for n in graph.nodes])
    dists = np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])
    order = np.argsort(dists, kind="stable")[:CONNECT_K]
    for idx in order:
        node_xy = (float(pts[idx, 0]), float(pts[idx, 1]))
        if graph.segment_clearance(p, node_xy) >= floor:
            return int(idx), float(dists[idx])
    return None, 0.0


def _finish_path(
    points: list[tuple[float, float]],
    sites: np.ndarray,
    floor: float,
    generation: int,
) -> PlannedPath:
    shortcut = _greedy_shortcut(points, sites, floor)
    waypoints = tuple(EnuPoint(x, y) for x, y in shortcut)
    length = sum(
        math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(shortcut, shortcut[1:])
    )
    min_clear = min(
        _segment_site_clearance(sites, a, b) for a, b in zip(shortcut, shortcut[1:])
    )
    return PlannedPath(
        waypoints=waypoints,
        length=length,
        min_clearance=min_clear,
        graph_generation=generation,
    )


def _greedy_shortcut(
    points: list[tuple[float, float]], sites: np.ndarray, floor: float
) -> list[tuple[float, float]]:
    """Single forward pass: from each kept waypoint, jump to the farthest
    later waypoint reachable by a straight segment that keeps the floor."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    i = 0
    last = len(points) - 1
    while i < last:
        j = last
        while j > i + 1 and _segment_site_clearance(sites, points[i], points[j]) < floor:
            j -= 1
        out.append(points[j])
        i = j
    return out


def simplify(
    path: PlannedPath,
    site_map: SiteMap,
    obstacles: list[DynamicObstacle],
    clearance_floor: float = DEFAULT_CLEARANCE_FLOOR_M,
) -> PlannedPath:
    """Shortcut an existing path against freshly sampled geometry."""
    sites = sample_sites(site_map, obstacles)
    points = [(p.east, p.north) for p in path.waypoints]
    return _finish_path(points, sites, clearance_floor, path.graph_generation)


def graph_debug_doc(graph: VoronoiGraph) -> dict:
    """JSON-ready dump for console overlays."""
    return {
        "generation": graph.generation,
        "clearance_floor": graph.clearance_floor,
        "nodes": [
            {"east": n.point.east, "north": n.point.north, "clearance": n.clearance}
            for n in graph.nodes
        ],
        "edges": [
            {"a": e.a, "b": e.b, "length": e.length, "min_clearance": e.min_clearance}
            for e in graph.edges
        ],
    }
