"""Small exact planar-geometry helpers shared by the world model and planner.

Everything works on (x, y) tuples; callers unwrap their EnuPoints. These are
deliberately hand-rolled: the call sites need bit-for-bit deterministic
answers across runs, and the formulas are a few lines each.
"""

from __future__ import annotations

import math

Point = tuple[float, float]


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    """Distance from p to the closed segment ab."""
    ax, ay = a
    bx, by = b
    px, py = p
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    if seg_len_sq == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg_len_sq
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def _orient(a: Point, b: Point, c: Point) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a: Point, b: Point, p: Point) -> bool:
    """p assumed collinear with ab; is it within the bounding box?"""
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool:
    """Closed-segment intersection, endpoint touches and collinear overlap included."""
    o1 = _orient(a, b, c)
    o2 = _orient(a, b, d)
    o3 = _orient(c, d, a)
    o4 = _orient(c, d, b)
    if ((o1 > 0) != (o2 > 0)) and ((o3 > 0) != (o4 > 0)) and 0.0 not in (o1, o2, o3, o4):
        return True
    if o1 == 0.0 and _on_segment(a, b, c):
        return True
    if o2 == 0.0 and _on_segment(a, b, d):
        return True
    if o3 == 0.0 and _on_segment(c, d, a):
        return True
    if o4 == 0.0 and _on_segment(c, d, b):
        return True
    return False


def segment_min_distance(a: Point, b: Point, c: Point, d: Point) -> float:
    """Minimum distance between closed segments ab and cd."""
    if segments_intersect(a, b, c, d):
        return 0.0
    return min(
        point_segment_distance(c, a, b),
        point_segment_distance(d, a, b),
        point_segment_distance(a, c, d),
        point_segment_distance(b, c, d),
    )


def polygon_area(points: list[Point]) -> float:
    """Signed area; positive for counter-clockwise winding."""
    total = 0.0
    n = len(points)
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return total / 2.0


def polygon_is_simple(points: list[Point]) -> bool:
    """No two non-adjacent edges intersect; adjacent edges only share the vertex."""
    n = len(points)
    if n < 3:
        return False
    edges = [(points[i], points[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            adjacent = j == i + 1 or (i == 0 and j == n - 1)
            a, b = edges[i]
            c, d = edges[j]
            if adjacent:
                # shared endpoint is fine; anything more means a degenerate spike
                shared = {a, b} & {c, d}
                if len(shared) != 1:
                    return False
                if _orient(a, b, c) == 0.0 and _orient(a, b, d) == 0.0:
                    return False
            elif segments_intersect(a, b, c, d):
                return False
    return True


def point_in_polygon(p: Point, points: list[Point], include_boundary: bool = True) -> bool:
    """Ray casting with an explicit boundary rule.

    Points within 1e-9 of an edge count as inside when include_boundary is
    set, outside otherwise; keeps zone/obstacle membership deterministic."""
    for i in range(len(points)):
        a = points[i]
        b = points[(i + 1) % len(points)]
        if point_segment_distance(p, a, b) < 1e-9:
            return include_boundary
    x, y = p
    inside = False
    n = len(points)
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < x_cross:
                inside = not inside
    return inside


def polyline_length(points: list[Point]) -> float:
    return sum(
        math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(points, points[1:])
    )
