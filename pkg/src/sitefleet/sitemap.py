"""World model: static site geometry plus the registry of dynamic obstacles.

The static part (boundary, obstacle polygons, named zones, geodetic origin)
comes from a JSON map file and never changes at runtime. The dynamic part is
fed by drone object reports and supervisor injections: TTL-governed circles
that the planner must clear. All positions here are site-local ENU.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from importlib import resources

from . import SiteFleetError
from .geo import EnuPoint, GeoPoint, geodetic_to_enu
from .geolocate import OBJECT_CLASSES, ObjectReport
from .geometry import (
    point_in_polygon,
    point_segment_distance,
    polygon_area,
    polygon_is_simple,
)

DEFAULT_TTL_MS = 10_000
DEFAULT_MERGE_DISTANCE_M = 2.0
DEFAULT_SMOOTHING_ALPHA = 0.5
# person radius is the load-bearing one (pedestrian safety); the others are
# plausible footprints for the remaining report classes
DEFAULT_RADIUS_M = {"person": 1.0, "cone": 0.3, "vehicle": 2.5}


class MapError(SiteFleetError):
    """Invalid site map geometry or map file."""


def _as_xy(p: EnuPoint) -> tuple[float, float]:
    return (p.east, p.north)


@dataclass(frozen=True)
class SiteMap:
    boundary: tuple[EnuPoint, ...]
    static_obstacles: tuple[tuple[EnuPoint, ...], ...]
    zones: dict[str, EnuPoint]
    origin: GeoPoint

    def __post_init__(self) -> None:
        ring = [_as_xy(p) for p in self.boundary]
        if len(ring) < 3 or not polygon_is_simple(ring):
            raise MapError("boundary must be a simple polygon")
        if polygon_area(ring) <= 0.0:
            raise MapError("boundary must wind counter-clockwise")
        for poly in self.static_obstacles:
            pts = [_as_xy(p) for p in poly]
            if len(pts) < 3 or not polygon_is_simple(pts):
                raise MapError("static obstacle must be a simple polygon")
            if not all(point_in_polygon(p, ring) for p in pts):
                raise MapError("static obstacle leaves the site boundary")
        for name, point in self.zones.items():
            if not self.contains(point):
                raise MapError(f"zone {name!r} outside the boundary")
            if self.inside_static_obstacle(point):
                raise MapError(f"zone {name!r} inside a static obstacle")

    def contains(self, p: EnuPoint) -> bool:
        return point_in_polygon(_as_xy(p), [_as_xy(q) for q in self.boundary])

    def inside_static_obstacle(self, p: EnuPoint) -> bool:
        xy = _as_xy(p)
        return any(
            point_in_polygon(xy, [_as_xy(q) for q in poly], include_boundary=False)
            for poly in self.static_obstacles
        )

    def zone(self, name: str) -> EnuPoint:
        try:
            return self.zones[name]
        except KeyError:
            raise MapError(f"unknown zone {name!r}") from None


@dataclass(frozen=True)
class DynamicObstacle:
    id: str
    position: EnuPoint
    radius: float
    cls: str
    last_seen: int
    ttl: int

    def __post_init__(self) -> None:
        if not self.radius > 0.0:
            raise MapError(f"obstacle radius must be > 0, got {self.radius}")


class ObstacleRegistry:
    """TTL-governed dynamic obstacles built from object reports.

    Single-writer (the coordinator loop); queries return frozen snapshots.
    Reports of the same class landing within merge_distance of a live
    obstacle refresh it and pull its position over with exponential
    smoothing instead of spawning a twin.
    """

    def __init__(
        self,
        site: SiteMap,
        ttl_ms: int = DEFAULT_TTL_MS,
        merge_distance: float = DEFAULT_MERGE_DISTANCE_M,
        alpha: float = DEFAULT_SMOOTHING_ALPHA,
    ):
        self.site = site
        self.ttl_ms = ttl_ms
        self.merge_distance = merge_distance
        self.alpha = alpha
        self._obstacles: dict[str, DynamicObstacle] = {}
        self._next_id = 0
        self.dropped_out_of_bounds = 0

    def ingest_report(self, report: ObjectReport, now: int) -> DynamicObstacle | None:
        """Fold one report into the registry; returns the obstacle it became,
        or None when the report falls outside the site and is dropped."""
        enu = geodetic_to_enu(self.site.origin, report.position)
        position = EnuPoint(enu.east, enu.north, 0.0)
        if not self.site.contains(position):
            self.dropped_out_of_bounds += 1
            return None
        for obstacle in self._live(now):
            if obstacle.cls != report.cls:
                continue
            if math.hypot(
                obstacle.position.east - position.east,
                obstacle.position.north - position.north,
            ) <= self.merge_distance:
                smoothed = EnuPoint(
                    obstacle.position.east
                    + self.alpha * (position.east - obstacle.position.east),
                    obstacle.position.north
                    + self.alpha * (position.north - obstacle.position.north),
                    0.0,
                )
                updated = replace(obstacle, position=smoothed, last_seen=now)
                self._obstacles[obstacle.id] = updated
                return updated
        return self._add(position, report.cls, DEFAULT_RADIUS_M[report.cls], now)

    def inject(
        self, position: EnuPoint, cls: str, now: int, radius: float | None = None
    ) -> DynamicObstacle:
        """Supervisor override: place an obstacle directly (no merging)."""
        if cls not in OBJECT_CLASSES:
            raise MapError(f"unknown obstacle class {cls!r}")
        if not self.site.contains(position):
            raise MapError("injected obstacle outside the site boundary")
        return self._add(position, cls, radius or DEFAULT_RADIUS_M[cls], now)

    def _add(self, position: EnuPoint, cls: str, radius: float, now: int) -> DynamicObstacle:
        obstacle = DynamicObstacle(
            id=f"obs-{self._next_id}",
            position=position,
            radius=radius,
            cls=cls,
            last_seen=now,
            ttl=self.ttl_ms,
        )
        self._next_id += 1
        self._obstacles[obstacle.id] = obstacle
        return obstacle

    def clear(self, obstacle_id: str) -> bool:
        return self._obstacles.pop(obstacle_id, None) is not None

    def _live(self, now: int) -> list[DynamicObstacle]:
        return [o for o in self._obstacles.values() if now - o.last_seen <= o.ttl]

    def live_obstacles(self, now: int) -> list[DynamicObstacle]:
        """Unexpired obstacles; also prunes the expired ones."""
        live = self._live(now)
        if len(live) != len(self._obstacles):
            self._obstacles = {o.id: o for o in live}
        return live


def blocks_path(path, obstacles: list[DynamicObstacle], clearance: float) -> bool:
    """True iff any path segment passes strictly within radius + clearance
    of an obstacle center. `path` is a sequence of EnuPoints or anything
    exposing one as `.points` (a planned path)."""
    points = list(getattr(path, "points", path))
    if len(points) < 2:
        points = points * 2
    xy = [_as_xy(p) for p in points]
    for obstacle in obstacles:
        center = _as_xy(obstacle.position)
        limit = obstacle.radius + clearance
        for a, b in zip(xy, xy[1:]):
            if point_segment_distance(center, a, b) < limit:
                return True
    return False


# --- map file ----------------------------------------------------------------

def load_map(path: str | None = None) -> SiteMap:
    """Read a site map document; None loads the bundled site.

    Keys: origin{lat,lon[,alt]}, boundary[[e,n]..], static_obstacles
    [[[e,n]..]..], zones{name:[e,n]}.
    """
    if path is None:
        text = resources.files("sitefleet.data").joinpath("openairlab.map").read_text()
        label = "<bundled>"
    else:
        with open(path) as fh:
            text = fh.read()
        label = path
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapError(f"{label}: not valid JSON: {exc}") from None
    try:
        origin = GeoPoint(
            doc["origin"]["lat"], doc["origin"]["lon"], doc["origin"].get("alt", 0.0)
        )
        boundary = tuple(EnuPoint(e, n) for e, n in doc["boundary"])
        statics = tuple(
            tuple(EnuPoint(e, n) for e, n in poly)
            for poly in doc.get("static_obstacles", [])
        )
        zones = {name: EnuPoint(e, n) for name, (e, n) in doc.get("zones", {}).items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise MapError(f"{label}: bad map structure: {exc!r}") from None
    return SiteMap(boundary=boundary, static_obstacles=statics, zones=zones, origin=origin)


def dump_map(site: SiteMap) -> str:
    doc = {
        "origin": {"lat": site.origin.lat, "lon": site.origin.lon, "alt": site.origin.alt},
        "boundary": [[p.east, p.north] for p in site.boundary],
        "static_obstacles": [
            [[p.east, p.north] for p in poly] for poly in site.static_obstacles
        ],
        "zones": {name: [p.east, p.north] for name, p in site.zones.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True)
