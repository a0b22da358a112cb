"""WGS84 geodetic <-> local East-North-Up conversions.

Every global position in the system is carried as a GeoPoint and converted
to site-local ENU at module boundaries. Conversions are mediated by ECEF,
so they are exact on the ellipsoid instead of an equirectangular shortcut;
correctness is cheap here and removes a tolerance debate elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import SiteFleetError

# WGS84 ellipsoid constants
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class CoordinateError(SiteFleetError, ValueError):
    """Out-of-range or non-finite coordinate values."""


def _require_finite(kind: str, **parts: float) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise CoordinateError(f"{kind}.{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class GeoPoint:
    """A WGS84 position: lat/lon in degrees, alt in meters above the ellipsoid."""

    lat: float
    lon: float
    alt: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("GeoPoint", lat=self.lat, lon=self.lon, alt=self.alt)
        if not -90.0 <= self.lat <= 90.0:
            raise CoordinateError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise CoordinateError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class EnuPoint:
    """Meters east/north/up of the site origin."""

    east: float
    north: float
    up: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("EnuPoint", east=self.east, north=self.north, up=self.up)


def normalize_angle(theta: float) -> float:
    """Wrap an angle in radians to (-pi, pi]."""
    wrapped = math.fmod(theta, 2.0 * math.pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    elif wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    """Planar pose: ENU position plus heading, counter-clockwise from east.

    Yaw is normalized to (-pi, pi] on construction. The up component of the
    position is carried along but ignored by ground-vehicle consumers.
    """

    position: EnuPoint
    yaw: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("Pose2D", yaw=self.yaw)
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def x(self) -> float:
        return self.position.east

    @property
    def y(self) -> float:
        return self.position.north


def geodetic_to_ecef(p: GeoPoint) -> tuple[float, float, float]:
    lat = math.radians(p.lat)
    lon = math.radians(p.lon)
    sin_lat = math.sin(lat)
    cos_lat = math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    x = (n + p.alt) * cos_lat * math.cos(lon)
    y = (n + p.alt) * cos_lat * math.sin(lon)
    z = (n * (1.0 - WGS84_E2) + p.alt) * sin_lat
    return x, y, z


def ecef_to_geodetic(x: float, y: float, z: float) -> GeoPoint:
    """Iterative inverse of geodetic_to_ecef.

    Fixed-point iteration on latitude; converges well below the package's
    1e-9 degree round-trip tolerance in a handful of rounds, including near
    the poles where altitude is recovered from z instead of the (vanishing)
    equatorial radius.
    """
    lon = math.atan2(y, x)
    hyp = math.hypot(x, y)
    lat = math.atan2(z, hyp * (1.0 - WGS84_E2))
    alt = 0.0
    for _ in range(20):
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        if abs(lat) < 1.3:
            alt = hyp / math.cos(lat) - n
        else:
            alt = z / sin_lat - n * (1.0 - WGS84_E2)
        prev = lat
        lat = math.atan2(z, hyp * (1.0 - WGS84_E2 * n / (n + alt)))
        if abs(lat - prev) < 1e-14:
            break
    return GeoPoint(math.degrees(lat), math.degrees(lon), alt)


def _enu_axes(origin: GeoPoint) -> tuple[tuple[float, float, float], ...]:
    """Unit east/north/up vectors at origin, expressed in ECEF."""
    lat = math.radians(origin.lat)
    lon = math.radians(origin.lon)
    sin_lat, cos_lat = math.sin(lat), math.cos(lat)
    sin_lon, cos_lon = math.sin(lon), math.cos(lon)
    return (
        (-sin_lon, cos_lon, 0.0),
        (-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat),
        (cos_lat * cos_lon, cos_lat * sin_lon, sin_lat),
    )


def geodetic_to_enu(origin: GeoPoint, p: GeoPoint) -> EnuPoint:
    """ENU coordinates of p about origin. Intended for local baselines
    (well under 100 km); nothing stops longer ones but the tangent-plane
    reading of the result stops being useful."""
    ox, oy, oz = geodetic_to_ecef(origin)
    px, py, pz = geodetic_to_ecef(p)
    dx, dy, dz = px - ox, py - oy, pz - oz
    east_v, north_v, up_v = _enu_axes(origin)
    return EnuPoint(
        east_v[0] * dx + east_v[1] * dy + east_v[2] * dz,
        north_v[0] * dx + north_v[1] * dy + north_v[2] * dz,
        up_v[0] * dx + up_v[1] * dy + up_v[2] * dz,
    )


def enu_to_geodetic(origin: GeoPoint, p: EnuPoint) -> GeoPoint:
    ox, oy, oz = geodetic_to_ecef(origin)
    east_v, north_v, up_v = _enu_axes(origin)
    dx = east_v[0] * p.east + north_v[0] * p.north + up_v[0] * p.up
    dy = east_v[1] * p.east + north_v[1] * p.north + up_v[1] * p.up
    dz = east_v[2] * p.east + north_v[2] * p.north + up_v[2] * p.up
    return ecef_to_geodetic(ox + dx, oy + dy, oz + dz)


def planar_distance(a: EnuPoint, b: EnuPoint) -> float:
    """Euclidean distance in the east-north plane; up is ignored."""
    return math.hypot(b.east - a.east, b.north - a.north)
