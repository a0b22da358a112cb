"""Tick-based kinematic vehicle simulation.

Ground vehicles are unicycles that turn in place until the heading error
fits within one tick of turning, then drive straight at the waypoint; the
UAV is a point mass that flies the direct 3D line. One tick moves a vehicle,
runs its dwell timer, or completes a route node; a node is complete when the
vehicle is inside the arrival tolerance and the node's action, if any, has
dwelt its full duration. Nothing here is random: identical orders and clocks
reproduce identical traces.

FleetSim drives every vehicle on one logical clock over a bus session,
applying incoming orders only between ticks and flushing outgoing state
in vehicle-id order so runs are deterministic regardless of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import SiteFleetError
from .geo import EnuPoint, GeoPoint, Pose2D, enu_to_geodetic, geodetic_to_enu, normalize_angle
from .geolocate import DEFAULT_IMAGE_SIZE
from .messages import (
    DEFAULT_MANUFACTURER,
    VEHICLE_KINDS,
    ConnectionMsg,
    NodeAction,
    OrderMsg,
    OrderTracker,
    StateMsg,
    from_doc,
    to_doc,
    topic_for,
)
from .scale import ScaleModel, predict_ppm
from .sitemap import SiteMap

DEFAULT_MAX_SPEED = {"excavator": 1.5, "ugv": 2.5, "uav": 5.0}
DEFAULT_TURN_RATE = 1.5
DEFAULT_SIM_DT = 0.1


class VehicleError(SiteFleetError):
    """Invalid vehicle configuration or placement."""


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: str
    kind: str
    max_speed: float = 0.0
    turn_rate: float = DEFAULT_TURN_RATE
    arrival_tolerance: float = 0.5
    state_rate: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in VEHICLE_KINDS:
            raise VehicleError(f"unknown vehicle kind {self.kind!r}")
        if self.max_speed == 0.0:
            object.__setattr__(self, "max_speed", DEFAULT_MAX_SPEED[self.kind])
        for name in ("max_speed", "turn_rate", "arrival_tolerance", "state_rate"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise VehicleError(f"{name} must be positive, got {value!r}")

    def state_interval_ticks(self, dt: float) -> int:
        return max(1, math.ceil((1.0 / self.state_rate) / dt))


@dataclass
class SimClock:
    """Fixed-step logical clock; time_scale only paces wall time."""

    dt: float = DEFAULT_SIM_DT
    time_scale: float = 1.0
    tick: int = 0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise VehicleError(f"dt must be positive, got {self.dt!r}")
        if not self.time_scale > 0:
            raise VehicleError(f"time_scale must be positive, got {self.time_scale!r}")
        if self.tick < 0:
            raise VehicleError(f"tick must be non-negative, got {self.tick!r}")

    def advance(self) -> int:
        self.tick += 1
        return self.tick

    @property
    def time_s(self) -> float:
        return self.tick * self.dt

    @property
    def timestamp_ms(self) -> int:
        return round(self.tick * self.dt * 1000.0)

    @property
    def wall_dt(self) -> float:
        return self.dt / self.time_scale


@dataclass(frozen=True)
class _RouteNode:
    node_id: str
    target: EnuPoint
    action: NodeAction | None


class SimVehicle:
    """One vehicle: waypoint follower, dwell timer, state publisher."""

    def __init__(self, spec: VehicleSpec, site_map: SiteMap, start: Pose2D):
        if not site_map.contains(start.position):
            raise VehicleError(
                f"{spec.vehicle_id} starts outside the site boundary at "
                f"({start.position.east:.1f}, {start.position.north:.1f})"
            )
        self.spec = spec
        self.site_map = site_map
        self.pose = start
        self.order_id: str | None = None
        self.last_node_id: str | None = None
        self.distance_traveled = 0.0
        self._tracker = OrderTracker()
        self._route: list[_RouteNode] = []
        self._cursor = 0
        self._dwell_ticks_left = 0
        self._tick_count = 0

    @property
    def idle(self) -> bool:
        return self._cursor >= len(self._route)

    def accept_order(self, order: OrderMsg) -> bool:
        """Replace the route if the order is new; stale updates are rejected.

        Must be called between ticks: the route swap is atomic from the
        tick loop's point of view.
        """
        if not self._tracker.accept(order):
            return False
        origin = self.site_map.origin
        self._route = [
            _RouteNode(n.node_id, geodetic_to_enu(origin, n.position), n.action)
            for n in order.nodes
        ]
        self._cursor = 0
        self._dwell_ticks_left = 0
        self.order_id = order.order_id
        return True

    def tick(self, clock: SimClock) -> StateMsg | None:
        """Advance one step; returns a StateMsg on publication ticks."""
        node = self._route[self._cursor] if self._cursor < len(self._route) else None
        if node is not None:
            if self._dwell_ticks_left > 0:
                self._dwell_ticks_left -= 1
                if self._dwell_ticks_left == 0:
                    self._complete(node)
            elif self._distance_to(node.target) <= self.spec.arrival_tolerance:
                dwell = 0
                if node.action is not None:
                    dwell = math.ceil(node.action.duration_s / clock.dt)
                if dwell > 0:
                    self._dwell_ticks_left = dwell
                else:
                    self._complete(node)
            else:
                self._move_toward(node.target, clock.dt)

        emit = self._tick_count % self.spec.state_interval_ticks(clock.dt) == 0
        self._tick_count += 1
        if not emit:
            return None
        return self.state_msg(clock.timestamp_ms)

    def state_msg(self, timestamp_ms: int) -> StateMsg:
        pos = self.pose.position
        errors = () if self.site_map.contains(pos) else ("boundary_breach",)
        return StateMsg(
            vehicle_id=self.spec.vehicle_id,
            position=enu_to_geodetic(self.site_map.origin, pos),
            yaw=self.pose.yaw,
            timestamp=timestamp_ms,
            last_node_id=self.last_node_id,
            errors=errors,
        )

    def _complete(self, node: _RouteNode) -> None:
        self.last_node_id = node.node_id
        self._cursor += 1

    def _distance_to(self, target: EnuPoint) -> float:
        p = self.pose.position
        return math.sqrt(
            (target.east - p.east) ** 2
            + (target.north - p.north) ** 2
            + (target.up - p.up) ** 2
        )

    def _move_toward(self, target: EnuPoint, dt: float) -> None:
        if self.spec.kind == "uav":
            self._fly(target, dt)
        else:
            self._drive(target, dt)

    def _drive(self, target: EnuPoint, dt: float) -> None:
        pos = self.pose.position
        bearing = math.atan2(target.north - pos.north, target.east - pos.east)
        error = normalize_angle(bearing - self.pose.yaw)
        max_turn = self.spec.turn_rate * dt
        if abs(error) > max_turn:
            yaw = normalize_angle(self.pose.yaw + math.copysign(max_turn, error))
            self.pose = Pose2D(pos, yaw)
            return
        distance = math.hypot(target.east - pos.east, target.north - pos.north)
        step = min(self.spec.max_speed * dt, distance)
        moved = EnuPoint(
            pos.east + step * math.cos(bearing),
            pos.north + step * math.sin(bearing),
            pos.up,
        )
        self.distance_traveled += step
        self.pose = Pose2D(moved, bearing)

    def _fly(self, target: EnuPoint, dt: float) -> None:
        pos = self.pose.position
        de, dn, du = target.east - pos.east, target.north - pos.north, target.up - pos.up
        distance = math.sqrt(de * de + dn * dn + du * du)
        step = min(self.spec.max_speed * dt, distance)
        scale = step / distance
        moved = EnuPoint(pos.east + de * scale, pos.north + dn * scale, pos.up + du * scale)
        yaw = self.pose.yaw
        if math.hypot(de, dn) > 1e-9:
            yaw = math.atan2(dn, de)
        self.distance_traveled += step
        self.pose = Pose2D(moved, yaw)


def survey_route(
    site_map: SiteMap,
    altitude_m: float,
    swath_overlap: float = 0.0,
    *,
    model: ScaleModel,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> list[EnuPoint]:
    """Boustrophedon waypoints covering the boundary's bounding box.

    The across-track footprint is the image width at the model's predicted
    scale for the given altitude; passes sit one swath apart, where
    swath = footprint * (1 - overlap). Pass rows are clamped inside the
    bounding box so the pattern never commands a boundary breach.
    """
    if not 0.0 <= swath_overlap < 1.0:
        raise VehicleError(
            f"swath_overlap must be in [0, 1), got {swath_overlap!r} (1.0 leaves no swath)"
        )
    ppm = predict_ppm(model, altitude_m)
    footprint = image_size[0] / ppm
    swath = footprint * (1.0 - swath_overlap)

    xs = [p.east for p in site_map.boundary]
    ys = [p.north for p in site_map.boundary]
    xmin, xmax, ymin, ymax = min(xs), max(xs), min(ys), max(ys)
    half = footprint / 2.0
    lo, hi = ymin + half, ymax - half
    if lo >= hi:
        rows = [(ymin + ymax) / 2.0]
    else:
        rows = [lo]
        while rows[-1] + half < ymax - 1e-9:
            rows.append(min(rows[-1] + swath, hi))

    points = []
    for k, y in enumerate(rows):
        ends = (xmin, xmax) if k % 2 == 0 else (xmax, xmin)
        points.append(EnuPoint(ends[0], y, altitude_m))
        points.append(EnuPoint(ends[1], y, altitude_m))
    return points


class FleetSim:
    """All simulated vehicles behind one bus session and one clock.

    step() first drains order topics so route swaps land between ticks,
    then advances the clock, ticks vehicles in id order, and flushes the
    collected state messages in that same order.
    """

    def __init__(self, site_map, vehicles, client, clock=None,
                 manufacturer: str = DEFAULT_MANUFACTURER):
        self.site_map = site_map
        self.clock = clock or SimClock()
        self.client = client
        self.manufacturer = manufacturer
        self.vehicles = {v.spec.vehicle_id: v for v in vehicles}
        self._ids = sorted(self.vehicles)
        self._order_subs = {}

    def announce(self) -> None:
        """Subscribe order topics, then declare every vehicle online."""
        for vid in self._ids:
            self._order_subs[vid] = self.client.subscribe(
                topic_for(vid, "order", self.manufacturer)
            )
        for vid in self._ids:
            kind = self.vehicles[vid].spec.kind
            self.client.publish(
                topic_for(vid, "connection", self.manufacturer),
                to_doc(ConnectionMsg(vid, "online", kind=kind)),
                qos=1,
            )
        for vid in self._ids:
            self._publish_state(vid, self.vehicles[vid].state_msg(self.clock.timestamp_ms))

    def step(self) -> None:
        for vid in self._ids:
            for envelope in self._order_subs[vid].drain():
                order = from_doc(envelope.payload)
                if isinstance(order, OrderMsg):
                    self.vehicles[vid].accept_order(order)
        self.clock.advance()
        outgoing = []
        for vid in self._ids:
            msg = self.vehicles[vid].tick(self.clock)
            if msg is not None:
                outgoing.append((vid, msg))
        for vid, msg in outgoing:
            self._publish_state(vid, msg)

    def shutdown(self) -> None:
        for vid in self._ids:
            kind = self.vehicles[vid].spec.kind
            self.client.publish(
                topic_for(vid, "connection", self.manufacturer),
                to_doc(ConnectionMsg(vid, "offline", kind=kind)),
                qos=1,
            )

    def _publish_state(self, vid: str, msg: StateMsg) -> None:
        self.client.publish(
            topic_for(vid, "state", self.manufacturer), to_doc(msg), qos=0,
        )
