"""Scenario files: map reference, fleet placement, script, and seed.

A scenario is a JSON document with the keys `map`, `vehicles`, `detector`,
`actors`, `operation`, and `seed`. Positions are ENU meters relative to the
map origin so files stay hand-editable; they are converted at the module
boundaries that need geodetic coordinates.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from importlib import resources

from . import SiteFleetError
from .geo import EnuPoint, Pose2D
from .geolocate import DEFAULT_IMAGE_SIZE, OBJECT_CLASSES, load_detector_profiles
from .messages import VEHICLE_KINDS
from .tasking import OperationError, operation_from_doc

BUNDLED_SCENARIO = "openairlab_load_dump"

DEFAULT_ACTOR_SPEED = 1.2


class ScenarioError(SiteFleetError, ValueError):
    """Invalid scenario document; `field` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ActorScript:
    """A scripted ground actor: appears, walks its waypoints, stands."""

    cls: str
    appear_at: float
    pos: EnuPoint
    waypoints: tuple = ()
    speed: float = DEFAULT_ACTOR_SPEED
    vanish_at: float | None = None

    def position_at(self, t: float) -> EnuPoint | None:
        """Ground-truth position at sim time t; None while off-site."""
        if t < self.appear_at:
            return None
        if self.vanish_at is not None and t >= self.vanish_at:
            return None
        walked = (t - self.appear_at) * self.speed
        here = self.pos
        for target in self.waypoints:
            leg = math.hypot(target.east - here.east, target.north - here.north)
            if walked >= leg:
                walked -= leg
                here = target
                continue
            f = walked / leg if leg > 0.0 else 0.0
            return EnuPoint(
                here.east + f * (target.east - here.east),
                here.north + f * (target.north - here.north),
            )
        return here


@dataclass(frozen=True)
class VehiclePlacement:
    vehicle_id: str
    kind: str
    start: Pose2D


@dataclass(frozen=True)
class DetectorChoice:
    profile: str
    processor: str
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    pixel_sigma: float = 2.0
    miss_probability: float = 0.0


@dataclass(frozen=True)
class Scenario:
    name: str
    map_path: str | None
    seed: int
    vehicles: tuple[VehiclePlacement, ...]
    detector: DetectorChoice
    operation: dict
    actors: tuple[ActorScript, ...] = ()


def _point(value, label: str) -> EnuPoint:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in value)
    ):
        raise ScenarioError(label, f"must be [east, north] in meters, got {value!r}")
    return EnuPoint(float(value[0]), float(value[1]))


def _number(doc, key, label, default=None, minimum=None):
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(label, f"must be a number, got {value!r}")
    if minimum is not None and value < minimum:
        raise ScenarioError(label, f"must be >= {minimum}, got {value!r}")
    return float(value)


def _parse_vehicle(doc, index: int) -> VehiclePlacement:
    label = f"vehicles[{index}]"
    if not isinstance(doc, dict):
        raise ScenarioError(label, "must be an object")
    vehicle_id = doc.get("id")
    if not isinstance(vehicle_id, str) or not vehicle_id:
        raise ScenarioError(f"{label}.id", f"must be a non-empty string, got {vehicle_id!r}")
    kind = doc.get("kind")
    if kind not in VEHICLE_KINDS:
        raise ScenarioError(
            f"{label}.kind", f"must be one of {sorted(VEHICLE_KINDS)}, got {kind!r}",
        )
    start = doc.get("start")
    if not isinstance(start, (list, tuple)) or len(start) not in (2, 3):
        raise ScenarioError(
            f"{label}.start", f"must be [east, north] or [east, north, yaw], got {start!r}",
        )
    position = _point(start[:2], f"{label}.start")
    yaw = 0.0
    if len(start) == 3:
        if isinstance(start[2], bool) or not isinstance(start[2], (int, float)):
            raise ScenarioError(f"{label}.start", f"yaw must be a number, got {start[2]!r}")
        yaw = float(start[2])
    return VehiclePlacement(vehicle_id, kind, Pose2D(position, yaw))


def _parse_actor(doc, index: int) -> ActorScript:
    label = f"actors[{index}]"
    if not isinstance(doc, dict):
        raise ScenarioError(label, "must be an object")
    cls = doc.get("class")
    if cls not in OBJECT_CLASSES:
        raise ScenarioError(
            f"{label}.class", f"must be one of {sorted(OBJECT_CLASSES)}, got {cls!r}",
        )
    appear_at = _number(doc, "appear_at", f"{label}.appear_at", default=0.0, minimum=0.0)
    pos = _point(doc.get("pos"), f"{label}.pos")
    raw_path = doc.get("path", [])
    if not isinstance(raw_path, list):
        raise ScenarioError(f"{label}.path", f"must be a list of points, got {raw_path!r}")
    waypoints = tuple(
        _point(p, f"{label}.path[{i}]") for i, p in enumerate(raw_path)
    )
    speed = _number(doc, "speed", f"{label}.speed", default=DEFAULT_ACTOR_SPEED)
    if speed <= 0.0:
        raise ScenarioError(f"{label}.speed", f"must be positive, got {speed!r}")
    vanish_at = None
    if doc.get("vanish_at") is not None:
        vanish_at = _number(doc, "vanish_at", f"{label}.vanish_at", minimum=0.0)
        if vanish_at <= appear_at:
            raise ScenarioError(
                f"{label}.vanish_at", f"must be after appear_at {appear_at}, got {vanish_at}",
            )
    return ActorScript(cls, appear_at, pos, waypoints, speed, vanish_at)


def _parse_detector(doc) -> DetectorChoice:
    if not isinstance(doc, dict):
        raise ScenarioError("detector", f"must be an object, got {type(doc).__name__}")
    profile = doc.get("profile")
    processor = doc.get("processor")
    if not isinstance(profile, str) or not isinstance(processor, str):
        raise ScenarioError("detector.profile", "profile and processor must be strings")
    if (profile, processor) not in load_detector_profiles():
        raise ScenarioError(
            "detector.profile", f"no preset for {profile!r} on {processor!r}",
        )
    image_size = doc.get("image_size", list(DEFAULT_IMAGE_SIZE))
    if (
        not isinstance(image_size, (list, tuple))
        or len(image_size) != 2
        or not all(isinstance(v, int) and v > 0 for v in image_size)
    ):
        raise ScenarioError(
            "detector.image_size", f"must be [width, height] in pixels, got {image_size!r}",
        )
    pixel_sigma = _number(doc, "pixel_sigma", "detector.pixel_sigma", default=2.0, minimum=0.0)
    miss = _number(
        doc, "miss_probability", "detector.miss_probability", default=0.0, minimum=0.0,
    )
    if miss >= 1.0:
        raise ScenarioError("detector.miss_probability", f"must be < 1, got {miss}")
    return DetectorChoice(profile, processor, tuple(image_size), pixel_sigma, miss)


def parse_scenario(doc, name: str = "scenario") -> Scenario:
    """Validate a scenario document; errors name the offending field."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario", f"must be an object, got {type(doc).__name__}")

    map_path = doc.get("map")
    if map_path is not None and not isinstance(map_path, str):
        raise ScenarioError("map", f"must be null or a path, got {map_path!r}")

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ScenarioError("seed", f"must be an integer >= 0, got {seed!r}")

    raw_vehicles = doc.get("vehicles")
    if not isinstance(raw_vehicles, list) or not raw_vehicles:
        raise ScenarioError("vehicles", "must be a non-empty list")
    vehicles = tuple(_parse_vehicle(v, i) for i, v in enumerate(raw_vehicles))
    ids = [v.vehicle_id for v in vehicles]
    if len(set(ids)) != len(ids):
        dupe = next(i for i in ids if ids.count(i) > 1)
        raise ScenarioError("vehicles", f"duplicate vehicle id {dupe!r}")

    detector = _parse_detector(doc.get("detector", {}))

    operation = doc.get("operation")
    try:
        operation_from_doc(operation, "probe")
    except OperationError as err:
        raise ScenarioError(f"operation.{err.field}", str(err)) from None

    raw_actors = doc.get("actors", [])
    if not isinstance(raw_actors, list):
        raise ScenarioError("actors", f"must be a list, got {type(raw_actors).__name__}")
    actors = tuple(_parse_actor(a, i) for i, a in enumerate(raw_actors))

    return Scenario(
        name=doc.get("name", name) if isinstance(doc.get("name", name), str) else name,
        map_path=map_path,
        seed=seed,
        vehicles=vehicles,
        detector=detector,
        operation=operation,
        actors=actors,
    )


def load_scenario(path: str | None = None) -> Scenario:
    """Read a scenario file; None loads the bundled load/dump demo."""
    if path is None:
        source = resources.files("sitefleet.data") / f"{BUNDLED_SCENARIO}.json"
        text = source.read_text(encoding="utf-8")
        name = BUNDLED_SCENARIO
    else:
        try:
            with open(path, encoding="utf-8") as handle:
                text = handle.read()
        except OSError as err:
            raise ScenarioError("scenario", f"cannot read {path!r}: {err}") from None
        name = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ScenarioError("scenario", f"invalid JSON at line {err.lineno}: {err.msg}") from None
    scenario = parse_scenario(doc, name=name)
    if path is not None and scenario.map_path is not None:
        if not os.path.isabs(scenario.map_path):
            resolved = os.path.join(os.path.dirname(os.path.abspath(path)), scenario.map_path)
            scenario = replace(scenario, map_path=resolved)
    return scenario
