"""Image-frame detections -> world-frame object reports.

The surveying drone looks straight down (nadir camera, no gimbal model), so a
pixel offset from the image center maps to a ground offset through the fitted
pixels-per-meter scale at the current altitude, a y-flip (image y grows
downward), and a rotation by the drone's yaw. Reports assume ground-plane
objects (up = 0).

Also hosts the detector simulator standing in for on-board inference: it
projects ground-truth actors into the image (the exact inverse of the
geolocation math), adds pixel noise and misses, and paces frames to a
throughput preset loaded from the bundled processor benchmark table.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import SiteFleetError
from .geo import EnuPoint, GeoPoint, enu_to_geodetic, geodetic_to_enu
from .scale import ScaleModel, predict_ppm

OBJECT_CLASSES = ("person", "cone", "vehicle")

# nominal top-down ground extent per class, used to size simulated boxes
GROUND_EXTENT_M = {"person": 0.6, "cone": 0.4, "vehicle": 3.0}

DEFAULT_CONFIDENCE_FLOOR = 0.5
DEFAULT_IMAGE_SIZE = (1920, 1080)
DEFAULT_SURVEY_ALTITUDE_M = 8.0


class DetectionError(SiteFleetError):
    """Invalid detection, fix, or detector profile values."""


@dataclass(frozen=True)
class Detection:
    cx: float
    cy: float
    w: float
    h: float
    cls: str
    confidence: float

    def __post_init__(self) -> None:
        if self.cls not in OBJECT_CLASSES:
            raise DetectionError(f"unknown object class {self.cls!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionError(f"confidence outside [0,1]: {self.confidence}")
        if self.w <= 0.0 or self.h <= 0.0:
            raise DetectionError("detection box must have positive extent")
        if min(self.cx - self.w / 2.0, self.cy - self.h / 2.0) < 0.0:
            raise DetectionError("detection box leaves the image on the low side")


@dataclass(frozen=True)
class DroneFix:
    position: GeoPoint
    yaw: float
    altitude_agl: float
    timestamp: int

    def __post_init__(self) -> None:
        if not self.altitude_agl > 0.0:
            raise DetectionError(f"altitude_agl must be > 0, got {self.altitude_agl}")


@dataclass(frozen=True)
class ObjectReport:
    position: GeoPoint
    cls: str
    confidence: float
    source_ts: int

    def __post_init__(self) -> None:
        if self.cls not in OBJECT_CLASSES:
            raise DetectionError(f"unknown object class {self.cls!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionError(f"confidence outside [0,1]: {self.confidence}")


@dataclass(frozen=True)
class DetectorProfile:
    name: str
    fps: float
    input_size: int

    def __post_init__(self) -> None:
        if not self.fps > 0.0:
            raise DetectionError(f"fps must be > 0, got {self.fps}")


def detection_to_enu(
    d: Detection,
    fix: DroneFix,
    model: ScaleModel,
    image_size: tuple[int, int],
    origin: GeoPoint,
) -> EnuPoint:
    """Ground ENU position of a detection under the nadir ground-plane model."""
    width, height = image_size
    ppm = predict_ppm(model, fix.altitude_agl)
    cam_east = (d.cx - width / 2.0) / ppm
    cam_north = -(d.cy - height / 2.0) / ppm
    cos_y, sin_y = math.cos(fix.yaw), math.sin(fix.yaw)
    drone = geodetic_to_enu(origin, fix.position)
    return EnuPoint(
        drone.east + cam_east * cos_y - cam_north * sin_y,
        drone.north + cam_east * sin_y + cam_north * cos_y,
        0.0,
    )


def to_report(
    d: Detection,
    fix: DroneFix,
    model: ScaleModel,
    image_size: tuple[int, int],
    origin: GeoPoint,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
) -> ObjectReport | None:
    """Geolocate one detection; low-confidence detections yield no report."""
    if d.confidence < confidence_floor:
        return None
    enu = detection_to_enu(d, fix, model, image_size, origin)
    return ObjectReport(
        position=enu_to_geodetic(origin, enu),
        cls=d.cls,
        confidence=d.confidence,
        source_ts=fix.timestamp,
    )


@dataclass
class NoiseConfig:
    """Detector imperfection knobs; owns its RNG so repeated frames draw from
    one deterministic stream."""

    pixel_sigma: float = 2.0
    miss_probability: float = 0.0
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.rng_seed)


def simulate_detections(
    actors: list[tuple[EnuPoint, str]],
    fix: DroneFix,
    model: ScaleModel,
    image_size: tuple[int, int],
    origin: GeoPoint,
    noise: NoiseConfig,
    confidence: float = 0.9,
) -> list[Detection]:
    """Project ground-truth actors into the current frame.

    Exact inverse of detection_to_enu plus Gaussian pixel noise and a miss
    probability per actor. Actors whose (noisy) box would leave the image are
    not reported; neither are actors outside the footprint.
    """
    width, height = image_size
    ppm = predict_ppm(model, fix.altitude_agl)
    drone = geodetic_to_enu(origin, fix.position)
    cos_y, sin_y = math.cos(fix.yaw), math.sin(fix.yaw)
    out: list[Detection] = []
    for position, cls in actors:
        if cls not in OBJECT_CLASSES:
            raise DetectionError(f"unknown object class {cls!r}")
        de = position.east - drone.east
        dn = position.north - drone.north
        cam_east = de * cos_y + dn * sin_y
        cam_north = -de * sin_y + dn * cos_y
        cx = width / 2.0 + cam_east * ppm
        cy = height / 2.0 - cam_north * ppm
        if noise.miss_probability > 0.0 and noise.rng.random() < noise.miss_probability:
            continue
        if noise.pixel_sigma > 0.0:
            cx += noise.rng.normal(0.0, noise.pixel_sigma)
            cy += noise.rng.normal(0.0, noise.pixel_sigma)
        box = max(2.0, GROUND_EXTENT_M[cls] * ppm)
        if not (box / 2.0 <= cx <= width - box / 2.0 and box / 2.0 <= cy <= height - box / 2.0):
            continue
        out.append(Detection(cx=cx, cy=cy, w=box, h=box, cls=cls, confidence=confidence))
    return out


class DetectorSim:
    """Pace frames to a throughput preset and simulate each captured frame."""

    def __init__(
        self,
        profile: DetectorProfile,
        model: ScaleModel,
        image_size: tuple[int, int],
        origin: GeoPoint,
        noise: NoiseConfig,
    ):
        self.profile = profile
        self.model = model
        self.image_size = image_size
        self.origin = origin
        self.noise = noise
        self.frame_interval_ms = 1000.0 / profile.fps
        self._next_frame_ms = 0.0

    def maybe_capture(
        self, now_ms: int, actors: list[tuple[EnuPoint, str]], fix: DroneFix
    ) -> list[Detection] | None:
        """One frame's detections if the detector is due, else None."""
        if now_ms < self._next_frame_ms:
            return None
        self._next_frame_ms = now_ms + self.frame_interval_ms
        return simulate_detections(
            actors, fix, self.model, self.image_size, self.origin, self.noise
        )


# --- throughput presets -----------------------------------------------------

PROCESSORS = ("i7", "a72", "m7")


def load_detector_profiles(path: str | None = None) -> dict[tuple[str, str], DetectorProfile]:
    """Benchmark table -> {(model_name, processor): profile}.

    CSV columns: model,size_kb,fps_i7,fps_a72,fps_m7. The bundled table ships
    with the package; pass a path to use a different one. Input size is the
    trailing -N of the model name.
    """
    if path is None:
        ref = resources.files("sitefleet.data").joinpath("detector_profiles.csv")
        text = ref.read_text()
    else:
        with open(path, newline="") as fh:
            text = fh.read()
    profiles: dict[tuple[str, str], DetectorProfile] = {}
    reader = csv.DictReader(text.splitlines())
    expected = {"model", "size_kb", "fps_i7", "fps_a72", "fps_m7"}
    if reader.fieldnames is None or set(reader.fieldnames) != expected:
        raise DetectionError(f"detector profile table needs columns {sorted(expected)}")
    for row in reader:
        name = row["model"].strip()
        try:
            input_size = int(name.rsplit("-", 1)[1])
        except (IndexError, ValueError):
            raise DetectionError(f"model name {name!r} lacks an input-size suffix") from None
        for proc in PROCESSORS:
            fps = float(row[f"fps_{proc}"])
            profiles[(name, proc)] = DetectorProfile(
                name=f"{name}@{proc}", fps=fps, input_size=input_size
            )
    return profiles
