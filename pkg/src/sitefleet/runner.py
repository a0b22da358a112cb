"""One-process scenario execution: broker, coordinator, fleet, and script.

The runner owns the iteration order. Each tick: feed the detector from the
previous tick's poses (one tick of sensing latency), advance the vehicle
sim, step the coordinator, account the event tail, then pace the wall
clock to time_scale. Everything downstream of the seed is deterministic,
so the metrics report contains no wall-clock measurements.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import SiteFleetError
from .bus import Broker, LocalClient
from .coordinator import Coordinator, CoordinatorConfig
from .geo import EnuPoint, geodetic_to_enu, enu_to_geodetic
from .geolocate import (
    DetectorSim,
    DroneFix,
    NoiseConfig,
    load_detector_profiles,
    to_report,
)
from .messages import report_topic, to_doc
from .scenario import Scenario
from .sitemap import SiteMap, load_map
from .tasking import OperationError, parse_operation, operation_from_doc
from .vehicles import FleetSim, SimClock, SimVehicle, VehicleSpec

log = logging.getLogger(__name__)

METRICS_SCHEMA = "sitefleet.metrics/1"

DEFAULT_MAX_SIM_TIME_S = 600.0
TRAJECTORY_STRIDE = 5


class RunError(SiteFleetError):
    """The scenario booted but could not run to a sound conclusion."""


@dataclass
class RunResult:
    metrics: dict
    completed: bool
    trajectories: dict[str, list[tuple[float, float]]]
    site_map: SiteMap
    obstacle_log: list[dict] = field(default_factory=list)

    def metrics_text(self) -> str:
        """Canonical serialization; byte-identical for equal seeds."""
        return json.dumps(self.metrics, sort_keys=True, indent=2) + "\n"


def _percentiles(samples: list[float]) -> dict:
    if not samples:
        return {"count": 0}
    p50, p90, p99 = np.percentile(samples, [50.0, 90.0, 99.0])
    return {
        "count": len(samples),
        "p50_ms": round(float(p50), 1),
        "p90_ms": round(float(p90), 1),
        "p99_ms": round(float(p99), 1),
    }


class ScenarioRun:
    """A booted scenario: bus, coordinator, fleet, detector, and script."""

    def __init__(self, scenario: Scenario, time_scale: float = 1.0,
                 config: CoordinatorConfig | None = None):
        if not time_scale > 0:
            raise RunError(f"time_scale must be positive, got {time_scale}")
        self.scenario = scenario
        self.site_map = load_map(scenario.map_path)
        try:
            parse_operation(
                operation_from_doc(scenario.operation, "preflight"), self.site_map,
            )
        except OperationError as err:
            raise type(err)(err.field, f"operation rejected by map: {err}") from None

        self.broker = Broker()
        self.coordinator = Coordinator(
            self.site_map, LocalClient(self.broker, "gcs"), config=config,
        )
        self.clock = SimClock(dt=0.1, time_scale=time_scale)
        sims = [
            SimVehicle(VehicleSpec(v.vehicle_id, v.kind), self.site_map, v.start)
            for v in scenario.vehicles
        ]
        self.fleet = FleetSim(
            self.site_map, sims, LocalClient(self.broker, "sim"), clock=self.clock,
        )
        self.uav_ids = [v.vehicle_id for v in scenario.vehicles if v.kind == "uav"]
        profile = load_detector_profiles()[
            (scenario.detector.profile, scenario.detector.processor)
        ]
        self.detector = DetectorSim(
            profile,
            self.coordinator.scale_model,
            scenario.detector.image_size,
            self.site_map.origin,
            NoiseConfig(
                pixel_sigma=scenario.detector.pixel_sigma,
                miss_probability=scenario.detector.miss_probability,
                rng_seed=scenario.seed,
            ),
        )
        self._detector_client = LocalClient(self.broker, "detector")
        model = self.coordinator.scale_model
        self._capture_band = (0.5 * model.alt_min, 1.5 * model.alt_max)

        self.fleet.announce()
        _, backlog, self._tail = self.coordinator.subscribe_events(0)
        self._event_counts: dict[str, int] = {}
        self._last_seq = 0
        self._pending_reports: deque[int] = deque()
        self._latencies: list[float] = []
        self.obstacle_log: list[dict] = []
        self.reports_published = 0
        self.trajectories: dict[str, list[tuple[float, float]]] = {
            v.vehicle_id: [] for v in scenario.vehicles
        }
        for record in backlog:
            self._account(record)

    # --- per-tick pieces --------------------------------------------------

    def _live_actors(self, t: float) -> list[tuple[EnuPoint, str]]:
        out = []
        for actor in self.scenario.actors:
            position = actor.position_at(t)
            if position is not None:
                out.append((position, actor.cls))
        return out

    def _feed_detector(self) -> None:
        """Capture from the previous tick's poses and publish the reports."""
        now_ms = self.clock.timestamp_ms
        actors = self._live_actors(self.clock.time_s)
        for uav_id in self.uav_ids:
            uav = self.fleet.vehicles[uav_id]
            altitude = uav.pose.position.up
            if not self._capture_band[0] <= altitude <= self._capture_band[1]:
                continue
            fix = DroneFix(
                position=enu_to_geodetic(self.site_map.origin, uav.pose.position),
                yaw=uav.pose.yaw,
                altitude_agl=altitude,
                timestamp=now_ms,
            )
            detections = self.detector.maybe_capture(now_ms, actors, fix)
            if not detections:
                continue
            for detection in detections:
                report = to_report(
                    detection, fix, self.coordinator.scale_model,
                    self.scenario.detector.image_size, self.site_map.origin,
                    self.coordinator.config.confidence_floor,
                )
                if report is None:
                    continue
                self._detector_client.publish(
                    report_topic(uav_id), to_doc(report), qos=1,
                )
                self.reports_published += 1
                enu = geodetic_to_enu(self.site_map.origin, report.position)
                if self.site_map.contains(EnuPoint(enu.east, enu.north)):
                    self._pending_reports.append(report.source_ts)

    def _account(self, record) -> None:
        if record.seq != self._last_seq + 1:
            raise RunError(
                f"event stream gap: seq {record.seq} after {self._last_seq}"
            )
        self._last_seq = record.seq
        self._event_counts[record.kind] = self._event_counts.get(record.kind, 0) + 1
        if record.kind == "obstacle_added":
            if self._pending_reports:
                self._latencies.append(
                    float(record.timestamp - self._pending_reports.popleft())
                )
            self.obstacle_log.append(dict(record.payload))

    def _drain_tail(self) -> bool:
        done = False
        while not self._tail.empty():
            record = self._tail.get_nowait()
            self._account(record)
            if record.kind == "operation_done":
                done = True
        return done

    def _sample_trajectories(self) -> None:
        if self.clock.tick % TRAJECTORY_STRIDE:
            return
        for vid, samples in self.trajectories.items():
            p = self.fleet.vehicles[vid].pose.position
            samples.append((round(p.east, 3), round(p.north, 3)))

    # --- the run ----------------------------------------------------------

    def run(self, max_sim_time_s: float = DEFAULT_MAX_SIM_TIME_S) -> RunResult:
        reply = self.coordinator.submit_command("submit_operation", self.scenario.operation)
        wall_start = time.monotonic()
        completed = False
        while self.clock.time_s < max_sim_time_s:
            self._feed_detector()
            self.fleet.step()
            self.coordinator.step(self.clock.timestamp_ms)
            self._sample_trajectories()
            if self._drain_tail():
                completed = True
                break
            target = wall_start + self.clock.tick * self.clock.wall_dt
            delay = target - time.monotonic()
            if delay > 0.0005:
                time.sleep(delay)
        self.coordinator.unsubscribe_events(self._tail)

        status, detail = reply.get_nowait()
        if status != "ok":
            raise RunError(f"operation rejected: {detail['message']}")
        wall_s = time.monotonic() - wall_start
        log.info(
            "scenario %s: %s in %.1f sim s (%.1f wall s)",
            self.scenario.name,
            "completed" if completed else "deadline exceeded",
            self.clock.time_s, wall_s,
        )
        return RunResult(
            metrics=self._metrics(completed),
            completed=completed,
            trajectories=self.trajectories,
            site_map=self.site_map,
            obstacle_log=self.obstacle_log,
        )

    def _metrics(self, completed: bool) -> dict:
        dispatcher = self.coordinator.dispatcher
        vehicles = {}
        ground = 0.0
        for vid in sorted(self.fleet.vehicles):
            sim = self.fleet.vehicles[vid]
            p = sim.pose.position
            vehicles[vid] = {
                "kind": sim.spec.kind,
                "distance_m": round(sim.distance_traveled, 3),
                "final_position": [round(p.east, 3), round(p.north, 3), round(p.up, 3)],
            }
            if sim.spec.kind in ("excavator", "ugv"):
                ground += sim.distance_traveled
        return {
            "schema": METRICS_SCHEMA,
            "scenario": self.scenario.name,
            "seed": self.scenario.seed,
            "completed": completed,
            "sim_time_s": round(self.clock.time_s, 1),
            "ticks": self.clock.tick,
            "vehicles": vehicles,
            "ground_distance_m": round(ground, 3),
            "replans": self.coordinator.replan_count,
            "operations": {
                op_id: ("done" if dispatcher.operation_finished(op_id) else "incomplete")
                for op_id in sorted(dispatcher.operations)
            },
            "tasks": {
                task_id: task.status
                for task_id, task in sorted(dispatcher.tasks.items())
            },
            "obstacle_reports": {
                "published": self.reports_published,
                "ingested": self._event_counts.get("obstacle_added", 0),
                "latency": _percentiles(self._latencies),
            },
            "events": dict(sorted(self._event_counts.items())),
        }


def run_scenario(scenario: Scenario, time_scale: float = 1.0,
                 max_sim_time_s: float = DEFAULT_MAX_SIM_TIME_S,
                 config: CoordinatorConfig | None = None) -> RunResult:
    """Boot and run a scenario to operation completion or the deadline."""
    return ScenarioRun(scenario, time_scale=time_scale, config=config).run(max_sim_time_s)
