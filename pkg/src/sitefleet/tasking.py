"""Operation manager: parse load/dump operations into tasks, assign by proximity.

An operation document becomes a small set of tasks, each an ordered list of
steps: navigate to a zone, perform a timed action, wait on a barrier, or fly
a survey. Excavator and hauler synchronize through named barriers: the
excavator's load action signals the barrier the hauler's wait step blocks on.

All mutation happens through Dispatcher methods, and the coordinator loop is
the only caller; queries hand out internal objects that callers must treat
as read-only. Every task status change is validated against the transition
lattice pending -> assigned -> active -> (done | failed) and appended to the
dispatcher journal, which the coordinator turns into events.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from . import SiteFleetError
from .geo import EnuPoint, Pose2D, planar_distance
from .messages import VEHICLE_KINDS
from .sitemap import MapError, SiteMap

log = logging.getLogger(__name__)

KIND_CAPABILITIES = {"excavator": ("excavate",), "ugv": ("haul",), "uav": ("survey",)}
CAPABILITIES = ("excavate", "haul", "survey")
OPERATION_KINDS = ("load_dump", "survey")

LOAD_DWELL_S = 30.0
DUMP_DWELL_S = 15.0
DEFAULT_SURVEY_ALTITUDE_M = 8.0

_STATUS_LATTICE = {
    "pending": ("assigned",),
    "assigned": ("active",),
    "active": ("done", "failed"),
    "done": (),
    "failed": (),
}


class TaskError(SiteFleetError):
    """Internal tasking invariant violation."""


class OperationError(SiteFleetError, ValueError):
    """Invalid operation document; `field` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class NavigateStep:
    zone: str


@dataclass(frozen=True)
class ActStep:
    action: str
    duration_s: float
    signals: str | None = None


@dataclass(frozen=True)
class WaitStep:
    barrier: str


@dataclass(frozen=True)
class SurveyStep:
    altitude_m: float


@dataclass(frozen=True)
class Operation:
    operation_id: str
    kind: str
    params: dict


@dataclass
class Task:
    task_id: str
    operation_id: str
    capability: str
    steps: tuple
    status: str = "pending"
    assigned_to: str | None = None
    step_index: int = 0

    @property
    def current_step(self):
        if self.step_index < len(self.steps):
            return self.steps[self.step_index]
        return None


@dataclass
class VehicleRecord:
    vehicle_id: str
    kind: str
    pose: Pose2D
    capabilities: tuple = ()
    status: str = "idle"
    current_task: str | None = None
    last_state_ts: int = -1

    def __post_init__(self) -> None:
        if self.kind not in VEHICLE_KINDS:
            raise TaskError(f"unknown vehicle kind {self.kind!r}")
        if not self.capabilities:
            self.capabilities = KIND_CAPABILITIES[self.kind]


def operation_from_doc(doc, operation_id: str) -> Operation:
    """Validate a submission document; errors name the offending field."""
    if not isinstance(doc, dict):
        raise OperationError("operation", f"must be an object, got {type(doc).__name__}")
    kind = doc.get("kind")
    if kind not in OPERATION_KINDS:
        raise OperationError("kind", f"must be one of {list(OPERATION_KINDS)}, got {kind!r}")
    if kind == "load_dump":
        params = {}
        for key in ("load_zone", "dump_zone"):
            value = doc.get(key)
            if not isinstance(value, str) or not value:
                raise OperationError(key, f"must be a non-empty zone name, got {value!r}")
            params[key] = value
        cycles = doc.get("cycles", 1)
        if isinstance(cycles, bool) or not isinstance(cycles, int) or cycles < 1:
            raise OperationError("cycles", f"must be an integer >= 1, got {cycles!r}")
        params["cycles"] = cycles
        return Operation(operation_id, "load_dump", params)
    altitude = doc.get("altitude_m", DEFAULT_SURVEY_ALTITUDE_M)
    if isinstance(altitude, bool) or not isinstance(altitude, (int, float)) or not altitude > 0:
        raise OperationError("altitude_m", f"must be a positive number, got {altitude!r}")
    return Operation(operation_id, "survey", {"altitude_m": float(altitude)})


def parse_operation(op: Operation, site_map: SiteMap) -> list[Task]:
    """Expand an operation into its task list (excavate + haul + survey)."""
    if op.kind == "survey":
        return [
            Task(
                task_id=f"{op.operation_id}-survey",
                operation_id=op.operation_id,
                capability="survey",
                steps=(SurveyStep(op.params["altitude_m"]),),
            )
        ]
    for key in ("load_zone", "dump_zone"):
        name = op.params[key]
        try:
            site_map.zone(name)
        except MapError:
            raise OperationError(key, f"unknown zone {name!r}") from None
    load, dump = op.params["load_zone"], op.params["dump_zone"]
    cycles = op.params["cycles"]
    excavate_steps = []
    haul_steps = []
    for i in range(cycles):
        barrier = f"{op.operation_id}:load:{i}"
        excavate_steps += [
            NavigateStep(load),
            ActStep("load", LOAD_DWELL_S, signals=barrier),
        ]
        haul_steps += [
            NavigateStep(load),
            WaitStep(barrier),
            NavigateStep(dump),
            ActStep("dump", DUMP_DWELL_S),
        ]
    return [
        Task(f"{op.operation_id}-excavate", op.operation_id, "excavate", tuple(excavate_steps)),
        Task(f"{op.operation_id}-haul", op.operation_id, "haul", tuple(haul_steps)),
        Task(
            f"{op.operation_id}-survey",
            op.operation_id,
            "survey",
            (SurveyStep(DEFAULT_SURVEY_ALTITUDE_M),),
        ),
    ]


def _first_navigate_zone(task: Task):
    for step in task.steps:
        if isinstance(step, NavigateStep):
            return step.zone
    return None


def assign(tasks, fleet, site_map: SiteMap) -> list[tuple[Task, VehicleRecord]]:
    """Proximity assignment, pure: no statuses are touched.

    Pending tasks are visited in order; each takes the idle, capability-
    matching vehicle closest (straight-line) to its first navigate target,
    ties broken by lexicographically smaller vehicle id. A vehicle accepts
    at most one task per round.
    """
    available = [v for v in fleet if v.status == "idle" and v.current_task is None]
    pairs = []
    for task in tasks:
        if task.status != "pending":
            continue
        candidates = [v for v in available if task.capability in v.capabilities]
        if not candidates:
            continue
        zone_name = _first_navigate_zone(task)
        if zone_name is None:
            target = None
        else:
            target = site_map.zone(zone_name)

        def rank(vehicle: VehicleRecord):
            distance = 0.0 if target is None else planar_distance(
                vehicle.pose.position, target,
            )
            return (distance, vehicle.vehicle_id)

        chosen = min(candidates, key=rank)
        available.remove(chosen)
        pairs.append((task, chosen))
    return pairs


class Dispatcher:
    """Single-writer task board: vehicles, tasks, barriers, and transitions."""

    def __init__(self, site_map: SiteMap):
        self.site_map = site_map
        self.vehicles: dict[str, VehicleRecord] = {}
        self.tasks: dict[str, Task] = {}
        self.operations: dict[str, Operation] = {}
        self.barriers: dict[str, bool] = {}
        self.journal: list[tuple[str, str, str]] = []
        self._task_order: list[str] = []
        self._op_counter = 0

    # vehicle lifecycle

    def on_connection(self, vehicle_id: str, kind: str, state: str,
                      pose: Pose2D | None = None) -> list[tuple]:
        """Handle an online/offline/broken announcement; returns events."""
        events = []
        record = self.vehicles.get(vehicle_id)
        if state == "online":
            if record is None:
                record = VehicleRecord(vehicle_id, kind, pose or Pose2D(EnuPoint(0.0, 0.0)))
                self.vehicles[vehicle_id] = record
            record.status = "idle" if record.current_task is None else "busy"
            events.append(("vehicle_online", vehicle_id))
        else:
            if record is None:
                log.warning("connection for unknown vehicle %r dropped", vehicle_id)
                return events
            if record.current_task is not None:
                events += self.fail_task(record.current_task, f"connection {state}")
            record.status = "offline"
            events.append(("vehicle_offline", vehicle_id))
        return events

    def discard_pending(self, task_id: str) -> bool:
        """Drop a never-assigned task from the board (operation cancel)."""
        task = self.tasks.get(task_id)
        if task is None or task.status != "pending":
            return False
        del self.tasks[task_id]
        self._task_order.remove(task_id)
        return True

    def fail_task(self, task_id: str, reason: str) -> list[tuple]:
        """Fail an assigned or active task and free its vehicle."""
        task = self.tasks[task_id]
        if task.status not in ("assigned", "active"):
            return []
        if task.status == "assigned":
            self._set_status(task, "active")
        self._set_status(task, "failed")
        events = [("task_failed", task.task_id, reason)]
        if task.assigned_to is not None:
            record = self.vehicles.get(task.assigned_to)
            if record is not None and record.current_task == task.task_id:
                record.current_task = None
                record.status = "idle"
        if self.operation_finished(task.operation_id):
            events.append(("operation_done", task.operation_id))
        return events

    # operations and assignment

    def submit(self, doc) -> tuple[Operation, list[Task]]:
        """Validate and queue an operation; tasks enter the pending pool FIFO."""
        self._op_counter += 1
        op = operation_from_doc(doc, f"op-{self._op_counter}")
        tasks = parse_operation(op, self.site_map)
        self.operations[op.operation_id] = op
        for task in tasks:
            self.tasks[task.task_id] = task
            self._task_order.append(task.task_id)
        return op, tasks

    def pending_tasks(self) -> list[Task]:
        return [
            self.tasks[tid] for tid in self._task_order
            if self.tasks[tid].status == "pending"
        ]

    def assign_pending(self) -> list[tuple[Task, VehicleRecord]]:
        """Run one proximity-assignment round and commit the result."""
        pairs = assign(self.pending_tasks(), list(self.vehicles.values()), self.site_map)
        for task, vehicle in pairs:
            self._set_status(task, "assigned")
            task.assigned_to = vehicle.vehicle_id
            vehicle.current_task = task.task_id
            vehicle.status = "busy"
        return pairs

    def mark_active(self, task_id: str) -> None:
        """Record that execution started (the first order went out)."""
        task = self.tasks[task_id]
        if task.status == "assigned":
            self._set_status(task, "active")

    # progress

    def on_vehicle_state(self, vehicle_id: str, pose: Pose2D, timestamp: int,
                         errors=(), step_complete: bool = False) -> list[tuple]:
        """Fold one state update into the board; returns events.

        The caller decides step_complete (it knows which order node is
        terminal); this method owns the cursor, barriers, and statuses.
        Updates older than the last seen timestamp are ignored.
        """
        record = self.vehicles.get(vehicle_id)
        if record is None:
            log.warning("state for unknown vehicle %r dropped", vehicle_id)
            return []
        if timestamp < record.last_state_ts:
            return []
        record.last_state_ts = timestamp
        record.pose = pose
        if errors:
            events = []
            if record.current_task is not None:
                events += self.fail_task(record.current_task, ";".join(errors))
            record.status = "offline"
            events.append(("vehicle_offline", vehicle_id))
            return events
        if step_complete:
            return self._advance(record)
        return []

    def _advance(self, record: VehicleRecord) -> list[tuple]:
        if record.current_task is None:
            return []
        task = self.tasks[record.current_task]
        if task.status != "active":
            return []
        events = []
        step = task.current_step
        if isinstance(step, WaitStep) and not self.barriers.get(step.barrier):
            return events
        if isinstance(step, ActStep) and step.signals:
            self.barriers[step.signals] = True
            events.append(("barrier_released", step.signals))
        task.step_index += 1
        events.append(("step_complete", task.task_id, task.step_index - 1))
        if task.current_step is None:
            self._set_status(task, "done")
            record.current_task = None
            record.status = "idle"
            events.append(("task_done", task.task_id))
            if self.operation_finished(task.operation_id):
                events.append(("operation_done", task.operation_id))
        return events

    def poll_waits(self) -> list[tuple]:
        """Advance every active task parked on a released barrier."""
        events = []
        for record in self.vehicles.values():
            if record.current_task is None:
                continue
            task = self.tasks[record.current_task]
            step = task.current_step
            if (
                task.status == "active"
                and isinstance(step, WaitStep)
                and self.barriers.get(step.barrier)
            ):
                events += self._advance(record)
        return events

    def operation_finished(self, operation_id: str) -> bool:
        siblings = [t for t in self.tasks.values() if t.operation_id == operation_id]
        return all(t.status in ("done", "failed") for t in siblings)

    def _set_status(self, task: Task, status: str) -> None:
        if status not in _STATUS_LATTICE[task.status]:
            raise TaskError(f"illegal transition {task.status} -> {status} for {task.task_id}")
        self.journal.append((task.task_id, task.status, status))
        task.status = status
