"""Central coordination loop: fleet state, obstacles, planning, and events.

One thread owns every piece of mutable coordination state and runs step()
at the simulation cadence. Bus subscriptions feed it message queues; API
sessions feed it a command queue and get their replies through per-request
queues. Each cycle drains connections, states, and object reports, expires
obstacles, re-plans any active route an obstacle blocks, assigns pending
tasks, and appends to the event ring that the console and CLI tail.

Orders follow the update-id discipline: a route change for a vehicle reuses
its order_id with a higher update_id, so stale or duplicated deliveries are
rejected by the vehicle's tracker. A vehicle is halted by an order update
whose only node sits at its current pose.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from queue import Empty, SimpleQueue

from . import SiteFleetError
from .geo import EnuPoint, Pose2D, enu_to_geodetic, geodetic_to_enu
from .geolocate import DEFAULT_CONFIDENCE_FLOOR, ObjectReport
from .messages import (
    ConnectionMsg,
    DEFAULT_MANUFACTURER,
    MessageError,
    NodeAction,
    OrderMsg,
    OrderNode,
    StateMsg,
    from_doc,
    to_doc,
    topic_for,
)
from .planner import (
    DEFAULT_CLEARANCE_FLOOR_M,
    PlannedPath,
    PlannerError,
    VoronoiGraph,
    build_graph,
    plan,
)
from .scale import ScaleModel, nominal_scale_model
from .sitemap import DynamicObstacle, ObstacleRegistry, SiteMap, blocks_path
from .tasking import (
    ActStep,
    Dispatcher,
    NavigateStep,
    OperationError,
    SurveyStep,
    Task,
    WaitStep,
)
from .vehicles import survey_route

log = logging.getLogger(__name__)

EVENT_KINDS = (
    "vehicle_state",
    "obstacle_added",
    "obstacle_expired",
    "plan_issued",
    "replan",
    "task_transition",
    "operation_done",
)

REPLAN_CLEARANCE_M = 0.5
DEFAULT_RETENTION = 10_000
DEFAULT_REPLAN_CHECK_PERIOD = 5
DEFAULT_UNREACHABLE_TIMEOUT_S = 60.0


class CommandError(SiteFleetError, ValueError):
    """Invalid supervisor command; `field` names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class CoordinatorConfig:
    clearance_floor: float = DEFAULT_CLEARANCE_FLOOR_M
    replan_check_period: int = DEFAULT_REPLAN_CHECK_PERIOD
    unreachable_timeout_s: float = DEFAULT_UNREACHABLE_TIMEOUT_S
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR
    survey_overlap: float = 0.2
    retention: int = DEFAULT_RETENTION
    manufacturer: str = DEFAULT_MANUFACTURER

    def __post_init__(self) -> None:
        if self.replan_check_period < 1:
            raise SiteFleetError("replan_check_period must be >= 1")
        if not self.unreachable_timeout_s > 0:
            raise SiteFleetError("unreachable_timeout_s must be positive")
        if self.retention < 1:
            raise SiteFleetError("retention must be >= 1")


@dataclass(frozen=True)
class EventRecord:
    seq: int
    kind: str
    payload: dict
    timestamp: int

    def to_doc(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
            "timestamp": self.timestamp,
        }


@dataclass
class _ActivePlan:
    """The order a vehicle is currently executing, coordinator-side.

    `path` backs blocks_path checks (ground routes only); `display_points`
    is what the snapshot and console draw — survey sweeps have points but
    no plannable path, act and halt orders have neither.
    """

    vehicle_id: str
    task_id: str
    order_id: str
    update_id: int
    terminal_node_id: str | None
    path: PlannedPath | None
    goal: EnuPoint | None
    display_points: tuple = ()
    halted_since: int | None = None


def _xy(points) -> list[list[float]]:
    return [[round(p.east, 3), round(p.north, 3)] for p in points]


class Coordinator:
    """Single-writer loop over dispatcher, obstacle registry, and planner."""

    def __init__(
        self,
        site_map: SiteMap,
        client,
        config: CoordinatorConfig | None = None,
        scale_model: ScaleModel | None = None,
    ):
        self.site_map = site_map
        self.client = client
        self.config = config or CoordinatorConfig()
        self.scale_model = scale_model or nominal_scale_model()
        self.dispatcher = Dispatcher(site_map)
        self.registry = ObstacleRegistry(site_map)

        self._events: list[EventRecord] = []
        self._base_seq = 1
        self._next_seq = 1
        self._tails: list[SimpleQueue] = []
        self._commands: SimpleQueue = SimpleQueue()

        self._plans: dict[str, _ActivePlan] = {}
        self._update_ids: dict[str, int] = {}
        self._paused: set[str] = set()
        # Last-evented version of each obstacle; the snapshot renders from
        # this so it always equals a fold of the event stream, even when an
        # obstacle has timed out but its expiry event hasn't fired yet.
        self._known_obstacles: dict[str, DynamicObstacle] = {}
        self._obstacle_rev = 0
        self._cycle = 0
        self.now_ms = 0
        self.replan_count = 0
        # Rebuilt eagerly on every obstacle change, so generation always
        # equals the obstacle revision and event counting reconstructs it.
        self._graph: VoronoiGraph = build_graph(
            site_map, [], clearance_floor=self.config.clearance_floor, generation=0,
        )

        mfr = self.config.manufacturer
        self._sub_state = client.subscribe(f"fleet/v1/{mfr}/+/state")
        self._sub_conn = client.subscribe(f"fleet/v1/{mfr}/+/connection")
        self._sub_report = client.subscribe(f"fleet/v1/{mfr}/+/report")

    # --- loop ----------------------------------------------------------

    def step(self, now_ms: int) -> None:
        """One coordination cycle; the only mutator of coordinator state."""
        self.now_ms = now_ms
        self._cycle += 1
        self._drain_commands()
        self._drain_connections()
        advanced = self._drain_states()
        self._drain_reports()
        self._expire_obstacles()
        advanced += self._poll_barriers()
        for task_id in dict.fromkeys(advanced):
            self._issue_current_step(task_id)
        if self._cycle % self.config.replan_check_period == 0:
            self._replan_blocked()
        self._assign()

    # --- supervisor commands --------------------------------------------

    def submit_command(self, name: str, doc: dict | None = None) -> SimpleQueue:
        """Queue a command for the loop; the reply lands on the returned queue."""
        reply: SimpleQueue = SimpleQueue()
        self._commands.put((name, doc or {}, reply))
        return reply

    def _drain_commands(self) -> None:
        while True:
            try:
                name, doc, reply = self._commands.get_nowait()
            except Empty:
                return
            try:
                reply.put(("ok", self._run_command(name, doc)))
            except (CommandError, OperationError) as err:
                reply.put(("error", {"field": err.field, "message": str(err)}))
            except SiteFleetError as err:
                reply.put(("error", {"field": "", "message": str(err)}))

    def _run_command(self, name: str, doc: dict):
        if name == "submit_operation":
            return self.submit_operation(doc)
        if name == "cancel_operation":
            return self.cancel_operation(_require(doc, "operation_id"))
        if name == "inject_obstacle":
            return self.inject_obstacle(doc)
        if name == "clear_obstacle":
            return self.clear_obstacle(_require(doc, "obstacle_id"))
        if name == "pause":
            return self.pause(_require(doc, "vehicle_id"))
        if name == "resume":
            return self.resume(_require(doc, "vehicle_id"))
        if name == "snapshot":
            return self.snapshot()
        if name == "events_since":
            gap, records = self.events_since(int(doc.get("from_seq", 0)))
            return {"gap": gap, "events": [r.to_doc() for r in records]}
        if name == "subscribe_events":
            return self.subscribe_events(int(doc.get("from_seq", 0)))
        raise CommandError("command", f"unknown command {name!r}")

    def submit_operation(self, doc) -> dict:
        op, tasks = self.dispatcher.submit(doc)
        for task in tasks:
            self._emit("task_transition", {
                "task_id": task.task_id,
                "operation_id": op.operation_id,
                "capability": task.capability,
                "steps": len(task.steps),
                "status": "pending",
            })
        return {"operation_id": op.operation_id,
                "task_ids": [t.task_id for t in tasks]}

    def cancel_operation(self, operation_id: str) -> dict:
        """Fail running tasks of the operation; queued ones are discarded.

        Pending tasks go first so that failing the last running one closes
        the operation; a cancel that only discards closes it directly.
        """
        if operation_id not in self.dispatcher.operations:
            raise CommandError("operation_id", f"unknown operation {operation_id!r}")
        siblings = [
            t for t in self.dispatcher.tasks.values()
            if t.operation_id == operation_id
        ]
        canceled = []
        running = []
        for task in siblings:
            if task.status == "pending":
                self.dispatcher.discard_pending(task.task_id)
                self._emit("task_transition", {
                    "task_id": task.task_id,
                    "operation_id": operation_id,
                    "status": "discarded",
                })
                canceled.append(task.task_id)
            elif task.status in ("assigned", "active"):
                running.append(task)
        for task in running:
            if task.assigned_to is not None:
                self._halt_vehicle(task.assigned_to)
            self._emit_dispatcher_events(
                self.dispatcher.fail_task(task.task_id, "canceled")
            )
            canceled.append(task.task_id)
        if canceled and not running and self.dispatcher.operation_finished(operation_id):
            self._emit("operation_done", {"operation_id": operation_id})
        return {"operation_id": operation_id, "canceled_tasks": canceled}

    def inject_obstacle(self, doc: dict) -> dict:
        for name in ("east", "north"):
            if not isinstance(doc.get(name), (int, float)):
                raise CommandError(name, f"must be a number, got {doc.get(name)!r}")
        cls = doc.get("cls", "person")
        radius = doc.get("radius")
        try:
            obstacle = self.registry.inject(
                EnuPoint(float(doc["east"]), float(doc["north"])),
                cls,
                self.now_ms,
                radius=float(radius) if radius is not None else None,
            )
        except SiteFleetError as err:
            raise CommandError("position", str(err)) from None
        self._obstacles_changed()
        self._known_obstacles[obstacle.id] = obstacle
        self._emit("obstacle_added", self._obstacle_doc(obstacle))
        return {"obstacle_id": obstacle.id}

    def clear_obstacle(self, obstacle_id: str) -> dict:
        if not self.registry.clear(obstacle_id):
            raise CommandError("obstacle_id", f"unknown obstacle {obstacle_id!r}")
        self._obstacles_changed()
        self._known_obstacles.pop(obstacle_id, None)
        self._emit("obstacle_expired", {"id": obstacle_id, "cleared": True})
        return {"obstacle_id": obstacle_id}

    def pause(self, vehicle_id: str) -> dict:
        if vehicle_id not in self.dispatcher.vehicles:
            raise CommandError("vehicle_id", f"unknown vehicle {vehicle_id!r}")
        if vehicle_id not in self._paused:
            self._paused.add(vehicle_id)
            entry = self._plans.get(vehicle_id)
            if entry is not None:
                self._send_halt(entry)
                self._emit("replan", {
                    "vehicle_id": vehicle_id,
                    "order_id": entry.order_id,
                    "status": "halted",
                    "reason": "paused",
                })
            self._emit("vehicle_state", {"vehicle_id": vehicle_id, "paused": True})
        return {"vehicle_id": vehicle_id, "paused": True}

    def resume(self, vehicle_id: str) -> dict:
        if vehicle_id not in self.dispatcher.vehicles:
            raise CommandError("vehicle_id", f"unknown vehicle {vehicle_id!r}")
        if vehicle_id in self._paused:
            self._paused.discard(vehicle_id)
            self._emit("vehicle_state", {"vehicle_id": vehicle_id, "paused": False})
            record = self.dispatcher.vehicles[vehicle_id]
            if record.current_task is not None:
                self._issue_current_step(record.current_task)
        return {"vehicle_id": vehicle_id, "paused": False}

    # --- queries ---------------------------------------------------------

    def snapshot(self) -> dict:
        """World state as of the latest event; seq ties the two together."""
        obstacles = list(self._known_obstacles.values())
        vehicles = []
        for vid in sorted(self.dispatcher.vehicles):
            r = self.dispatcher.vehicles[vid]
            vehicles.append({
                "vehicle_id": vid,
                "kind": r.kind,
                "status": r.status,
                "east": round(r.pose.position.east, 3),
                "north": round(r.pose.position.north, 3),
                "up": round(r.pose.position.up, 3),
                "yaw": round(r.pose.yaw, 4),
                "current_task": r.current_task,
                "paused": vid in self._paused,
            })
        tasks = []
        for t in self.dispatcher.tasks.values():
            tasks.append({
                "task_id": t.task_id,
                "operation_id": t.operation_id,
                "capability": t.capability,
                "status": t.status,
                "assigned_to": t.assigned_to,
                "step_index": t.step_index,
                "steps": len(t.steps),
            })
        paths = []
        for vid in sorted(self._plans):
            p = self._plans[vid]
            if not p.display_points:
                continue
            paths.append({
                "vehicle_id": vid,
                "order_id": p.order_id,
                "update_id": p.update_id,
                "points": _xy(p.display_points),
            })
        return {
            "seq": self._next_seq - 1,
            "time_ms": self.now_ms,
            "vehicles": vehicles,
            "tasks": tasks,
            "obstacles": [self._obstacle_doc(o) for o in obstacles],
            "paths": paths,
            "graph_generation": self._graph.generation,
            "map": {
                "boundary": _xy(self.site_map.boundary),
                "static_obstacles": [_xy(poly) for poly in self.site_map.static_obstacles],
                "zones": {
                    name: [round(p.east, 3), round(p.north, 3)]
                    for name, p in sorted(self.site_map.zones.items())
                },
            },
        }

    def preview_route(self, start: EnuPoint, goal: EnuPoint) -> PlannedPath:
        """Plan over the current obstacle set without issuing an order."""
        return self._plan_route(start, goal)

    def events_since(self, from_seq: int) -> tuple[bool, list[EventRecord]]:
        """Retained events with seq >= from_seq; gap=True when older ones
        have already been evicted from the ring."""
        if from_seq < 0:
            raise CommandError("from_seq", f"must be >= 0, got {from_seq}")
        gap = from_seq < self._base_seq and self._base_seq > 1
        start = max(from_seq, self._base_seq)
        return gap, self._events[start - self._base_seq:]

    def subscribe_events(self, from_seq: int = 0) -> tuple[bool, list[EventRecord], SimpleQueue]:
        """Backfill plus a live queue; call from the loop thread or via command."""
        gap, backlog = self.events_since(from_seq)
        tail: SimpleQueue = SimpleQueue()
        self._tails.append(tail)
        return gap, backlog, tail

    def unsubscribe_events(self, tail: SimpleQueue) -> None:
        if tail in self._tails:
            self._tails.remove(tail)

    # --- intake ----------------------------------------------------------

    def _drain_connections(self) -> None:
        for envelope in self._sub_conn.drain():
            msg = self._decode(envelope.payload, ConnectionMsg)
            if msg is None:
                continue
            kind = msg.kind or "ugv"
            events = self.dispatcher.on_connection(
                msg.vehicle_id, kind, msg.connection_state,
            )
            self._emit("vehicle_state", {
                "vehicle_id": msg.vehicle_id,
                "connection": msg.connection_state,
                "kind": kind,
            })
            self._emit_dispatcher_events(events)
            if msg.connection_state != "online":
                self._drop_plan(msg.vehicle_id)

    def _drain_states(self) -> list[str]:
        advanced: list[str] = []
        for envelope in self._sub_state.drain():
            msg = self._decode(envelope.payload, StateMsg)
            if msg is None:
                continue
            enu = geodetic_to_enu(self.site_map.origin, msg.position)
            pose = Pose2D(enu, msg.yaw)
            plan_entry = self._plans.get(msg.vehicle_id)
            step_complete = (
                plan_entry is not None
                and plan_entry.terminal_node_id is not None
                and msg.last_node_id == plan_entry.terminal_node_id
            )
            record = self.dispatcher.vehicles.get(msg.vehicle_id)
            stale = record is not None and msg.timestamp < record.last_state_ts
            events = self.dispatcher.on_vehicle_state(
                msg.vehicle_id, pose, msg.timestamp,
                errors=msg.errors, step_complete=step_complete,
            )
            if record is None or stale:
                continue
            self._emit("vehicle_state", {
                "vehicle_id": msg.vehicle_id,
                "east": round(enu.east, 3),
                "north": round(enu.north, 3),
                "up": round(enu.up, 3),
                "yaw": round(msg.yaw, 4),
                "last_node_id": msg.last_node_id,
                "errors": list(msg.errors),
            })
            if msg.errors:
                self._drop_plan(msg.vehicle_id)
            advanced += self._emit_dispatcher_events(events)
            if step_complete:
                self._plans.pop(msg.vehicle_id, None)
        return advanced

    def _drain_reports(self) -> None:
        for envelope in self._sub_report.drain():
            msg = self._decode(envelope.payload, ObjectReport)
            if msg is None:
                continue
            if msg.confidence < self.config.confidence_floor:
                continue
            obstacle = self.registry.ingest_report(msg, self.now_ms)
            if obstacle is None:
                continue
            self._obstacles_changed()
            self._known_obstacles[obstacle.id] = obstacle
            self._emit("obstacle_added", self._obstacle_doc(obstacle))

    def _decode(self, payload, expected):
        try:
            msg = from_doc(payload)
        except MessageError as err:
            log.warning("undecodable message dropped: %s", err)
            return None
        if not isinstance(msg, expected):
            log.warning("unexpected %s on a %s topic", type(msg).__name__, expected.__name__)
            return None
        return msg

    def _expire_obstacles(self) -> None:
        live = {o.id for o in self.registry.live_obstacles(self.now_ms)}
        for gone in sorted(set(self._known_obstacles) - live):
            del self._known_obstacles[gone]
            self._obstacles_changed()
            self._emit("obstacle_expired", {"id": gone, "cleared": False})

    def _poll_barriers(self) -> list[str]:
        return self._emit_dispatcher_events(self.dispatcher.poll_waits())

    # --- planning and orders ----------------------------------------------

    def _assign(self) -> None:
        for task, vehicle in self.dispatcher.assign_pending():
            self._emit("task_transition", {
                "task_id": task.task_id,
                "status": "assigned",
                "vehicle_id": vehicle.vehicle_id,
            })
            self.dispatcher.mark_active(task.task_id)
            self._emit("task_transition", {
                "task_id": task.task_id,
                "status": "active",
                "vehicle_id": vehicle.vehicle_id,
            })
            self._issue_current_step(task.task_id)

    def _issue_current_step(self, task_id: str) -> None:
        task = self.dispatcher.tasks.get(task_id)
        if task is None or task.status != "active" or task.assigned_to is None:
            return
        if task.assigned_to in self._paused:
            return
        step = task.current_step
        vehicle = self.dispatcher.vehicles[task.assigned_to]
        if isinstance(step, NavigateStep):
            goal = self.site_map.zone(step.zone)
            self._issue_route(vehicle.vehicle_id, task, goal)
        elif isinstance(step, ActStep):
            self._issue_act(vehicle.vehicle_id, task, step)
        elif isinstance(step, SurveyStep):
            self._issue_survey(vehicle.vehicle_id, task, step)
        # wait steps need no order; poll_waits advances them

    def _issue_route(self, vehicle_id: str, task: Task, goal: EnuPoint) -> None:
        pose = self.dispatcher.vehicles[vehicle_id].pose
        try:
            path = self._plan_route(pose.position, goal)
        except PlannerError as err:
            self._halt_unreachable(vehicle_id, task, str(err))
            return
        entry = self._new_plan(vehicle_id, task.task_id)
        nodes = self._route_nodes(entry, path.points)
        entry.path = path
        entry.goal = goal
        entry.display_points = tuple(path.points)
        entry.terminal_node_id = nodes[-1].node_id
        self._send_order(entry, nodes)
        self._emit("plan_issued", {
            "vehicle_id": vehicle_id,
            "task_id": task.task_id,
            "order_id": entry.order_id,
            "update_id": entry.update_id,
            "step_index": task.step_index,
            "points": _xy(path.points),
            "length": round(path.length, 3),
        })

    def _issue_act(self, vehicle_id: str, task: Task, step: ActStep) -> None:
        pose = self.dispatcher.vehicles[vehicle_id].pose
        entry = self._new_plan(vehicle_id, task.task_id)
        node = OrderNode(
            f"{entry.order_id}-u{entry.update_id}-act",
            enu_to_geodetic(self.site_map.origin, pose.position),
            NodeAction(step.action, step.duration_s),
        )
        entry.terminal_node_id = node.node_id
        self._send_order(entry, [node])
        self._emit("plan_issued", {
            "vehicle_id": vehicle_id,
            "task_id": task.task_id,
            "order_id": entry.order_id,
            "update_id": entry.update_id,
            "step_index": task.step_index,
            "action": step.action,
            "duration_s": step.duration_s,
        })

    def _issue_survey(self, vehicle_id: str, task: Task, step: SurveyStep) -> None:
        points = survey_route(
            self.site_map, step.altitude_m, self.config.survey_overlap,
            model=self.scale_model,
        )
        entry = self._new_plan(vehicle_id, task.task_id)
        nodes = self._route_nodes(entry, points)
        entry.display_points = tuple(points)
        entry.terminal_node_id = nodes[-1].node_id
        self._send_order(entry, nodes)
        self._emit("plan_issued", {
            "vehicle_id": vehicle_id,
            "task_id": task.task_id,
            "order_id": entry.order_id,
            "update_id": entry.update_id,
            "step_index": task.step_index,
            "points": _xy(points),
            "altitude_m": step.altitude_m,
        })

    def _replan_blocked(self) -> None:
        obstacles = self.registry.live_obstacles(self.now_ms)
        for vehicle_id in sorted(self._plans):
            entry = self._plans[vehicle_id]
            if vehicle_id in self._paused:
                continue
            if entry.halted_since is not None:
                self._retry_halted(vehicle_id, entry)
                continue
            if entry.path is None or entry.goal is None:
                continue
            if not blocks_path(entry.path, obstacles, REPLAN_CLEARANCE_M):
                continue
            task = self.dispatcher.tasks.get(entry.task_id)
            if task is None or task.status != "active":
                continue
            pose = self.dispatcher.vehicles[vehicle_id].pose
            try:
                path = self._plan_route(pose.position, entry.goal)
            except PlannerError as err:
                self._halt_vehicle(vehicle_id)
                entry.halted_since = self.now_ms
                self._emit("replan", {
                    "vehicle_id": vehicle_id,
                    "order_id": entry.order_id,
                    "status": "halted",
                    "reason": str(err),
                })
                continue
            nodes = self._route_nodes(entry, path.points, bump=True)
            entry.path = path
            entry.display_points = tuple(path.points)
            entry.terminal_node_id = nodes[-1].node_id
            self._send_order(entry, nodes)
            self.replan_count += 1
            self._emit("replan", {
                "vehicle_id": vehicle_id,
                "order_id": entry.order_id,
                "update_id": entry.update_id,
                "status": "rerouted",
                "points": _xy(path.points),
                "length": round(path.length, 3),
            })

    def _retry_halted(self, vehicle_id: str, entry: _ActivePlan) -> None:
        task = self.dispatcher.tasks.get(entry.task_id)
        if task is None or task.status != "active":
            self._plans.pop(vehicle_id, None)
            return
        if entry.goal is None:
            self._plans.pop(vehicle_id, None)
            return
        pose = self.dispatcher.vehicles[vehicle_id].pose
        try:
            path = self._plan_route(pose.position, entry.goal)
        except PlannerError:
            waited = self.now_ms - entry.halted_since
            if waited >= self.config.unreachable_timeout_s * 1000.0:
                events = self.dispatcher.fail_task(entry.task_id, "unreachable")
                self._emit_dispatcher_events(events)
                self._plans.pop(vehicle_id, None)
            return
        nodes = self._route_nodes(entry, path.points, bump=True)
        entry.path = path
        entry.display_points = tuple(path.points)
        entry.terminal_node_id = nodes[-1].node_id
        entry.halted_since = None
        self._send_order(entry, nodes)
        self.replan_count += 1
        self._emit("replan", {
            "vehicle_id": vehicle_id,
            "order_id": entry.order_id,
            "update_id": entry.update_id,
            "status": "recovered",
            "points": _xy(path.points),
            "length": round(path.length, 3),
        })

    def _plan_route(self, start: EnuPoint, goal: EnuPoint) -> PlannedPath:
        return plan(self._graph, start, goal)

    def _obstacles_changed(self) -> None:
        self._obstacle_rev += 1
        self._graph = build_graph(
            self.site_map,
            self.registry.live_obstacles(self.now_ms),
            clearance_floor=self.config.clearance_floor,
            generation=self._obstacle_rev,
        )

    def _halt_unreachable(self, vehicle_id: str, task: Task, reason: str) -> None:
        entry = self._new_plan(vehicle_id, task.task_id)
        entry.goal = self.site_map.zone(task.current_step.zone) \
            if isinstance(task.current_step, NavigateStep) else None
        entry.halted_since = self.now_ms
        self._send_halt(entry)
        self._emit("replan", {
            "vehicle_id": vehicle_id,
            "order_id": entry.order_id,
            "status": "halted",
            "reason": reason,
        })

    def _halt_vehicle(self, vehicle_id: str) -> None:
        """Order the vehicle to stop where it is; keeps its order_id."""
        entry = self._plans.get(vehicle_id)
        if entry is None:
            return
        self._send_halt(entry)

    def _send_halt(self, entry: _ActivePlan) -> None:
        entry.update_id = self._next_update(entry.order_id)
        pose = self.dispatcher.vehicles[entry.vehicle_id].pose
        node = OrderNode(
            f"{entry.order_id}-u{entry.update_id}-halt",
            enu_to_geodetic(self.site_map.origin, pose.position),
        )
        entry.path = None
        entry.display_points = ()
        entry.terminal_node_id = None
        order = OrderMsg(entry.order_id, entry.update_id, (node,))
        self._publish_order(entry.vehicle_id, order)

    def _new_plan(self, vehicle_id: str, task_id: str) -> _ActivePlan:
        task = self.dispatcher.tasks[task_id]
        existing = self._plans.get(vehicle_id)
        order_id = f"{task_id}-s{task.step_index}"
        if existing is not None and existing.order_id == order_id:
            entry = existing
            entry.update_id = self._next_update(order_id)
        else:
            entry = _ActivePlan(
                vehicle_id=vehicle_id,
                task_id=task_id,
                order_id=order_id,
                update_id=self._next_update(order_id),
                terminal_node_id=None,
                path=None,
                goal=None,
            )
        entry.halted_since = None
        self._plans[vehicle_id] = entry
        return entry

    def _next_update(self, order_id: str) -> int:
        value = self._update_ids.get(order_id, -1) + 1
        self._update_ids[order_id] = value
        return value

    def _route_nodes(self, entry: _ActivePlan, points, bump: bool = False) -> list[OrderNode]:
        if bump:
            entry.update_id = self._next_update(entry.order_id)
        origin = self.site_map.origin
        prefix = f"{entry.order_id}-u{entry.update_id}"
        return [
            OrderNode(f"{prefix}-n{i}", enu_to_geodetic(origin, p))
            for i, p in enumerate(points)
        ]

    def _send_order(self, entry: _ActivePlan, nodes) -> None:
        order = OrderMsg(entry.order_id, entry.update_id, tuple(nodes))
        self._publish_order(entry.vehicle_id, order)

    def _publish_order(self, vehicle_id: str, order: OrderMsg) -> None:
        self.client.publish(
            topic_for(vehicle_id, "order", self.config.manufacturer),
            to_doc(order),
            qos=1,
        )

    def _drop_plan(self, vehicle_id: str) -> None:
        self._plans.pop(vehicle_id, None)

    # --- events -----------------------------------------------------------

    def _emit_dispatcher_events(self, events) -> list[str]:
        """Translate dispatcher event tuples into EventRecords; returns ids
        of tasks whose step cursor advanced and may need a fresh order."""
        advanced: list[str] = []
        for event in events:
            kind, args = event[0], event[1:]
            if kind == "step_complete":
                task_id, index = args
                self._emit("task_transition", {
                    "task_id": task_id,
                    "vehicle_id": self._task_vehicle(task_id),
                    "status": "active",
                    "step_complete": index,
                })
                advanced.append(task_id)
            elif kind == "task_done":
                self._emit("task_transition", {
                    "task_id": args[0],
                    "vehicle_id": self._task_vehicle(args[0]),
                    "status": "done",
                })
                advanced = [t for t in advanced if t != args[0]]
            elif kind == "task_failed":
                task_id, reason = args
                self._emit("task_transition", {
                    "task_id": task_id,
                    "vehicle_id": self._task_vehicle(task_id),
                    "status": "failed",
                    "reason": reason,
                })
                task = self.dispatcher.tasks.get(task_id)
                if task is not None and task.assigned_to in self._plans:
                    if self._plans[task.assigned_to].task_id == task_id:
                        self._plans.pop(task.assigned_to, None)
            elif kind == "operation_done":
                self._emit("operation_done", {"operation_id": args[0]})
            elif kind == "barrier_released":
                self._emit("task_transition", {"barrier": args[0], "status": "released"})
            elif kind in ("vehicle_online", "vehicle_offline"):
                pass  # connection events are emitted by the intake that saw them
        return [
            t for t in advanced
            if t in self.dispatcher.tasks and self.dispatcher.tasks[t].status == "active"
        ]

    def _task_vehicle(self, task_id: str) -> str | None:
        task = self.dispatcher.tasks.get(task_id)
        return task.assigned_to if task is not None else None

    def _emit(self, kind: str, payload: dict) -> EventRecord:
        record = EventRecord(self._next_seq, kind, payload, self.now_ms)
        self._next_seq += 1
        self._events.append(record)
        overflow = len(self._events) - self.config.retention
        if overflow > 0:
            del self._events[:overflow]
            self._base_seq += overflow
        for tail in self._tails:
            tail.put(record)
        return record

    def _obstacle_doc(self, obstacle) -> dict:
        return {
            "id": obstacle.id,
            "east": round(obstacle.position.east, 3),
            "north": round(obstacle.position.north, 3),
            "radius": obstacle.radius,
            "cls": obstacle.cls,
            "last_seen": obstacle.last_seen,
            "expires_at": obstacle.last_seen + obstacle.ttl,
        }


def _require(doc: dict, field_name: str) -> str:
    value = doc.get(field_name)
    if not isinstance(value, str) or not value:
        raise CommandError(field_name, f"must be a non-empty string, got {value!r}")
    return value
