"""Coordination loop: orders, replanning, events, and the command queue."""

import copy
import math

import pytest

from sitefleet.bus import Broker, LocalClient
from sitefleet.coordinator import (
    REPLAN_CLEARANCE_M,
    Coordinator,
    CoordinatorConfig,
)
from sitefleet.geo import EnuPoint, GeoPoint, Pose2D, enu_to_geodetic
from sitefleet.messages import (
    ConnectionMsg,
    ObjectReport,
    OrderMsg,
    StateMsg,
    from_doc,
    report_topic,
    to_doc,
    topic_for,
)
from sitefleet.sitemap import SiteMap, blocks_path, load_map
from sitefleet.vehicles import FleetSim, SimClock, SimVehicle, VehicleSpec

DT = 0.1

SMALL_MAP = SiteMap(
    boundary=(
        EnuPoint(-30.0, -20.0),
        EnuPoint(30.0, -20.0),
        EnuPoint(30.0, 20.0),
        EnuPoint(-30.0, 20.0),
    ),
    static_obstacles=(
        (EnuPoint(-4.0, -3.0), EnuPoint(4.0, -3.0), EnuPoint(4.0, 3.0), EnuPoint(-4.0, 3.0)),
    ),
    zones={"load": EnuPoint(-22.0, 0.0), "dump": EnuPoint(22.0, 0.0)},
    origin=GeoPoint(40.79, 29.45, 0.0),
)

LOAD_DUMP = {"kind": "load_dump", "load_zone": "load", "dump_zone": "dump", "cycles": 1}


class World:
    """One coordinator and one vehicle sim sharing an in-process bus."""

    def __init__(self, site_map=None, config=None, vehicles=()):
        self.site_map = site_map or load_map()
        self.broker = Broker()
        self.gcs = LocalClient(self.broker, "gcs")
        self.sim = LocalClient(self.broker, "sim")
        self.coordinator = Coordinator(self.site_map, self.gcs, config=config)
        self.clock = SimClock(dt=DT)
        sims = [
            SimVehicle(VehicleSpec(vid, kind), self.site_map, Pose2D(EnuPoint(e, n), yaw))
            for vid, kind, e, n, yaw in vehicles
        ]
        self.fleet = FleetSim(self.site_map, sims, self.sim, clock=self.clock)
        self.fleet.announce()

    def run(self, ticks, stop=None):
        """Advance whole iterations; True once stop() holds (or ticks done)."""
        for _ in range(ticks):
            self.fleet.step()
            self.coordinator.step(self.clock.timestamp_ms)
            if stop is not None and stop():
                return True
        return stop is None

    def command(self, name, doc=None):
        reply = self.coordinator.submit_command(name, doc)
        self.run(1)
        return reply.get_nowait()

    def ok(self, name, doc=None):
        status, result = self.command(name, doc)
        assert status == "ok", result
        return result

    def events(self, kind=None):
        _, records = self.coordinator.events_since(0)
        if kind is None:
            return records
        return [r for r in records if r.kind == kind]

    def vehicle(self, vehicle_id):
        return self.fleet.vehicles[vehicle_id]


def ground_world(**kwargs):
    return World(
        site_map=SMALL_MAP,
        vehicles=[("ugv-1", "ugv", 15.0, 10.0, 0.0)],
        **kwargs,
    )


def full_world(site_map=None):
    if site_map is SMALL_MAP:
        placements = [
            ("exc-1", "excavator", 25.0, 14.0, 3.14),
            ("ugv-1", "ugv", 15.0, -10.0, 3.14),
            ("uav-1", "uav", 0.0, -15.0, 0.0),
        ]
    else:
        placements = [
            ("exc-1", "excavator", 40.0, 18.0, 3.14),
            ("ugv-1", "ugv", 30.0, -18.0, 0.0),
            ("uav-1", "uav", 0.0, -20.0, 0.0),
        ]
    return World(site_map=site_map, vehicles=placements)


def person_report(world, point, confidence=0.9):
    report = ObjectReport(
        position=enu_to_geodetic(world.site_map.origin, point),
        cls="person",
        confidence=confidence,
        source_ts=world.clock.timestamp_ms,
    )
    world.sim.publish(report_topic("uav-1"), to_doc(report), qos=1)


def segment_midpoint(points):
    best = max(zip(points, points[1:]),
               key=lambda ab: math.hypot(ab[1][0] - ab[0][0], ab[1][1] - ab[0][1]))
    (ax, ay), (bx, by) = best
    return EnuPoint((ax + bx) / 2.0, (ay + by) / 2.0)


# end to end on the bundled site


def test_small_operation_runs_to_completion():
    world = full_world()
    world.run(2)
    result = world.ok("submit_operation", LOAD_DUMP)
    op_id = result["operation_id"]

    done = lambda: any(
        e.payload.get("operation_id") == op_id for e in world.events("operation_done")
    )
    assert world.run(4000, stop=done), "operation never completed"

    snapshot = world.coordinator.snapshot()
    assert {t["status"] for t in snapshot["tasks"]} == {"done"}
    assert {v["status"] for v in snapshot["vehicles"]} == {"idle"}
    assert snapshot["paths"] == []
    ground = sum(
        world.vehicle(v).distance_traveled for v in ("exc-1", "ugv-1")
    )
    assert ground > 50.0
    # barrier protocol: the hauler's dump run starts only after the load signal
    kinds = [e.kind for e in world.events()]
    assert "task_transition" in kinds and "plan_issued" in kinds
    released = [e for e in world.events("task_transition") if "barrier" in e.payload]
    assert [e.payload["barrier"] for e in released] == [f"{op_id}:load:0"]


# replanning


def test_blocking_report_reroutes_within_two_check_periods():
    world = ground_world()
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(3)
    issued = world.events("plan_issued")
    assert issued, "haul task never got a route"
    route = issued[-1].payload["points"]

    # a low-confidence sighting must be ignored outright
    person_report(world, segment_midpoint(route), confidence=0.3)
    world.run(2)
    assert world.events("obstacle_added") == []

    person_report(world, segment_midpoint(route))
    period = world.coordinator.config.replan_check_period
    replanned = lambda: bool(world.events("replan"))
    cycles = 0
    for cycles in range(1, 2 * period + 1):
        world.run(1)
        if replanned():
            break
    assert replanned(), "no replan after a blocking report"
    assert cycles <= 2 * period

    event = world.events("replan")[-1]
    assert event.payload["status"] == "rerouted"
    detour = [EnuPoint(e, n) for e, n in event.payload["points"]]
    obstacles = world.coordinator.registry.live_obstacles(world.coordinator.now_ms)
    assert not blocks_path(detour, obstacles, REPLAN_CLEARANCE_M)


def test_expiry_reopens_the_shorter_corridor():
    world = ground_world()
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(3)
    route = world.events("plan_issued")[-1].payload["points"]
    person_report(world, segment_midpoint(route))
    world.run(2 * world.coordinator.config.replan_check_period)
    event = world.events("replan")[-1]
    detour_start = EnuPoint(*event.payload["points"][0])
    detour_length = event.payload["length"]

    ttl_ticks = int(world.coordinator.registry.ttl_ms / (DT * 1000.0)) + 20
    expired = lambda: bool(world.events("obstacle_expired"))
    assert world.run(ttl_ticks, stop=expired), "obstacle never timed out"

    goal = world.site_map.zone("load")
    reopened = world.coordinator.preview_route(detour_start, goal)
    assert reopened.length < detour_length


def test_far_obstacle_does_not_trigger_replan():
    world = ground_world()
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(3)
    world.ok("inject_obstacle", {"east": 22.0, "north": -16.0})
    world.run(4 * world.coordinator.config.replan_check_period)
    assert world.events("replan") == []


def test_unreachable_goal_halts_then_fails_after_timeout():
    world = ground_world(config=CoordinatorConfig(unreachable_timeout_s=3.0))
    world.run(2)
    world.ok("inject_obstacle", {"east": -22.0, "north": 0.0})
    world.ok("submit_operation", LOAD_DUMP)

    halted = lambda: any(
        e.payload["status"] == "halted" for e in world.events("replan")
    )
    assert world.run(20, stop=halted), "vehicle was never halted"
    start = world.vehicle("ugv-1").pose.position

    failed = lambda: any(
        e.payload["status"] == "failed" for e in world.events("task_transition")
    )
    assert world.run(60, stop=failed), "halted task never timed out"
    event = next(
        e for e in world.events("task_transition") if e.payload["status"] == "failed"
    )
    assert event.payload["reason"] == "unreachable"
    end = world.vehicle("ugv-1").pose.position
    assert math.hypot(end.east - start.east, end.north - start.north) < 0.01
    record = world.coordinator.dispatcher.vehicles["ugv-1"]
    assert record.status == "idle" and record.current_task is None


def test_halted_vehicle_recovers_when_obstacle_is_cleared():
    world = ground_world(config=CoordinatorConfig(unreachable_timeout_s=60.0))
    world.run(2)
    obstacle_id = world.ok("inject_obstacle", {"east": -22.0, "north": 0.0})["obstacle_id"]
    world.ok("submit_operation", LOAD_DUMP)
    halted = lambda: any(
        e.payload["status"] == "halted" for e in world.events("replan")
    )
    assert world.run(20, stop=halted)

    world.ok("clear_obstacle", {"obstacle_id": obstacle_id})
    recovered = lambda: any(
        e.payload["status"] == "recovered" for e in world.events("replan")
    )
    assert world.run(20, stop=recovered), "no recovery after the goal cleared"

    at_load = lambda: any(
        e.payload.get("step_complete") == 0
        for e in world.events("task_transition")
    )
    assert world.run(300, stop=at_load), "vehicle never reached the reopened goal"


# events and snapshots


def apply_events(snapshot, event_docs):
    """Fold event documents over a snapshot; mirrors the console reducer."""
    state = copy.deepcopy(snapshot)
    vehicles = {v["vehicle_id"]: v for v in state["vehicles"]}
    tasks = {t["task_id"]: t for t in state["tasks"]}
    task_order = [t["task_id"] for t in state["tasks"]]
    obstacles = {o["id"]: o for o in state["obstacles"]}
    paths = {p["vehicle_id"]: p for p in state["paths"]}
    generation = state["graph_generation"]
    seq = state["seq"]

    for doc in event_docs:
        seq = doc["seq"]
        kind, p = doc["kind"], doc["payload"]
        if kind == "vehicle_state":
            vid = p["vehicle_id"]
            if "connection" in p:
                if p["connection"] == "online":
                    v = vehicles.setdefault(vid, {
                        "vehicle_id": vid, "kind": p["kind"], "status": "idle",
                        "east": 0.0, "north": 0.0, "up": 0.0, "yaw": 0.0,
                        "current_task": None, "paused": False,
                    })
                    v["status"] = "idle" if v["current_task"] is None else "busy"
                elif vid in vehicles:
                    vehicles[vid]["status"] = "offline"
            elif "paused" in p:
                if vid in vehicles:
                    vehicles[vid]["paused"] = p["paused"]
            elif vid in vehicles:
                v = vehicles[vid]
                v.update(east=p["east"], north=p["north"], up=p["up"], yaw=p["yaw"])
                if p["errors"]:
                    v["status"] = "offline"
        elif kind == "obstacle_added":
            obstacles[p["id"]] = dict(p)
            generation += 1
        elif kind == "obstacle_expired":
            obstacles.pop(p["id"], None)
            generation += 1
        elif kind == "plan_issued":
            vid = p["vehicle_id"]
            if "points" in p:
                paths[vid] = {"vehicle_id": vid, "order_id": p["order_id"],
                              "update_id": p["update_id"], "points": p["points"]}
            else:
                paths.pop(vid, None)
        elif kind == "replan":
            vid = p["vehicle_id"]
            if p["status"] in ("rerouted", "recovered"):
                paths[vid] = {"vehicle_id": vid, "order_id": p["order_id"],
                              "update_id": p["update_id"], "points": p["points"]}
            else:
                paths.pop(vid, None)
        elif kind == "task_transition":
            if "barrier" in p:
                continue
            tid, status = p["task_id"], p["status"]
            if status == "pending":
                tasks[tid] = {
                    "task_id": tid, "operation_id": p["operation_id"],
                    "capability": p["capability"], "status": "pending",
                    "assigned_to": None, "step_index": 0, "steps": p["steps"],
                }
                task_order.append(tid)
            elif status == "discarded":
                tasks.pop(tid, None)
                if tid in task_order:
                    task_order.remove(tid)
            elif tid in tasks:
                task = tasks[tid]
                task["status"] = status
                if status == "assigned":
                    task["assigned_to"] = p["vehicle_id"]
                    v = vehicles.get(p["vehicle_id"])
                    if v is not None:
                        v["status"] = "busy"
                        v["current_task"] = tid
                elif status == "active" and "step_complete" in p:
                    task["step_index"] = p["step_complete"] + 1
                    paths.pop(p["vehicle_id"], None)
                elif status in ("done", "failed"):
                    vid = p["vehicle_id"]
                    v = vehicles.get(vid)
                    if v is not None and v["current_task"] == tid:
                        v["current_task"] = None
                        if v["status"] != "offline":
                            v["status"] = "idle"
                    paths.pop(vid, None)

    state["vehicles"] = [vehicles[k] for k in sorted(vehicles)]
    state["tasks"] = [tasks[t] for t in task_order if t in tasks]
    state["obstacles"] = list(obstacles.values())
    state["paths"] = [paths[k] for k in sorted(paths)]
    state["graph_generation"] = generation
    state["seq"] = seq
    return state


def test_snapshot_plus_events_reconstructs_fresh_snapshot():
    world = full_world(site_map=SMALL_MAP)
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(40)
    base = world.coordinator.snapshot()

    # a busy stretch: sightings, an override, a pause cycle, a second
    # operation canceled before assignment
    route = world.events("plan_issued")[0].payload["points"]
    person_report(world, segment_midpoint(route))
    world.run(20)
    world.ok("pause", {"vehicle_id": "ugv-1"})
    world.run(15)
    world.ok("resume", {"vehicle_id": "ugv-1"})
    second = world.ok("submit_operation", LOAD_DUMP)
    world.ok("cancel_operation", {"operation_id": second["operation_id"]})
    world.run(150)

    fresh = world.coordinator.snapshot()
    _, records = world.coordinator.events_since(base["seq"] + 1)
    folded = apply_events(base, [r.to_doc() for r in records])
    folded["time_ms"] = fresh["time_ms"]  # wall time is not event-sourced
    assert folded == fresh


def test_event_seqs_are_gapless_and_eviction_is_flagged():
    world = ground_world(config=CoordinatorConfig(retention=50))
    world.run(2)
    _, backlog, tail = world.coordinator.subscribe_events(0)
    for _ in range(40):
        world.ok("pause", {"vehicle_id": "ugv-1"})
        world.ok("resume", {"vehicle_id": "ugv-1"})

    seen = [r.seq for r in backlog]
    while not tail.empty():
        seen.append(tail.get_nowait().seq)
    assert seen == list(range(1, len(seen) + 1))

    gap, records = world.coordinator.events_since(1)
    assert gap and len(records) == 50
    gap, _ = world.coordinator.events_since(records[0].seq)
    assert not gap
    snapshot = world.coordinator.snapshot()
    assert snapshot["seq"] == records[-1].seq


def test_concurrent_subscribers_see_identical_streams():
    world = ground_world()
    world.run(2)
    _, backlog_a, tail_a = world.coordinator.subscribe_events(0)
    _, backlog_b, tail_b = world.coordinator.subscribe_events(0)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(40)

    def docs(backlog, tail):
        out = [r.to_doc() for r in backlog]
        while not tail.empty():
            out.append(tail.get_nowait().to_doc())
        return out

    stream_a, stream_b = docs(backlog_a, tail_a), docs(backlog_b, tail_b)
    assert stream_a == stream_b and stream_a

    world.coordinator.unsubscribe_events(tail_b)
    world.ok("pause", {"vehicle_id": "ugv-1"})
    assert tail_b.empty() and not tail_a.empty()


# command queue


def test_command_errors_name_the_offending_field():
    world = ground_world()
    world.run(2)
    cases = [
        ("submit_operation", {"kind": "bulldoze"}, "kind"),
        ("submit_operation", {**LOAD_DUMP, "cycles": 0}, "cycles"),
        ("submit_operation", {**LOAD_DUMP, "load_zone": "quarry"}, "load_zone"),
        ("inject_obstacle", {"east": "here", "north": 0.0}, "east"),
        ("inject_obstacle", {"east": 500.0, "north": 0.0}, "position"),
        ("clear_obstacle", {"obstacle_id": "obs-99"}, "obstacle_id"),
        ("pause", {"vehicle_id": "ghost"}, "vehicle_id"),
        ("cancel_operation", {"operation_id": "op-99"}, "operation_id"),
        ("definitely_not_a_command", {}, "command"),
    ]
    for name, doc, field in cases:
        status, detail = world.command(name, doc)
        assert status == "error", (name, detail)
        assert detail["field"] == field
    assert world.coordinator.snapshot()["tasks"] == []


def test_cancel_fails_running_tasks_and_discards_queued_ones():
    world = ground_world()
    world.run(2)
    op_id = world.ok("submit_operation", LOAD_DUMP)["operation_id"]
    world.run(40)
    moving = world.vehicle("ugv-1").distance_traveled
    assert moving > 0.0

    result = world.ok("cancel_operation", {"operation_id": op_id})
    assert len(result["canceled_tasks"]) == 3
    transitions = [
        (e.payload["task_id"], e.payload["status"])
        for e in world.events("task_transition")
        if e.payload.get("status") in ("failed", "discarded")
    ]
    statuses = {status for _, status in transitions}
    assert statuses == {"failed", "discarded"}
    assert any(e.payload["operation_id"] == op_id for e in world.events("operation_done"))

    world.run(10)
    stopped = world.vehicle("ugv-1").distance_traveled
    world.run(20)
    assert world.vehicle("ugv-1").distance_traveled == stopped
    snapshot = world.coordinator.snapshot()
    remaining = {t["task_id"]: t["status"] for t in snapshot["tasks"]}
    assert all(status == "failed" for status in remaining.values())
    assert f"{op_id}-haul" in remaining


def test_pause_freezes_the_vehicle_and_resume_reissues_the_route():
    world = ground_world()
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(10)
    first_order = world.events("plan_issued")[-1].payload

    world.ok("pause", {"vehicle_id": "ugv-1"})
    world.run(5)
    frozen = world.vehicle("ugv-1").distance_traveled
    world.run(30)
    assert world.vehicle("ugv-1").distance_traveled == frozen
    halted = world.events("replan")[-1]
    assert halted.payload["status"] == "halted"
    assert halted.payload["reason"] == "paused"
    assert world.coordinator.snapshot()["paths"] == []

    world.ok("resume", {"vehicle_id": "ugv-1"})
    world.run(5)
    reissued = world.events("plan_issued")[-1].payload
    assert reissued["order_id"] == first_order["order_id"]
    assert reissued["update_id"] > first_order["update_id"]
    world.run(30)
    assert world.vehicle("ugv-1").distance_traveled > frozen


def test_update_ids_strictly_increase_per_order():
    world = ground_world()
    spy = LocalClient(world.broker, "spy")
    orders = spy.subscribe(topic_for("ugv-1", "order"))
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(10)
    route = world.events("plan_issued")[-1].payload["points"]
    person_report(world, segment_midpoint(route))
    world.run(10)
    world.ok("pause", {"vehicle_id": "ugv-1"})
    world.run(3)
    world.ok("resume", {"vehicle_id": "ugv-1"})
    world.run(10)

    history = {}
    for envelope in orders.drain():
        msg = from_doc(envelope.payload)
        assert isinstance(msg, OrderMsg)
        history.setdefault(msg.order_id, []).append(msg)
    assert history, "no orders observed on the bus"
    for order_id, msgs in history.items():
        updates = [m.update_id for m in msgs]
        assert updates == sorted(set(updates)), (order_id, updates)
        for msg in msgs:
            prefix = f"{order_id}-u{msg.update_id}-"
            assert all(n.node_id.startswith(prefix) for n in msg.nodes)
    assert any(len(msgs) >= 3 for msgs in history.values())


def test_repeat_submissions_make_independent_operations():
    world = ground_world()
    world.run(2)
    first = world.ok("submit_operation", LOAD_DUMP)
    second = world.ok("submit_operation", LOAD_DUMP)
    assert first["operation_id"] != second["operation_id"]
    assert not set(first["task_ids"]) & set(second["task_ids"])
    snapshot = world.coordinator.snapshot()
    assert len(snapshot["tasks"]) == 6


# robustness against hostile or stale traffic


def test_stale_and_unknown_state_messages_are_ignored():
    world = ground_world()
    world.run(2)
    rogue = LocalClient(world.broker, "rogue")

    # unknown vehicle: no record, no event
    rogue.publish(
        topic_for("ghost-1", "state"),
        to_doc(StateMsg(
            "ghost-1", enu_to_geodetic(SMALL_MAP.origin, EnuPoint(0.0, 10.0)),
            0.0, world.clock.timestamp_ms,
        )),
    )
    world.run(1)
    assert "ghost-1" not in world.coordinator.dispatcher.vehicles

    rogue.publish(
        topic_for("spoof-1", "connection"),
        to_doc(ConnectionMsg("spoof-1", "online", kind="ugv")),
        qos=1,
    )
    world.run(1)
    now = world.clock.timestamp_ms
    fresh = StateMsg(
        "spoof-1", enu_to_geodetic(SMALL_MAP.origin, EnuPoint(5.0, 5.0)), 0.0, now,
    )
    stale = StateMsg(
        "spoof-1", enu_to_geodetic(SMALL_MAP.origin, EnuPoint(-9.0, -9.0)), 0.0, now - 500,
    )
    rogue.publish(topic_for("spoof-1", "state"), to_doc(fresh))
    rogue.publish(topic_for("spoof-1", "state"), to_doc(stale))
    world.run(1)
    record = world.coordinator.dispatcher.vehicles["spoof-1"]
    assert record.pose.position.east == pytest.approx(5.0, abs=1e-6)
    poses = [
        e for e in world.events("vehicle_state")
        if e.payload["vehicle_id"] == "spoof-1" and "east" in e.payload
    ]
    assert len(poses) == 1

    # malformed payload on a state topic must not stop the loop
    rogue.publish(topic_for("spoof-1", "state"), {"op": "state", "vehicle_id": 7})
    world.run(2)
    assert world.coordinator.dispatcher.vehicles["spoof-1"].status == "idle"


def test_error_flags_take_the_vehicle_offline_until_reconnect():
    world = ground_world()
    world.run(2)
    world.ok("submit_operation", LOAD_DUMP)
    world.run(10)
    rogue = LocalClient(world.broker, "rogue")
    rogue.publish(
        topic_for("ugv-1", "state"),
        to_doc(StateMsg(
            "ugv-1", enu_to_geodetic(SMALL_MAP.origin, EnuPoint(10.0, 9.0)),
            0.0, world.clock.timestamp_ms + 10_000, errors=("actuator_fault",),
        )),
    )
    world.run(1)
    record = world.coordinator.dispatcher.vehicles["ugv-1"]
    assert record.status == "offline"
    failed = [e for e in world.events("task_transition") if e.payload["status"] == "failed"]
    assert failed and failed[-1].payload["reason"] == "actuator_fault"
    assert world.coordinator.snapshot()["paths"] == []

    world.sim.publish(
        topic_for("ugv-1", "connection"),
        to_doc(ConnectionMsg("ugv-1", "online", kind="ugv")),
        qos=1,
    )
    world.run(1)
    assert world.coordinator.dispatcher.vehicles["ugv-1"].status == "idle"
