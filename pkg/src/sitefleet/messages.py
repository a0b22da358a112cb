"""VDA5050-style message schemas for the fleet bus.

Payloads travel as schema-tagged documents: every encoded payload carries
a ``"type"`` field naming its schema, so a single decoder can dispatch.
Only the subset the demonstrator loop needs is modeled: orders with
optional node actions, vehicle state, connection announcements, and the
surveying drone's object reports.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import SiteFleetError
from .geo import GeoPoint
from .geolocate import ObjectReport

ORDER_ACTIONS = ("load", "dump", "hover")
CONNECTION_STATES = ("online", "offline", "broken")
TOPIC_KINDS = ("order", "state", "connection")
VEHICLE_KINDS = ("excavator", "ugv", "uav")
DEFAULT_MANUFACTURER = "sim"


class MessageError(SiteFleetError, ValueError):
    """Raised for schema violations in bus message payloads."""


def _require_str(doc, key, ctx):
    value = doc.get(key)
    if not isinstance(value, str):
        raise MessageError(f"{ctx}: field {key!r} must be a string, got {value!r}")
    return value


def _require_num(doc, key, ctx):
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MessageError(f"{ctx}: field {key!r} must be a number, got {value!r}")
    return value


def _require_int(doc, key, ctx):
    value = doc.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise MessageError(f"{ctx}: field {key!r} must be an integer, got {value!r}")
    return value


def _geo_to_doc(point: GeoPoint) -> dict:
    return {"lat": point.lat, "lon": point.lon, "alt": point.alt}


def _geo_from_doc(doc, ctx) -> GeoPoint:
    if not isinstance(doc, dict):
        raise MessageError(f"{ctx}: position must be an object, got {doc!r}")
    try:
        return GeoPoint(
            _require_num(doc, "lat", ctx),
            _require_num(doc, "lon", ctx),
            _require_num(doc, "alt", ctx),
        )
    except ValueError as exc:
        raise MessageError(f"{ctx}: {exc}") from exc


@dataclass(frozen=True)
class NodeAction:
    """Timed dwell a vehicle performs on reaching a node."""

    kind: str
    duration_s: float

    def __post_init__(self) -> None:
        if self.kind not in ORDER_ACTIONS:
            raise MessageError(f"unknown action kind {self.kind!r}")
        if not self.duration_s >= 0.0:
            raise MessageError(f"action duration must be >= 0, got {self.duration_s}")


@dataclass(frozen=True)
class OrderNode:
    node_id: str
    position: GeoPoint
    action: NodeAction | None = None

    def __post_init__(self) -> None:
        if not self.node_id:
            raise MessageError("order node id must be non-empty")


@dataclass(frozen=True)
class OrderEdge:
    edge_id: str
    start_node: str
    end_node: str


@dataclass(frozen=True)
class OrderMsg:
    """A route assignment: ordered nodes to visit plus the edges linking them.

    A node is complete once the vehicle is within arrival tolerance of it and
    its action, if any, has run to completion; ``StateMsg.last_node_id`` always
    names the most recently completed node.
    """

    order_id: str
    update_id: int
    nodes: tuple[OrderNode, ...]
    edges: tuple[OrderEdge, ...] = ()

    def __post_init__(self) -> None:
        if not self.order_id:
            raise MessageError("order_id must be non-empty")
        if self.update_id < 0:
            raise MessageError(f"update_id must be >= 0, got {self.update_id}")
        if not self.nodes:
            raise MessageError("order must contain at least one node")
        node_ids = [n.node_id for n in self.nodes]
        if len(set(node_ids)) != len(node_ids):
            raise MessageError("order node ids must be unique")
        declared = set(node_ids)
        for edge in self.edges:
            if edge.start_node not in declared or edge.end_node not in declared:
                raise MessageError(
                    f"edge {edge.edge_id!r} references undeclared node "
                    f"({edge.start_node!r} -> {edge.end_node!r})"
                )


@dataclass(frozen=True)
class StateMsg:
    """Periodic vehicle telemetry; timestamps are monotone per vehicle."""

    vehicle_id: str
    position: GeoPoint
    yaw: float
    timestamp: int
    last_node_id: str | None = None
    battery: float = 1.0
    errors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.vehicle_id:
            raise MessageError("vehicle_id must be non-empty")
        if not 0.0 <= self.battery <= 1.0:
            raise MessageError(f"battery outside [0,1]: {self.battery}")


@dataclass(frozen=True)
class ConnectionMsg:
    """Presence announcement; kind rides along so the coordinator can
    register fleet membership without out-of-band configuration."""

    vehicle_id: str
    connection_state: str
    kind: str | None = None

    def __post_init__(self) -> None:
        if not self.vehicle_id:
            raise MessageError("vehicle_id must be non-empty")
        if self.connection_state not in CONNECTION_STATES:
            raise MessageError(f"unknown connection state {self.connection_state!r}")
        if self.kind is not None and self.kind not in VEHICLE_KINDS:
            raise MessageError(f"unknown vehicle kind {self.kind!r}")


def to_doc(msg) -> dict:
    """Encode a message object as a schema-tagged document."""
    if isinstance(msg, OrderMsg):
        return {
            "type": "order",
            "order_id": msg.order_id,
            "update_id": msg.update_id,
            "nodes": [
                {
                    "node_id": n.node_id,
                    "position": _geo_to_doc(n.position),
                    "action": None
                    if n.action is None
                    else {"kind": n.action.kind, "duration_s": n.action.duration_s},
                }
                for n in msg.nodes
            ],
            "edges": [
                {"edge_id": e.edge_id, "start_node": e.start_node, "end_node": e.end_node}
                for e in msg.edges
            ],
        }
    if isinstance(msg, StateMsg):
        return {
            "type": "state",
            "vehicle_id": msg.vehicle_id,
            "position": _geo_to_doc(msg.position),
            "yaw": msg.yaw,
            "last_node_id": msg.last_node_id,
            "battery": msg.battery,
            "errors": list(msg.errors),
            "timestamp": msg.timestamp,
        }
    if isinstance(msg, ConnectionMsg):
        return {
            "type": "connection",
            "vehicle_id": msg.vehicle_id,
            "connection_state": msg.connection_state,
            "kind": msg.kind,
        }
    if isinstance(msg, ObjectReport):
        return {
            "type": "object_report",
            "cls": msg.cls,
            "position": _geo_to_doc(msg.position),
            "confidence": msg.confidence,
            "source_ts": msg.source_ts,
        }
    raise MessageError(f"cannot encode {type(msg).__name__}")


def _order_from_doc(doc) -> OrderMsg:
    nodes_doc = doc.get("nodes")
    if not isinstance(nodes_doc, list):
        raise MessageError("order: field 'nodes' must be a list")
    nodes = []
    for nd in nodes_doc:
        if not isinstance(nd, dict):
            raise MessageError(f"order: node entry must be an object, got {nd!r}")
        action_doc = nd.get("action")
        action = None
        if action_doc is not None:
            if not isinstance(action_doc, dict):
                raise MessageError(f"order: node action must be an object, got {action_doc!r}")
            action = NodeAction(
                _require_str(action_doc, "kind", "order action"),
                float(_require_num(action_doc, "duration_s", "order action")),
            )
        nodes.append(
            OrderNode(
                _require_str(nd, "node_id", "order node"),
                _geo_from_doc(nd.get("position"), "order node"),
                action,
            )
        )
    edges_doc = doc.get("edges", [])
    if not isinstance(edges_doc, list):
        raise MessageError("order: field 'edges' must be a list")
    edges = [
        OrderEdge(
            _require_str(ed, "edge_id", "order edge"),
            _require_str(ed, "start_node", "order edge"),
            _require_str(ed, "end_node", "order edge"),
        )
        for ed in edges_doc
    ]
    return OrderMsg(
        _require_str(doc, "order_id", "order"),
        _require_int(doc, "update_id", "order"),
        tuple(nodes),
        tuple(edges),
    )


def from_doc(doc) -> OrderMsg | StateMsg | ConnectionMsg | ObjectReport:
    """Decode a schema-tagged document into its message object."""
    if not isinstance(doc, dict):
        raise MessageError(f"payload must be an object, got {type(doc).__name__}")
    tag = doc.get("type")
    if tag == "order":
        return _order_from_doc(doc)
    if tag == "state":
        errors_doc = doc.get("errors", [])
        if not isinstance(errors_doc, list) or not all(isinstance(e, str) for e in errors_doc):
            raise MessageError("state: field 'errors' must be a list of strings")
        last_node = doc.get("last_node_id")
        if last_node is not None and not isinstance(last_node, str):
            raise MessageError(f"state: field 'last_node_id' must be a string, got {last_node!r}")
        return StateMsg(
            vehicle_id=_require_str(doc, "vehicle_id", "state"),
            position=_geo_from_doc(doc.get("position"), "state"),
            yaw=float(_require_num(doc, "yaw", "state")),
            timestamp=_require_int(doc, "timestamp", "state"),
            last_node_id=last_node,
            battery=float(_require_num(doc, "battery", "state")),
            errors=tuple(errors_doc),
        )
    if tag == "connection":
        kind = doc.get("kind")
        if kind is not None and not isinstance(kind, str):
            raise MessageError(f"connection: field 'kind' must be a string, got {kind!r}")
        return ConnectionMsg(
            _require_str(doc, "vehicle_id", "connection"),
            _require_str(doc, "connection_state", "connection"),
            kind,
        )
    if tag == "object_report":
        try:
            return ObjectReport(
                position=_geo_from_doc(doc.get("position"), "object_report"),
                cls=_require_str(doc, "cls", "object_report"),
                confidence=float(_require_num(doc, "confidence", "object_report")),
                source_ts=_require_int(doc, "source_ts", "object_report"),
            )
        except ValueError as exc:
            raise MessageError(f"object_report: {exc}") from exc
    raise MessageError(f"unknown payload type {tag!r}")


def _check_topic_part(value, what):
    if not value:
        raise MessageError(f"{what} must be non-empty")
    if any(c in value for c in "/+#"):
        raise MessageError(f"{what} must not contain '/', '+' or '#': {value!r}")


def topic_for(vehicle_id: str, kind: str, manufacturer: str = DEFAULT_MANUFACTURER) -> str:
    """Topic carrying a vehicle's order, state, or connection traffic."""
    _check_topic_part(vehicle_id, "vehicle id")
    _check_topic_part(manufacturer, "manufacturer")
    if kind not in TOPIC_KINDS:
        raise MessageError(f"unknown topic kind {kind!r}")
    return f"fleet/v1/{manufacturer}/{vehicle_id}/{kind}"


def report_topic(vehicle_id: str, manufacturer: str = DEFAULT_MANUFACTURER) -> str:
    """Topic carrying a drone's object reports (layout mirrors topic_for)."""
    _check_topic_part(vehicle_id, "vehicle id")
    _check_topic_part(manufacturer, "manufacturer")
    return f"fleet/v1/{manufacturer}/{vehicle_id}/report"


class OrderTracker:
    """Stale-order filter.

    A vehicle accepts an order iff its update_id exceeds the last accepted
    update_id for that order_id; replayed or reordered orders are rejected.
    """

    def __init__(self) -> None:
        self._last: dict[str, int] = {}

    def accept(self, order: OrderMsg) -> bool:
        last = self._last.get(order.order_id)
        if last is not None and order.update_id <= last:
            return False
        self._last[order.order_id] = order.update_id
        return True
