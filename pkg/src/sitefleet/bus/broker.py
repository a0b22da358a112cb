"""Topic broker with QoS 0/1 delivery and a threaded TCP front end.

The routing core (`Broker`) is transport-free: sessions are objects with a
small sink interface, so in-process clients and TCP clients share the same
matching, fan-out, and retry bookkeeping. Delivery to one session is
serialized and QoS 1 runs stop-and-wait: the next message for a session is
not sent until the in-flight one is acknowledged or its retry budget is
spent. That is what makes per-publisher order hold even under injected
frame drops.

The optional `drop_hook(envelope, attempt) -> bool` suppresses individual
delivery attempts; it emulates a lossy link for fault-injection tests and
must not raise.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
from dataclasses import dataclass

from .errors import BusError, FrameError, ProtocolError, TopicError
from .framing import read_frame, write_frame
from .protocol import (
    QOS_AT_LEAST_ONCE,
    QOS_AT_MOST_ONCE,
    Envelope,
    connack_frame,
    deliver_frame,
    error_frame,
    puback_frame,
    suback_frame,
    unsuback_frame,
)
from .topics import topic_matches, validate_pattern

log = logging.getLogger(__name__)

DEFAULT_BUS_PORT = 8883
DEFAULT_ACK_TIMEOUT_MS = 1000
DEFAULT_MAX_RETRIES = 5

_CLOSE = object()


class BrokerStats:
    """Thread-safe routing counters."""

    _FIELDS = ("published", "deliveries", "redeliveries", "drops", "exhausted")

    def __init__(self) -> None:
        self._lock = threading.Lock()
        for name in self._FIELDS:
            setattr(self, name, 0)

    def bump(self, name: str) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + 1)

    def snapshot(self) -> dict:
        with self._lock:
            return {name: getattr(self, name) for name in self._FIELDS}


@dataclass(frozen=True)
class Delivery:
    delivery_id: int
    sub_id: int
    envelope: Envelope


@dataclass(frozen=True)
class _Subscription:
    session: object
    sub_id: int
    pattern: str


class Broker:
    """Transport-free routing core; attach sessions and feed it ops."""

    def __init__(self, ack_timeout_ms: int = DEFAULT_ACK_TIMEOUT_MS,
                 max_retries: int = DEFAULT_MAX_RETRIES, drop_hook=None):
        if ack_timeout_ms <= 0:
            raise BusError(f"ack_timeout_ms must be > 0, got {ack_timeout_ms}")
        if max_retries < 0:
            raise BusError(f"max_retries must be >= 0, got {max_retries}")
        self.ack_timeout_ms = ack_timeout_ms
        self.max_retries = max_retries
        self.drop_hook = drop_hook
        self.stats = BrokerStats()
        self._lock = threading.RLock()
        self._sessions: dict[int, object] = {}
        self._subs: list[_Subscription] = []
        self._session_counter = itertools.count(1)
        self._delivery_counter = itertools.count(1)

    def new_session_id(self) -> int:
        with self._lock:
            return next(self._session_counter)

    def attach(self, session) -> None:
        with self._lock:
            self._sessions[session.session_id] = session

    def detach(self, session) -> None:
        with self._lock:
            self._sessions.pop(session.session_id, None)
            self._subs = [s for s in self._subs if s.session is not session]

    def close_all(self) -> None:
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            self.detach(session)
            session.close()

    # ops shared by the TCP frame handler and in-process clients

    def op_subscribe(self, session, sub_id: int, pattern: str) -> None:
        validate_pattern(pattern)
        with self._lock:
            self._subs.append(_Subscription(session, sub_id, pattern))

    def op_unsubscribe(self, session, sub_id: int) -> None:
        with self._lock:
            self._subs = [
                s for s in self._subs
                if not (s.session is session and s.sub_id == sub_id)
            ]

    def op_publish(self, envelope: Envelope) -> int:
        """Fan out one envelope; returns the number of matched subscriptions."""
        with self._lock:
            targets = [
                (s, next(self._delivery_counter))
                for s in self._subs
                if topic_matches(s.pattern, envelope.topic)
            ]
        self.stats.bump("published")
        for sub, delivery_id in targets:
            sub.session.send_delivery(Delivery(delivery_id, sub.sub_id, envelope))
        return len(targets)

    def maybe_drop(self, envelope: Envelope, attempt: int) -> bool:
        hook = self.drop_hook
        return bool(hook(envelope, attempt)) if hook is not None else False

    # frame dispatch for socket sessions

    def handle_frame(self, session, frame) -> None:
        if not isinstance(frame, dict):
            session.send_control(error_frame("bad_frame", "frame must be an object"))
            return
        op = frame.get("op")
        if op == "hello":
            session.client_id = str(frame.get("client_id") or "")
            session.send_control(connack_frame(session.session_id))
        elif op == "subscribe":
            self._handle_subscribe(session, frame)
        elif op == "unsubscribe":
            sub_id = frame.get("sub_id")
            if isinstance(sub_id, int) and not isinstance(sub_id, bool):
                self.op_unsubscribe(session, sub_id)
                session.send_control(unsuback_frame(sub_id))
        elif op == "publish":
            self._handle_publish(session, frame)
        elif op == "ack":
            delivery_id = frame.get("delivery_id")
            if isinstance(delivery_id, int) and not isinstance(delivery_id, bool):
                session.on_ack(delivery_id)
        else:
            session.send_control(error_frame("bad_op", f"unknown op {op!r}"))

    def _handle_subscribe(self, session, frame) -> None:
        sub_id = frame.get("sub_id")
        ref = {"op": "subscribe", "sub_id": sub_id}
        if not isinstance(sub_id, int) or isinstance(sub_id, bool):
            session.send_control(error_frame("bad_subscribe", "sub_id must be an integer", ref))
            return
        try:
            self.op_subscribe(session, sub_id, frame.get("pattern"))
        except TopicError as exc:
            session.send_control(error_frame("bad_pattern", str(exc), ref))
            return
        session.send_control(suback_frame(sub_id))

    def _handle_publish(self, session, frame) -> None:
        doc = frame.get("envelope")
        try:
            envelope = Envelope.from_doc(doc)
        except (TopicError, ProtocolError) as exc:
            ref = {"op": "publish"}
            if isinstance(doc, dict):
                ref["topic"] = doc.get("topic")
                ref["message_id"] = doc.get("message_id")
            code = "bad_topic" if isinstance(exc, TopicError) else "bad_envelope"
            session.send_control(error_frame(code, str(exc), ref))
            return
        matched = self.op_publish(envelope)
        if envelope.qos == QOS_AT_LEAST_ONCE:
            session.send_control(puback_frame(envelope.topic, envelope.message_id, matched))


class _TcpSession:
    """One connected socket: a writer thread drains the outbox serially."""

    def __init__(self, broker: Broker, sock: socket.socket):
        self._broker = broker
        self._sock = sock
        self.session_id = broker.new_session_id()
        self.client_id = ""
        self.closed = False
        self._close_lock = threading.Lock()
        self._outbox: queue.SimpleQueue = queue.SimpleQueue()
        self._ack_lock = threading.Lock()
        self._ack_event = threading.Event()
        self._await_id = None
        self._writer = threading.Thread(
            target=self._write_loop, name=f"bus-writer-{self.session_id}", daemon=True
        )
        self._writer.start()

    def send_control(self, frame: dict) -> None:
        self._outbox.put(("control", frame))

    def send_delivery(self, delivery: Delivery) -> None:
        self._outbox.put(("delivery", delivery))

    def on_ack(self, delivery_id: int) -> None:
        with self._ack_lock:
            if self._await_id == delivery_id:
                self._ack_event.set()

    def close(self) -> None:
        with self._close_lock:
            if self.closed:
                return
            self.closed = True
        self._ack_event.set()
        self._outbox.put(_CLOSE)
        # Read side only: the writer drains queued frames (an error frame may
        # still be pending) and closes the socket once it hits the sentinel.
        try:
            self._sock.shutdown(socket.SHUT_RD)
        except OSError:
            pass

    def _write_loop(self) -> None:
        while True:
            item = self._outbox.get()
            if item is _CLOSE:
                break
            kind, body = item
            try:
                if kind == "control":
                    write_frame(self._sock, body)
                else:
                    self._run_delivery(body)
            except (OSError, FrameError):
                break
        try:
            self._sock.close()
        except OSError:
            pass

    def _run_delivery(self, delivery: Delivery) -> None:
        broker = self._broker
        envelope = delivery.envelope
        stats = broker.stats
        attempt = 0
        while not self.closed:
            outgoing = envelope.with_duplicate() if attempt else envelope
            dropped = broker.maybe_drop(envelope, attempt)
            if envelope.qos == QOS_AT_LEAST_ONCE:
                with self._ack_lock:
                    self._await_id = delivery.delivery_id
                    self._ack_event.clear()
            if dropped:
                stats.bump("drops")
            else:
                write_frame(
                    self._sock,
                    deliver_frame(delivery.delivery_id, delivery.sub_id, outgoing),
                )
                stats.bump("deliveries")
                if attempt:
                    stats.bump("redeliveries")
            if envelope.qos == QOS_AT_MOST_ONCE:
                return
            acked = self._ack_event.wait(broker.ack_timeout_ms / 1000.0)
            with self._ack_lock:
                self._await_id = None
            if acked and not self.closed:
                return
            attempt += 1
            if attempt > broker.max_retries:
                stats.bump("exhausted")
                log.warning(
                    "session %d: delivery %d on %r exhausted %d retries",
                    self.session_id, delivery.delivery_id, envelope.topic,
                    broker.max_retries,
                )
                return


class BrokerServer:
    """TCP listener wrapping a Broker; one reader thread per session."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, broker: Broker | None = None,
                 ack_timeout_ms: int = DEFAULT_ACK_TIMEOUT_MS,
                 max_retries: int = DEFAULT_MAX_RETRIES, drop_hook=None):
        self.broker = broker if broker is not None else Broker(
            ack_timeout_ms=ack_timeout_ms, max_retries=max_retries, drop_hook=drop_hook
        )
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._closed = False
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="bus-accept", daemon=True
        )
        self._accept_thread.start()
        log.info("bus broker listening on %s:%d", self.host, self.port)

    def _accept_loop(self) -> None:
        while True:
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            session = _TcpSession(self.broker, conn)
            self.broker.attach(session)
            threading.Thread(
                target=self._serve_session, args=(session,),
                name=f"bus-reader-{session.session_id}", daemon=True,
            ).start()

    def _serve_session(self, session: _TcpSession) -> None:
        while True:
            try:
                frame = read_frame(session._sock)
            except FrameError as exc:
                session.send_control(error_frame("bad_frame", str(exc)))
                break
            except OSError:
                break
            if frame is None:
                break
            try:
                self.broker.handle_frame(session, frame)
            except Exception:
                log.exception("session %d: frame handling failed", session.session_id)
                break
        self.broker.detach(session)
        session.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        self.broker.close_all()

    def __enter__(self) -> "BrokerServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
