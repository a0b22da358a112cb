"""Bus tests: framing, filter matching, QoS semantics, fault injection.

The matcher fuzz checks the routing predicate against an independent
regex-based reference. Fault-injection tests use a hash-keyed drop hook:
whether a given (topic, message_id, attempt) is dropped is a pure function
of its key, so runs are deterministic without coordinating RNG state
across broker threads.
"""

import contextlib
import hashlib
import json
import random
import re
import socket
import struct
import threading
import time

import pytest

from sitefleet.bus import (
    Broker,
    BrokerServer,
    BusClient,
    ConnectionClosedError,
    Envelope,
    FrameError,
    LocalClient,
    ProtocolError,
    TopicError,
    read_frame,
    topic_matches,
    validate_pattern,
    validate_topic,
    write_frame,
)
from sitefleet.messages import topic_for


@contextlib.contextmanager
def bus_server(**kwargs):
    server = BrokerServer(host="127.0.0.1", port=0, **kwargs)
    try:
        yield server
    finally:
        server.close()


def connect(server, client_id=""):
    return BusClient("127.0.0.1", server.port, client_id)


def collect(sub, count, timeout=10.0):
    out = []
    deadline = time.monotonic() + timeout
    while len(out) < count:
        remaining = deadline - time.monotonic()
        assert remaining > 0, f"collected only {len(out)} of {count}"
        out.append(sub.get(timeout=remaining))
    return out


def hash_drop(rate, salt=""):
    """Deterministic drop hook: decision is a pure function of the delivery key."""

    def hook(envelope, attempt):
        key = f"{salt}:{envelope.topic}:{envelope.message_id}:{attempt}".encode()
        digest = hashlib.md5(key).digest()
        return int.from_bytes(digest[:8], "big") / 2.0**64 < rate

    return hook


def reference_matches(pattern, topic):
    """Independent filter semantics via regex translation."""
    segments = pattern.split("/")
    if segments[-1] == "#":
        prefix = segments[:-1]
        if not prefix:
            return True
        body = "/".join("[^/]+" if s == "+" else re.escape(s) for s in prefix)
        return re.fullmatch(f"{body}(?:/.*)?", topic) is not None
    body = "/".join("[^/]+" if s == "+" else re.escape(s) for s in segments)
    return re.fullmatch(body, topic) is not None


# filter grammar


def test_filter_grammar_examples():
    assert topic_matches("fleet/v1/+/state", "fleet/v1/ugv1/state")
    assert not topic_matches("fleet/v1/+/state", "fleet/v1/ugv1/order")
    assert topic_matches("fleet/#", "fleet/v1/sim/ugv1/order")
    assert topic_matches("fleet/#", "fleet")
    assert topic_matches("#", "anything/at/all")
    assert not topic_matches("fleet/+", "fleet")
    with pytest.raises(TopicError):
        validate_pattern("fleet/#/state")
    with pytest.raises(TopicError):
        validate_pattern("fleet//state")
    with pytest.raises(TopicError):
        validate_pattern("a/b+")
    with pytest.raises(TopicError):
        validate_pattern("a/b#c")
    with pytest.raises(TopicError):
        validate_topic("fleet/+/state")
    with pytest.raises(TopicError):
        validate_topic("a//b")
    with pytest.raises(TopicError):
        validate_topic("")


def test_matcher_agrees_with_reference_oracle():
    rng = random.Random(20240817)
    atoms = ["a", "b", "site", "v1", "x9"]
    for _ in range(3000):
        topic = "/".join(rng.choice(atoms) for _ in range(rng.randint(1, 4)))
        segments = [rng.choice(atoms + ["+"]) for _ in range(rng.randint(1, 4))]
        if rng.random() < 0.35:
            segments.append("#")
        pattern = "/".join(segments)
        expected = reference_matches(pattern, topic)
        assert topic_matches(pattern, topic) == expected, (pattern, topic)


# wire framing


def test_frame_round_trip_and_clean_eof():
    a, b = socket.socketpair()
    doc = {"op": "x", "payload": {"s": "ünïcode", "v": [1, 2.5, None]}}
    write_frame(a, doc)
    write_frame(a, {"op": "y"})
    assert read_frame(b) == doc
    assert read_frame(b) == {"op": "y"}
    a.close()
    assert read_frame(b) is None
    b.close()


def test_frame_truncation_and_garbage_are_errors():
    a, b = socket.socketpair()
    a.sendall(struct.pack(">I", 0))
    with pytest.raises(FrameError):
        read_frame(b)
    a.sendall(struct.pack(">I", 1 << 31))
    with pytest.raises(FrameError):
        read_frame(b)
    a.close()
    b.close()

    a, b = socket.socketpair()
    a.sendall(struct.pack(">I", 3) + b"{{{")
    with pytest.raises(FrameError):
        read_frame(b)
    body = json.dumps({"op": "x"}).encode()
    a.sendall(struct.pack(">I", len(body) + 5) + body)
    a.close()
    with pytest.raises(FrameError):
        read_frame(b)
    b.close()


def test_envelope_validation_and_round_trip():
    with pytest.raises(TopicError):
        Envelope("a//b", 1, 0, 0, {})
    with pytest.raises(ProtocolError):
        Envelope("a/b", 1, 2, 0, {})
    with pytest.raises(ProtocolError):
        Envelope("a/b", True, 0, 0, {})
    with pytest.raises(ProtocolError):
        Envelope("a/b", -1, 0, 0, {})
    with pytest.raises(ProtocolError):
        Envelope("a/b", 1, 0, 0, "nope")
    env = Envelope("a/b", 1, 1, 5, {"k": 1})
    assert Envelope.from_doc(json.loads(json.dumps(env.to_doc()))) == env
    assert env.with_duplicate().duplicate


# TCP broker behavior


def test_publish_subscribe_preserves_fifo_order():
    with bus_server() as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            sub = consumer.subscribe("demo/stream")
            for i in range(100):
                producer.publish("demo/stream", {"i": i}, qos=0)
            got = collect(sub, 100)
            assert [e.payload["i"] for e in got] == list(range(100))
            assert [e.message_id for e in got] == list(range(1, 101))
            assert not any(e.duplicate for e in got)


def test_qos1_acked_delivery_is_seen_exactly_once():
    with bus_server(ack_timeout_ms=100) as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            sub = consumer.subscribe("demo/q1")
            producer.publish("demo/q1", {"v": 42}, qos=1)
            got = sub.get(timeout=5.0)
            assert got.payload == {"v": 42}
            assert got.qos == 1
            assert not got.duplicate
            with pytest.raises(TimeoutError):
                sub.get(timeout=0.4)


def test_publish_without_subscribers_succeeds():
    with bus_server() as server:
        with connect(server, "producer") as producer:
            producer.publish("demo/nobody", {"v": 1}, qos=1)
            snap = server.broker.stats.snapshot()
            assert snap["published"] == 1
            assert snap["deliveries"] == 0


def test_scripted_drop_redelivers_with_duplicate_flag():
    dropped = []

    def drop_first(envelope, attempt):
        if envelope.topic == "demo/lossy" and attempt == 0:
            dropped.append(envelope.message_id)
            return True
        return False

    with bus_server(ack_timeout_ms=50, drop_hook=drop_first) as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            sub = consumer.subscribe("demo/lossy")
            producer.publish("demo/lossy", {"v": 7}, qos=1)
            got = sub.get(timeout=5.0)
            assert got.duplicate is True
            assert got.payload == {"v": 7}
            assert dropped == [1]
            with pytest.raises(TimeoutError):
                sub.get(timeout=0.3)
            snap = server.broker.stats.snapshot()
            assert snap["drops"] == 1
            assert snap["redeliveries"] == 1
            assert snap["exhausted"] == 0


def test_wildcards_route_only_matching_topics():
    with bus_server() as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            state_sub = consumer.subscribe("fleet/v1/+/+/state")
            all_sub = consumer.subscribe("fleet/#")
            topics = [
                topic_for(vid, kind)
                for vid in ("ugv1", "exc1")
                for kind in ("state", "order", "connection")
            ]
            for topic in topics:
                producer.publish(topic, {"topic": topic}, qos=1)
            got_all = collect(all_sub, len(topics))
            assert [e.topic for e in got_all] == topics
            got_state = collect(state_sub, 2)
            expected_state = [t for t in topics if reference_matches("fleet/v1/+/+/state", t)]
            assert [e.topic for e in got_state] == expected_state
            with pytest.raises(TimeoutError):
                state_sub.get(timeout=0.2)


def test_malformed_topic_publish_gets_protocol_error_frame():
    with bus_server() as server:
        sock = socket.create_connection(("127.0.0.1", server.port))
        try:
            write_frame(sock, {"op": "hello", "client_id": "raw"})
            assert read_frame(sock)["op"] == "connack"
            write_frame(sock, {"op": "publish", "envelope": {
                "topic": "a//b", "message_id": 1, "qos": 0, "timestamp": 0, "payload": {}}})
            err = read_frame(sock)
            assert err["op"] == "error"
            assert err["code"] == "bad_topic"
            assert err["ref"]["topic"] == "a//b"
            write_frame(sock, {"op": "publish", "envelope": {
                "topic": "a/b", "message_id": 2, "qos": 1, "timestamp": 0, "payload": {}}})
            ack = read_frame(sock)
            assert ack["op"] == "puback"
            assert ack["matched"] == 0
        finally:
            sock.close()


def test_unparseable_frame_ends_the_session():
    with bus_server() as server:
        sock = socket.create_connection(("127.0.0.1", server.port))
        try:
            write_frame(sock, {"op": "hello", "client_id": "raw"})
            assert read_frame(sock)["op"] == "connack"
            sock.sendall(struct.pack(">I", 4) + b"!!!!")
            err = read_frame(sock)
            assert err["op"] == "error"
            assert err["code"] == "bad_frame"
            try:
                assert read_frame(sock) is None
            except OSError:
                pass
        finally:
            sock.close()


def test_invalid_pattern_subscription_raises():
    with bus_server() as server:
        with connect(server, "consumer") as consumer:
            with pytest.raises(ProtocolError):
                consumer.subscribe("fleet/#/state")
            sub = consumer.subscribe("fleet/#")
            assert sub.pattern == "fleet/#"


def test_unsubscribe_stops_delivery():
    with bus_server() as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            sub = consumer.subscribe("demo/u")
            producer.publish("demo/u", {"i": 1}, qos=1)
            assert sub.get(timeout=5.0).payload == {"i": 1}
            sub.unsubscribe()
            producer.publish("demo/u", {"i": 2}, qos=1)
            with pytest.raises(TimeoutError):
                sub.get(timeout=0.3)


def test_fanout_reaches_every_subscriber():
    with bus_server() as server:
        with connect(server, "c1") as c1, connect(server, "c2") as c2, \
                connect(server, "producer") as producer:
            s1 = c1.subscribe("demo/fan")
            s2 = c2.subscribe("demo/fan")
            producer.publish("demo/fan", {"v": 9}, qos=1)
            assert s1.get(timeout=5.0).payload == {"v": 9}
            assert s2.get(timeout=5.0).payload == {"v": 9}


def test_message_ids_increase_per_topic():
    with bus_server() as server:
        with connect(server, "producer") as producer:
            envs = [producer.publish(f"demo/t{i % 2}", {}, qos=0) for i in range(10)]
            for topic in ("demo/t0", "demo/t1"):
                assert [e.message_id for e in envs if e.topic == topic] == [1, 2, 3, 4, 5]


def test_closed_connection_raises():
    with bus_server() as server:
        client = connect(server, "c")
        sub = client.subscribe("demo/x")
        client.close()
        with pytest.raises(ConnectionClosedError):
            client.publish("demo/x", {})
        with pytest.raises(ConnectionClosedError):
            sub.get(timeout=2.0)


# QoS properties under injected loss


def test_qos1_under_drops_delivers_all_in_order_with_flags():
    drop = hash_drop(0.3, salt="qos1")
    count = 150
    with bus_server(ack_timeout_ms=15, max_retries=12, drop_hook=drop) as server:
        with connect(server, "consumer") as consumer, \
                connect(server, "pa") as pa, connect(server, "pb") as pb:
            sub = consumer.subscribe("pub/+")

            def run(client, topic):
                for i in range(count):
                    client.publish(topic, {"i": i}, qos=1)

            threads = [
                threading.Thread(target=run, args=(pa, "pub/a")),
                threading.Thread(target=run, args=(pb, "pub/b")),
            ]
            for t in threads:
                t.start()
            seen = {"pub/a": [], "pub/b": []}
            distinct = {"pub/a": set(), "pub/b": set()}
            deadline = time.monotonic() + 60.0
            while any(len(d) < count for d in distinct.values()):
                assert time.monotonic() < deadline, "deliveries stalled"
                env = sub.get(timeout=10.0)
                seen[env.topic].append(env)
                distinct[env.topic].add(env.message_id)
            for t in threads:
                t.join(timeout=10.0)

            for topic in ("pub/a", "pub/b"):
                mids = [e.message_id for e in seen[topic]]
                # stop-and-wait: arrivals never go backwards, even across retries
                assert mids == sorted(mids)
                assert distinct[topic] == set(range(1, count + 1))
                for prev, env in zip(seen[topic], seen[topic][1:]):
                    if env.message_id == prev.message_id:
                        assert env.duplicate
            assert any(e.duplicate for envs in seen.values() for e in envs)
            snap = server.broker.stats.snapshot()
            assert snap["exhausted"] == 0
            assert snap["drops"] > 0


def test_qos0_under_drops_loses_but_never_reorders():
    drop = hash_drop(0.3, salt="qos0")
    count = 200
    with bus_server(ack_timeout_ms=15, max_retries=12, drop_hook=drop) as server:
        with connect(server, "consumer") as consumer, connect(server, "producer") as producer:
            sub = consumer.subscribe("demo/lossy0")
            for i in range(count):
                producer.publish("demo/lossy0", {"i": i}, qos=0)
            producer.publish("demo/lossy0", {"done": True}, qos=1)
            got = []
            while True:
                env = sub.get(timeout=10.0)
                if env.payload.get("done"):
                    break
                got.append(env.message_id)
            probe = {
                mid: drop(Envelope("demo/lossy0", mid, 0, 0, {}), 0)
                for mid in range(1, count + 1)
            }
            expected = [mid for mid in range(1, count + 1) if not probe[mid]]
            assert got == expected
            assert 0 < len(got) < count


# in-process binding


def test_local_client_delivers_synchronously():
    broker = Broker()
    with LocalClient(broker, "a") as a, LocalClient(broker, "b") as b:
        seen = []
        a.subscribe("fleet/#", callback=seen.append)
        b.publish("fleet/v1/sim/ugv1/state", {"i": 1}, qos=1)
        assert len(seen) == 1
        assert seen[0].payload == {"i": 1}
        q = a.subscribe("fleet/v1/+/+/order")
        b.publish("fleet/v1/sim/ugv1/order", {"o": 1}, qos=0)
        assert [e.payload for e in q.drain()] == [{"o": 1}]
        with pytest.raises(TopicError):
            a.subscribe("fleet/#/state")
        with pytest.raises(TopicError):
            b.publish("a//b", {})


def test_local_drops_retry_inline():
    def drop_first(envelope, attempt):
        return attempt == 0

    broker = Broker(max_retries=5, drop_hook=drop_first)
    with LocalClient(broker, "a") as a, LocalClient(broker, "b") as b:
        q = a.subscribe("demo/x")
        b.publish("demo/x", {"v": 1}, qos=1)
        got = q.drain()
        assert len(got) == 1
        assert got[0].duplicate is True
        b.publish("demo/x", {"v": 2}, qos=0)
        assert q.drain() == []
        snap = broker.stats.snapshot()
        assert snap["drops"] == 2
        assert snap["redeliveries"] == 1
        assert snap["deliveries"] == 1


def test_local_and_tcp_sessions_share_one_broker():
    core = Broker()
    with bus_server(broker=core) as server:
        with LocalClient(core, "local") as local, connect(server, "remote") as remote:
            local_q = local.subscribe("demo/bridge")
            remote_q = remote.subscribe("demo/bridge")
            remote.publish("demo/bridge", {"from": "tcp"}, qos=1)
            got_local = []
            deadline = time.monotonic() + 5.0
            while not got_local:
                assert time.monotonic() < deadline
                got_local = local_q.drain()
                time.sleep(0.01)
            assert got_local[0].payload == {"from": "tcp"}
            local.publish("demo/bridge", {"from": "local"}, qos=1)
            payloads = [e.payload for e in collect(remote_q, 2)]
            assert {"from": "tcp"} in payloads
            assert {"from": "local"} in payloads
