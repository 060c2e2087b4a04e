"""LCU publication semantics: snapshots, change-driven records, fan-out."""

from __future__ import annotations

import random
import threading
import time

import pytest

from beambench.conduit import Conduit, ConnectionPolicy, ObjectRef, format_ref
from beambench.errors import ControlError, ErrorCode
from beambench.kernel import ProcessContext, ProcessHost
from beambench.supervisory import LCU, Director, Record

from .helpers import CaptureDirector, capture_host, free_port


class TankLCU(LCU):
    """Toy LCU: a tank with level & valve; two mappers project slices of it."""

    def __init__(self, name="tank", ctx=None, params=None):
        super().__init__(name, ctx, params or {})
        self._state = {"level": 0.0, "valve": "shut", "secret": "internal"}
        self.add_mapper("level", lambda s: [("level", round(s["level"], 6))])
        self.add_mapper("valve", lambda s: [("valve", s["valve"])])


def hosted_lcu():
    """A tank LCU wired into a real process host with a working conduit."""
    host = ProcessHost("sup", "127.0.0.1", 0, worker_count=4)
    conduit = Conduit()
    ctx = ProcessContext("sup", host, conduit)
    lcu = TankLCU(ctx=ctx)
    host.add_object(lcu)
    host.start()
    return host, conduit, lcu


def entries_of(received):
    return [(r[2]["seq"], tuple(tuple(e) for e in r[2]["entries"])) for r in received]


# -- attach / detach --------------------------------------------------------------


def test_attach_delivers_snapshot_first():
    host, conduit, lcu = hosted_lcu()
    cap_host, capture, cap_ref = capture_host()
    try:
        lcu.evolve({"level": 4.2})
        lcu.attach_mapper("level", format_ref(cap_ref))
        got = capture.wait_count(1)
        assert dict(got[0][2]["entries"]) == {"level": 4.2}
        assert got[0][2]["seq"] == 1  # snapshot carries the current seq
        lcu.evolve({"level": 5.0})
        got = capture.wait_count(2)
        assert [g[2]["seq"] for g in got] == [1, 2]
    finally:
        cap_host.stop()
        conduit.close()
        host.stop()


def test_attach_unknown_mapper():
    host, conduit, lcu = hosted_lcu()
    try:
        with pytest.raises(ControlError) as err:
            lcu.attach_mapper("bogus", "ref://127.0.0.1:1/p/o")
        assert err.value.code == ErrorCode.NO_SUCH_OBJECT
    finally:
        conduit.close()
        host.stop()


def test_detach_stops_delivery_but_not_others():
    host, conduit, lcu = hosted_lcu()
    h1, c1, r1 = capture_host("cap1")
    h2, c2, r2 = capture_host("cap2")
    try:
        sub1 = lcu.attach_mapper("level", format_ref(r1))
        lcu.attach_mapper("level", format_ref(r2))
        c1.wait_count(1)
        c2.wait_count(1)
        lcu.detach(sub1)
        lcu.evolve({"level": 9.0})
        got2 = c2.wait_count(2)
        time.sleep(0.2)
        assert len(got2) == 2
        assert len(c1.received) == 1  # nothing after detach
        with pytest.raises(ControlError) as err:
            lcu.detach(sub1)
        assert err.value.code == ErrorCode.NO_SUCH_OBJECT
    finally:
        h1.stop()
        h2.stop()
        conduit.close()
        host.stop()


# -- evolve slicing -----------------------------------------------------------------


def test_evolve_publishes_only_changed_mappers():
    host, conduit, lcu = hosted_lcu()
    cap_l, capture_level, ref_l = capture_host("capl")
    cap_v, capture_valve, ref_v = capture_host("capv")
    try:
        lcu.attach_mapper("level", format_ref(ref_l))
        lcu.attach_mapper("valve", format_ref(ref_v))
        capture_level.wait_count(1)
        capture_valve.wait_count(1)
        lcu.evolve({"level": 1.0})  # valve projection unchanged
        got = capture_level.wait_count(2)
        time.sleep(0.15)
        assert len(got) == 2
        assert len(capture_valve.received) == 1
    finally:
        cap_l.stop()
        cap_v.stop()
        conduit.close()
        host.stop()


def test_evolve_with_no_projection_change_publishes_nothing():
    host, conduit, lcu = hosted_lcu()
    cap_host, capture, cap_ref = capture_host()
    try:
        lcu.attach_mapper("level", format_ref(cap_ref))
        capture.wait_count(1)
        lcu.evolve({"secret": "still internal"})  # invisible to both mappers
        lcu.evolve({"level": 0.0})  # same projected value
        time.sleep(0.2)
        assert len(capture.received) == 1
    finally:
        cap_host.stop()
        conduit.close()
        host.stop()


def oracle_publication_transcript(deltas):
    """Independent replay: apply deltas, project, emit on change."""
    state = {"level": 0.0, "valve": "shut", "secret": "internal"}
    last = {"level": (("level", 0.0),), "valve": (("valve", "shut"),)}
    seqs = {"level": 0, "valve": 0}
    transcript = []
    for delta in deltas:
        state = {**state, **delta}
        projections = {
            "level": (("level", round(state["level"], 6)),),
            "valve": (("valve", state["valve"]),),
        }
        for mapper in ("level", "valve"):
            if projections[mapper] != last[mapper]:
                last[mapper] = projections[mapper]
                seqs[mapper] += 1
                transcript.append((mapper, seqs[mapper], projections[mapper]))
    return transcript


def test_hundred_random_deltas_match_replay_oracle():
    rng = random.Random(11)
    deltas = []
    for _ in range(100):
        kind = rng.random()
        if kind < 0.4:
            deltas.append({"level": round(rng.uniform(0, 3), 1)})
        elif kind < 0.6:
            deltas.append({"valve": rng.choice(["open", "shut"])})
        elif kind < 0.8:
            deltas.append({"secret": rng.random()})  # never projected
        else:
            deltas.append({"level": round(rng.uniform(0, 3), 1),
                           "valve": rng.choice(["open", "shut"])})

    lcu = TankLCU()  # no ctx: observe via peek and seq bookkeeping
    actual = []

    original_publish = lcu._publish

    def spy(mapper, record):
        actual.append((mapper, record.seq, record.entries))
        original_publish(mapper, record)

    lcu._publish = spy
    for delta in deltas:
        lcu.evolve(delta)
    assert actual == oracle_publication_transcript(deltas)


# -- fan-out consistency ---------------------------------------------------------------


def test_two_subscribers_identical_transcripts_over_100_evolves():
    host, conduit, lcu = hosted_lcu()
    h1, c1, r1 = capture_host("cap1")
    h2, c2, r2 = capture_host("cap2")
    try:
        lcu.attach_mapper("level", format_ref(r1))
        lcu.attach_mapper("level", format_ref(r2))
        rng = random.Random(5)
        changed = 0
        for _ in range(100):
            before = lcu.peek("level").entries
            lcu.evolve({"level": round(rng.uniform(0, 10), 2)})
            if lcu.peek("level").entries != before:
                changed += 1
        want = changed + 1  # snapshot plus every change
        got1 = entries_of(c1.wait_count(want, timeout=15))
        got2 = entries_of(c2.wait_count(want, timeout=15))
        assert got1 == got2
        seqs = [s for s, _ in got1]
        assert seqs == list(range(seqs[0], seqs[0] + len(seqs)))  # gap-free
    finally:
        h1.stop()
        h2.stop()
        conduit.close()
        host.stop()


def test_dead_subscriber_detached_others_unaffected_one_alert():
    from beambench.registry import parse_config
    from beambench.services import EventsClient
    from beambench.sysman import start_hub

    from .helpers import free_port as next_port

    hub = start_hub(parse_config({"control": {"port": next_port()}, "processes": []}))
    host, conduit, lcu = hosted_lcu()
    lcu.ctx.events = EventsClient(conduit, hub.config.control_host,
                                  hub.config.control_port, "sup")
    h1, c1, r1 = capture_host("alive")
    dead_ref = ObjectRef("127.0.0.1", free_port(), "dead", "gone")
    try:
        lcu.attach_mapper("level", format_ref(r1))
        lcu.attach_mapper("level", format_ref(dead_ref))
        assert lcu.subscriber_count("level") == 2
        lcu.evolve({"level": 3.3})
        got = c1.wait_count(2)
        assert len(got) == 2  # healthy subscriber got snapshot + change
        deadline = time.monotonic() + 5
        while lcu.subscriber_count("level") > 1 and time.monotonic() < deadline:
            time.sleep(0.05)
        assert lcu.subscriber_count("level") == 1  # dead one dropped
        deadline = time.monotonic() + 5
        dropped = []
        while not dropped and time.monotonic() < deadline:
            dropped = [a for a in hub.alerts.list()
                       if a.event.name == "subscriber_dropped"]
            time.sleep(0.05)
        assert len(dropped) == 1
        assert dropped[0].event.payload["mapper"] == "level"
    finally:
        h1.stop()
        conduit.close()
        host.stop()
        hub.stop()


def test_zero_subscribers_evolve_is_noop_publish():
    lcu = TankLCU()
    lcu.evolve({"level": 7.7})  # must not raise
    assert lcu.peek("level").entries == (("level", 7.7),)


# -- insulation and idempotency -----------------------------------------------------------


def test_private_state_never_exposed_directly():
    lcu = TankLCU()
    surface = set(lcu.method_table())
    assert surface == {"update", "attach_mapper", "detach"}
    for record in (lcu.peek("level"), lcu.peek("valve")):
        assert "secret" not in dict(record.entries)


def test_update_idempotent_on_redelivery():
    class CountingDirector(Director):
        def __init__(self):
            super().__init__("d", None, {})
            self.handled = 0

        def handle_update(self, publisher, mapper, record):
            self.handled += 1

    d = CountingDirector()
    record = {"seq": 5, "entries": [["k", 1]]}
    d.update("pub", "m", record)
    d.update("pub", "m", record)  # redelivery ignored
    d.update("pub", "m", {"seq": 6, "entries": [["k", 2]]})
    d.update("other", "m", record)  # distinct publisher is fresh
    assert d.handled == 3


def test_determinism_same_deltas_same_transcript():
    def run():
        lcu = TankLCU()
        transcript = []
        lcu._publish = lambda mapper, record: transcript.append(
            (mapper, record.seq, record.entries))
        rng = random.Random(99)
        for _ in range(50):
            lcu.evolve({"level": round(rng.uniform(0, 2), 2),
                        "valve": rng.choice(["open", "shut"])})
        return transcript

    assert run() == run()


def test_lcu_subscribes_to_another_lcu():
    """LCU-to-LCU flow: one LCU's mapper drives another's state."""

    class MirrorLCU(LCU):
        def __init__(self, name, ctx):
            super().__init__(name, ctx, {})
            self._state = {"upstream_level": None}
            self.add_mapper("echo", lambda s: [("upstream_level", s.get("upstream_level"))])

        def handle_update(self, publisher, mapper, record):
            self.evolve({"upstream_level": record.as_dict().get("level")})

    host_a, conduit_a, tank = hosted_lcu()
    host_b = ProcessHost("sup_b", "127.0.0.1", 0, worker_count=4)
    conduit_b = Conduit()
    ctx_b = ProcessContext("sup_b", host_b, conduit_b)
    mirror = MirrorLCU("mirror", ctx_b)
    host_b.add_object(mirror)
    host_b.start()
    cap_host, capture, cap_ref = capture_host()
    try:
        mirror.attach_mapper("echo", format_ref(cap_ref))
        tank.attach_mapper("level", format_ref(host_b.ref_for("mirror")))
        tank.evolve({"level": 6.5})
        # echo snapshot, then the mirrored tank snapshot, then the update
        got = capture.wait_count(3)
        assert dict(got[1][2]["entries"]) == {"upstream_level": 0.0}
        assert dict(got[2][2]["entries"]) == {"upstream_level": 6.5}
    finally:
        cap_host.stop()
        conduit_b.close()
        host_b.stop()
        conduit_a.close()
        host_a.stop()
