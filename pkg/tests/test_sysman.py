"""Start plan, state machine, phase-barrier launch, and termination watch."""

from __future__ import annotations

import threading
import time

import pytest

from beambench.errors import ControlError, ErrorCode
from beambench.registry import parse_config
from beambench.sysman import SystemManager, plan, start_hub
from beambench.services import AlertStore, EventStore
from beambench.registry import NameTable
from beambench.conduit import ObjectRef

from .helpers import FakeHandle, InProcFacility, demo_config_dict


def simple_config(categories):
    procs = [{"name": f"p{i}_{cat}", "category": cat, "port": 7200 + i}
             for i, cat in enumerate(categories)]
    return parse_config({"processes": procs})


# -- plan -------------------------------------------------------------------------


def test_plan_partitions_into_three_ordered_phases():
    config = simple_config(["fep", "fep", "supervisor", "gateway"])
    p = plan(config)
    assert p.phases == [["p0_fep", "p1_fep"], ["p2_supervisor"], ["p3_gateway"]]


def test_plan_no_supervisors_keeps_three_phases():
    config = simple_config(["fep", "gateway"])
    p = plan(config)
    assert p.phases == [["p0_fep"], [], ["p1_gateway"]]


def test_plan_within_phase_follows_file_order():
    config = simple_config(["gateway", "fep", "supervisor", "fep"])
    p = plan(config)
    assert p.phases[0] == ["p1_fep", "p3_fep"]  # file order among feps


def make_manager(config, spawn=None, restart=False):
    events = EventStore()
    alerts = AlertStore(events)
    names = NameTable()
    return SystemManager(config, names, events, alerts,
                         spawn=spawn or (lambda name: FakeHandle(name)),
                         restart=restart), events, alerts, names


# -- report / transitions ------------------------------------------------------------


def test_report_legal_transitions():
    manager, *_ = make_manager(simple_config(["fep"]))
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    manager.report("p0_fep", "stopped")
    assert manager.states()["p0_fep"] == "stopped"


def test_report_illegal_transition_rejected():
    manager, *_ = make_manager(simple_config(["fep"]))
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    with pytest.raises(ControlError) as err:
        manager.report("p0_fep", "starting")
    assert err.value.code == ErrorCode.BAD_ARGS


def test_report_unknown_process():
    manager, *_ = make_manager(simple_config(["fep"]))
    with pytest.raises(ControlError) as err:
        manager.report("ghost", "ready")
    assert err.value.code == ErrorCode.NO_SUCH_OBJECT


def test_heartbeat_is_ready_to_ready():
    manager, *_ = make_manager(simple_config(["fep"]))
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    first = manager.record("p0_fep").last_heartbeat
    time.sleep(0.02)
    manager.report("p0_fep", "ready")
    assert manager.record("p0_fep").last_heartbeat > first


# -- launch ---------------------------------------------------------------------------


class ScriptedSpawner:
    """Thread-'processes' that walk their states after a short delay."""

    def __init__(self, manager_box: dict, script: dict):
        self.manager_box = manager_box
        self.script = script
        self.spawned: list[tuple[str, float]] = []

    def __call__(self, name: str) -> FakeHandle:
        handle = FakeHandle(name)
        self.spawned.append((name, time.monotonic()))
        states = self.script.get(name, ["starting", "ready"])

        def run():
            manager = self.manager_box["m"]
            for state in states:
                time.sleep(0.03)
                try:
                    manager.report(name, state)
                except ControlError:
                    pass
                if state in ("failed", "stopped"):
                    handle.mark_exited(1)
                    return

        threading.Thread(target=run, daemon=True).start()
        return handle


def test_launch_phase_barrier_event_order():
    config = simple_config(["fep", "fep", "supervisor", "gateway"])
    box: dict = {}
    spawner = ScriptedSpawner(box, {})
    manager, events, alerts, _ = make_manager(config, spawn=spawner)
    box["m"] = manager
    manager.launch(ready_timeout=10)

    log = [(e.source, e.payload["state"]) for e in events.query(name="process_state")]
    fep_ready = [i for i, (s, st) in enumerate(log)
                 if s in ("p0_fep", "p1_fep") and st == "ready"]
    sup_starting = [i for i, (s, st) in enumerate(log)
                    if s == "p2_supervisor" and st == "starting"]
    gw_starting = [i for i, (s, st) in enumerate(log) if s == "p3_gateway" and st == "starting"]
    assert len(fep_ready) == 2 and sup_starting and gw_starting
    assert max(fep_ready) < min(sup_starting)
    sup_ready = [i for i, (s, st) in enumerate(log)
                 if s == "p2_supervisor" and st == "ready"]
    assert max(sup_ready) < min(gw_starting)


def test_launch_halts_when_fep_fails_during_boot():
    config = simple_config(["fep", "supervisor"])
    box: dict = {}
    spawner = ScriptedSpawner(box, {"p0_fep": ["starting", "failed"]})
    manager, events, alerts, _ = make_manager(config, spawn=spawner)
    box["m"] = manager
    with pytest.raises(ControlError) as err:
        manager.launch(ready_timeout=10)
    assert err.value.code == ErrorCode.APP_ERROR
    assert [n for n, _ in spawner.spawned] == ["p0_fep"]  # no supervisor spawned
    assert any(a.event.name == "launch_halted" for a in alerts.list())


def test_launch_empty_facility_acks_with_zero_events():
    config = parse_config({"processes": []})
    manager, events, *_ = make_manager(config)
    manager.launch()
    assert events.query(name="process_state") == []


# -- watch ------------------------------------------------------------------------------


def test_watch_detects_missed_heartbeats_and_drops_names():
    config = simple_config(["fep"])
    manager, events, alerts, names = make_manager(config)
    names.register("dev1", ObjectRef("127.0.0.1", 7333, "p0_fep", "dev1"))
    names.register("other", ObjectRef("127.0.0.1", 7334, "p_other", "other"))
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    manager.watch(heartbeat_period_ms=50, missed_limit=3)
    # no heartbeats arrive; failure within (limit+1) periods plus jitter
    deadline = time.monotonic() + 1.0
    while manager.states()["p0_fep"] != "failed" and time.monotonic() < deadline:
        time.sleep(0.01)
    assert manager.states()["p0_fep"] == "failed"
    failure_alerts = [a for a in alerts.list() if a.event.name == "unscheduled_termination"]
    assert len(failure_alerts) == 1
    assert names.names() == ["other"]
    manager.stop()


def test_watch_detects_os_exit_quickly():
    config = simple_config(["fep"])
    handle_box: dict = {}

    def spawn(name):
        handle = FakeHandle(name)
        handle_box[name] = handle
        return handle

    manager, events, alerts, _ = make_manager(config, spawn=spawn)
    manager._launch_one("p0_fep")
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    manager.watch(heartbeat_period_ms=100, missed_limit=3)
    killed_at = time.monotonic()
    handle_box["p0_fep"].mark_exited(9)
    deadline = time.monotonic() + 1.0
    while manager.states()["p0_fep"] != "failed" and time.monotonic() < deadline:
        time.sleep(0.005)
    latency = time.monotonic() - killed_at
    assert manager.states()["p0_fep"] == "failed"
    assert latency < 0.5  # well inside (limit+1) x period
    manager.stop()


def test_graceful_stop_raises_no_alert():
    config = simple_config(["fep"])
    manager, events, alerts, _ = make_manager(config)
    manager.report("p0_fep", "starting")
    manager.report("p0_fep", "ready")
    manager.watch(heartbeat_period_ms=50, missed_limit=3)
    manager.report("p0_fep", "stopped")
    time.sleep(0.3)
    assert manager.states()["p0_fep"] == "stopped"
    assert [a for a in alerts.list() if a.event.name == "unscheduled_termination"] == []
    manager.stop()


def test_healthy_run_zero_failure_alerts(tmp_path):
    facility = InProcFacility(tmp_path, demo_config_dict(heartbeat_ms=100))
    try:
        facility.launch()
        facility.hub.manager.watch(facility.config.heartbeat_ms, 3)
        time.sleep(2.0)  # ~20 heartbeat periods of steady state
        alerts = facility.hub.alerts.list()
        assert [a for a in alerts if a.event.name == "unscheduled_termination"] == []
        states = facility.hub.manager.states()
        assert all(s == "ready" for s in states.values())
    finally:
        facility.stop()


def test_restart_flag_relaunches_failed_process():
    config = simple_config(["fep"])
    box: dict = {}
    spawner = ScriptedSpawner(box, {})
    manager, events, alerts, _ = make_manager(config, spawn=spawner, restart=True)
    box["m"] = manager
    manager.launch(ready_timeout=5)
    assert manager.states()["p0_fep"] == "ready"
    manager.watch(heartbeat_period_ms=40, missed_limit=2)
    spawner.script["p0_fep"] = ["starting", "ready"]
    box_handle = spawner.spawned
    manager.record("p0_fep").handle.mark_exited(1)
    deadline = time.monotonic() + 3.0
    while time.monotonic() < deadline:
        if len(box_handle) >= 2 and manager.states()["p0_fep"] == "ready":
            break
        time.sleep(0.02)
    assert len(box_handle) >= 2
    assert manager.states()["p0_fep"] == "ready"
    manager.stop()
