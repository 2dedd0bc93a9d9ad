"""Controller workflow: registration, paths, admission, lifecycle."""

from __future__ import annotations

import itertools

import pytest

from qkdnet import messages
from qkdnet.controller import (
    AdmissionRejectedError,
    ConfigurationFailedError,
    DoubleCloseError,
    DuplicateRegistrationError,
    NodeDescriptor,
    NoFeasiblePathError,
    QoS,
    UnknownNodeError,
    UnknownSessionError,
)
from qkdnet.engine import SimulationEngine
from qkdnet.netmodel import load_scenario


@pytest.fixture()
def engine(madqci_model):
    return SimulationEngine(madqci_model, seed=7)


def test_all_nine_nodes_registered(engine):
    assert len(engine.controller.registered_nodes) == 9


def test_duplicate_registration_rejected(engine):
    desc = NodeDescriptor(node_id="Quijote", agent_address="agent://Quijote")
    with pytest.raises(DuplicateRegistrationError):
        engine.controller.register_node(desc)


def test_register_unknown_node_rejected(engine):
    desc = NodeDescriptor(node_id="Atlantis", agent_address="agent://Atlantis")
    with pytest.raises(UnknownNodeError):
        engine.controller.register_node(desc)


def test_qos_invariants():
    with pytest.raises(ValueError):
        QoS(min_bps=0.0)
    with pytest.raises(ValueError):
        QoS(min_bps=100.0, max_bps=50.0)
    with pytest.raises(ValueError):
        QoS(key_chunk_size=0)


# ---------------------------------------------------------------------------
# path computation


def brute_force_min_hops(engine, src, dst, min_bps):
    """Oracle: shortest feasible path length via exhaustive enumeration."""
    links = [
        l for l in engine.link_infos()
        if l.active and l.rate_bps >= min_bps and l.mode == "distilled"
    ]
    nodes = {n.id for n in engine.model.nodes}
    pair_ok = {frozenset((l.src_node, l.dst_node)) for l in links}
    best = None
    inner = sorted(nodes - {src, dst})
    for k in range(len(inner) + 1):
        if best is not None and k + 1 >= best:
            break
        for middle in itertools.permutations(inner, k):
            seq = (src, *middle, dst)
            if all(frozenset(p) in pair_ok for p in zip(seq, seq[1:])):
                best = len(seq) - 1
                break
    return best


def test_adjacent_single_hop(engine):
    paths = engine.controller.compute_path("Quintin", "Quijote", QoS())
    assert len(paths) == 1
    assert paths[0].nodes == ("Quintin", "Quijote")
    assert len(paths[0].links) == 1


def test_multihop_path_matches_brute_force(engine):
    qos = QoS(min_bps=256.0)
    paths = engine.controller.compute_path("Quintin", "Norte", qos)
    oracle = brute_force_min_hops(engine, "Quintin", "Norte", qos.min_bps)
    assert paths[0].hops == oracle == 3
    assert paths[0].nodes[0] == "Quintin"
    assert paths[0].nodes[-1] == "Norte"
    assert paths[0].nodes[1] == "Quijote"  # the only way out of Quintin


def test_every_node_pair_matches_brute_force(engine):
    qos = QoS(min_bps=64.0)
    names = sorted(n.id for n in engine.model.nodes)
    for src, dst in itertools.permutations(names, 2):
        oracle = brute_force_min_hops(engine, src, dst, qos.min_bps)
        paths = engine.controller.compute_path(src, dst, qos)
        assert paths[0].hops == oracle, (src, dst)


def test_min_bps_above_all_rates_is_capacity_failure(engine):
    with pytest.raises(NoFeasiblePathError) as err:
        engine.controller.compute_path("Quintin", "Norte", QoS(
            min_bps=10_000_000.0, max_bps=20_000_000.0,
        ))
    assert err.value.reason == "capacity"


def test_unregistered_node_rejected(engine):
    engine.controller._inventory.pop("Norte")
    with pytest.raises(UnknownNodeError):
        engine.controller.compute_path("Quintin", "Norte", QoS())


def test_diversity_paths_are_link_disjoint(engine):
    qos = QoS(min_bps=128.0, diversity=2)
    paths = engine.controller.compute_path("Distrito", "Norte", qos)
    assert len(paths) == 2
    assert set(paths[0].links).isdisjoint(paths[1].links)
    # the span carries two parallel QKD links, so both routes are 1 hop
    assert paths[0].hops == 1 and paths[1].hops == 1


def test_diversity_falls_back_to_distinct_routes(engine):
    # demand more than the parallel CV link can carry; the second path is
    # forced around the triangle
    qos = QoS(min_bps=4500.0, max_bps=9000.0, diversity=2)
    paths = engine.controller.compute_path("Distrito", "Norte", qos)
    assert set(paths[0].links).isdisjoint(paths[1].links)
    assert paths[0].nodes == ("Distrito", "Norte")
    assert paths[1].nodes == ("Distrito", "Concepcion", "Norte")


def test_diversity_impossible_for_leaf_node(engine):
    qos = QoS(min_bps=64.0, diversity=2)
    with pytest.raises(NoFeasiblePathError) as err:
        engine.controller.compute_path("Quinto", "Quevedo", qos)
    assert err.value.reason == "diversity"


# ---------------------------------------------------------------------------
# sessions


def test_open_close_accounting(engine):
    sid = engine.open_service("console-quintin", "console-quijote",
                              QoS(min_bps=256.0))
    session = engine.controller.sessions[sid]
    assert session.state == "active"
    for _ in range(10):
        engine.tick()
    record = engine.close_service(sid)
    assert record.delivered_bytes == session.qos.key_chunk_size * record.delivered_chunks
    assert record.delivered_bytes > 0
    # 32B payload + 32B MAC key per chunk per hop, both ends
    expected = record.delivered_chunks * 2 * (32 + 32)
    assert dict(record.consumed_by_link)[session.paths[0].links[0]] == expected


def test_zero_hop_same_node_session(engine):
    sid = engine.open_service("console-quijote", "enc-l1-quijote",
                              QoS(min_bps=512.0))
    session = engine.controller.sessions[sid]
    assert session.paths[0].hops == 0
    engine.tick()
    assert session.delivered_bytes > 0
    assert session.src_buffer == session.dst_buffer


def test_close_unknown_and_double(engine):
    with pytest.raises(UnknownSessionError):
        engine.close_service("nope")
    sid = engine.open_service("console-quintin", "console-quijote", QoS())
    engine.close_service(sid)
    with pytest.raises(DoubleCloseError):
        engine.close_service(sid)


def test_immediately_closed_session_releases_everything(engine):
    sid = engine.open_service("console-quintin", "console-quijote",
                              QoS(min_bps=256.0))
    record = engine.close_service(sid)
    assert record.delivered_bytes == 0
    assert engine.controller.reserved_bps == {}


def test_admission_saturation_rejects(engine):
    # Quinto-Quijano hop has a single link; saturate it
    rate = next(
        l.rate_bps for l in engine.link_infos()
        if l.link_id == "rm-quijano-quinto"
    )
    q = rate / 4.0
    sids = []
    for _ in range(4):
        sids.append(engine.open_service(
            "console-quinto", "console-quijano",
            QoS(min_bps=q, max_bps=2 * q),
        ))
    with pytest.raises(AdmissionRejectedError, match="admission_rejected"):
        engine.open_service("console-quinto", "console-quijano",
                            QoS(min_bps=q, max_bps=2 * q))
    # capacity frees on close
    engine.close_service(sids[0])
    engine.open_service("console-quinto", "console-quijano",
                        QoS(min_bps=q, max_bps=2 * q))


def test_admission_soundness_invariant(engine):
    qos = QoS(min_bps=900.0, max_bps=1800.0)
    for _ in range(3):
        engine.open_service("console-quintin", "console-norte", qos)
    rates = {l.link_id: l.rate_bps for l in engine.link_infos()}
    for link_id, reserved in engine.controller.reserved_bps.items():
        assert reserved <= rates[link_id] + 1e-6


def test_link_death_fails_sessions_within_one_cycle(engine):
    sid = engine.open_service("console-quintin", "console-norte",
                              QoS(min_bps=256.0))
    engine.tick()
    assert engine.controller.sessions[sid].state == "active"
    engine.set_link_active("rm-quintin-quijote", False)
    engine.tick()
    session = engine.controller.sessions[sid]
    assert session.state == "failed"
    assert "rm-quintin-quijote" in session.fail_reason
    assert engine.controller.reserved_bps == {}


def test_hop_config_wavelength_matches_assigned_channel(engine):
    engine.open_service("console-quintin", "console-quiron",
                        QoS(min_bps=128.0))
    configs = [
        m for m in engine.bus.log if m.kind == messages.KIND_CONFIG_HOP
    ]
    assert configs
    channel_of = {l.link_id: l.channel for l in engine.link_infos()}
    for msg in configs:
        assert int(msg.get("wavelength")) == channel_of[msg.get("link")]


def test_attenuation_mismatch_raises_alarm(engine):
    # lie about the expected attenuation by more than 1 dB
    engine.controller.open_connect(
        "console-quintin", "console-quijote", QoS(min_bps=128.0),
        link_loss=lambda link_id: engine.link_loss(link_id) + 2.5,
    )
    assert engine.controller.alarms
    alarm = engine.controller.alarms[0]
    expected = float(alarm.get("expected_attenuation_db"))
    actual = float(alarm.get("actual_attenuation_db"))
    assert abs(expected - actual) > 1.0


def test_within_tolerance_attenuation_no_alarm(engine):
    engine.controller.open_connect(
        "console-quintin", "console-quijote", QoS(min_bps=128.0),
        link_loss=lambda link_id: engine.link_loss(link_id) + 0.5,
    )
    assert not engine.controller.alarms


def test_forced_config_failure_names_node(engine):
    engine.agents["Quijote"].fail_next_config = True
    with pytest.raises(ConfigurationFailedError) as err:
        engine.open_service("console-quintin", "console-quijote",
                            QoS(min_bps=128.0))
    assert err.value.node_id in ("Quintin", "Quijote")
    assert engine.controller.reserved_bps == {}


def test_duplicate_message_delivery_is_idempotent(engine):
    engine.open_service("console-quintin", "console-quijote",
                        QoS(min_bps=128.0))
    config = next(
        m for m in engine.bus.log if m.kind == messages.KIND_CONFIG_HOP
    )
    assert engine.bus.redeliver(config) == "duplicate"


def test_snapshot_restore_reproduces_session_table(engine, madqci_model):
    engine.open_service("console-quintin", "console-norte", QoS(min_bps=256.0))
    sid2 = engine.open_service("console-quinto", "console-quevedo",
                               QoS(min_bps=128.0))
    for _ in range(5):
        engine.tick()
    engine.close_service(sid2)
    snap = engine.controller.network_status()
    saved = engine.controller.snapshot()

    restored = SimulationEngine(madqci_model, seed=7)
    restored.controller.restore(saved)
    # agents re-registered at engine construction; session tables must agree
    assert restored.controller.snapshot() == saved
    assert restored.controller.network_status()["sessions"] == snap["sessions"]


def test_network_status_shape(engine):
    status = engine.controller.network_status()
    assert len(status["nodes"]) == 9
    assert len(status["links"]) == len(engine.model.links) == 15
    assert status["sessions"] == []
    sid = engine.open_service("console-quintin", "console-quijote", QoS())
    status = engine.controller.network_status()
    assert status["sessions"][0]["session_id"] == sid
    assert status["sessions"][0]["state"] == "active"


def test_fresh_controller_status_empty():
    model = load_scenario("")
    engine = SimulationEngine(model, seed=1)
    status = engine.controller.network_status()
    assert status["nodes"] == [] and status["links"] == []
    assert status["sessions"] == []


def test_rate_drop_marks_degraded_without_preemption(engine):
    sid = engine.open_service("console-quintin", "console-norte",
                              QoS(min_bps=1024.0, max_bps=2048.0))
    engine.tick()
    session = engine.controller.sessions[sid]
    assert session.state == "active" and not session.degraded
    # shrink a traversed link below the reserved rate, but not to zero
    link_id = session.paths[0].links[0]
    engine.set_link_rate(link_id, 512.0)
    engine.tick()
    assert session.state == "active"  # never preempted
    assert session.degraded
