"""Logically centralized controller for end-to-end key delivery services.

The controller keeps the authoritative session table: it admits QoS
requests, computes relay paths over the live QKD links, reserves capacity,
and commands the per-node agents to configure each hop (wavelength,
expected attenuation, key pool binding). All state transitions run on a
single logical event loop; agents interact with it only through bus
messages, which are deduplicated by message id so redelivery is harmless.

Path metric: fewest hops among capacity-feasible paths, tie-broken by the
largest bottleneck residual rate, then lexicographic node sequence. A QoS
request with diversity=2 is served by two link-disjoint paths whose
delivered streams the endpoints XOR together.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from . import kernels, messages
from .netmodel import NetworkModel
from .qkdsim import derive_seed


# Headroom comparisons tolerate float noise from repeated reservation
# arithmetic; a millionth of a bit per second is far below any real rate.
EPS_BPS = 1e-6


class ControllerError(Exception):
    pass


class UnknownNodeError(ControllerError):
    pass


class DuplicateRegistrationError(ControllerError):
    pass


class UnknownAppError(ControllerError):
    pass


class UnknownSessionError(ControllerError):
    pass


class DoubleCloseError(ControllerError):
    pass


class NoFeasiblePathError(ControllerError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(
            f"no_feasible_path ({reason})" + (f": {detail}" if detail else "")
        )
        self.reason = reason  # disconnected | capacity | diversity


class AdmissionRejectedError(ControllerError):
    pass


class ConfigurationFailedError(ControllerError):
    def __init__(self, node_id: str, detail: str = ""):
        super().__init__(f"configuration_failed({node_id}) {detail}".rstrip())
        self.node_id = node_id


@dataclass(frozen=True)
class QoS:
    key_chunk_size: int = 32
    min_bps: float = 256.0
    max_bps: float = 1024.0
    priority: int = 0
    timeout_ms: int = 5000
    ttl_s: int = 3600
    diversity: int = 1
    mode: str = "distilled"

    def __post_init__(self):
        if self.key_chunk_size <= 0:
            raise ValueError("key_chunk_size must be > 0")
        if not 0 < self.min_bps <= self.max_bps:
            raise ValueError("requires 0 < min_bps <= max_bps")
        if self.diversity not in (1, 2):
            raise ValueError("diversity must be 1 or 2")
        if self.mode not in ("distilled", "raw"):
            raise ValueError("mode must be distilled or raw")


@dataclass(frozen=True)
class LinkInfo:
    link_id: str
    src_node: str
    dst_node: str
    vendor: str
    mode: str
    rate_bps: float
    qber: float
    channel: Optional[int]
    loss_db: float
    active: bool

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset((self.src_node, self.dst_node))


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    agent_address: str
    modules: tuple[str, ...] = ()
    links: tuple[str, ...] = ()
    apps: tuple[str, ...] = ()
    pool_levels: tuple[tuple[str, int], ...] = ()
    interfaces: tuple[str, ...] = ("004", "014")


@dataclass(frozen=True)
class HopConfig:
    node: str
    peer: str
    link_id: str
    wavelength: Optional[int]
    expected_attenuation_db: float
    pool_vendor: str
    pool_mode: str


@dataclass(frozen=True)
class PathPlan:
    nodes: tuple[str, ...]
    links: tuple[str, ...]  # one per hop

    @property
    def hops(self) -> int:
        return len(self.links)


@dataclass
class Session:
    session_id: str
    src_app: str
    dst_app: str
    src_node: str
    dst_node: str
    qos: QoS
    paths: tuple[PathPlan, ...]
    stream_tags: tuple[str, ...]
    state: str = "requested"  # requested|configured|active|closed|failed
    degraded: bool = False
    opened_tick: int = 0
    closed_tick: Optional[int] = None
    delivered_chunks: int = 0
    delivered_bytes: int = 0
    consumed_by_link: dict[str, int] = field(default_factory=dict)
    src_buffer: list[bytes] = field(default_factory=list)
    dst_buffer: list[bytes] = field(default_factory=list)
    fail_reason: str = ""

    def meta(self) -> dict:
        return {
            "session_id": self.session_id,
            "src_app": self.src_app,
            "dst_app": self.dst_app,
            "qos": self.qos,
            "paths": self.paths,
            "state": self.state,
            "degraded": self.degraded,
            "opened_tick": self.opened_tick,
            "closed_tick": self.closed_tick,
            "delivered_chunks": self.delivered_chunks,
            "delivered_bytes": self.delivered_bytes,
        }


@dataclass(frozen=True)
class ClosingRecord:
    session_id: str
    delivered_chunks: int
    delivered_bytes: int
    consumed_by_link: tuple[tuple[str, int], ...]
    opened_tick: int
    closed_tick: int


class Controller:
    def __init__(self, model: NetworkModel, bus: messages.MessageBus,
                 link_provider: Callable[[], Sequence[LinkInfo]],
                 seed: int = 0,
                 pool_provider: Optional[Callable[[], Mapping[str, int]]] = None):
        self.model = model
        self.bus = bus
        self._links = link_provider
        self._pools = pool_provider or (lambda: {})
        self._inventory: dict[str, NodeDescriptor] = {}
        self.sessions: dict[str, Session] = {}
        self.reserved_bps: dict[str, float] = {}
        self.alarms: list[messages.Message] = []
        self._seen_msg_ids: set[str] = set()
        self._id_seed = derive_seed(seed, "controller-ids")
        self._id_counter = 0
        self.tick = 0
        bus.subscribe("controller", self.handle_message)

    # -- identity helpers

    def _next_session_id(self) -> str:
        raw = kernels.fill_keystream(self._id_seed, self._id_counter * 2, 16)
        self._id_counter += 1
        return str(uuid.UUID(bytes=raw))

    # -- message plane

    def handle_message(self, message: messages.Message):
        msg_id = message.get("msg_id")
        if msg_id in self._seen_msg_ids:
            return "duplicate"
        self._seen_msg_ids.add(msg_id)
        if message.kind == messages.KIND_POOL_REPORT:
            return "ok"
        if message.kind == messages.KIND_ALARM:
            self.alarms.append(message)
            return "ok"
        if message.kind == messages.KIND_REGISTER:
            return "ok"
        return "ignored"

    # -- registration

    def register_node(self, descriptor: NodeDescriptor) -> str:
        if not self.model.has_node(descriptor.node_id):
            raise UnknownNodeError(
                f"node '{descriptor.node_id}' is not part of the scenario"
            )
        if descriptor.node_id in self._inventory:
            raise DuplicateRegistrationError(
                f"node '{descriptor.node_id}' already registered"
            )
        self._inventory[descriptor.node_id] = descriptor
        self.bus.send("controller", messages.KIND_REGISTER, {
            "node": descriptor.node_id,
            "agent": descriptor.agent_address,
            "modules": ",".join(descriptor.modules),
            "links": ",".join(descriptor.links),
            "apps": ",".join(descriptor.apps),
        })
        return "ack"

    @property
    def registered_nodes(self) -> tuple[str, ...]:
        return tuple(sorted(self._inventory))

    def descriptor(self, node_id: str) -> NodeDescriptor:
        try:
            return self._inventory[node_id]
        except KeyError:
            raise UnknownNodeError(f"node '{node_id}' not registered") from None

    # -- capacity bookkeeping

    def residual_bps(self, link: LinkInfo) -> float:
        return link.rate_bps - self.reserved_bps.get(link.link_id, 0.0)

    def _usable_links(self, mode: str = "distilled"
                      ) -> dict[frozenset[str], list[LinkInfo]]:
        table: dict[frozenset[str], list[LinkInfo]] = {}
        for link in self._links():
            if not link.active or link.rate_bps <= 0 or link.mode != mode:
                continue
            table.setdefault(link.nodes, []).append(link)
        for group in table.values():
            group.sort(key=lambda l: l.link_id)
        return table

    # -- path computation

    def compute_path(self, src_node: str, dst_node: str, qos: QoS
                     ) -> tuple[PathPlan, ...]:
        """1..k node paths, each hop bound to a live link with headroom."""
        for node in (src_node, dst_node):
            if node not in self._inventory:
                raise UnknownNodeError(f"node '{node}' not registered")
        if src_node == dst_node:
            return (PathPlan(nodes=(src_node,), links=()),)

        table = self._usable_links(qos.mode)
        adjacency: dict[str, set[str]] = {}
        for pair in table:
            a, b = sorted(pair)
            adjacency.setdefault(a, set()).add(b)
            adjacency.setdefault(b, set()).add(a)

        node_paths: list[tuple[str, ...]] = []

        def walk(node: str, seen: list[str]):
            if node == dst_node:
                node_paths.append(tuple(seen))
                return
            for nxt in sorted(adjacency.get(node, ())):
                if nxt in seen:
                    continue
                seen.append(nxt)
                walk(nxt, seen)
                seen.pop()

        walk(src_node, [src_node])
        if qos.mode == "raw":
            # Raw pools are correlated, not identical, so they cannot be
            # relayed; raw services only run between adjacent nodes.
            node_paths = [p for p in node_paths if len(p) == 2]
        if not node_paths:
            raise NoFeasiblePathError(
                "disconnected",
                f"no live QKD links connect '{src_node}' to '{dst_node}'",
            )

        def plan_for(nodes: tuple[str, ...], excluded: frozenset[str]
                     ) -> Optional[tuple[PathPlan, float]]:
            links: list[str] = []
            bottleneck = float("inf")
            for u, v in zip(nodes, nodes[1:]):
                candidates = [
                    l for l in table.get(frozenset((u, v)), ())
                    if l.link_id not in excluded
                    and self.residual_bps(l) >= qos.min_bps - EPS_BPS
                ]
                if not candidates:
                    return None
                best = max(candidates,
                           key=lambda l: (self.residual_bps(l), l.link_id))
                links.append(best.link_id)
                bottleneck = min(bottleneck, self.residual_bps(best))
            return PathPlan(nodes=nodes, links=tuple(links)), bottleneck

        scored: list[tuple[int, float, tuple[str, ...], PathPlan]] = []
        for nodes in node_paths:
            plan = plan_for(nodes, frozenset())
            if plan is None:
                continue
            path, bottleneck = plan
            scored.append((path.hops, -bottleneck, nodes, path))
        if not scored:
            raise NoFeasiblePathError(
                "capacity",
                f"no path from '{src_node}' to '{dst_node}' has "
                f"{qos.min_bps:g} b/s of residual capacity on every hop",
            )
        scored.sort(key=lambda item: item[:3])

        if qos.diversity == 1:
            return (scored[0][3],)

        for _, _, _, first in scored:
            second = None
            best_key = None
            for nodes in node_paths:
                plan = plan_for(nodes, frozenset(first.links))
                if plan is None:
                    continue
                path, bottleneck = plan
                key = (path.hops, -bottleneck, nodes)
                if best_key is None or key < best_key:
                    best_key = key
                    second = path
            if second is not None:
                return (first, second)
        raise NoFeasiblePathError(
            "diversity",
            "no two link-disjoint feasible paths exist for this request",
        )

    # -- service lifecycle

    def open_connect(self, src_app: str, dst_app: str, qos: QoS,
                     link_loss: Optional[Callable[[str], float]] = None) -> str:
        if not self.model.has_app(src_app):
            raise UnknownAppError(f"unknown app '{src_app}'")
        if not self.model.has_app(dst_app):
            raise UnknownAppError(f"unknown app '{dst_app}'")
        src_node = self.model.app(src_app).node
        dst_node = self.model.app(dst_app).node

        try:
            paths = self.compute_path(src_node, dst_node, qos)
        except NoFeasiblePathError as exc:
            if exc.reason == "capacity":
                raise AdmissionRejectedError(
                    f"admission_rejected: {exc}"
                ) from None
            raise

        session_id = self._next_session_id()
        session = Session(
            session_id=session_id,
            src_app=src_app,
            dst_app=dst_app,
            src_node=src_node,
            dst_node=dst_node,
            qos=qos,
            paths=paths,
            stream_tags=tuple(
                f"{session_id}:path{i}" for i in range(len(paths))
            ),
            opened_tick=self.tick,
        )

        for path in paths:
            for link_id in path.links:
                self.reserved_bps[link_id] = (
                    self.reserved_bps.get(link_id, 0.0) + qos.min_bps
                )
        session.state = "configured"

        links_by_id = {l.link_id: l for l in self._links()}
        try:
            for path in paths:
                for hop_index, link_id in enumerate(path.links):
                    link = links_by_id[link_id]
                    u, v = path.nodes[hop_index], path.nodes[hop_index + 1]
                    loss = link_loss(link_id) if link_loss else link.loss_db
                    for node, peer in ((u, v), (v, u)):
                        body = {
                            "session": session_id,
                            "node": node,
                            "peer": peer,
                            "link": link_id,
                            "hop": hop_index,
                            "wavelength": link.channel if link.channel is not None else "",
                            "expected_attenuation_db": f"{loss:.3f}",
                            "pool_vendor": link.vendor,
                            "pool_mode": link.mode,
                        }
                        reply = self.bus.send(
                            f"agent://{node}", messages.KIND_CONFIG_HOP, body
                        )
                        if reply not in ("ok", "alarm", "duplicate", None):
                            raise ConfigurationFailedError(node, str(reply))
        except ConfigurationFailedError:
            self._release(session)
            session.state = "failed"
            session.fail_reason = "configuration_failed"
            self.sessions[session_id] = session
            raise

        session.state = "active"
        self.sessions[session_id] = session
        self.bus.send("controller", messages.KIND_SESSION_CMD, {
            "cmd": "open",
            "session": session_id,
            "src": src_app,
            "dst": dst_app,
            "paths": ";".join("-".join(p.nodes) for p in paths),
            "links": ";".join(",".join(p.links) for p in paths),
            "min_bps": f"{qos.min_bps:g}",
            "tick": self.tick,
        })
        return session_id

    def _release(self, session: Session) -> None:
        for path in session.paths:
            for link_id in path.links:
                remaining = self.reserved_bps.get(link_id, 0.0) - session.qos.min_bps
                if remaining > 1e-9:
                    self.reserved_bps[link_id] = remaining
                else:
                    self.reserved_bps.pop(link_id, None)

    def close(self, session_id: str) -> ClosingRecord:
        session = self.sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown session '{session_id}'")
        if session.state == "closed":
            raise DoubleCloseError(f"session '{session_id}' already closed")
        if session.state in ("active", "configured", "degraded"):
            self._release(session)
        session.state = "closed"
        session.closed_tick = self.tick
        session.src_buffer.clear()
        session.dst_buffer.clear()
        record = ClosingRecord(
            session_id=session_id,
            delivered_chunks=session.delivered_chunks,
            delivered_bytes=session.delivered_bytes,
            consumed_by_link=tuple(sorted(session.consumed_by_link.items())),
            opened_tick=session.opened_tick,
            closed_tick=session.closed_tick,
        )
        self.bus.send("controller", messages.KIND_SESSION_CMD, {
            "cmd": "close",
            "session": session_id,
            "delivered_bytes": record.delivered_bytes,
            "delivered_chunks": record.delivered_chunks,
            "consumed": ",".join(
                f"{k}:{v}" for k, v in record.consumed_by_link
            ),
            "opened_tick": record.opened_tick,
            "closed_tick": record.closed_tick,
            "tick": self.tick,
        })
        return record

    def fail_session(self, session: Session, reason: str) -> None:
        if session.state in ("closed", "failed"):
            return
        self._release(session)
        session.state = "failed"
        session.fail_reason = reason
        self.bus.send("controller", messages.KIND_SESSION_CMD, {
            "cmd": "fail",
            "session": session.session_id,
            "reason": reason,
            "tick": self.tick,
        })

    # -- periodic control

    def control_cycle(self, tick: int) -> None:
        """Detect dead or shrunken links and transition affected sessions."""
        self.tick = tick
        links = {l.link_id: l for l in self._links()}
        for session in sorted(self.sessions.values(),
                              key=lambda s: s.session_id):
            if session.state != "active":
                continue
            for path in session.paths:
                for link_id in path.links:
                    link = links.get(link_id)
                    if link is None or not link.active or link.rate_bps <= 0:
                        self.fail_session(session, f"link_down:{link_id}")
                        break
                    if self.reserved_bps.get(link_id, 0.0) > link.rate_bps + 1e-9:
                        session.degraded = True
                if session.state != "active":
                    break

    # -- telemetry

    def network_status(self) -> dict:
        links = sorted(self._links(), key=lambda l: l.link_id)
        return {
            "tick": self.tick,
            "nodes": list(self.registered_nodes),
            "links": [
                {
                    "link_id": l.link_id,
                    "nodes": sorted(l.nodes),
                    "rate_bps": round(l.rate_bps, 3),
                    "qber": round(l.qber, 6),
                    "mode": l.mode,
                    "channel": l.channel,
                    "active": l.active,
                    "reserved_bps": round(self.reserved_bps.get(l.link_id, 0.0), 3),
                }
                for l in links
            ],
            "sessions": [
                {
                    "session_id": s.session_id,
                    "state": s.state,
                    "degraded": s.degraded,
                    "src_app": s.src_app,
                    "dst_app": s.dst_app,
                    "paths": ["-".join(p.nodes) for p in s.paths],
                    "delivered_bytes": s.delivered_bytes,
                    "delivered_chunks": s.delivered_chunks,
                }
                for s in sorted(self.sessions.values(), key=lambda s: s.session_id)
            ],
            "pools": dict(sorted(self._pools().items())),
        }

    # -- recovery

    def snapshot(self) -> dict:
        return {
            "tick": self.tick,
            "id_counter": self._id_counter,
            "reserved_bps": dict(self.reserved_bps),
            "sessions": [
                {
                    "session_id": s.session_id,
                    "src_app": s.src_app,
                    "dst_app": s.dst_app,
                    "src_node": s.src_node,
                    "dst_node": s.dst_node,
                    "qos": s.qos.__dict__ | {},
                    "paths": [
                        {"nodes": list(p.nodes), "links": list(p.links)}
                        for p in s.paths
                    ],
                    "stream_tags": list(s.stream_tags),
                    "state": s.state,
                    "degraded": s.degraded,
                    "opened_tick": s.opened_tick,
                    "closed_tick": s.closed_tick,
                    "delivered_chunks": s.delivered_chunks,
                    "delivered_bytes": s.delivered_bytes,
                    "consumed_by_link": dict(s.consumed_by_link),
                }
                for s in sorted(self.sessions.values(), key=lambda s: s.session_id)
            ],
        }

    def restore(self, snapshot: Mapping) -> None:
        """Rebuild the session table from a status snapshot.

        Agent re-registration still has to happen separately; until it does
        the controller will not admit new sessions on the restored nodes.
        """
        self.tick = snapshot["tick"]
        self._id_counter = snapshot["id_counter"]
        self.reserved_bps = dict(snapshot["reserved_bps"])
        self.sessions = {}
        for meta in snapshot["sessions"]:
            session = Session(
                session_id=meta["session_id"],
                src_app=meta["src_app"],
                dst_app=meta["dst_app"],
                src_node=meta["src_node"],
                dst_node=meta["dst_node"],
                qos=QoS(**meta["qos"]),
                paths=tuple(
                    PathPlan(nodes=tuple(p["nodes"]), links=tuple(p["links"]))
                    for p in meta["paths"]
                ),
                stream_tags=tuple(meta["stream_tags"]),
                state=meta["state"],
                degraded=meta["degraded"],
                opened_tick=meta["opened_tick"],
                closed_tick=meta["closed_tick"],
                delivered_chunks=meta["delivered_chunks"],
                delivered_bytes=meta["delivered_bytes"],
            )
            session.consumed_by_link = dict(meta["consumed_by_link"])
            self.sessions[session.session_id] = session
