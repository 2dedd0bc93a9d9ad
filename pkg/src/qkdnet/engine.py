"""Deterministic simulation engine.

One engine instance owns everything a run needs: link generators, per-node
key stores and agents, the controller, the message trace, the metrics
stream, and the scripted workload. A tick advances the whole world by one
time step in a fixed order (workload, link key production, control cycle,
session delivery), and every iteration walks collections in sorted order,
so a (scenario, seed) pair fully determines all outputs.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, replace
from typing import Optional

from . import kernels, lkms, messages, optics, qkdsim
from .controller import (
    AdmissionRejectedError,
    Controller,
    ControllerError,
    LinkInfo,
    NodeDescriptor,
    QoS,
    Session,
)
from .netmodel import NetworkModel, QkdLink

METRICS_HEADER = "tick,link_id,rate_bps,qber,bytes_emitted"
POOL_REPORT_EVERY = 10


class EngineError(Exception):
    pass


class WorkloadError(EngineError):
    """A scripted workload step did not meet its declared expectation."""


@dataclass
class _LinkRuntime:
    link: QkdLink
    state: qkdsim.QkdLinkState
    connection: Optional[optics.SwitchedConnection] = None


class NodeAgent:
    """Per-node executor: owns the key store, answers hop configuration."""

    def __init__(self, node_id: str, store: lkms.KeyStore,
                 engine: "SimulationEngine"):
        self.node_id = node_id
        self.store = store
        self.engine = engine
        self.address = f"agent://{node_id}"
        self.fail_next_config = False
        self._seen: set[str] = set()

    def handle(self, message: messages.Message):
        msg_id = message.get("msg_id")
        if msg_id in self._seen:
            return "duplicate"
        self._seen.add(msg_id)
        if message.kind != messages.KIND_CONFIG_HOP:
            return "ok"
        if self.fail_next_config:
            self.fail_next_config = False
            return "nack:forced"
        expected = float(message.get("expected_attenuation_db") or 0.0)
        link_id = message.get("link") or ""
        actual = self.engine.link_loss(link_id)
        if abs(actual - expected) > 1.0:
            self.engine.bus.send("controller", messages.KIND_ALARM, {
                "node": self.node_id,
                "link": link_id,
                "expected_attenuation_db": f"{expected:.3f}",
                "actual_attenuation_db": f"{actual:.3f}",
                "session": message.get("session") or "",
            })
            return "alarm"
        return "ok"


class SimulationEngine:
    def __init__(self, model: NetworkModel, seed: int,
                 trace_path=None, metrics_path=None):
        self.model = model
        self.seed = seed
        self.tick_index = 0
        self.tick_s = 1.0
        self.lock = threading.RLock()
        self.ticked = threading.Condition(self.lock)
        self.workload_failures: list[str] = []
        self._session_names: dict[str, str] = {}  # workload name -> session id

        self.bus = messages.MessageBus(trace_path)
        self._relay_trace = (
            open(str(trace_path) + ".relay", "wb") if trace_path else None
        )
        self._metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
        if self._metrics:
            self._metrics.write(METRICS_HEADER + "\n")

        self.stores: dict[str, lkms.KeyStore] = {}
        self.agents: dict[str, NodeAgent] = {}
        for node in model.nodes:
            store = lkms.KeyStore(
                node.id, id_seed=qkdsim.derive_seed(seed, "store", node.id)
            )
            agent = NodeAgent(node.id, store, self)
            self.stores[node.id] = store
            self.agents[node.id] = agent
            self.bus.subscribe(agent.address, agent.handle)

        self._nodegen_seed = {
            node.id: qkdsim.derive_seed(seed, "nodegen", node.id)
            for node in model.nodes
        }
        self._nodegen_counter = {node.id: 0 for node in model.nodes}

        self.links: dict[str, _LinkRuntime] = {}
        self.occupancy = optics.Occupancy()
        self._build_links()

        self.controller = Controller(
            model, self.bus, self.link_infos, seed=seed,
            pool_provider=self._pool_totals,
        )
        self._register_all()
        self._pending_workload = sorted(
            enumerate(model.workload), key=lambda kv: (kv[1].at_s, kv[0])
        )

    # ------------------------------------------------------------------
    # construction

    def _build_links(self) -> None:
        for link in sorted(self.model.links, key=lambda l: l.id):
            src = self.model.module(link.src_module)
            dst = self.model.module(link.dst_module)
            if link.switched:
                node_seq, span_seq = self._link_node_walk(link)
                path = optics.build_path(
                    self.model, src.id, dst.id, node_seq, span_seq
                )
                channels = optics.feasible_channels(
                    self.model, path, self.occupancy
                )
                if not channels:
                    raise EngineError(
                        f"link '{link.id}': no free channel on its declared path"
                    )
                channel = min(channels)
                self.occupancy = self.occupancy.claim(
                    path.nodes, channel, link.id
                )
                connection = optics.SwitchedConnection(
                    id=link.id, path=path, channel=channel,
                    total_loss_db=optics.path_loss(self.model, path),
                )
                loss = connection.total_loss_db
            else:
                connection = None
                channel = link.channel
                loss = self.model.link_path_loss_db(link)

            cpi = sum(
                self.model.classical_power_index(s) for s in link.spans
            )
            abort = src.effective_abort_qber
            qber = qkdsim.link_qber(src.rate_params, loss, cpi)
            rate = qkdsim.link_rate(src.rate_params, loss, cpi, abort_qber=abort)
            state = qkdsim.QkdLinkState(
                link_id=link.id,
                src_module=src.id,
                dst_module=dst.id,
                src_node=src.node,
                dst_node=dst.node,
                vendor=src.vendor,
                family=src.family,
                mode=link.mode,
                rate_bps=rate,
                qber=qber,
                abort_qber=abort,
                channel=channel,
                loss_db=loss,
                seed=qkdsim.derive_seed(self.seed, "link", link.id),
            )
            self.links[link.id] = _LinkRuntime(link=link, state=state,
                                               connection=connection)
            self.stores[src.node].register_link(link.id, dst.node)
            self.stores[dst.node].register_link(link.id, src.node)

    def _link_node_walk(self, link: QkdLink) -> tuple[tuple[str, ...], tuple[str, ...]]:
        here = self.model.module(link.src_module).node
        nodes = [here]
        for span_id in link.spans:
            span = self.model.span(span_id)
            here = span.endpoints[1] if span.endpoints[0] == here else span.endpoints[0]
            nodes.append(here)
        return tuple(nodes), tuple(link.spans)

    def _register_all(self) -> None:
        for node in sorted(self.model.nodes, key=lambda n: n.id):
            touching = tuple(sorted(
                lid for lid, rt in self.links.items()
                if node.id in (rt.state.src_node, rt.state.dst_node)
            ))
            self.controller.register_node(NodeDescriptor(
                node_id=node.id,
                agent_address=self.agents[node.id].address,
                modules=tuple(m.id for m in self.model.modules_at(node.id)),
                links=touching,
                apps=tuple(a.id for a in self.model.apps_at(node.id)),
                pool_levels=(),
            ))

    # ------------------------------------------------------------------
    # views

    def link_infos(self) -> list[LinkInfo]:
        out = []
        for lid in sorted(self.links):
            rt = self.links[lid]
            st = rt.state
            out.append(LinkInfo(
                link_id=lid,
                src_node=st.src_node,
                dst_node=st.dst_node,
                vendor=st.vendor,
                mode=st.mode,
                rate_bps=st.rate_bps if st.active else 0.0,
                qber=st.qber,
                channel=st.channel,
                loss_db=st.loss_db,
                active=st.active,
            ))
        return out

    def link_loss(self, link_id: str) -> float:
        rt = self.links.get(link_id)
        return rt.state.loss_db if rt else 0.0

    def _pool_totals(self) -> dict[str, int]:
        return {
            node_id: self.stores[node_id].available_total
            for node_id in sorted(self.stores)
        }

    # ------------------------------------------------------------------
    # mutation hooks (workload, tests, operations)

    def set_link_mode(self, link_id: str, mode: str) -> None:
        rt = self.links[link_id]
        rt.state = qkdsim.set_mode(rt.state, mode)

    def set_link_active(self, link_id: str, active: bool) -> None:
        rt = self.links[link_id]
        rt.state = replace(rt.state, active=active)

    def set_link_rate(self, link_id: str, rate_bps: float) -> None:
        rt = self.links[link_id]
        rt.state = replace(rt.state, rate_bps=rate_bps)

    def node_chunk(self, node_id: str, size: int, tag: str) -> lkms.KeyChunk:
        """Fresh locally generated key material (session payloads)."""
        counter = self._nodegen_counter[node_id]
        blocks = (size + 7) // 8
        self._nodegen_counter[node_id] = counter + blocks + 2
        data = kernels.fill_keystream(self._nodegen_seed[node_id], counter, size)
        ident = kernels.fill_keystream(
            self._nodegen_seed[node_id] ^ 0xA5A5A5A5A5A5A5A5, counter, 16
        ).hex()
        return lkms.KeyChunk(
            chunk_id=ident,
            data=data,
            provenance=((f"local:{node_id}", counter * 8, counter * 8 + size),),
            stream_tag=tag,
        )

    # ------------------------------------------------------------------
    # service plumbing

    def open_service(self, src_app: str, dst_app: str, qos: QoS) -> str:
        with self.lock:
            return self.controller.open_connect(
                src_app, dst_app, qos, link_loss=self.link_loss
            )

    def close_service(self, session_id: str):
        with self.lock:
            return self.controller.close(session_id)

    # ------------------------------------------------------------------
    # clock

    def tick(self, dt_s: Optional[float] = None) -> None:
        with self.lock:
            dt = dt_s if dt_s is not None else self.tick_s
            t = self.tick_index
            self.controller.tick = t
            self._run_workload(t * self.tick_s)
            for lid in sorted(self.links):
                rt = self.links[lid]
                emitted = 0
                if rt.state.active and rt.state.rate_bps > 0:
                    rt.state, block_src, block_dst = qkdsim.step(rt.state, dt)
                    if block_src is not None:
                        self.stores[rt.state.src_node].ingest(block_src)
                        self.stores[rt.state.dst_node].ingest(block_dst)
                        emitted = len(block_src.data)
                if self._metrics:
                    st = rt.state
                    rate = st.rate_bps if st.active else 0.0
                    self._metrics.write(
                        f"{t},{lid},{rate:.3f},{st.qber:.6f},{emitted}\n"
                    )
            self.controller.control_cycle(t)
            for session in sorted(self.controller.sessions.values(),
                                  key=lambda s: s.session_id):
                self._pump_session(session)
            if (t + 1) % POOL_REPORT_EVERY == 0:
                for node_id in sorted(self.stores):
                    levels = self.stores[node_id].pool_levels()
                    self.bus.send("controller", messages.KIND_POOL_REPORT, {
                        "node": node_id,
                        "tick": t,
                        "pools": ";".join(
                            f"{peer}|{vendor}|{mode}:{level}"
                            for (peer, vendor, mode), level in levels.items()
                        ),
                    })
            self.tick_index = t + 1
            self.ticked.notify_all()

    def run(self, duration_s: float, tick_s: float = 1.0) -> None:
        if duration_s <= 0:
            raise ValueError("duration_s must be > 0")
        if tick_s <= 0:
            raise ValueError("tick_s must be > 0")
        self.tick_s = tick_s
        steps = max(1, round(duration_s / tick_s))
        for _ in range(steps):
            self.tick(tick_s)

    # ------------------------------------------------------------------
    # delivery

    def _pump_session(self, session: Session) -> None:
        if session.state != "active":
            return
        chunk = session.qos.key_chunk_size
        elapsed = (self.tick_index + 1 - session.opened_tick) * self.tick_s
        target = session.qos.min_bps / 8.0 * elapsed
        while session.delivered_bytes < target - 1e-9:
            if not self._deliver_one(session):
                break
            session.delivered_chunks += 1
            session.delivered_bytes += chunk

    def _deliver_one(self, session: Session) -> bool:
        size = session.qos.key_chunk_size
        if session.qos.mode == "raw":
            return self._deliver_raw(session, size)
        if session.paths[0].hops == 0:
            data = self.node_chunk(
                session.src_node, size, session.stream_tags[0]
            ).data
            session.src_buffer.append(data)
            session.dst_buffer.append(data)
            return True

        payloads: list[lkms.KeyChunk] = []
        delivered: list[lkms.KeyChunk] = []
        session_uuid = uuid.UUID(session.session_id).bytes
        for index, path in enumerate(session.paths):
            payload = self.node_chunk(
                session.src_node, size, session.stream_tags[index]
            )
            hops = []
            for hop_index, link_id in enumerate(path.links):
                rt = self.links[link_id]
                u, v = path.nodes[hop_index], path.nodes[hop_index + 1]
                hops.append(lkms.HopContext(
                    sender=self.stores[u],
                    receiver=self.stores[v],
                    vendor=rt.state.vendor,
                    link_id=link_id,
                ))
            try:
                outcome = lkms.forward_key(session_uuid, hops, payload)
            except lkms.InsufficientKeyError:
                return False
            for record in outcome.wire_records:
                if self._relay_trace:
                    self._relay_trace.write(record)
            for acct in outcome.hops:
                session.consumed_by_link[acct.link_id] = (
                    session.consumed_by_link.get(acct.link_id, 0)
                    + 2 * acct.consumed_bytes_each_end
                )
            outcome.chunk.stream_tag = session.stream_tags[index]
            payloads.append(payload)
            delivered.append(outcome.chunk)

        if len(payloads) == 1:
            session.src_buffer.append(payloads[0].data)
            session.dst_buffer.append(delivered[0].data)
        else:
            session.src_buffer.append(lkms.combine_streams(payloads).data)
            session.dst_buffer.append(lkms.combine_streams(delivered).data)
        return True

    def _deliver_raw(self, session: Session, size: int) -> bool:
        path = session.paths[0]
        link_id = path.links[0]
        rt = self.links[link_id]
        src_store = self.stores[session.src_node]
        dst_store = self.stores[session.dst_node]
        try:
            near = src_store.reserve(
                session.dst_node, size, vendor=rt.state.vendor, mode="raw"
            )
            far = dst_store.reserve(
                session.src_node, size, vendor=rt.state.vendor, mode="raw"
            )
        except lkms.InsufficientKeyError:
            return False
        session.src_buffer.append(near.data)
        session.dst_buffer.append(far.data)
        return True

    # ------------------------------------------------------------------
    # workload

    def _run_workload(self, now_s: float) -> None:
        while self._pending_workload and self._pending_workload[0][1].at_s <= now_s + 1e-9:
            _, cmd = self._pending_workload.pop(0)
            self._execute_workload(cmd)

    def _execute_workload(self, cmd) -> None:
        expect = cmd.arg("expect", "ok")
        if cmd.action == "open":
            qos = QoS(
                key_chunk_size=int(cmd.arg("chunk", str(self.model.defaults.key_chunk_size))),
                min_bps=float(cmd.arg("min_bps", str(self.model.defaults.min_bps))),
                max_bps=float(cmd.arg("max_bps", str(max(
                    self.model.defaults.max_bps,
                    float(cmd.arg("min_bps", str(self.model.defaults.min_bps))),
                )))),
                timeout_ms=self.model.defaults.timeout_ms,
                ttl_s=self.model.defaults.ttl_s,
                diversity=int(cmd.arg("diversity", "1")),
                mode=cmd.arg("mode", "distilled"),
            )
            name = cmd.arg("id", f"svc-{len(self._session_names)}")
            try:
                session_id = self.controller.open_connect(
                    cmd.arg("src"), cmd.arg("dst"), qos,
                    link_loss=self.link_loss,
                )
            except (AdmissionRejectedError, ControllerError) as exc:
                if expect == "ok":
                    self.workload_failures.append(
                        f"open {name}: expected success, got {exc}"
                    )
                return
            self._session_names[name] = session_id
            if expect == "reject":
                self.workload_failures.append(
                    f"open {name}: expected rejection, session admitted"
                )
        elif cmd.action == "close":
            name = cmd.arg("id", "")
            session_id = self._session_names.get(name, name)
            try:
                self.controller.close(session_id)
            except ControllerError as exc:
                if expect == "ok":
                    self.workload_failures.append(f"close {name}: {exc}")
        elif cmd.action == "mode":
            try:
                self.set_link_mode(cmd.arg("link", ""), cmd.arg("value", "distilled"))
            except (KeyError, qkdsim.UnsupportedModeError) as exc:
                if expect == "ok":
                    self.workload_failures.append(f"mode: {exc}")
        elif cmd.action == "fail":
            link = cmd.arg("link", "")
            if link in self.links:
                self.set_link_active(link, False)
            elif expect == "ok":
                self.workload_failures.append(f"fail: unknown link '{link}'")
        else:
            self.workload_failures.append(
                f"unknown workload action '{cmd.action}'"
            )

    # ------------------------------------------------------------------
    # shutdown

    def shutdown(self) -> list:
        """Close remaining sessions and flush all output files."""
        with self.lock:
            records = []
            for session_id in sorted(self.controller.sessions):
                if self.controller.sessions[session_id].state in (
                    "active", "configured",
                ):
                    records.append(self.controller.close(session_id))
            if self._metrics:
                self._metrics.flush()
                self._metrics.close()
                self._metrics = None
            if self._relay_trace:
                self._relay_trace.flush()
                self._relay_trace.close()
                self._relay_trace = None
            self.bus.flush()
            self.bus.close()
            return records
