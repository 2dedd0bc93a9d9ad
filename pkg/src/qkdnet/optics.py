"""Optical path computation and DWDM channel assignment.

The switched overlay is modelled as a graph over the nodes that carry
optical elements: a fibre switch cross-connects the node's fixed
multiplexers, each of which faces one span. A connection between two
modules needs a simple path whose total loss fits the budget and a grid
channel that every traversed multiplexer passes and that no other
connection holds at any node along the way.

All functions are pure: occupancy is an immutable value that is passed in
and returned, never mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .netmodel import NetworkModel, OpticalElement, QkdModule

# Grid available to the switched overlay when no multiplexer constrains a path.
DEFAULT_GRID = frozenset({34, 37, 38})


class OpticsError(Exception):
    pass


class PathError(OpticsError):
    """Malformed path (empty, unknown entities, broken chain)."""


class NoPathError(OpticsError):
    pass


class LossExceededError(OpticsError):
    def __init__(self, best_loss_db: float, budget_db: float):
        super().__init__(
            f"loss_exceeded: best path loss {best_loss_db:.2f} dB "
            f"exceeds budget {budget_db:.2f} dB"
        )
        self.best_loss_db = best_loss_db
        self.budget_db = budget_db


class NoChannelError(OpticsError):
    def __init__(self, constraint: str):
        super().__init__(f"no_channel: {constraint}")
        self.constraint = constraint


class OccupancyConflictError(OpticsError):
    pass


class IncompatibleModulesError(OpticsError):
    pass


@dataclass(frozen=True)
class OpticalPath:
    src_module: str
    dst_module: str
    nodes: tuple[str, ...]
    spans: tuple[str, ...]
    elements: tuple[str, ...]

    @property
    def hops(self) -> int:
        return len(self.spans)


@dataclass(frozen=True)
class SwitchedConnection:
    id: str
    path: OpticalPath
    channel: int
    total_loss_db: float


class Occupancy:
    """Immutable map of (node, channel) -> owning connection id."""

    __slots__ = ("_claims",)

    def __init__(self, claims: Optional[Mapping[tuple[str, int], str]] = None):
        self._claims: dict[tuple[str, int], str] = dict(claims or {})

    def owner(self, node: str, channel: int) -> Optional[str]:
        return self._claims.get((node, channel))

    def channels_at(self, node: str) -> frozenset[int]:
        return frozenset(ch for (n, ch) in self._claims if n == node)

    def items(self):
        return tuple(sorted(self._claims.items()))

    def __len__(self) -> int:
        return len(self._claims)

    def __eq__(self, other):
        if not isinstance(other, Occupancy):
            return NotImplemented
        return self._claims == other._claims

    def __hash__(self):
        return hash(self.items())

    def claim(self, nodes: Iterable[str], channel: int, owner: str) -> "Occupancy":
        new = dict(self._claims)
        for node in nodes:
            key = (node, channel)
            holder = new.get(key)
            if holder is not None and holder != owner:
                raise OccupancyConflictError(
                    f"channel {channel} at node '{node}' already owned by '{holder}'"
                )
            new[key] = owner
        return Occupancy(new)

    def release(self, owner: str) -> "Occupancy":
        return Occupancy(
            {k: v for k, v in self._claims.items() if v != owner}
        )


# ---------------------------------------------------------------------------
# Fabric topology helpers


def _mux_facing(model: NetworkModel, node: str, span_id: str) -> Optional[OpticalElement]:
    for e in model.elements_at(node):
        if e.kind in ("fixed_mux", "bidi_mux") and span_id in e.ports:
            return e
    return None


def _switch_at(model: NetworkModel, node: str) -> Optional[OpticalElement]:
    switches = [e for e in model.elements_at(node) if e.kind == "switch"]
    return min(switches, key=lambda e: e.id) if switches else None


def _node_elements(model: NetworkModel, node: str,
                   span_in: Optional[str], span_out: Optional[str]) -> list[str]:
    """Elements traversed at a node, given the spans entering and leaving it.

    Nodes without the relevant equipment contribute nothing; this keeps toy
    models (bare fibres, no elements) valid.
    """
    out: list[str] = []
    if span_in is not None:
        mux = _mux_facing(model, node, span_in)
        if mux is not None:
            out.append(mux.id)
    switch = _switch_at(model, node)
    if switch is not None:
        out.append(switch.id)
    if span_out is not None:
        mux = _mux_facing(model, node, span_out)
        if mux is not None:
            out.append(mux.id)
    return out


def build_path(model: NetworkModel, src_module: str, dst_module: str,
               node_seq: tuple[str, ...], span_seq: tuple[str, ...]) -> OpticalPath:
    """Assemble an OpticalPath along an explicit node/span sequence."""
    if len(node_seq) < 2 or len(span_seq) != len(node_seq) - 1:
        raise PathError("node/span sequence mismatch")
    elements: list[str] = []
    for i, node in enumerate(node_seq):
        span_in = span_seq[i - 1] if i > 0 else None
        span_out = span_seq[i] if i < len(span_seq) else None
        elements.extend(_node_elements(model, node, span_in, span_out))
    return OpticalPath(
        src_module=src_module,
        dst_module=dst_module,
        nodes=node_seq,
        spans=span_seq,
        elements=tuple(elements),
    )


def _adjacency(model: NetworkModel) -> dict[str, list[tuple[str, str]]]:
    adj: dict[str, list[tuple[str, str]]] = {}
    for span in model.spans:
        a, b = span.endpoints
        adj.setdefault(a, []).append((b, span.id))
        adj.setdefault(b, []).append((a, span.id))
    for neighbours in adj.values():
        neighbours.sort()
    return adj


def _simple_paths(model: NetworkModel, src_node: str, dst_node: str):
    """All simple node paths src -> dst with their span choices."""
    adj = _adjacency(model)
    results: list[tuple[tuple[str, ...], tuple[str, ...]]] = []

    def walk(node: str, nodes: list[str], spans: list[str]):
        if node == dst_node:
            results.append((tuple(nodes), tuple(spans)))
            return
        for nxt, span_id in adj.get(node, ()):
            if nxt in nodes:
                continue
            nodes.append(nxt)
            spans.append(span_id)
            walk(nxt, nodes, spans)
            nodes.pop()
            spans.pop()

    walk(src_node, [src_node], [])
    return results


# ---------------------------------------------------------------------------
# Operations


def path_loss(model: NetworkModel, path: OpticalPath) -> float:
    """Total attenuation: span losses plus element insertion losses."""
    if not path.spans:
        raise PathError("empty path")
    total = 0.0
    for span_id in path.spans:
        total += model.span(span_id).loss_db
    for element_id in path.elements:
        total += model.element(element_id).insertion_loss_db
    return total


def path_has_amplifier(model: NetworkModel, path: OpticalPath) -> bool:
    return any(model.element(e).amplified for e in path.elements)


def feasible_channels(model: NetworkModel, path: OpticalPath,
                      occupancy: Occupancy) -> frozenset[int]:
    """Channels usable for a quantum connection along a path.

    Intersection of every traversed fixed-mux passband (the default grid
    when no mux constrains the path), minus channels owned by another
    connection at any node on the path, restricted to the source module's
    fixed channel when it cannot tune. Paths through amplified elements
    never carry quantum channels.
    """
    if path_has_amplifier(model, path):
        return frozenset()
    candidates: Optional[frozenset[int]] = None
    for element_id in path.elements:
        element = model.element(element_id)
        if element.kind in ("fixed_mux", "bidi_mux"):
            candidates = (
                element.passband if candidates is None
                else candidates & element.passband
            )
    if candidates is None:
        candidates = DEFAULT_GRID
    src = model.module(path.src_module)
    if not src.tunable:
        candidates = candidates & {src.fixed_channel}
    for node in path.nodes:
        candidates = candidates - occupancy.channels_at(node)
    return frozenset(candidates)


def roles_compatible(src: QkdModule, dst: QkdModule) -> bool:
    if src.role == "transmitter" and dst.role == "receiver":
        return True
    return src.role == "transceiver" and dst.role == "transceiver"


def modules_compatible(src: QkdModule, dst: QkdModule) -> bool:
    return (
        src.node != dst.node
        and src.vendor == dst.vendor
        and src.family == dst.family
        and roles_compatible(src, dst)
    )


def _candidate_paths(model: NetworkModel, src: QkdModule, dst: QkdModule):
    paths = []
    for node_seq, span_seq in _simple_paths(model, src.node, dst.node):
        path = build_path(model, src.id, dst.id, node_seq, span_seq)
        if path_has_amplifier(model, path):
            continue
        paths.append((path_loss(model, path), path))
    return paths


def assign_connection(model: NetworkModel, src_module: str, dst_module: str,
                      occupancy: Occupancy, max_loss_db: float,
                      conn_id: Optional[str] = None
                      ) -> tuple[SwitchedConnection, Occupancy]:
    """Pick a path and channel for a new connection and book the occupancy.

    Selection order: minimum loss, then fewest hops, then lowest channel
    index, then lexicographic node sequence. Raises NoPathError,
    LossExceededError or NoChannelError depending on which constraint
    binds first.
    """
    src = model.module(src_module)
    dst = model.module(dst_module)
    if not roles_compatible(src, dst):
        raise IncompatibleModulesError(
            f"roles {src.role} -> {dst.role} cannot form a connection"
        )
    candidates = _candidate_paths(model, src, dst)
    if not candidates:
        raise NoPathError(
            f"no_path: no optical path from '{src.node}' to '{dst.node}'"
        )
    in_budget = [(loss, p) for loss, p in candidates if loss <= max_loss_db]
    if not in_budget:
        raise LossExceededError(min(loss for loss, _ in candidates), max_loss_db)

    best: Optional[tuple[float, int, int, tuple[str, ...], OpticalPath]] = None
    blocked: list[str] = []
    for loss, path in sorted(in_budget, key=lambda lp: (lp[0], lp[1].hops, lp[1].nodes)):
        channels = feasible_channels(model, path, occupancy)
        if not channels:
            blocked.append(_channel_constraint(model, path, occupancy))
            continue
        key = (loss, path.hops, min(channels), path.nodes, path)
        if best is None or key[:4] < best[:4]:
            best = key
    if best is None:
        raise NoChannelError(blocked[0] if blocked else "no channel available")

    loss, _, channel, _, path = best
    ident = conn_id or f"{src_module}->{dst_module}@{channel}"
    new_occupancy = occupancy.claim(path.nodes, channel, ident)
    return (
        SwitchedConnection(id=ident, path=path, channel=channel, total_loss_db=loss),
        new_occupancy,
    )


def _channel_constraint(model: NetworkModel, path: OpticalPath,
                        occupancy: Occupancy) -> str:
    """Describe why a path has no feasible channel (for error reporting)."""
    src = model.module(path.src_module)
    candidates: Optional[frozenset[int]] = None
    for element_id in path.elements:
        element = model.element(element_id)
        if element.kind in ("fixed_mux", "bidi_mux"):
            narrowed = (
                element.passband if candidates is None
                else candidates & element.passband
            )
            if not narrowed:
                return f"passband of mux '{element_id}' excludes all candidates"
            candidates = narrowed
    if candidates is None:
        candidates = DEFAULT_GRID
    if not src.tunable:
        if src.fixed_channel not in candidates:
            return (
                f"source module '{src.id}' is fixed to channel "
                f"{src.fixed_channel}, outside the path passband"
            )
        candidates = frozenset({src.fixed_channel})
    for node in path.nodes:
        remaining = candidates - occupancy.channels_at(node)
        if not remaining:
            return f"all channels occupied at node '{node}'"
        candidates = remaining
    return "no channel available"


def release_connection(occupancy: Occupancy,
                       connection: SwitchedConnection) -> Occupancy:
    return occupancy.release(connection.id)


@dataclass(frozen=True)
class ConnectivityEntry:
    src_module: str
    dst_module: str
    channel: int
    loss_db: float
    hops: int


def enumerate_connectivity(model: NetworkModel,
                           max_loss_db: Optional[float] = None,
                           modules: Optional[Iterable[str]] = None
                           ) -> tuple[ConnectivityEntry, ...]:
    """Feasibility of every ordered compatible module pair, each judged
    against an otherwise-empty occupancy.

    When max_loss_db is None, each source module's own loss budget applies.
    """
    pool = [
        model.module(m) for m in modules
    ] if modules is not None else list(model.modules)
    pool.sort(key=lambda m: m.id)
    empty = Occupancy()
    out: list[ConnectivityEntry] = []
    for src in pool:
        budget = max_loss_db if max_loss_db is not None else src.rate_params.max_loss_db
        for dst in pool:
            if src.id == dst.id or not modules_compatible(src, dst):
                continue
            try:
                conn, _ = assign_connection(model, src.id, dst.id, empty, budget)
            except OpticsError:
                continue
            out.append(ConnectivityEntry(
                src_module=src.id,
                dst_module=dst.id,
                channel=conn.channel,
                loss_db=conn.total_loss_db,
                hops=conn.path.hops,
            ))
    out.sort(key=lambda e: (e.src_module, e.dst_module))
    return tuple(out)
