"""Network data model and scenario documents.

A scenario document is a line-oriented UTF-8 text format describing the
physical and logical inventory of a metro QKD deployment: trusted nodes,
fibre spans, optical elements (multiplexers and switches), QKD modules,
declared point-to-point QKD links, per-span classical channels, and the
applications that will consume keys. An optional ``workload`` block scripts
service requests against the simulation clock, and a ``defaults`` block
tunes service parameters.

Grammar (see README for a worked example)::

    # comment
    node Quijote {
      domain: RM
      trusted: true
    }
    span Quintin-Quijote {
      endpoints: Quintin Quijote
      length_km: 19.8
    }

Top-level blocks: ``node``, ``span``, ``element``, ``module``, ``link``,
``channel``, ``app``, ``defaults``, ``workload``. All entity blocks contain
``key: value`` lines; the workload block contains ``at <seconds> <action>
key=value...`` lines. Models are immutable after loading and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional


class ScenarioError(Exception):
    """Base class for scenario loading problems."""


class ScenarioParseError(ScenarioError):
    def __init__(self, message: str, line: int, col: int = 1):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class ModelValidationError(ScenarioError):
    """Referential-integrity or invariant violation in a parsed document."""


class UnknownEntityError(ScenarioError):
    """Lookup of an id that does not exist in the model."""


DOMAIN_DISPLAY = {"COLOCATED": "Co-located", "BORDER": "Border"}

DEFAULT_LOSS_DB_PER_KM = 0.2

ELEMENT_KINDS = ("fixed_mux", "bidi_mux", "switch")
MODULE_FAMILIES = ("DV", "CV")
MODULE_ROLES = ("transmitter", "receiver", "transceiver")
LINK_MODES = ("distilled", "raw")
CHANNEL_ROLES = ("qkd_service", "data")
POWER_CLASSES = ("low", "high")
POWER_WEIGHT = {"low": 1, "high": 3}
STRAND_KINDS = ("duplex_pair", "single_bidi")


@dataclass(frozen=True)
class Node:
    id: str
    domain: str
    trusted: bool = True
    display: str = ""

    @property
    def display_name(self) -> str:
        return self.display or self.id


@dataclass(frozen=True)
class FibreSpan:
    id: str
    endpoints: tuple[str, str]
    length_km: float
    loss_db: float
    strands: str
    domain: str


@dataclass(frozen=True)
class OpticalElement:
    id: str
    node: str
    kind: str
    passband: frozenset[int]
    insertion_loss_db: float
    ports: tuple[str, ...]
    amplified: bool = False


@dataclass(frozen=True)
class RateParams:
    r0_bps: float
    max_loss_db: float
    qber0: float
    noise_coeff: float


@dataclass(frozen=True)
class QkdModule:
    id: str
    node: str
    vendor: str
    family: str
    role: str
    tunable: bool
    fixed_channel: Optional[int]
    rate_params: RateParams
    abort_qber: Optional[float]
    domain: str

    @property
    def effective_abort_qber(self) -> float:
        if self.abort_qber is not None:
            return self.abort_qber
        return 0.11 if self.family == "DV" else 0.25


@dataclass(frozen=True)
class QkdLink:
    id: str
    src_module: str
    dst_module: str
    spans: tuple[str, ...]
    channel: Optional[int]
    switched: bool
    mode: str
    domain: str


@dataclass(frozen=True)
class ClassicalChannel:
    id: str
    span: str
    index: int
    role: str
    power: str
    encrypted: bool
    domain: str


@dataclass(frozen=True)
class App:
    id: str
    node: str
    kind: str
    domain: str


@dataclass(frozen=True)
class WorkloadCommand:
    at_s: float
    action: str
    args: tuple[tuple[str, str], ...]

    def arg(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.args:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class ServiceDefaults:
    key_chunk_size: int = 32
    min_bps: float = 256.0
    max_bps: float = 1024.0
    timeout_ms: int = 5000
    ttl_s: int = 3600
    max_key_size: int = 1024
    max_key_count: int = 1024


@dataclass(frozen=True)
class ChannelCensus:
    link_id: str
    classical: int
    quantum: int
    encrypted: int


@dataclass(frozen=True)
class DomainSummary:
    domain: str
    nodes: int
    qkd_links: int
    link_length_km: float
    qkd_modules: int
    encryptors: int


@dataclass(frozen=True, eq=False)
class NetworkModel:
    nodes: tuple[Node, ...]
    spans: tuple[FibreSpan, ...]
    elements: tuple[OpticalElement, ...]
    modules: tuple[QkdModule, ...]
    links: tuple[QkdLink, ...]
    channels: tuple[ClassicalChannel, ...]
    apps: tuple[App, ...]
    defaults: ServiceDefaults = field(default_factory=ServiceDefaults)
    workload: tuple[WorkloadCommand, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "_node_by_id", {n.id: n for n in self.nodes})
        object.__setattr__(self, "_span_by_id", {s.id: s for s in self.spans})
        object.__setattr__(self, "_element_by_id", {e.id: e for e in self.elements})
        object.__setattr__(self, "_module_by_id", {m.id: m for m in self.modules})
        object.__setattr__(self, "_link_by_id", {l.id: l for l in self.links})
        object.__setattr__(self, "_app_by_id", {a.id: a for a in self.apps})

    def __eq__(self, other):
        if not isinstance(other, NetworkModel):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.spans == other.spans
            and self.elements == other.elements
            and self.modules == other.modules
            and self.links == other.links
            and self.channels == other.channels
            and self.apps == other.apps
            and self.defaults == other.defaults
            and self.workload == other.workload
        )

    def node(self, node_id: str) -> Node:
        return self._lookup("node", self._node_by_id, node_id)

    def span(self, span_id: str) -> FibreSpan:
        return self._lookup("span", self._span_by_id, span_id)

    def element(self, element_id: str) -> OpticalElement:
        return self._lookup("element", self._element_by_id, element_id)

    def module(self, module_id: str) -> QkdModule:
        return self._lookup("module", self._module_by_id, module_id)

    def link(self, link_id: str) -> QkdLink:
        return self._lookup("link", self._link_by_id, link_id)

    def app(self, app_id: str) -> App:
        return self._lookup("app", self._app_by_id, app_id)

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_by_id

    def has_span(self, span_id: str) -> bool:
        return span_id in self._span_by_id

    def has_link(self, link_id: str) -> bool:
        return link_id in self._link_by_id

    def has_app(self, app_id: str) -> bool:
        return app_id in self._app_by_id

    @staticmethod
    def _lookup(kind: str, table: Mapping[str, object], key: str):
        try:
            return table[key]
        except KeyError:
            raise UnknownEntityError(f"unknown {kind} '{key}'") from None

    def elements_at(self, node_id: str) -> tuple[OpticalElement, ...]:
        return tuple(e for e in self.elements if e.node == node_id)

    def modules_at(self, node_id: str) -> tuple[QkdModule, ...]:
        return tuple(m for m in self.modules if m.node == node_id)

    def apps_at(self, node_id: str) -> tuple[App, ...]:
        return tuple(a for a in self.apps if a.node == node_id)

    def channels_on(self, span_id: str) -> tuple[ClassicalChannel, ...]:
        return tuple(c for c in self.channels if c.span == span_id)

    def links_on(self, span_id: str) -> tuple[QkdLink, ...]:
        return tuple(l for l in self.links if span_id in l.spans)

    def link_between(self, a: str, b: str) -> tuple[QkdLink, ...]:
        """All declared QKD links whose end modules sit at nodes a and b."""
        out = []
        for l in self.links:
            ends = {self.module(l.src_module).node, self.module(l.dst_module).node}
            if ends == {a, b}:
                out.append(l)
        return tuple(out)

    def link_endpoints(self, link: QkdLink) -> tuple[str, str]:
        return (self.module(link.src_module).node, self.module(link.dst_module).node)

    def classical_power_index(self, span_id: str) -> int:
        """Launch-power-weighted count of classical channels on a span."""
        self.span(span_id)
        return sum(POWER_WEIGHT[c.power] for c in self.channels_on(span_id))

    def link_path_loss_db(self, link: QkdLink) -> float:
        """Span attenuation along a declared link path (no element losses)."""
        return sum(self.span(s).loss_db for s in link.spans)


# ---------------------------------------------------------------------------
# Operations


def coexistence_census(model: NetworkModel, link_id: str) -> ChannelCensus:
    """Count classical / quantum / encrypted channels on an inter-node span.

    Classical channels (including the QKD service channels declared with
    ``role: qkd_service``) are static scenario facts. Quantum channels are
    the declared QKD links whose path traverses the span.
    """
    if not model.has_span(link_id):
        raise UnknownEntityError(f"unknown link '{link_id}'")
    classical = model.channels_on(link_id)
    return ChannelCensus(
        link_id=link_id,
        classical=len(classical),
        quantum=len(model.links_on(link_id)),
        encrypted=sum(1 for c in classical if c.encrypted),
    )


def summarize(model: NetworkModel) -> dict[str, DomainSummary]:
    """Per-domain inventory rollup.

    Domains overlap by design: a node belongs to the domain it is tagged
    with, but also counts toward any domain whose modules it hosts, and a
    domain's fibre footprint is every span it owns or that its links ride.
    Link, module and encryptor counts partition cleanly by their own tag.
    """
    domains: set[str] = set()
    for coll in (model.nodes, model.spans, model.modules, model.links,
                 model.channels, model.apps):
        domains.update(e.domain for e in coll)  # type: ignore[attr-defined]

    out: dict[str, DomainSummary] = {}
    for dom in sorted(domains):
        host_nodes = {n.id for n in model.nodes if n.domain == dom}
        host_nodes.update(m.node for m in model.modules if m.domain == dom)
        footprint = {s.id for s in model.spans if s.domain == dom}
        for link in model.links:
            if link.domain == dom:
                footprint.update(link.spans)
        out[dom] = DomainSummary(
            domain=dom,
            nodes=len(host_nodes),
            qkd_links=sum(1 for l in model.links if l.domain == dom),
            link_length_km=sum(model.span(s).length_km for s in footprint),
            qkd_modules=sum(1 for m in model.modules if m.domain == dom),
            encryptors=sum(
                1 for a in model.apps if a.domain == dom and a.kind == "encryptor"
            ),
        )
    return out


def summarize_domain(model: NetworkModel, domain: str) -> DomainSummary:
    return summarize(model).get(
        domain, DomainSummary(domain, 0, 0, 0.0, 0, 0)
    )


# ---------------------------------------------------------------------------
# Parsing

_BLOCK_KINDS = (
    "node", "span", "element", "module", "link", "channel", "app",
    "defaults", "workload",
)

_BOOL = {"true": True, "false": False}


class _Block:
    def __init__(self, kind: str, ident: str, line: int):
        self.kind = kind
        self.ident = ident
        self.line = line
        self.fields: list[tuple[str, str, int]] = []  # key, value, line
        self.commands: list[tuple[str, int]] = []  # raw line, line no


def _tokenize_blocks(text: str) -> list[_Block]:
    blocks: list[_Block] = []
    current: Optional[_Block] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        if current is None:
            if not stripped.endswith("{"):
                raise ScenarioParseError(
                    "expected '<kind> [id] {'", lineno, len(line) - len(stripped) + 1
                )
            head = stripped[:-1].split()
            if not head:
                raise ScenarioParseError("missing block kind", lineno)
            kind = head[0]
            if kind not in _BLOCK_KINDS:
                raise ScenarioParseError(f"unknown block kind '{kind}'", lineno)
            if kind in ("defaults", "workload"):
                if len(head) > 1:
                    raise ScenarioParseError(f"'{kind}' block takes no id", lineno)
                ident = ""
            else:
                if len(head) != 2:
                    raise ScenarioParseError(
                        f"'{kind}' block needs exactly one id", lineno
                    )
                ident = head[1]
            current = _Block(kind, ident, lineno)
            continue
        if stripped == "}":
            blocks.append(current)
            current = None
            continue
        if current.kind == "workload":
            current.commands.append((stripped, lineno))
        else:
            if ":" not in stripped:
                raise ScenarioParseError("expected 'key: value'", lineno)
            key, _, value = stripped.partition(":")
            current.fields.append((key.strip(), value.strip(), lineno))
    if current is not None:
        raise ScenarioParseError(
            f"unterminated '{current.kind}' block", current.line
        )
    return blocks


class _FieldReader:
    def __init__(self, block: _Block):
        self.block = block
        self.seen: dict[str, tuple[str, int]] = {}
        for key, value, lineno in block.fields:
            if key in self.seen:
                raise ScenarioParseError(
                    f"duplicate field '{key}' in {block.kind} '{block.ident}'",
                    lineno,
                )
            self.seen[key] = (value, lineno)
        self.used: set[str] = set()

    def _raw(self, key: str) -> Optional[tuple[str, int]]:
        self.used.add(key)
        return self.seen.get(key)

    def require(self, key: str) -> str:
        got = self._raw(key)
        if got is None:
            raise ScenarioParseError(
                f"{self.block.kind} '{self.block.ident}' missing field '{key}'",
                self.block.line,
            )
        return got[0]

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        got = self._raw(key)
        return default if got is None else got[0]

    def number(self, key: str, default: Optional[float] = None) -> Optional[float]:
        got = self._raw(key)
        if got is None:
            return default
        value, lineno = got
        try:
            return float(value)
        except ValueError:
            raise ScenarioParseError(
                f"field '{key}' expects a number, got '{value}'", lineno
            ) from None

    def integer(self, key: str, default: Optional[int] = None) -> Optional[int]:
        got = self._raw(key)
        if got is None:
            return default
        value, lineno = got
        try:
            return int(value)
        except ValueError:
            raise ScenarioParseError(
                f"field '{key}' expects an integer, got '{value}'", lineno
            ) from None

    def boolean(self, key: str, default: bool) -> bool:
        got = self._raw(key)
        if got is None:
            return default
        value, lineno = got
        if value not in _BOOL:
            raise ScenarioParseError(
                f"field '{key}' expects true/false, got '{value}'", lineno
            )
        return _BOOL[value]

    def choice(self, key: str, choices: tuple[str, ...],
               default: Optional[str] = None) -> Optional[str]:
        got = self._raw(key)
        if got is None:
            return default
        value, lineno = got
        if value not in choices:
            raise ScenarioParseError(
                f"field '{key}' must be one of {', '.join(choices)}", lineno
            )
        return value

    def tokens(self, key: str) -> tuple[str, ...]:
        got = self._raw(key)
        return tuple(got[0].split()) if got else ()

    def int_tokens(self, key: str) -> tuple[int, ...]:
        got = self._raw(key)
        if got is None:
            return ()
        value, lineno = got
        try:
            return tuple(int(t) for t in value.split())
        except ValueError:
            raise ScenarioParseError(
                f"field '{key}' expects integers, got '{value}'", lineno
            ) from None

    def finish(self):
        for key, (_, lineno) in self.seen.items():
            if key not in self.used:
                raise ScenarioParseError(
                    f"unknown field '{key}' in {self.block.kind} block", lineno
                )


def _parse_workload(block: _Block) -> tuple[WorkloadCommand, ...]:
    commands = []
    for raw, lineno in block.commands:
        parts = raw.split()
        if len(parts) < 3 or parts[0] != "at":
            raise ScenarioParseError(
                "workload line must be 'at <seconds> <action> [k=v ...]'", lineno
            )
        try:
            at_s = float(parts[1])
        except ValueError:
            raise ScenarioParseError(
                f"bad workload time '{parts[1]}'", lineno
            ) from None
        action = parts[2]
        args = []
        for token in parts[3:]:
            if "=" not in token:
                raise ScenarioParseError(
                    f"workload argument '{token}' must be key=value", lineno
                )
            k, _, v = token.partition("=")
            args.append((k, v))
        commands.append(WorkloadCommand(at_s=at_s, action=action, args=tuple(args)))
    return tuple(commands)


def load_scenario(text: str) -> NetworkModel:
    """Parse and fully validate a scenario document."""
    blocks = _tokenize_blocks(text)

    nodes: list[Node] = []
    spans: list[FibreSpan] = []
    elements: list[OpticalElement] = []
    modules: list[QkdModule] = []
    links: list[QkdLink] = []
    channels: list[ClassicalChannel] = []
    apps: list[App] = []
    defaults = ServiceDefaults()
    workload: tuple[WorkloadCommand, ...] = ()

    for block in blocks:
        r = _FieldReader(block)
        if block.kind == "node":
            nodes.append(Node(
                id=block.ident,
                domain=r.require("domain"),
                trusted=r.boolean("trusted", True),
                display=r.get("display", "") or "",
            ))
        elif block.kind == "span":
            endpoints = r.tokens("endpoints")
            if len(endpoints) != 2:
                raise ScenarioParseError(
                    f"span '{block.ident}' needs exactly two endpoints", block.line
                )
            length = r.number("length_km", 0.0)
            loss = r.number("loss_db")
            if loss is None:
                loss = round(DEFAULT_LOSS_DB_PER_KM * length, 9)
            spans.append(FibreSpan(
                id=block.ident,
                endpoints=(endpoints[0], endpoints[1]),
                length_km=length,
                loss_db=loss,
                strands=r.choice("strands", STRAND_KINDS, "duplex_pair"),
                domain=r.require("domain"),
            ))
        elif block.kind == "element":
            kind = r.choice("kind", ELEMENT_KINDS, None)
            if kind is None:
                raise ScenarioParseError(
                    f"element '{block.ident}' missing field 'kind'", block.line
                )
            elements.append(OpticalElement(
                id=block.ident,
                node=r.require("node"),
                kind=kind,
                passband=frozenset(r.int_tokens("passband")),
                insertion_loss_db=r.number("insertion_loss_db", 0.0),
                ports=r.tokens("ports"),
                amplified=r.boolean("amplified", False),
            ))
        elif block.kind == "module":
            fixed_raw = r.integer("fixed_channel")
            modules.append(QkdModule(
                id=block.ident,
                node=r.require("node"),
                vendor=r.get("vendor", "generic") or "generic",
                family=r.choice("family", MODULE_FAMILIES, "DV"),
                role=r.choice("role", MODULE_ROLES, "transceiver"),
                tunable=r.boolean("tunable", False),
                fixed_channel=fixed_raw,
                rate_params=RateParams(
                    r0_bps=r.number("r0_bps", 1000.0),
                    max_loss_db=r.number("max_loss_db", 30.0),
                    qber0=r.number("qber0", 0.02),
                    noise_coeff=r.number("noise_coeff", 0.0),
                ),
                abort_qber=r.number("abort_qber"),
                domain=r.require("domain"),
            ))
        elif block.kind == "link":
            links.append(QkdLink(
                id=block.ident,
                src_module=r.require("src"),
                dst_module=r.require("dst"),
                spans=r.tokens("spans"),
                channel=r.integer("channel"),
                switched=r.boolean("switched", False),
                mode=r.choice("mode", LINK_MODES, "distilled"),
                domain=r.require("domain"),
            ))
        elif block.kind == "channel":
            channels.append(ClassicalChannel(
                id=block.ident,
                span=r.require("span"),
                index=r.integer("index", 0),
                role=r.choice("role", CHANNEL_ROLES, "data"),
                power=r.choice("power", POWER_CLASSES, "low"),
                encrypted=r.boolean("encrypted", False),
                domain=r.require("domain"),
            ))
        elif block.kind == "app":
            apps.append(App(
                id=block.ident,
                node=r.require("node"),
                kind=r.get("kind", "console") or "console",
                domain=r.require("domain"),
            ))
        elif block.kind == "defaults":
            defaults = ServiceDefaults(
                key_chunk_size=r.integer("key_chunk_size", 32),
                min_bps=r.number("min_bps", 256.0),
                max_bps=r.number("max_bps", 1024.0),
                timeout_ms=r.integer("timeout_ms", 5000),
                ttl_s=r.integer("ttl_s", 3600),
                max_key_size=r.integer("max_key_size", 1024),
                max_key_count=r.integer("max_key_count", 1024),
            )
        elif block.kind == "workload":
            workload = _parse_workload(block)
        r.finish()

    model = NetworkModel(
        nodes=tuple(nodes),
        spans=tuple(spans),
        elements=tuple(elements),
        modules=tuple(modules),
        links=tuple(links),
        channels=tuple(channels),
        apps=tuple(apps),
        defaults=defaults,
        workload=workload,
    )
    _validate(model)
    return model


def load_scenario_path(path) -> NetworkModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_scenario(fh.read())


def _validate(model: NetworkModel) -> None:
    def check_unique(kind: str, ids: Iterable[str]):
        seen: set[str] = set()
        for i in ids:
            if i in seen:
                raise ModelValidationError(f"duplicate {kind} id '{i}'")
            seen.add(i)

    check_unique("node", (n.id for n in model.nodes))
    check_unique("span", (s.id for s in model.spans))
    check_unique("element", (e.id for e in model.elements))
    check_unique("module", (m.id for m in model.modules))
    check_unique("link", (l.id for l in model.links))
    check_unique("channel", (c.id for c in model.channels))
    check_unique("app", (a.id for a in model.apps))

    node_ids = {n.id for n in model.nodes}
    span_ids = {s.id for s in model.spans}
    element_ids = {e.id for e in model.elements}
    module_ids = {m.id for m in model.modules}

    def need(kind: str, ident: str, pool: set[str], owner: str):
        if ident not in pool:
            raise ModelValidationError(
                f"{owner} references unknown {kind} '{ident}'"
            )

    for s in model.spans:
        need("node", s.endpoints[0], node_ids, f"span '{s.id}'")
        need("node", s.endpoints[1], node_ids, f"span '{s.id}'")
        if s.endpoints[0] == s.endpoints[1]:
            raise ModelValidationError(
                f"span '{s.id}': endpoints must differ"
            )
        if s.loss_db < 0:
            raise ModelValidationError(f"span '{s.id}': loss_db must be >= 0")
        if s.length_km < 0:
            raise ModelValidationError(f"span '{s.id}': length_km must be >= 0")

    for e in model.elements:
        need("node", e.node, node_ids, f"element '{e.id}'")
        if e.kind in ("fixed_mux", "bidi_mux") and not e.passband:
            raise ModelValidationError(
                f"element '{e.id}': passband must be non-empty for {e.kind}"
            )
        if e.insertion_loss_db < 0:
            raise ModelValidationError(
                f"element '{e.id}': insertion_loss_db must be >= 0"
            )
        for port in e.ports:
            if port not in span_ids and port not in element_ids:
                raise ModelValidationError(
                    f"element '{e.id}' references unknown port '{port}'"
                )

    for m in model.modules:
        need("node", m.node, node_ids, f"module '{m.id}'")
        if not m.tunable and m.fixed_channel is None:
            raise ModelValidationError(
                f"module '{m.id}': fixed_channel required when tunable is false"
            )
        if m.rate_params.r0_bps <= 0:
            raise ModelValidationError(f"module '{m.id}': r0_bps must be > 0")
        if not 0 <= m.rate_params.qber0 < 0.5:
            raise ModelValidationError(
                f"module '{m.id}': qber0 must be in [0, 0.5)"
            )
        host = model.node(m.node)
        if not host.trusted:
            raise ModelValidationError(
                f"node '{host.id}': trusted must be true to host module '{m.id}'"
            )

    for l in model.links:
        need("module", l.src_module, module_ids, f"link '{l.id}'")
        need("module", l.dst_module, module_ids, f"link '{l.id}'")
        if not l.spans:
            raise ModelValidationError(f"link '{l.id}': spans must be non-empty")
        for sp in l.spans:
            need("span", sp, span_ids, f"link '{l.id}'")
        if l.channel is None and not l.switched:
            raise ModelValidationError(
                f"link '{l.id}': channel required unless switched is true"
            )
        # The span list must chain from the source node to the destination.
        here = model.module(l.src_module).node
        for sp in l.spans:
            span = model.span(sp)
            if here not in span.endpoints:
                raise ModelValidationError(
                    f"link '{l.id}': span '{sp}' does not touch node '{here}'"
                )
            here = span.endpoints[1] if span.endpoints[0] == here else span.endpoints[0]
        if here != model.module(l.dst_module).node:
            raise ModelValidationError(
                f"link '{l.id}': span path ends at '{here}', not at the "
                f"destination module's node"
            )

    for c in model.channels:
        need("span", c.span, span_ids, f"channel '{c.id}'")

    for a in model.apps:
        need("node", a.node, node_ids, f"app '{a.id}'")

    # Optical fabric sanity: a node with elements must reach at least one span.
    for node in model.nodes:
        els = model.elements_at(node.id)
        if els and not any(
            port in span_ids for e in els for port in e.ports
        ):
            raise ModelValidationError(
                f"node '{node.id}': optical elements are not connected to any span"
            )


# ---------------------------------------------------------------------------
# Serialization


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(model: NetworkModel) -> str:
    """Render a model back into scenario text.

    ``load_scenario(serialize(m)) == m`` for every valid model; byte
    equality with the original document is not preserved (comments and
    defaulted fields are dropped).
    """
    out: list[str] = []

    def block(kind: str, ident: str, fields: list[tuple[str, object]]):
        head = f"{kind} {ident} {{" if ident else f"{kind} {{"
        out.append(head)
        for key, value in fields:
            if value is None or value == "":
                continue
            out.append(f"  {key}: {_fmt(value)}")
        out.append("}")

    for n in model.nodes:
        block("node", n.id, [
            ("domain", n.domain), ("trusted", n.trusted), ("display", n.display),
        ])
    for s in model.spans:
        block("span", s.id, [
            ("endpoints", " ".join(s.endpoints)),
            ("length_km", s.length_km),
            ("loss_db", s.loss_db),
            ("strands", s.strands),
            ("domain", s.domain),
        ])
    for e in model.elements:
        block("element", e.id, [
            ("node", e.node),
            ("kind", e.kind),
            ("passband", " ".join(str(c) for c in sorted(e.passband))),
            ("insertion_loss_db", e.insertion_loss_db),
            ("ports", " ".join(e.ports)),
            ("amplified", e.amplified),
        ])
    for m in model.modules:
        block("module", m.id, [
            ("node", m.node),
            ("vendor", m.vendor),
            ("family", m.family),
            ("role", m.role),
            ("tunable", m.tunable),
            ("fixed_channel", m.fixed_channel),
            ("r0_bps", m.rate_params.r0_bps),
            ("max_loss_db", m.rate_params.max_loss_db),
            ("qber0", m.rate_params.qber0),
            ("noise_coeff", m.rate_params.noise_coeff),
            ("abort_qber", m.abort_qber),
            ("domain", m.domain),
        ])
    for l in model.links:
        block("link", l.id, [
            ("src", l.src_module),
            ("dst", l.dst_module),
            ("spans", " ".join(l.spans)),
            ("channel", l.channel),
            ("switched", l.switched),
            ("mode", l.mode),
            ("domain", l.domain),
        ])
    for c in model.channels:
        block("channel", c.id, [
            ("span", c.span),
            ("index", c.index),
            ("role", c.role),
            ("power", c.power),
            ("encrypted", c.encrypted),
            ("domain", c.domain),
        ])
    for a in model.apps:
        block("app", a.id, [
            ("node", a.node), ("kind", a.kind), ("domain", a.domain),
        ])
    d = model.defaults
    block("defaults", "", [
        ("key_chunk_size", d.key_chunk_size),
        ("min_bps", d.min_bps),
        ("max_bps", d.max_bps),
        ("timeout_ms", d.timeout_ms),
        ("ttl_s", d.ttl_s),
        ("max_key_size", d.max_key_size),
        ("max_key_count", d.max_key_count),
    ])
    if model.workload:
        out.append("workload {")
        for cmd in model.workload:
            args = " ".join(f"{k}={v}" for k, v in cmd.args)
            line = f"  at {_fmt(cmd.at_s)} {cmd.action}"
            out.append(f"{line} {args}" if args else line)
        out.append("}")
    return "\n".join(out) + "\n"
