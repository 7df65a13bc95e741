"""Full-mesh P2P VPN model: config text format, generation, routing, validation.

Config documents use the wg-quick layout::

    [Interface]
    PrivateKey = ...
    Address = 192.0.0.5/24
    ListenPort = 4999

    [Peer]
    # master
    PublicKey = ...
    Endpoint = 45.113.235.156:4999
    AllowedIPs = 192.0.0.1/32
    PersistentKeepalive = 15

A peer's AllowedIPs list doubles as the routing table: a destination is sent
to the peer whose block matches it with the longest prefix.
"""

from __future__ import annotations

import base64
import hashlib
import ipaddress
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address, IPv4Interface, IPv4Network
from typing import Iterable, Mapping

DEFAULT_LISTEN_PORT = 4999
DEFAULT_KEEPALIVE = 15


class MeshConfigError(ValueError):
    """Raised for malformed config text or invalid mesh construction."""


def _network(text: str) -> IPv4Network:
    try:
        return IPv4Network(text.strip(), strict=False)
    except ValueError as exc:
        raise MeshConfigError(f"malformed CIDR {text.strip()!r}") from exc


def _interface(text: str) -> IPv4Interface:
    try:
        return IPv4Interface(text.strip())
    except ValueError as exc:
        raise MeshConfigError(f"malformed interface address {text.strip()!r}") from exc


def _address(text: str | IPv4Address) -> IPv4Address:
    if isinstance(text, IPv4Address):
        return text
    try:
        return IPv4Address(text.strip())
    except ValueError as exc:
        raise MeshConfigError(f"malformed IPv4 address {text!r}") from exc


def _port(text: str) -> int:
    try:
        port = int(text)
    except ValueError as exc:
        raise MeshConfigError(f"malformed port {text!r}") from exc
    if not 0 < port < 65536:
        raise MeshConfigError(f"port out of range: {port}")
    return port


def _endpoint(text: str) -> str:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not host:
        raise MeshConfigError(f"endpoint {text!r} is not host:port")
    _port(port)
    return f"{host}:{port}"


def derive_key(tag: str, purpose: str = "private") -> str:
    """Deterministic stand-in for a key: 32 bytes, base64, like wg genkey output."""
    digest = hashlib.sha256(f"fogorch-{purpose}:{tag}".encode()).digest()
    return base64.b64encode(digest).decode()


@dataclass(frozen=True)
class NodeSpec:
    tag: str
    name: str
    layer: str
    private_ip: IPv4Address
    public_endpoint: str | None = None
    lan_endpoint: str | None = None
    listen_port: int = DEFAULT_LISTEN_PORT

    def __post_init__(self):
        object.__setattr__(self, "private_ip", _address(self.private_ip))
        if self.layer not in ("cloud", "edge"):
            raise MeshConfigError(f"{self.name}: layer must be cloud or edge, got {self.layer!r}")
        if self.layer == "cloud" and not self.public_endpoint:
            raise MeshConfigError(f"{self.name}: cloud nodes need a public endpoint")
        for attr in ("public_endpoint", "lan_endpoint"):
            value = getattr(self, attr)
            if value:
                object.__setattr__(self, attr, _endpoint(value))


@dataclass(frozen=True)
class PeerEntry:
    public_key: str
    allowed_ips: tuple[IPv4Network, ...]
    endpoint: str | None = None
    keepalive_s: int | None = None
    # Taken from the '# name' label line; not part of the routing semantics.
    name: str | None = None

    def __post_init__(self):
        nets = tuple(n if isinstance(n, IPv4Network) else _network(n) for n in self.allowed_ips)
        if not nets:
            raise MeshConfigError(f"peer {self.name or self.public_key!r} has empty AllowedIPs")
        object.__setattr__(self, "allowed_ips", nets)


@dataclass(frozen=True)
class InterfaceSection:
    address: IPv4Interface
    listen_port: int
    private_key: str | None = None
    # Node-local subnets (e.g. this node's pod range); rendered as extra Address values.
    local_networks: tuple[IPv4Network, ...] = ()

    def __post_init__(self):
        if not isinstance(self.address, IPv4Interface):
            object.__setattr__(self, "address", _interface(self.address))
        object.__setattr__(
            self,
            "local_networks",
            tuple(n if isinstance(n, IPv4Network) else _network(n) for n in self.local_networks),
        )


def _route_conflicts(peers: Iterable[PeerEntry]) -> list[str]:
    owner: dict[IPv4Network, int] = {}
    problems = []
    for idx, peer in enumerate(peers):
        for net in peer.allowed_ips:
            prev = owner.setdefault(net, idx)
            if prev != idx:
                problems.append(f"{net} claimed by peers #{prev} and #{idx}")
    return problems


@dataclass(frozen=True)
class NodeMeshConfig:
    interface: InterfaceSection
    peers: tuple[PeerEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "peers", tuple(self.peers))
        conflicts = _route_conflicts(self.peers)
        if conflicts:
            raise MeshConfigError("ambiguous routes: " + "; ".join(conflicts))

    @property
    def private_ip(self) -> IPv4Address:
        return self.interface.address.ip


@dataclass(frozen=True)
class RouteDecision:
    kind: str  # "local" | "peer" | "unroutable"
    peer: PeerEntry | None = None
    prefix: IPv4Network | None = None

    @property
    def routable(self) -> bool:
        return self.kind != "unroutable"

    @property
    def endpoint(self) -> str | None:
        return self.peer.endpoint if self.peer else None

    @property
    def public_key(self) -> str | None:
        return self.peer.public_key if self.peer else None

    def __str__(self) -> str:
        if self.kind == "peer":
            label = self.peer.name or self.peer.public_key
            return f"via {label} {self.peer.endpoint or '(no endpoint)'} [{self.prefix}]"
        return self.kind


@dataclass(frozen=True)
class MeshTopology:
    configs: Mapping[str, NodeMeshConfig]
    vpn_cidr: IPv4Network
    # node name -> public key, so peer entries can be mapped back to nodes
    public_keys: Mapping[str, str] = field(default_factory=dict)

    def node_for_key(self, public_key: str) -> str | None:
        for name, key in self.public_keys.items():
            if key == public_key:
                return name
        return None

    def node_for_address(self, address: IPv4Address) -> str | None:
        for name, cfg in self.configs.items():
            if cfg.private_ip == address:
                return name
        return None


@dataclass
class ValidationReport:
    pairs: dict[tuple[str, str], bool] = field(default_factory=dict)
    findings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    @property
    def routable_pairs(self) -> int:
        return sum(self.pairs.values())

    def summary(self) -> str:
        return f"{self.routable_pairs}/{len(self.pairs)} pairs routable"


# --- text format -----------------------------------------------------------

_INTERFACE_KEYS = {"privatekey", "address", "listenport"}
_PEER_KEYS = {"publickey", "endpoint", "allowedips", "persistentkeepalive"}


def parse_mesh_config(text: str) -> NodeMeshConfig:
    sections: list[tuple[str, dict[str, str], list[str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if sections:
                sections[-1][2].append(line.lstrip("#").strip())
            continue
        if line.startswith("[") and line.endswith("]"):
            header = line[1:-1].strip().lower()
            if header not in ("interface", "peer"):
                raise MeshConfigError(f"line {lineno}: unknown section [{line[1:-1]}]")
            sections.append((header, {}, []))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise MeshConfigError(f"line {lineno}: expected 'Key = Value', got {line!r}")
        if not sections:
            raise MeshConfigError(f"line {lineno}: key outside of any section")
        kind, values, _ = sections[-1]
        key = key.strip().lower()
        allowed = _INTERFACE_KEYS if kind == "interface" else _PEER_KEYS
        if key not in allowed:
            raise MeshConfigError(f"line {lineno}: unsupported key {key!r} in [{kind}]")
        if key in values:
            raise MeshConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()

    interfaces = [s for s in sections if s[0] == "interface"]
    if len(interfaces) != 1:
        raise MeshConfigError(f"expected exactly one [Interface], found {len(interfaces)}")
    _, iface, _ = interfaces[0]
    for required in ("address", "listenport"):
        if required not in iface:
            raise MeshConfigError(f"[Interface] is missing {required}")
    addresses = [a for a in iface["address"].split(",") if a.strip()]
    interface = InterfaceSection(
        address=_interface(addresses[0]),
        listen_port=_port(iface["listenport"]),
        private_key=iface.get("privatekey"),
        local_networks=tuple(_network(a) for a in addresses[1:]),
    )

    peers = []
    for kind, values, comments in sections:
        if kind != "peer":
            continue
        if "publickey" not in values:
            raise MeshConfigError("[Peer] is missing PublicKey")
        allowed = [a for a in values.get("allowedips", "").split(",") if a.strip()]
        if not allowed:
            raise MeshConfigError(f"[Peer] {values['publickey']} has empty AllowedIPs")
        keepalive = values.get("persistentkeepalive")
        peers.append(
            PeerEntry(
                public_key=values["publickey"],
                allowed_ips=tuple(_network(a) for a in allowed),
                endpoint=_endpoint(values["endpoint"]) if "endpoint" in values else None,
                keepalive_s=int(keepalive) if keepalive is not None else None,
                name=comments[0] if comments else None,
            )
        )
    return NodeMeshConfig(interface=interface, peers=tuple(peers))


def render_mesh_config(cfg: NodeMeshConfig) -> str:
    iface = cfg.interface
    lines = ["[Interface]"]
    if iface.private_key:
        lines.append(f"PrivateKey = {iface.private_key}")
    address = ", ".join([str(iface.address)] + [str(n) for n in iface.local_networks])
    lines.append(f"Address = {address}")
    lines.append(f"ListenPort = {iface.listen_port}")
    for peer in cfg.peers:
        lines += ["", "[Peer]"]
        if peer.name:
            lines.append(f"# {peer.name}")
        lines.append(f"PublicKey = {peer.public_key}")
        if peer.endpoint:
            lines.append(f"Endpoint = {peer.endpoint}")
        lines.append("AllowedIPs = " + ", ".join(str(n) for n in peer.allowed_ips))
        if peer.keepalive_s is not None:
            lines.append(f"PersistentKeepalive = {peer.keepalive_s}")
    return "\n".join(lines) + "\n"


# --- construction ----------------------------------------------------------


def build_full_mesh(
    nodes: list[NodeSpec],
    vpn_cidr: str | IPv4Network,
    listen_port: int = DEFAULT_LISTEN_PORT,
) -> MeshTopology:
    """Generate one config per node, each listing every other node as a peer."""
    vpn = vpn_cidr if isinstance(vpn_cidr, IPv4Network) else _network(vpn_cidr)
    if len(nodes) < 2:
        raise MeshConfigError("a mesh needs at least two nodes")
    seen: dict[IPv4Address, str] = {}
    for node in nodes:
        if node.private_ip in seen:
            raise MeshConfigError(f"duplicate private IP {node.private_ip} ({seen[node.private_ip]}, {node.name})")
        if node.private_ip not in vpn:
            raise MeshConfigError(f"{node.name}: {node.private_ip} is outside {vpn}")
        seen[node.private_ip] = node.name
    if len({n.name for n in nodes}) != len(nodes):
        raise MeshConfigError("node names must be unique")

    public_keys = {n.name: derive_key(n.tag, "public") for n in nodes}
    configs = {}
    for node in nodes:
        peers = tuple(
            PeerEntry(
                public_key=public_keys[other.name],
                endpoint=other.public_endpoint or other.lan_endpoint,
                allowed_ips=(IPv4Network(f"{other.private_ip}/32"),),
                keepalive_s=DEFAULT_KEEPALIVE,
                name=other.name,
            )
            for other in nodes
            if other is not node
        )
        iface = InterfaceSection(
            address=IPv4Interface(f"{node.private_ip}/{vpn.prefixlen}"),
            listen_port=listen_port,
            private_key=derive_key(node.tag, "private"),
        )
        configs[node.name] = NodeMeshConfig(interface=iface, peers=peers)
    return MeshTopology(configs=configs, vpn_cidr=vpn, public_keys=public_keys)


def resolve_route(cfg: NodeMeshConfig, dst: str | IPv4Address) -> RouteDecision:
    """Longest-prefix match over the node's own addresses and every peer's AllowedIPs.

    The interface's tunnel address matches as a host route only; the shared
    VPN prefix on it does not make other mesh members local.
    """
    addr = _address(dst)
    best: RouteDecision = RouteDecision("unroutable")
    best_len = -1
    if addr == cfg.interface.address.ip:
        best, best_len = RouteDecision("local", prefix=IPv4Network(f"{addr}/32")), 32
    for net in cfg.interface.local_networks:
        if addr in net and net.prefixlen > best_len:
            best, best_len = RouteDecision("local", prefix=net), net.prefixlen
    for peer in cfg.peers:
        for net in peer.allowed_ips:
            if addr in net and net.prefixlen > best_len:
                best, best_len = RouteDecision("peer", peer=peer, prefix=net), net.prefixlen
    return best


def validate_full_mesh(topology: MeshTopology) -> ValidationReport:
    report = ValidationReport()
    configs = topology.configs
    for name, cfg in configs.items():
        if cfg.private_ip not in topology.vpn_cidr:
            report.findings.append(f"{name}: {cfg.private_ip} outside {topology.vpn_cidr}")
        for conflict in _route_conflicts(cfg.peers):
            report.findings.append(f"{name}: {conflict}")

    for src, src_cfg in configs.items():
        for dst, dst_cfg in configs.items():
            if src == dst:
                continue
            decision = resolve_route(src_cfg, dst_cfg.private_ip)
            report.pairs[(src, dst)] = decision.routable
            if not decision.routable:
                report.findings.append(f"{src}→{dst_cfg.private_ip} unroutable")
                continue
            expected_key = topology.public_keys.get(dst)
            if decision.kind == "peer" and expected_key and decision.public_key != expected_key:
                report.findings.append(f"{src}→{dst_cfg.private_ip} routed to the wrong peer")
            # symmetry: a route from src to dst must be matched by one back
            back = resolve_route(dst_cfg, src_cfg.private_ip)
            if not back.routable:
                report.findings.append(f"asymmetric peering: {src} reaches {dst} but {dst} has no route to {src}")
    return report


def extend_allowed_ips(
    topology: MeshTopology,
    extra_cidr: str | IPv4Network,
    owner_map: Mapping[str, str | IPv4Network],
) -> MeshTopology:
    """Route each node's sub-range of extra_cidr through the mesh (pod-CIDR fix).

    Every peer entry that points at an owner node gains that owner's sub-CIDR;
    the owner itself gets its sub-CIDR as a node-local network.
    """
    extra = extra_cidr if isinstance(extra_cidr, IPv4Network) else _network(extra_cidr)
    owned: dict[str, IPv4Network] = {}
    for node, sub in owner_map.items():
        net = sub if isinstance(sub, IPv4Network) else _network(sub)
        if node not in topology.configs:
            raise MeshConfigError(f"unknown node {node!r} in owner map")
        if not net.subnet_of(extra):
            raise MeshConfigError(f"{net} is outside {extra}")
        for other, other_net in owned.items():
            if net.overlaps(other_net):
                raise MeshConfigError(f"{net} ({node}) overlaps {other_net} ({other})")
        owned[node] = net
    if not owned:
        return topology

    address_owner = {cfg.private_ip: name for name, cfg in topology.configs.items()}
    configs = {}
    for name, cfg in topology.configs.items():
        peers = []
        for peer in cfg.peers:
            target = None
            for net in peer.allowed_ips:
                if net.prefixlen == 32 and net.network_address in address_owner:
                    target = address_owner[net.network_address]
                    break
            if target in owned and owned[target] not in peer.allowed_ips:
                peer = replace(peer, allowed_ips=peer.allowed_ips + (owned[target],))
            peers.append(peer)
        iface = cfg.interface
        if name in owned and owned[name] not in iface.local_networks:
            iface = replace(iface, local_networks=iface.local_networks + (owned[name],))
        configs[name] = NodeMeshConfig(interface=iface, peers=tuple(peers))
    return replace(topology, configs=configs)


def topology_from_configs(configs: Mapping[str, NodeMeshConfig], vpn_cidr: str | IPv4Network | None = None) -> MeshTopology:
    """Assemble a topology from parsed per-node documents.

    Public keys are recovered from the peer entries other nodes hold for each
    node; the VPN range defaults to the widest interface prefix.
    """
    if vpn_cidr is None:
        if not configs:
            raise MeshConfigError("no configs given")
        widest = min(configs.values(), key=lambda c: c.interface.address.network.prefixlen)
        vpn = widest.interface.address.network
    else:
        vpn = vpn_cidr if isinstance(vpn_cidr, IPv4Network) else _network(vpn_cidr)
    public_keys: dict[str, str] = {}
    by_address = {cfg.private_ip: name for name, cfg in configs.items()}
    for cfg in configs.values():
        for peer in cfg.peers:
            for net in peer.allowed_ips:
                owner = by_address.get(net.network_address) if net.prefixlen == 32 else None
                if owner:
                    public_keys.setdefault(owner, peer.public_key)
    return MeshTopology(configs=dict(configs), vpn_cidr=vpn, public_keys=public_keys)


def load_node_table(text: str) -> list[NodeSpec]:
    """Parse a whitespace table: tag name layer public_endpoint private_ip [lan_endpoint].

    '-' marks an empty cell; public endpoints without a port get the listen port.
    """
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise MeshConfigError("empty node table")
    header = [h.lower() for h in rows[0]]
    required = ["tag", "name", "layer", "public_endpoint", "private_ip"]
    missing = [c for c in required if c not in header]
    if missing:
        raise MeshConfigError(f"node table is missing columns: {', '.join(missing)}")
    nodes = []
    for row in rows[1:]:
        if len(row) != len(header):
            raise MeshConfigError(f"row {row!r} has {len(row)} cells, expected {len(header)}")
        cell = {k: (None if v == "-" else v) for k, v in zip(header, row)}
        port = int(cell.get("listen_port") or DEFAULT_LISTEN_PORT)

        def with_port(ep: str | None) -> str | None:
            if ep and ":" not in ep:
                return f"{ep}:{port}"
            return ep

        nodes.append(
            NodeSpec(
                tag=cell["tag"],
                name=cell["name"],
                layer=cell["layer"].lower(),
                public_endpoint=with_port(cell["public_endpoint"]),
                lan_endpoint=with_port(cell.get("lan_endpoint")),
                private_ip=ipaddress.IPv4Address(cell["private_ip"]),
                listen_port=port,
            )
        )
    return nodes
