import base64
import ipaddress
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogorch.mesh import (
    InterfaceSection,
    MeshConfigError,
    NodeMeshConfig,
    NodeSpec,
    PeerEntry,
    build_full_mesh,
    extend_allowed_ips,
    parse_mesh_config,
    render_mesh_config,
    resolve_route,
    topology_from_configs,
    validate_full_mesh,
)


def scan_route(cfg, dst):
    """Independent oracle: integer mask comparison over every block, longest wins."""
    d = int(ipaddress.IPv4Address(dst))
    best = (-1, "unroutable", None)
    candidates = [(32, int(cfg.interface.address.ip), "local", None)]
    candidates += [(n.prefixlen, int(n.network_address), "local", None) for n in cfg.interface.local_networks]
    for peer in cfg.peers:
        candidates += [(n.prefixlen, int(n.network_address), "peer", peer) for n in peer.allowed_ips]
    for plen, net, kind, peer in candidates:
        mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF
        if d & mask == net & mask and plen > best[0]:
            best = (plen, kind, peer)
    return best[1], best[2]


# --- parse / render ----------------------------------------------------------


def test_parse_sample_config(worker04_text):
    cfg = parse_mesh_config(worker04_text)
    assert str(cfg.interface.address) == "192.0.0.5/24"
    assert cfg.interface.listen_port == 4999
    assert len(cfg.peers) == 4
    master = cfg.peers[0]
    assert master.name == "master"
    assert master.endpoint == "45.113.235.156:4999"
    assert [str(n) for n in master.allowed_ips] == ["192.0.0.1/32"]
    assert master.keepalive_s == 15


def test_parse_interface_only():
    cfg = parse_mesh_config("[Interface]\nAddress = 10.0.0.1/24\nListenPort = 51820\n")
    assert cfg.peers == ()


@pytest.mark.parametrize(
    "text, message",
    [
        ("[Interface]\nAddress = 10.0.0.1/24\nListenPort = 1\n[Peer]\nPublicKey = k\nAllowedIPs = 300.0.0.1/32\n", "malformed CIDR"),
        ("[Interface]\nListenPort = 4999\n", "missing address"),
        ("[Interface]\nAddress = 10.0.0.1/24\n", "missing listenport"),
        ("[Interface]\nAddress = 10.0.0.1/24\nListenPort = 1\n[Interface]\nAddress = 10.0.0.2/24\nListenPort = 1\n", "exactly one"),
        ("[Interface]\nAddress = 10.0.0.1/24\nListenPort = 1\n[Peer]\nPublicKey = k\nAllowedIPs =\n", "empty AllowedIPs"),
        ("[Peer]\nPublicKey = k\nAllowedIPs = 10.0.0.2/32\n", "exactly one"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(MeshConfigError, match=message):
        parse_mesh_config(text)


def test_render_contains_listen_port(worker04_text):
    assert "ListenPort = 4999" in render_mesh_config(parse_mesh_config(worker04_text)).splitlines()


def test_render_interface_only():
    cfg = NodeMeshConfig(InterfaceSection(ipaddress.IPv4Interface("10.0.0.1/24"), 4999))
    assert render_mesh_config(cfg) == "[Interface]\nAddress = 10.0.0.1/24\nListenPort = 4999\n"


def test_render_parse_sample_semantically_equal(worker04_text):
    cfg = parse_mesh_config(worker04_text)
    assert parse_mesh_config(render_mesh_config(cfg)) == cfg


_octet = st.integers(0, 255)
_ip = st.tuples(_octet, _octet, _octet, _octet).map(lambda t: ipaddress.IPv4Address(".".join(map(str, t))))
_net = st.tuples(_ip, st.integers(8, 32)).map(lambda t: ipaddress.IPv4Network(f"{t[0]}/{t[1]}", strict=False))
_key = st.binary(min_size=3, max_size=32).map(lambda b: base64.b64encode(b).decode())


@st.composite
def mesh_configs(draw):
    nets = draw(st.lists(_net, min_size=0, max_size=12, unique=True))
    peers = []
    for i in range(draw(st.integers(0, 6))):
        # distinct peers get disjoint slices of the unique block list, so no ties
        mine = nets[i * 2:(i * 2) + 2] or [ipaddress.IPv4Network(f"172.16.{i}.0/24")]
        peers.append(
            PeerEntry(
                public_key=draw(_key),
                allowed_ips=tuple(mine),
                endpoint=draw(st.none() | st.builds(lambda ip, p: f"{ip}:{p}", _ip, st.integers(1, 65535))),
                keepalive_s=draw(st.none() | st.integers(1, 120)),
                name=draw(st.none() | st.sampled_from(["master", "worker01", "edge7", "n0"])),
            )
        )
    iface = InterfaceSection(
        address=ipaddress.IPv4Interface(f"{draw(_ip)}/{draw(st.integers(8, 32))}"),
        listen_port=draw(st.integers(1, 65535)),
        private_key=draw(st.none() | _key),
    )
    try:
        return NodeMeshConfig(iface, tuple(peers))
    except MeshConfigError:
        return NodeMeshConfig(iface, ())


@given(mesh_configs())
def test_round_trip_property(cfg):
    assert parse_mesh_config(render_mesh_config(cfg)) == cfg


def test_round_trip_generated_five_node(table_mesh):
    for cfg in table_mesh.configs.values():
        assert parse_mesh_config(render_mesh_config(cfg)) == cfg


# --- build_full_mesh ----------------------------------------------------------


def test_full_mesh_matches_sample_config(table_mesh, worker04_text):
    sample = parse_mesh_config(worker04_text)
    mine = table_mesh.configs["worker04"]

    def strip_keys(cfg):
        return replace(
            cfg,
            interface=replace(cfg.interface, private_key=None),
            peers=tuple(replace(p, public_key="") for p in cfg.peers),
        )

    assert strip_keys(mine) == strip_keys(sample)
    worker03 = next(p for p in mine.peers if p.name == "worker03")
    assert worker03.endpoint == "192.168.0.40:4999"


def test_full_mesh_peer_layout(table_mesh, table_nodes):
    by_name = {n.name: n for n in table_nodes}
    for name, cfg in table_mesh.configs.items():
        assert len(cfg.peers) == 4
        for peer in cfg.peers:
            other = by_name[peer.name]
            assert peer.allowed_ips == (ipaddress.IPv4Network(f"{other.private_ip}/32"),)
            assert peer.keepalive_s == 15
            assert peer.endpoint == (other.public_endpoint or other.lan_endpoint)
    # worker04 has neither endpoint, so nobody can initiate towards it
    assert all(p.endpoint is None for c in table_mesh.configs.values() for p in c.peers if p.name == "worker04")


def test_two_cloud_nodes():
    nodes = [
        NodeSpec("A", "a", "cloud", "10.9.0.1", public_endpoint="1.1.1.1:4999"),
        NodeSpec("B", "b", "cloud", "10.9.0.2", public_endpoint="2.2.2.2:4999"),
    ]
    topo = build_full_mesh(nodes, "10.9.0.0/24")
    assert [p.endpoint for p in topo.configs["a"].peers] == ["2.2.2.2:4999"]
    assert [p.endpoint for p in topo.configs["b"].peers] == ["1.1.1.1:4999"]


def test_full_mesh_errors():
    a = NodeSpec("A", "a", "cloud", "10.9.0.1", public_endpoint="1.1.1.1:4999")
    with pytest.raises(MeshConfigError, match="duplicate"):
        build_full_mesh([a, NodeSpec("B", "b", "edge", "10.9.0.1")], "10.9.0.0/24")
    with pytest.raises(MeshConfigError, match="outside"):
        build_full_mesh([a, NodeSpec("B", "b", "edge", "10.8.0.1")], "10.9.0.0/24")
    with pytest.raises(MeshConfigError, match="at least two"):
        build_full_mesh([a], "10.9.0.0/24")


def test_cloud_node_needs_public_endpoint():
    with pytest.raises(MeshConfigError, match="public endpoint"):
        NodeSpec("A", "a", "cloud", "10.9.0.1")


def test_generated_keys_are_deterministic(table_nodes):
    one = build_full_mesh(table_nodes, "192.0.0.0/24")
    two = build_full_mesh(table_nodes, "192.0.0.0/24")
    assert one.configs == two.configs
    assert len(set(one.public_keys.values())) == 5


# --- resolve_route ------------------------------------------------------------


def test_route_to_master_from_worker04(table_mesh):
    decision = resolve_route(table_mesh.configs["worker04"], "192.0.0.1")
    assert decision.kind == "peer"
    assert decision.peer.name == "master"
    assert decision.endpoint == "45.113.235.156:4999"


def test_route_to_self_is_local(table_mesh):
    assert resolve_route(table_mesh.configs["worker04"], "192.0.0.5").kind == "local"


def test_pod_address_unroutable(table_mesh):
    cfg = table_mesh.configs["worker04"]
    assert scan_route(cfg, "10.42.1.7") == ("unroutable", None)
    assert resolve_route(cfg, "10.42.1.7").kind == "unroutable"


def test_unassigned_vpn_address_is_not_local(table_mesh):
    # the /24 on the interface is shared, not ours
    assert resolve_route(table_mesh.configs["worker04"], "192.0.0.77").kind == "unroutable"


@given(mesh_configs(), _ip)
def test_route_agrees_with_scan(cfg, dst):
    decision = resolve_route(cfg, dst)
    kind, peer = scan_route(cfg, dst)
    assert decision.kind == kind
    assert decision.peer == peer
    assert resolve_route(cfg, dst) == decision


def test_equal_prefix_tie_rejected():
    iface = InterfaceSection(ipaddress.IPv4Interface("10.0.0.1/24"), 1)
    p1 = PeerEntry("k1", ("10.1.0.0/24",))
    p2 = PeerEntry("k2", ("10.1.0.0/24",))
    with pytest.raises(MeshConfigError, match="ambiguous"):
        NodeMeshConfig(iface, (p1, p2))
    # nested blocks of different length are fine: longest prefix decides
    cfg = NodeMeshConfig(iface, (PeerEntry("k1", ("10.1.0.0/16",)), PeerEntry("k2", ("10.1.2.0/24",))))
    assert resolve_route(cfg, "10.1.2.3").public_key == "k2"
    assert resolve_route(cfg, "10.1.3.3").public_key == "k1"


# --- validate_full_mesh ------------------------------------------------------


def test_validate_table_mesh(table_mesh):
    report = validate_full_mesh(table_mesh)
    expected_pairs = {(a, b) for a in table_mesh.configs for b in table_mesh.configs if a != b}
    assert set(report.pairs) == expected_pairs
    assert len(expected_pairs) == 20
    assert report.ok
    assert report.summary() == "20/20 pairs routable"


def test_validate_after_deleting_peer(table_mesh):
    cfg = table_mesh.configs["worker04"]
    broken = replace(cfg, peers=tuple(p for p in cfg.peers if p.name != "worker03"))
    topo = replace(table_mesh, configs={**table_mesh.configs, "worker04": broken})
    report = validate_full_mesh(topo)
    assert not report.ok
    assert "worker04→192.0.0.4 unroutable" in report.findings
    assert any("asymmetric" in f and "worker03" in f for f in report.findings)
    assert report.routable_pairs == 19


def test_validate_single_node():
    cfg = NodeMeshConfig(InterfaceSection(ipaddress.IPv4Interface("10.0.0.1/24"), 1))
    report = validate_full_mesh(topology_from_configs({"solo": cfg}))
    assert report.ok and report.pairs == {}


def test_validate_flags_wrong_peer(table_mesh):
    cfg = table_mesh.configs["worker04"]
    swapped = tuple(replace(p, public_key=table_mesh.public_keys["worker01"]) if p.name == "master" else p for p in cfg.peers)
    topo = replace(table_mesh, configs={**table_mesh.configs, "worker04": replace(cfg, peers=swapped)})
    assert any("wrong peer" in f for f in validate_full_mesh(topo).findings)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.data())
def test_full_mesh_soundness(n, data):
    layers = data.draw(st.lists(st.sampled_from(["cloud", "edge"]), min_size=n, max_size=n))
    nodes = [
        NodeSpec(
            f"T{i}",
            f"n{i}",
            layer,
            f"10.77.0.{i + 1}",
            public_endpoint=f"203.0.113.{i + 1}:4999" if layer == "cloud" else None,
        )
        for i, layer in enumerate(layers)
    ]
    topo = build_full_mesh(nodes, "10.77.0.0/24")
    report = validate_full_mesh(topo)
    assert report.ok
    assert report.routable_pairs == n * (n - 1)


def test_topology_from_parsed_configs(table_mesh):
    parsed = {name: parse_mesh_config(render_mesh_config(cfg)) for name, cfg in table_mesh.configs.items()}
    topo = topology_from_configs(parsed)
    assert topo.vpn_cidr == ipaddress.IPv4Network("192.0.0.0/24")
    assert topo.public_keys == table_mesh.public_keys
    assert validate_full_mesh(topo).ok


# --- extend_allowed_ips -------------------------------------------------------


def pod_owner_map():
    names = ["master", "worker01", "worker02", "worker03", "worker04"]
    return {name: f"10.42.{i}.0/24" for i, name in enumerate(names)}


def test_extension_routes_pod_range(table_mesh):
    extended = extend_allowed_ips(table_mesh, "10.42.0.0/16", pod_owner_map())
    decision = resolve_route(extended.configs["worker04"], "10.42.0.9")
    assert decision.kind == "peer" and decision.peer.name == "master"
    assert resolve_route(extended.configs["worker04"], "10.42.4.3").kind == "local"
    assert validate_full_mesh(extended).ok


def test_extension_empty_map_is_identity(table_mesh):
    assert extend_allowed_ips(table_mesh, "10.42.0.0/16", {}) is table_mesh


def test_extension_overlap_rejected(table_mesh):
    with pytest.raises(MeshConfigError, match="overlaps"):
        extend_allowed_ips(table_mesh, "10.42.0.0/16", {"worker01": "10.42.3.0/24", "worker02": "10.42.3.0/24"})


def test_extension_outside_range_rejected(table_mesh):
    with pytest.raises(MeshConfigError, match="outside"):
        extend_allowed_ips(table_mesh, "10.42.0.0/16", {"worker01": "10.43.3.0/24"})


def test_extension_renders_and_parses(table_mesh):
    extended = extend_allowed_ips(table_mesh, "10.42.0.0/16", pod_owner_map())
    for cfg in extended.configs.values():
        assert parse_mesh_config(render_mesh_config(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.data())
def test_extension_soundness(n, data):
    nodes = [NodeSpec(f"T{i}", f"n{i}", "cloud", f"10.77.0.{i + 1}", public_endpoint=f"203.0.113.{i + 1}:1") for i in range(n)]
    topo = build_full_mesh(nodes, "10.77.0.0/24")
    owners = data.draw(st.lists(st.sampled_from([f"n{i}" for i in range(n)]), unique=True))
    owner_map = {name: f"10.42.{int(name[1:])}.0/24" for name in owners}
    extended = extend_allowed_ips(topo, "10.42.0.0/16", owner_map)
    probes = data.draw(st.lists(st.integers(0, 255), min_size=1, max_size=5))
    for src in extended.configs:
        for owner in owners:
            for host in probes:
                assert resolve_route(extended.configs[src], f"10.42.{int(owner[1:])}.{host}").routable
        for other in topo.configs.values():
            ip = other.interface.address.ip
            before, after = resolve_route(topo.configs[src], ip), resolve_route(extended.configs[src], ip)
            assert (after.kind, after.prefix, after.public_key) == (before.kind, before.prefix, before.public_key)
