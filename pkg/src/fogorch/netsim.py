"""Deterministic discrete-event transport for framework envelopes.

Endpoints are ``ip:port`` strings owned by a node. A send is checked for
routability against the node's mesh config (pod-range destinations only
cross nodes once the mesh carries them), then delivered after a sampled
one-way latency on a virtual millisecond clock.
"""

from __future__ import annotations

import heapq
import itertools
import json
import random
import time
from dataclasses import dataclass, fields
from ipaddress import IPv4Address, IPv4Network
from pathlib import Path
from typing import Callable

from .fogbus.envelope import Envelope, split_address
from .mesh import MeshTopology, resolve_route

UNROUTABLE = "unroutable"
ENDPOINT_DOWN = "endpoint_down"
DROPPED = "dropped"

SAME_NODE = "same_node"
VPN_CLOUD_CLOUD = "vpn_cloud_cloud"
VPN_CLOUD_EDGE = "vpn_cloud_edge"


class SimulationError(RuntimeError):
    pass


class UnknownEndpoint(SimulationError, KeyError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    same_node_ms: float = 1.0
    vpn_cloud_cloud_ms: float = 6.0
    vpn_cloud_edge_ms: float = 6.0
    cluster_overlay_extra_ms: float = 2.0
    jitter_ms: float = 0.25
    # extra spread contributed by the cluster overlay on top of jitter_ms
    overlay_jitter_ms: float = 0.25
    seed: int = 42

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"latency parameter {f.name} must be >= 0")

    @classmethod
    def from_text(cls, text: str, **overrides) -> LatencyModel:
        known = {f.name: f.type for f in fields(cls)}
        values: dict[str, float | int] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"latency config line {lineno}: unrecognized entry {raw.strip()!r}")
            values[key] = int(value) if key == "seed" else float(value)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> LatencyModel:
        return cls.from_text(Path(path).read_text(), **overrides)

    def base_ms(self, link: str) -> float:
        return {
            SAME_NODE: self.same_node_ms,
            VPN_CLOUD_CLOUD: self.vpn_cloud_cloud_ms,
            VPN_CLOUD_EDGE: self.vpn_cloud_edge_ms,
        }[link]

    def upper_bound_ms(self, overlay: bool = True) -> float:
        worst = max(self.same_node_ms, self.vpn_cloud_cloud_ms, self.vpn_cloud_edge_ms) + self.jitter_ms
        if overlay:
            worst += self.cluster_overlay_extra_ms + self.overlay_jitter_ms
        return worst


@dataclass(frozen=True)
class Host:
    name: str
    address: IPv4Address
    layer: str = "cloud"
    pod_subnet: IPv4Network | None = None

    def __post_init__(self):
        object.__setattr__(self, "address", IPv4Address(str(self.address)))
        if self.pod_subnet is not None and not isinstance(self.pod_subnet, IPv4Network):
            object.__setattr__(self, "pod_subnet", IPv4Network(self.pod_subnet))

    def owns(self, ip: IPv4Address) -> bool:
        return ip == self.address or (self.pod_subnet is not None and ip in self.pod_subnet)


@dataclass(frozen=True)
class Route:
    routable: bool
    node: str | None = None
    link: str | None = None


@dataclass(frozen=True)
class DeliveryResult:
    delivered: bool
    latency_ms: float = 0.0
    failure_reason: str | None = None
    msg_id: int = 0


@dataclass
class _Endpoint:
    address: str
    handler: Callable[[Envelope], None] | None
    node: str
    gateway: bool = False
    on_fail: Callable[[], None] | None = None


class Simulator:
    """Event queue, endpoint registry and routing for one experiment.

    ``overlay`` toggles the cluster networking overhead; a native
    (non-orchestrated) deployment runs with it off. With ``realtime`` the
    event loop sleeps so virtual milliseconds track wall-clock ones.
    """

    def __init__(
        self,
        hosts: list[Host],
        topology: MeshTopology | None = None,
        latency: LatencyModel | None = None,
        overlay: bool = True,
        realtime: bool = False,
    ):
        self.hosts = {h.name: h for h in hosts}
        self.topology = topology
        self.latency = latency or LatencyModel()
        self.overlay = overlay
        self.realtime = realtime
        self.rng = random.Random(self.latency.seed)
        self.endpoints: dict[str, _Endpoint] = {}
        self.trace: list[dict] = []
        self._now = 0.0
        self._queue: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._msg_ids = itertools.count(1)
        self._pair_clock: dict[tuple[str, str], float] = {}

    # --- clock ---------------------------------------------------------

    @property
    def now(self) -> float:
        return self._now

    def schedule(self, at: float, callback: Callable[[], None]):
        if at < self._now:
            raise SimulationError(f"cannot schedule in the past ({at} < {self._now})")
        heapq.heappush(self._queue, (at, next(self._seq), callback))

    def _step(self):
        at, _, callback = heapq.heappop(self._queue)
        if self.realtime and at > self._now:
            time.sleep((at - self._now) / 1000.0)
        self._now = at
        callback()

    def run_until_idle(self):
        while self._queue:
            self._step()

    def run_until(self, predicate: Callable[[], bool], deadline: float) -> bool:
        """Process events up to ``deadline``; stop early once ``predicate`` holds."""
        while not predicate():
            if not self._queue or self._queue[0][0] > deadline:
                self._now = max(self._now, deadline)
                return predicate()
            self._step()
        return True

    @property
    def pending(self) -> int:
        return len(self._queue)

    # --- registry ------------------------------------------------------

    def register(
        self,
        address: str,
        handler: Callable[[Envelope], None] | None,
        node: str,
        *,
        gateway: bool = False,
        on_fail: Callable[[], None] | None = None,
    ):
        split_address(address)
        if node not in self.hosts:
            raise SimulationError(f"unknown node {node!r}")
        if address in self.endpoints:
            raise SimulationError(f"address {address} already has a handler")
        self.endpoints[address] = _Endpoint(address, handler, node, gateway, on_fail)

    def set_handler(self, address: str, handler: Callable[[Envelope], None]):
        self._endpoint(address).handler = handler

    def deregister(self, address: str):
        self.endpoints.pop(address, None)

    def _endpoint(self, address: str) -> _Endpoint:
        try:
            return self.endpoints[address]
        except KeyError:
            raise UnknownEndpoint(address) from None

    def fail_endpoint(self, address: str):
        """Take an endpoint down; its owner is notified so the pod is marked failed."""
        ep = self._endpoint(address)
        del self.endpoints[address]
        self.trace.append({"event": "fail_endpoint", "time": self._now, "address": address, "node": ep.node})
        if ep.on_fail:
            ep.on_fail()

    # --- routing -------------------------------------------------------

    def owner_of(self, ip: IPv4Address) -> str | None:
        for name, host in self.hosts.items():
            if host.owns(ip):
                return name
        return None

    def _link_class(self, a: str, b: str) -> str:
        if a == b:
            return SAME_NODE
        if self.hosts[a].layer == "edge" or self.hosts[b].layer == "edge":
            return VPN_CLOUD_EDGE
        return VPN_CLOUD_CLOUD

    def route(self, src_node: str, dst: str | IPv4Address, gateway: bool = False) -> Route:
        """Decide whether ``dst`` is reachable from ``src_node`` and over which link.

        A gateway sender (the proxy) reaches pod addresses by tunnelling to the
        owning node's mesh address instead of routing the pod address itself.
        """
        ip = IPv4Address(str(dst))
        owner = self.owner_of(ip)
        if owner == src_node:
            return Route(True, src_node, SAME_NODE)
        if self.topology is None or src_node not in self.topology.configs:
            return Route(False)
        target = ip
        if gateway and owner is not None and ip != self.hosts[owner].address:
            target = self.hosts[owner].address
        decision = resolve_route(self.topology.configs[src_node], target)
        if decision.kind != "peer":
            return Route(False)
        via = self.topology.node_for_key(decision.public_key)
        if via is None or via != owner:
            return Route(False)
        return Route(True, via, self._link_class(src_node, via))

    def _sample(self, link: str) -> float:
        lat = self.latency
        # both draws happen every time so native and overlay runs stay in lockstep
        jitter = self.rng.uniform(-lat.jitter_ms, lat.jitter_ms)
        overlay_jitter = self.rng.uniform(-lat.overlay_jitter_ms, lat.overlay_jitter_ms)
        value = lat.base_ms(link) + jitter
        if self.overlay:
            value += lat.cluster_overlay_extra_ms + overlay_jitter
        return max(value, 1e-3)

    # --- transport -----------------------------------------------------

    def send(self, env: Envelope, src: str) -> DeliveryResult:
        ep = self._endpoint(src)
        msg_id = next(self._msg_ids)
        wire = env.to_wire()
        dst_host, _ = split_address(env.dest)
        record = {
            "event": "send",
            "msg": msg_id,
            "time": self._now,
            "kind": env.kind,
            "request_id": env.request_id,
            "src": src,
            "dst": env.dest,
            "reply_to": env.reply_to,
            "src_node": ep.node,
            "hops": env.hops,
        }
        self.trace.append(record)
        route = self.route(ep.node, dst_host, ep.gateway)
        if not route.routable:
            return self._fail(msg_id, UNROUTABLE)
        target = self.endpoints.get(env.dest)
        if target is None or target.node != route.node:
            return self._fail(msg_id, ENDPOINT_DOWN)
        latency = self._sample(route.link)
        pair = (src, env.dest)
        # per-pair FIFO: never deliver ahead of an earlier message on the same pair
        at = max(self._now + latency, self._pair_clock.get(pair, 0.0))
        self._pair_clock[pair] = at
        sent_at = self._now
        record.update(link=route.link, dst_node=route.node)
        self.schedule(at, lambda: self._deliver(msg_id, wire, sent_at, route.link))
        return DeliveryResult(True, at - sent_at, None, msg_id)

    def _fail(self, msg_id: int, reason: str) -> DeliveryResult:
        self.trace.append({"event": "outcome", "msg": msg_id, "time": self._now, "delivered": False, "reason": reason})
        return DeliveryResult(False, 0.0, reason, msg_id)

    def _deliver(self, msg_id: int, wire: bytes, sent_at: float, link: str):
        env = Envelope.from_wire(wire)
        ep = self.endpoints.get(env.dest)
        if ep is None:
            self._fail(msg_id, ENDPOINT_DOWN)
            return
        self.trace.append(
            {
                "event": "outcome",
                "msg": msg_id,
                "time": self._now,
                "delivered": True,
                "latency_ms": self._now - sent_at,
                "link": link,
            }
        )
        if ep.handler is not None:
            ep.handler(env)

    # --- trace queries -------------------------------------------------

    def outcomes(self) -> dict[int, list[dict]]:
        result: dict[int, list[dict]] = {}
        for rec in self.trace:
            if rec["event"] == "outcome":
                result.setdefault(rec["msg"], []).append(rec)
        return result

    def failure_reasons(self, request_id: str, include_logs: bool = False) -> list[str]:
        kinds = {rec["msg"]: rec["kind"] for rec in self.trace if rec["event"] == "send" and rec["request_id"] == request_id}
        return [
            rec["reason"]
            for rec in self.trace
            if rec["event"] == "outcome"
            and not rec["delivered"]
            and rec["msg"] in kinds
            and (include_logs or kinds[rec["msg"]] != "log")
        ]

    def export_trace(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def with_topology(self, topology: MeshTopology) -> Simulator:
        """Swap in a new mesh (e.g. after widening AllowedIPs) in place."""
        self.topology = topology
        return self
