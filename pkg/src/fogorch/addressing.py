"""Bind/advertise address selection per pod, and the forwarding proxy.

Three ways of getting replies back to a component running in a pod:

* ``host_network``: the pod shares the node's network identity, so the node
  address is both bound and advertised.
* ``env_variable``: the pod IP is injected through the environment and used
  for both; replies only cross nodes if the mesh routes the pod range.
* ``proxy_server``: components bind their pod IP but advertise a single
  proxy, which looks up the real address by logical name.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

from .fogbus.envelope import Envelope, join_address, split_address

if TYPE_CHECKING:
    from .cluster import ClusterNode, Pod
    from .netsim import Simulator

HOST_NETWORK = "host_network"
PROXY_SERVER = "proxy_server"
ENV_VARIABLE = "env_variable"

ALIASES = {
    "host": HOST_NETWORK,
    "proxy": PROXY_SERVER,
    "env": ENV_VARIABLE,
    HOST_NETWORK: HOST_NETWORK,
    PROXY_SERVER: PROXY_SERVER,
    ENV_VARIABLE: ENV_VARIABLE,
}

DEFAULT_PROXY_PORT = 6000
PROXY_NAME = "fogbus2-proxy"
MAX_PROXY_HOPS = 1


class AddressingError(ValueError):
    pass


@dataclass(frozen=True)
class AddressingStrategy:
    variant: str
    proxy_address: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", ALIASES[self.variant])
        except KeyError:
            raise AddressingError(f"unknown addressing strategy {self.variant!r}") from None
        if self.proxy_address is not None:
            if self.variant != PROXY_SERVER:
                raise AddressingError("proxy_address only applies to the proxy_server strategy")
            split_address(self.proxy_address)

    @property
    def uses_host_network(self) -> bool:
        return self.variant == HOST_NETWORK


def resolve_bind(strategy: AddressingStrategy, pod: Pod, node: ClusterNode) -> str:
    if strategy.variant == HOST_NETWORK:
        return node.node_address
    # env_variable and proxy_server both bind inside the pod's own namespace
    return pod.pod_ip


def resolve_advertise(strategy: AddressingStrategy, pod: Pod, node: ClusterNode) -> str:
    if strategy.variant == PROXY_SERVER:
        if not strategy.proxy_address:
            raise AddressingError("proxy_server strategy without a proxy address")
        return strategy.proxy_address
    return join_address(resolve_bind(strategy, pod, node), pod.port)


class ProxyRoutingTable:
    """Logical component name -> current real address; latest registration wins."""

    def __init__(self):
        self._routes: dict[str, str] = {}
        self.history: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def register(self, name: str, address: str) -> bool:
        split_address(address)
        with self._lock:
            self._routes[name] = address
            self.history.append((name, address))
        return True

    def lookup(self, name: str | None) -> str | None:
        if name is None:
            return None
        return self._routes.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._routes

    def __len__(self) -> int:
        return len(self._routes)


def register_with_proxy(table: ProxyRoutingTable, name: str, address: str) -> bool:
    return table.register(name, address)


@dataclass(frozen=True)
class ForwardAction:
    action: str  # "forward" | "undeliverable" | "dropped"
    envelope: Envelope | None = None
    reason: str = ""


def proxy_forward(table: ProxyRoutingTable, env: Envelope, proxy_address: str) -> ForwardAction:
    """Rewrite ``dest`` from the payload's ``route_to`` name; payload stays untouched."""
    if env.hops >= MAX_PROXY_HOPS:
        return ForwardAction("dropped", reason=f"hop limit {MAX_PROXY_HOPS} reached")
    name = env.payload.get("route_to")
    target = table.lookup(name)
    if target is None:
        # the sender's advertised reply_to is normally this proxy, so return by name
        back = table.lookup(env.payload.get("sender"))
        if back is None and env.reply_to != proxy_address:
            back = env.reply_to
        if back is None or back == proxy_address:
            return ForwardAction("dropped", reason=f"unknown destination {name!r} and no way back")
        notice = Envelope(
            kind="ack",
            request_id=env.request_id,
            reply_to=proxy_address,
            dest=back,
            payload={
                "status": "undeliverable",
                "missing": name,
                "route_to": env.payload.get("sender"),
                "sender": PROXY_NAME,
            },
            hops=env.hops + 1,
        )
        return ForwardAction("undeliverable", notice, reason=f"unknown destination {name!r}")
    if target == proxy_address:
        return ForwardAction("dropped", reason="route points back at the proxy")
    return ForwardAction("forward", replace(env, dest=target, hops=env.hops + 1))


@dataclass
class ProxyServer:
    """The proxy as a message handler on the simulated transport."""

    sim: Simulator
    table: ProxyRoutingTable
    address: str
    actions: list[ForwardAction] = field(default_factory=list)

    def __call__(self, env: Envelope):
        action = proxy_forward(self.table, env, self.address)
        self.actions.append(action)
        if action.action == "dropped":
            self.sim.trace.append(
                {"event": "proxy_drop", "time": self.sim.now, "request_id": env.request_id, "reason": action.reason}
            )
        if action.envelope is not None:
            self.sim.send(action.envelope, self.address)
