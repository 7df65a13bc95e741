"""A small orchestration state machine: manifests, placement, pod addressing, restarts."""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv4Network
from pathlib import Path
from typing import Any, Callable

import yaml

from .addressing import (
    ENV_VARIABLE,
    HOST_NETWORK,
    AddressingStrategy,
    resolve_advertise,
    resolve_bind,
)

log = logging.getLogger(__name__)

POD_IP_FIELD = "status.podIP"
DEFAULT_POD_CIDR = "10.42.0.0/16"
EPHEMERAL_PORT_BASE = 50000


class ClusterError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


class PortInUse(ClusterError):
    pass


class SubnetExhausted(ClusterError):
    pass


@dataclass(frozen=True)
class ClusterNode:
    name: str
    role: str
    node_address: str
    pod_subnet: IPv4Network

    def __post_init__(self):
        if self.role not in ("server", "agent"):
            raise ClusterError(f"node role must be server or agent, got {self.role!r}")
        IPv4Address(self.node_address)
        if not isinstance(self.pod_subnet, IPv4Network):
            object.__setattr__(self, "pod_subnet", IPv4Network(self.pod_subnet))


@dataclass(frozen=True)
class EnvVar:
    name: str
    value: str | None = None
    field_ref: str | None = None


@dataclass(frozen=True)
class DeploymentSpec:
    name: str
    image: str
    replicas: int = 1
    node_name: str | None = None
    host_network: bool = False
    args: tuple[str, ...] = ()
    env: tuple[EnvVar, ...] = ()
    container_port: int | None = None
    restart_policy: str = "always"

    def __post_init__(self):
        if self.replicas < 1:
            raise ManifestError(f"{self.name}: replicas must be >= 1")
        if self.restart_policy not in ("always", "never"):
            raise ManifestError(f"{self.name}: unsupported restart policy {self.restart_policy!r}")
        for var in self.env:
            if var.field_ref is not None and var.field_ref != POD_IP_FIELD:
                raise ManifestError(f"{self.name}: only {POD_IP_FIELD} field references are supported")

    def arg(self, flag: str) -> str | None:
        args = list(self.args)
        if flag in args and args.index(flag) + 1 < len(args):
            return args[args.index(flag) + 1]
        return None


@dataclass
class Pod:
    uid: str
    deployment: str
    node: str
    pod_ip: str
    host_network: bool
    phase: str = "pending"
    port: int | None = None
    bind_address: str | None = None
    advertise_address: str | None = None
    restart_count: int = 0
    env: dict[str, str] = field(default_factory=dict)
    args: list[str] = field(default_factory=list)
    strategy: AddressingStrategy | None = None

    @property
    def endpoint(self) -> str:
        return f"{self.bind_address}:{self.port}"


Launcher = Callable[[Pod, DeploymentSpec], Any]


class ClusterState:
    """Nodes, deployments and pods; mutated only through this module's operations.

    With a simulator attached, every started pod is registered as an endpoint
    at its bind address, its handler built by ``launcher``.
    """

    def __init__(
        self,
        nodes: list[ClusterNode],
        sim=None,
        launcher: Launcher | None = None,
        strategy: AddressingStrategy | None = None,
        join_token: str = "simulated-token",
    ):
        names = [n.name for n in nodes]
        if len(set(names)) != len(names):
            raise ClusterError("node names must be unique")
        for i, a in enumerate(nodes):
            for b in nodes[i + 1:]:
                if a.pod_subnet.overlaps(b.pod_subnet):
                    raise ClusterError(f"pod subnets of {a.name} and {b.name} overlap")
        self.nodes = {n.name: n for n in nodes}
        self.sim = sim
        self.launcher = launcher
        self.strategy = strategy
        self.join_token = join_token
        self.deployments: dict[str, DeploymentSpec] = {}
        self.pods: dict[str, Pod] = {}
        self.retired: list[Pod] = []
        self.events: list[dict] = []
        self.handlers: dict[str, Any] = {}
        self._cursors = {n.name: 0 for n in nodes}
        self._ephemeral = {n.name: EPHEMERAL_PORT_BASE for n in nodes}
        self._ips_in_use: set[str] = set()
        self._bound: set[tuple[str, int]] = set()
        self._uids = 0
        self._lock = threading.RLock()

    def now(self) -> float:
        return self.sim.now if self.sim is not None else float(len(self.events))

    def record(self, action: str, pod: Pod):
        self.events.append({"time": self.now(), "action": action, "pod": pod.uid, "node": pod.node})

    def running_pods(self, deployment: str | None = None) -> list[Pod]:
        return [
            p for p in self.pods.values() if p.phase == "running" and (deployment is None or p.deployment == deployment)
        ]

    def pod_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.nodes}
        for pod in self.running_pods():
            counts[pod.node] += 1
        return counts

    def reserve_port(self, ip: str, port: int):
        """Claim an address:port for a process running outside any pod (e.g. the proxy)."""
        with self._lock:
            if (ip, port) in self._bound:
                raise PortInUse(f"{ip}:{port} already bound")
            self._bound.add((ip, port))

    def export_events(self, path: str | Path):
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event) + "\n")

    # --- internal helpers --------------------------------------------

    def _allocate_ip(self, node: ClusterNode) -> str:
        hosts = node.pod_subnet.num_addresses - 2 if node.pod_subnet.prefixlen < 31 else node.pod_subnet.num_addresses
        first = 1 if node.pod_subnet.prefixlen < 31 else 0
        for _ in range(hosts):
            offset = first + self._cursors[node.name] % hosts
            self._cursors[node.name] += 1
            ip = str(node.pod_subnet.network_address + offset)
            if ip not in self._ips_in_use:
                self._ips_in_use.add(ip)
                return ip
        raise SubnetExhausted(f"pod subnet {node.pod_subnet} of {node.name} is exhausted")

    def _pick_port(self, spec: DeploymentSpec, node: str) -> int:
        if spec.container_port:
            return spec.container_port
        flag = spec.arg("--bindPort")
        if flag:
            return int(flag)
        self._ephemeral[node] += 1
        return self._ephemeral[node]

    def _release(self, pod: Pod):
        if pod.port is not None and pod.bind_address is not None:
            self._bound.discard((pod.bind_address, pod.port))
        if not pod.host_network:
            self._ips_in_use.discard(pod.pod_ip)

    def _mark_failed(self, uid: str):
        with self._lock:
            pod = self.pods.get(uid)
            if pod is None or pod.phase == "failed":
                return
            pod.phase = "failed"
            self._release(pod)
            self.record("failed", pod)


# --- manifests -------------------------------------------------------------

# Paths the artifact reads; anything else in a manifest is reported and ignored.
_USED = {
    ("kind",),
    ("metadata", "name"),
    ("spec", "replicas"),
    ("spec", "template", "spec", "containers"),
    ("spec", "template", "spec", "nodeName"),
    ("spec", "template", "spec", "hostNetwork"),
    ("spec", "template", "spec", "restartPolicy"),
}
_CONTAINER_USED = {"image", "name", "args", "env", "ports"}


def _unused_paths(doc: Any, prefix: tuple[str, ...] = ()) -> list[str]:
    if not isinstance(doc, dict):
        return []
    out = []
    for key, value in doc.items():
        path = prefix + (str(key),)
        if path in _USED:
            continue
        if any(u[: len(path)] == path for u in _USED):
            out.extend(_unused_paths(value, path))
        else:
            out.append(".".join(path))
    return out


def _require(doc: dict, *path: str) -> Any:
    node: Any = doc
    for key in path:
        if not isinstance(node, dict) or key not in node:
            raise ManifestError(f"manifest is missing {'.'.join(path)}")
        node = node[key]
    return node


def parse_deployment(manifest: str) -> DeploymentSpec:
    try:
        doc = yaml.safe_load(manifest)
    except yaml.YAMLError as exc:
        raise ManifestError(f"invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a mapping")
    if _require(doc, "kind") != "Deployment":
        raise ManifestError(f"unsupported kind {doc['kind']!r}")
    name = _require(doc, "metadata", "name")
    replicas = _require(doc, "spec", "replicas")
    pod_spec = _require(doc, "spec", "template", "spec")
    containers = _require(doc, "spec", "template", "spec", "containers")
    if not isinstance(containers, list) or len(containers) != 1:
        count = len(containers) if isinstance(containers, list) else 0
        raise ManifestError(f"{name}: exactly one container per pod is supported, found {count}")
    container = containers[0]
    image = _require(container, "image")

    env = []
    for item in container.get("env") or []:
        if "valueFrom" in item:
            ref = (item["valueFrom"].get("fieldRef") or {}).get("fieldPath")
            if ref != POD_IP_FIELD:
                raise ManifestError(f"{name}: unsupported field reference {ref!r} for {item.get('name')}")
            env.append(EnvVar(item["name"], field_ref=ref))
        else:
            env.append(EnvVar(item["name"], value=str(item.get("value", ""))))

    ports = container.get("ports") or []
    container_port = int(ports[0]["containerPort"]) if ports else None

    ignored = _unused_paths(doc)
    ignored += [f"containers[0].{k}" for k in container if k not in _CONTAINER_USED]
    if ignored:
        log.warning("%s: ignoring unused manifest fields: %s", name, ", ".join(ignored))

    return DeploymentSpec(
        name=str(name),
        image=str(image),
        replicas=int(replicas),
        node_name=pod_spec.get("nodeName"),
        host_network=bool(pod_spec.get("hostNetwork", False)),
        args=tuple(str(a) for a in container.get("args") or ()),
        env=tuple(env),
        container_port=container_port,
        restart_policy=str(pod_spec.get("restartPolicy", "Always")).lower(),
    )


def load_deployment(path: str | Path) -> DeploymentSpec:
    return parse_deployment(Path(path).read_text())


# --- operations ------------------------------------------------------------


def schedule_pod(state: ClusterState, spec: DeploymentSpec) -> str:
    if not state.nodes:
        raise ClusterError("cluster has no nodes")
    if spec.node_name is not None:
        if spec.node_name not in state.nodes:
            raise ClusterError(f"{spec.name}: pinned node {spec.node_name!r} does not exist")
        return spec.node_name
    counts = state.pod_counts()
    return min(sorted(counts), key=lambda n: counts[n])


_VAR_REF = re.compile(r"\$\(([A-Za-z_][A-Za-z0-9_]*)\)")


def _start_on(
    state: ClusterState,
    spec: DeploymentSpec,
    node_name: str,
    strategy: AddressingStrategy | None,
    restart_count: int = 0,
) -> Pod:
    node = state.nodes[node_name]
    host_network = strategy.uses_host_network if strategy is not None else spec.host_network
    effective = strategy or AddressingStrategy(HOST_NETWORK if host_network else ENV_VARIABLE)
    pod_ip = node.node_address if host_network else state._allocate_ip(node)
    state._uids += 1
    pod = Pod(
        uid=f"{spec.name}-{state._uids:05d}",
        deployment=spec.name,
        node=node_name,
        pod_ip=pod_ip,
        host_network=host_network,
        restart_count=restart_count,
        strategy=strategy,
    )
    pod.port = state._pick_port(spec, node_name)
    pod.bind_address = resolve_bind(effective, pod, node)
    if (pod.bind_address, pod.port) in state._bound:
        if not host_network:
            state._ips_in_use.discard(pod_ip)
        raise PortInUse(f"{spec.name}: {pod.bind_address}:{pod.port} is already bound on {node_name}")

    pod.env = {var.name: (pod.pod_ip if var.field_ref else var.value or "") for var in spec.env}
    args = [_VAR_REF.sub(lambda m: pod.env.get(m.group(1), m.group(0)), a) for a in spec.args]
    if "--bindIP" in args and args.index("--bindIP") + 1 < len(args):
        args[args.index("--bindIP") + 1] = pod.bind_address
    pod.args = args
    pod.advertise_address = resolve_advertise(effective, pod, node)

    state._bound.add((pod.bind_address, pod.port))
    pod.phase = "running"
    state.pods[pod.uid] = pod
    state.record("start", pod)

    if state.sim is not None:
        handler = state.launcher(pod, spec) if state.launcher else None
        uid = pod.uid
        state.sim.register(pod.endpoint, handler, node_name, on_fail=lambda: state._mark_failed(uid))
        state.handlers[pod.uid] = handler
        if hasattr(handler, "start"):
            handler.start()
    return pod


def start_pod(state: ClusterState, spec: DeploymentSpec, strategy: AddressingStrategy | None = None) -> Pod:
    with state._lock:
        state.deployments.setdefault(spec.name, spec)
        node = schedule_pod(state, spec)
        return _start_on(state, spec, node, strategy if strategy is not None else state.strategy)


def apply(state: ClusterState, spec: DeploymentSpec, strategy: AddressingStrategy | None = None) -> list[Pod]:
    """Register a deployment and start all its replicas."""
    with state._lock:
        state.deployments[spec.name] = spec
        return [start_pod(state, spec, strategy) for _ in range(spec.replicas)]


def fail_pod(state: ClusterState, uid: str):
    """Crash a pod; with a simulator attached this goes through its endpoint."""
    pod = state.pods[uid]
    if state.sim is not None and pod.endpoint in state.sim.endpoints:
        state.sim.fail_endpoint(pod.endpoint)
    else:
        state._mark_failed(uid)


def reconcile(state: ClusterState) -> list[dict]:
    """Replace failed pods of always-restart deployments on the same node."""
    actions = []
    with state._lock:
        for pod in list(state.pods.values()):
            if pod.phase != "failed":
                continue
            spec = state.deployments.get(pod.deployment)
            if spec is None or spec.restart_policy != "always":
                continue
            del state.pods[pod.uid]
            state.retired.append(pod)
            state.handlers.pop(pod.uid, None)
            new = _start_on(state, spec, pod.node, pod.strategy, restart_count=pod.restart_count + 1)
            state.record("restart", new)
            actions.append({"time": state.now(), "action": "restart", "pod": new.uid, "node": new.node, "replaces": pod.uid})
    return actions


def default_nodes(names_and_addresses: list[tuple[str, str]], pod_cidr: str = DEFAULT_POD_CIDR) -> list[ClusterNode]:
    """First entry is the server; node i owns the i-th /24 of the pod range."""
    cidr = IPv4Network(pod_cidr)
    subnets = list(cidr.subnets(new_prefix=24)) if cidr.prefixlen <= 24 else [cidr]
    if len(subnets) < len(names_and_addresses):
        raise ClusterError(f"{pod_cidr} cannot be split across {len(names_and_addresses)} nodes")
    return [
        ClusterNode(name, "server" if i == 0 else "agent", address, subnets[i])
        for i, (name, address) in enumerate(names_and_addresses)
    ]
