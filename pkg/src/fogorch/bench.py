"""Experiment driver: build the testbed, run repeated submissions, summarize."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .addressing import (
    DEFAULT_PROXY_PORT,
    ENV_VARIABLE,
    HOST_NETWORK,
    PROXY_SERVER,
    AddressingStrategy,
    ProxyRoutingTable,
    ProxyServer,
    register_with_proxy,
)
from .cluster import ClusterState, DeploymentSpec, Pod, apply, default_nodes, load_deployment
from .fogbus.calc import CalcInput, CalcOutput, execute_calculation
from .fogbus.components import (
    MASTER_NAME,
    REMOTE_LOGGER_NAME,
    USER_NAME,
    Actor,
    ComponentIdentity,
    Master,
    PeerRef,
    PlacementRejected,
    RemoteLogger,
    SubmitTimeout,
    TaskFailed,
    User,
)
from .fogbus.logstore import LogStore
from .mesh import MeshTopology, build_full_mesh, extend_allowed_ips, load_node_table
from .netsim import Host, LatencyModel, Simulator

USER_PORT = 7000
CSV_HEADER = ["run", "strategy", "latency_ms", "success", "failure_reason"]

DEFAULT_INPUTS = (
    CalcInput(1, 1, 1),
    CalcInput(2, 3, 4),
    CalcInput(3, 5, 7),
    CalcInput(0, 0, 0),
    CalcInput(4, 4, 4),
    CalcInput(5, 2, 1),
    CalcInput(10, 20, 30),
    CalcInput(0.5, 1.5, 2.5),
    CalcInput(7, 1, 3),
    CalcInput(100, 200, 300),
)

# knobs a controlled comparison may vary; everything else must match
STRATEGY_KNOBS = ("strategy", "solution2", "native")


class ExperimentError(RuntimeError):
    pass


class NoSuccessfulRuns(ExperimentError):
    def __init__(self, report: BenchReport):
        reasons = sorted({s.failure_reason for s in report.samples if s.failure_reason})
        super().__init__(f"no successful runs ({', '.join(reasons)})")
        self.report = report


def data_path(name: str) -> Path:
    return Path(str(resources.files("fogorch") / "data" / name))


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ExperimentError(f"not a boolean: {text!r}")


def _inputs(text: str) -> tuple[CalcInput, ...]:
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            parts = [float(x) for x in chunk.split(",")]
            if len(parts) != 3:
                raise ExperimentError(f"input {chunk.strip()!r} needs three numbers")
            out.append(CalcInput(*parts))
    return tuple(out)


@dataclass(frozen=True)
class ExperimentConfig:
    topology: Path = field(default_factory=lambda: data_path("topology.tsv"))
    manifests: tuple[Path, ...] = field(
        default_factory=lambda: tuple(
            data_path(f"manifests/{m}.yaml") for m in ("remote-logger", "master", "actor1", "actor2")
        )
    )
    strategy: str = HOST_NETWORK
    solution2: bool = False
    native: bool = False
    repetitions: int = 10
    inputs: tuple[CalcInput, ...] = DEFAULT_INPUTS
    seed: int = 42
    latency: Path | None = field(default_factory=lambda: data_path("latency.conf"))
    user_node: str = "worker04"
    vpn_cidr: str = "192.0.0.0/24"
    pod_cidr: str = "10.42.0.0/16"
    listen_port: int = 4999
    proxy_port: int = DEFAULT_PROXY_PORT

    def __post_init__(self):
        object.__setattr__(self, "strategy", AddressingStrategy(self.strategy).variant)

    def validate(self):
        if self.repetitions < 1:
            raise ExperimentError("repetitions must be >= 1")
        if not self.inputs:
            raise ExperimentError("at least one calculation input is required")
        if self.native and self.strategy != HOST_NETWORK:
            raise ExperimentError("the native baseline runs components on the host network only")
        if self.solution2 and self.strategy != ENV_VARIABLE:
            raise ExperimentError("solution2 only applies to the env_variable strategy")
        for path in (self.topology, *self.manifests, *([self.latency] if self.latency else [])):
            if not Path(path).is_file():
                raise ExperimentError(f"missing file: {path}")

    @property
    def label(self) -> str:
        if self.native:
            return "native"
        return self.strategy + ("+solution2" if self.solution2 else "")

    @classmethod
    def from_text(cls, text: str, base_dir: str | Path = ".") -> ExperimentConfig:
        base = Path(base_dir)
        kwargs: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ExperimentError(f"config line {lineno}: expected key = value")
            try:
                if key in ("topology", "latency"):
                    kwargs[key] = base / value
                elif key == "manifests":
                    kwargs[key] = tuple(base / m.strip() for m in value.split(",") if m.strip())
                elif key in ("solution2", "native"):
                    kwargs[key] = _bool(value)
                elif key in ("repetitions", "seed", "listen_port", "proxy_port"):
                    kwargs[key] = int(value)
                elif key == "inputs":
                    kwargs[key] = _inputs(value)
                elif key in ("strategy", "user_node", "vpn_cidr", "pod_cidr"):
                    kwargs[key] = value
                else:
                    raise ExperimentError(f"config line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                raise ExperimentError(f"config line {lineno}: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise ExperimentError(f"missing config file: {path}")
        return cls.from_text(path.read_text(), path.parent)


@dataclass
class Testbed:
    """Everything one experiment runs on, still inspectable after the run."""

    config: ExperimentConfig
    topology: MeshTopology
    sim: Simulator
    cluster: ClusterState
    strategy: AddressingStrategy
    store: LogStore
    user: User
    proxy_table: ProxyRoutingTable | None = None
    proxy: ProxyServer | None = None

    def component(self, deployment: str):
        pods = self.cluster.running_pods(deployment)
        return self.cluster.handlers.get(pods[-1].uid) if pods else None

    def pod(self, deployment: str) -> Pod | None:
        pods = self.cluster.running_pods(deployment)
        return pods[-1] if pods else None

    @property
    def master(self) -> Master | None:
        return self.component(MASTER_NAME)

    def actors(self) -> dict[str, Actor]:
        return {
            pod.deployment: self.cluster.handlers[pod.uid]
            for pod in self.cluster.running_pods()
            if isinstance(self.cluster.handlers.get(pod.uid), Actor)
        }

    def peer(self, deployment: str) -> PeerRef:
        pod = self.pod(deployment)
        if pod is None:
            raise ExperimentError(f"{deployment} is not running")
        return PeerRef(deployment, pod.advertise_address)


def _role(spec: DeploymentSpec) -> str:
    name = spec.name.lower()
    if "remote-logger" in name or "remote_logger" in name:
        return "remote_logger"
    if "master" in name:
        return "master"
    if "actor" in name:
        return "actor"
    raise ExperimentError(f"cannot tell which framework component {spec.name!r} runs")


def build_testbed(cfg: ExperimentConfig) -> Testbed:
    cfg.validate()
    nodes = load_node_table(Path(cfg.topology).read_text())
    topology = build_full_mesh(nodes, cfg.vpn_cidr, cfg.listen_port)
    cluster_nodes = default_nodes([(n.name, str(n.private_ip)) for n in nodes], cfg.pod_cidr)
    if cfg.solution2:
        topology = extend_allowed_ips(topology, cfg.pod_cidr, {n.name: n.pod_subnet for n in cluster_nodes})
    layers = {n.name: n.layer for n in nodes}
    hosts = [Host(n.name, n.node_address, layers[n.name], n.pod_subnet) for n in cluster_nodes]
    latency = LatencyModel.load(cfg.latency, seed=cfg.seed) if cfg.latency else LatencyModel(seed=cfg.seed)
    sim = Simulator(hosts, topology, latency, overlay=not cfg.native)
    if cfg.user_node not in sim.hosts:
        raise ExperimentError(f"unknown user node {cfg.user_node!r}")

    server = cluster_nodes[0]
    table = proxy = None
    if cfg.strategy == PROXY_SERVER:
        proxy_address = f"{server.node_address}:{cfg.proxy_port}"
        strategy = AddressingStrategy(PROXY_SERVER, proxy_address)
        table = ProxyRoutingTable()
        proxy = ProxyServer(sim, table, proxy_address)
    else:
        strategy = AddressingStrategy(cfg.strategy)

    store = LogStore()
    bed: Testbed  # assigned below; the launcher closes over it

    def launcher(pod: Pod, spec: DeploymentSpec):
        role = _role(spec)
        identity = ComponentIdentity(role, spec.name, pod.endpoint, pod.advertise_address)
        if table is not None:
            register_with_proxy(table, spec.name, pod.endpoint)
        logger = bed.peer(REMOTE_LOGGER_NAME) if bed.pod(REMOTE_LOGGER_NAME) else None
        if role == "remote_logger":
            return RemoteLogger(sim, identity, store)
        if role == "master":
            return Master(sim, identity, logger, spec.arg("--schedulerName") or "RoundRobin")
        return Actor(sim, identity, bed.peer(MASTER_NAME), logger)

    cluster = ClusterState(cluster_nodes, sim=sim, launcher=launcher, strategy=strategy)
    if proxy is not None:
        cluster.reserve_port(server.node_address, cfg.proxy_port)
        sim.register(proxy.address, proxy, server.name, gateway=True)

    user_host = sim.hosts[cfg.user_node]
    user_bind = f"{user_host.address}:{USER_PORT}"
    user_advertise = proxy.address if proxy is not None else user_bind
    # the User stands in for an IoT device: a plain process on the node, not a pod
    placeholder = User(sim, ComponentIdentity("user", USER_NAME, user_bind, user_advertise), PeerRef(MASTER_NAME, user_bind))
    bed = Testbed(cfg, topology, sim, cluster, strategy, store, placeholder, table, proxy)

    for path in cfg.manifests:
        spec = load_deployment(path)
        apply(cluster, spec)
        sim.run_until_idle()

    master = bed.peer(MASTER_NAME)
    bed.user = User(
        sim,
        placeholder.identity,
        master,
        logger=bed.peer(REMOTE_LOGGER_NAME) if bed.pod(REMOTE_LOGGER_NAME) else None,
    )
    sim.register(user_bind, bed.user, cfg.user_node)
    if table is not None:
        register_with_proxy(table, USER_NAME, user_bind)
    return bed


@dataclass(frozen=True)
class RunSample:
    run: int
    strategy: str
    latency_ms: float | None
    success: bool
    failure_reason: str | None = None
    request_id: str | None = None


@dataclass
class BenchReport:
    strategy: str
    repetitions: int
    samples: list[RunSample]
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def successes(self) -> list[float]:
        return [s.latency_ms for s in self.samples if s.success]

    @property
    def success_count(self) -> int:
        return len(self.successes)

    @property
    def min(self) -> float | None:
        return min(self.successes) if self.successes else None

    @property
    def max(self) -> float | None:
        return max(self.successes) if self.successes else None

    @property
    def mean(self) -> float | None:
        return statistics.fmean(self.successes) if self.successes else None

    @property
    def stddev(self) -> float | None:
        """Population standard deviation of successful samples (reported as jitter)."""
        return statistics.pstdev(self.successes) if self.successes else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for s in self.samples:
            writer.writerow(
                [
                    s.run,
                    s.strategy,
                    repr(s.latency_ms) if s.latency_ms is not None else "",
                    "true" if s.success else "false",
                    s.failure_reason or "",
                ]
            )
        return buf.getvalue()

    def summary(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.3f}"

        return (
            f"strategy={self.strategy} success={self.success_count}/{self.repetitions} "
            f"min={fmt(self.min)} max={fmt(self.max)} mean={fmt(self.mean)} stddev={fmt(self.stddev)} (ms)"
        )


def stats_from_csv(text: str) -> dict[str, float | int | None]:
    rows = list(csv.DictReader(io.StringIO(text)))
    ok = [float(r["latency_ms"]) for r in rows if r["success"] == "true"]
    return {
        "success_count": len(ok),
        "min": min(ok) if ok else None,
        "max": max(ok) if ok else None,
        "mean": statistics.fmean(ok) if ok else None,
        "stddev": statistics.pstdev(ok) if ok else None,
    }


def run_on(bed: Testbed, repetitions: int | None = None, start: int = 1) -> list[RunSample]:
    """Submit ``repetitions`` requests on an already built testbed."""
    cfg = bed.config
    samples = []
    for i in range(repetitions if repetitions is not None else cfg.repetitions):
        run = start + i
        inp = cfg.inputs[(run - 1) % len(cfg.inputs)]
        expected: CalcOutput = execute_calculation(inp)
        try:
            output, elapsed = bed.user.submit(inp)
        except SubmitTimeout as exc:
            samples.append(RunSample(run, cfg.label, None, False, exc.reason, exc.request_id))
            continue
        except PlacementRejected:
            samples.append(RunSample(run, cfg.label, None, False, "placement_rejected"))
            continue
        except TaskFailed:
            samples.append(RunSample(run, cfg.label, None, False, "task_failed"))
            continue
        if output != expected:
            samples.append(RunSample(run, cfg.label, None, False, "wrong_result"))
        else:
            samples.append(RunSample(run, cfg.label, elapsed, True))
    return samples


def run_experiment(cfg: ExperimentConfig, allow_empty: bool = False) -> BenchReport:
    bed = build_testbed(cfg)
    samples = run_on(bed)
    bed.sim.run_until_idle()
    report = BenchReport(cfg.label, cfg.repetitions, samples, bed.sim.trace)
    if not report.success_count and not allow_empty:
        raise NoSuccessfulRuns(report)
    return report


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    mean: float | None
    stddev: float | None
    success_rate: float


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    reports: list[BenchReport]

    def row(self, strategy: str) -> ComparisonRow:
        for r in self.rows:
            if r.strategy == strategy:
                return r
        raise KeyError(strategy)

    def render(self) -> str:
        lines = [f"{'strategy':<26}{'mean_ms':>10}{'stddev_ms':>11}{'success':>9}"]
        for r in self.rows:
            mean = "-" if r.mean is None else f"{r.mean:.3f}"
            sd = "-" if r.stddev is None else f"{r.stddev:.3f}"
            lines.append(f"{r.strategy:<26}{mean:>10}{sd:>11}{r.success_rate:>9.0%}")
        return "\n".join(lines)


def compare_strategies(cfgs: list[ExperimentConfig]) -> ComparisonTable:
    if len(cfgs) < 2:
        raise ExperimentError("a comparison needs at least two configurations")
    first = cfgs[0]
    for cfg in cfgs[1:]:
        differing = [
            f.name for f in fields(ExperimentConfig) if f.name not in STRATEGY_KNOBS and getattr(cfg, f.name) != getattr(first, f.name)
        ]
        if differing:
            raise ExperimentError(f"configs differ beyond strategy settings: {', '.join(differing)}")
    reports = [run_experiment(cfg, allow_empty=True) for cfg in cfgs]
    rows = [ComparisonRow(r.strategy, r.mean, r.stddev, r.success_count / r.repetitions) for r in reports]
    return ComparisonTable(rows, reports)


def variant(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Derive a config for one named variant: native, host, proxy, env, env+solution2."""
    name = name.strip().lower()
    if name == "native":
        return replace(cfg, strategy=HOST_NETWORK, native=True, solution2=False)
    solution2 = name.endswith("+solution2") or name.endswith("+s2")
    base = name.split("+", 1)[0]
    try:
        return replace(cfg, strategy=base, native=False, solution2=solution2)
    except ValueError as exc:
        raise ExperimentError(f"unknown variant {name!r}") from exc
