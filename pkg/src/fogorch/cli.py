"""Command-line entry point.

Exit codes: 0 success, 1 validation findings, 2 execution or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import cluster as cl
from .bench import (
    ExperimentConfig,
    ExperimentError,
    NoSuccessfulRuns,
    build_testbed,
    compare_strategies,
    data_path,
    run_experiment,
    variant,
)
from .mesh import (
    MeshConfigError,
    build_full_mesh,
    load_node_table,
    parse_mesh_config,
    render_mesh_config,
    resolve_route,
    topology_from_configs,
    validate_full_mesh,
)

EXIT_OK, EXIT_FINDINGS, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _topology(args):
    if getattr(args, "configs", None):
        configs = {Path(p).stem: parse_mesh_config(Path(p).read_text()) for p in args.configs}
        return topology_from_configs(configs, args.vpn_cidr)
    path = Path(args.topology)
    if not path.is_file():
        raise CliError(f"missing topology file: {path}")
    nodes = load_node_table(path.read_text())
    return build_full_mesh(nodes, args.vpn_cidr or "192.0.0.0/24", args.listen_port)


def cmd_mesh_generate(args) -> int:
    topology = _topology(args)
    names = [args.node] if args.node else list(topology.configs)
    for name in names:
        if name not in topology.configs:
            raise CliError(f"unknown node {name!r}")
        text = render_mesh_config(topology.configs[name])
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.conf").write_text(text)
            print(f"wrote {out / (name + '.conf')}")
        else:
            print(f"# {name}\n{text}")
    return EXIT_OK


def cmd_mesh_validate(args) -> int:
    report = validate_full_mesh(_topology(args))
    for finding in report.findings:
        print(f"FINDING {finding}")
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_FINDINGS


def cmd_mesh_route(args) -> int:
    topology = _topology(args)
    if args.src not in topology.configs:
        raise CliError(f"unknown node {args.src!r}")
    decision = resolve_route(topology.configs[args.src], args.dst)
    print(f"{args.src} -> {args.dst}: {decision}")
    return EXIT_OK if decision.routable else EXIT_FINDINGS


def cmd_cluster_apply(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = replace(
        cfg,
        manifests=tuple(Path(f) for f in args.file) or cfg.manifests,
        strategy=args.strategy or cfg.strategy,
        solution2=args.enable_solution2 or cfg.solution2,
    )
    bed = build_testbed(cfg)
    print(f"{'NAME':<28}{'STATUS':<9}{'RESTARTS':<10}{'IP':<16}{'NODE':<10}ADVERTISED")
    for pod in bed.cluster.pods.values():
        print(f"{pod.uid:<28}{pod.phase:<9}{pod.restart_count:<10}{pod.pod_ip:<16}{pod.node:<10}{pod.advertise_address}")
    if args.events:
        bed.cluster.export_events(args.events)
    return EXIT_OK


def _bench_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.strategy:
        overrides["strategy"] = args.strategy
    if args.enable_solution2:
        overrides["solution2"] = True
    if getattr(args, "native", False):
        overrides["native"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.repetitions is not None:
        overrides["repetitions"] = args.repetitions
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def cmd_bench_run(args) -> int:
    cfg = _bench_config(args)
    try:
        report = run_experiment(cfg)
        code = EXIT_OK
    except NoSuccessfulRuns as exc:
        report, code = exc.report, EXIT_ERROR
        print(f"error: {exc}", file=sys.stderr)
    for s in report.samples:
        value = f"{s.latency_ms:.3f} ms" if s.success else f"FAILED ({s.failure_reason})"
        print(f"run {s.run:>3}  {value}")
    print(report.summary())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for rec in report.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return code


def cmd_bench_compare(args) -> int:
    base = _bench_config(args)
    names = [n for n in args.variants.split(",") if n.strip()]
    table = compare_strategies([variant(base, n) for n in names])
    print(table.render())
    if args.csv:
        body = "".join(r.to_csv().split("\n", 1)[1] for r in table.reports)
        Path(args.csv).write_text(table.reports[0].to_csv().split("\n", 1)[0] + "\n" + body)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogorch", description="Simulated hybrid cloud/edge orchestration testbed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="group", required=True)

    mesh = sub.add_parser("mesh", help="mesh VPN configs").add_subparsers(dest="action", required=True)
    for name, func, help_text in (
        ("generate", cmd_mesh_generate, "render per-node configs"),
        ("validate", cmd_mesh_validate, "check full-mesh reachability"),
        ("route", cmd_mesh_route, "resolve a destination from one node"),
    ):
        p = mesh.add_parser(name, help=help_text)
        p.add_argument("--topology", default=str(data_path("topology.tsv")))
        p.add_argument("--configs", nargs="+", help="use existing config files instead of a topology table")
        p.add_argument("--vpn-cidr", default=None)
        p.add_argument("--listen-port", type=int, default=4999)
        p.set_defaults(func=func)
        if name == "generate":
            p.add_argument("--node")
            p.add_argument("--out")
        if name == "route":
            p.add_argument("--from", dest="src", required=True)
            p.add_argument("--dst", required=True)

    clus = sub.add_parser("cluster", help="cluster operations").add_subparsers(dest="action", required=True)
    p = clus.add_parser("apply", help="deploy manifests and print the pods")
    p.add_argument("-f", "--file", action="append", default=[])
    p.add_argument("-c", "--config")
    p.add_argument("--strategy", choices=["host", "proxy", "env"])
    p.add_argument("--enable-solution2", action="store_true")
    p.add_argument("--events", help="write the event log as JSON lines")
    p.set_defaults(func=cmd_cluster_apply)

    bench = sub.add_parser("bench", help="response-time experiments").add_subparsers(dest="action", required=True)
    for name, func in (("run", cmd_bench_run), ("compare", cmd_bench_compare)):
        p = bench.add_parser(name)
        p.add_argument("-c", "--config")
        p.add_argument("--strategy", choices=["host", "proxy", "env"])
        p.add_argument("--enable-solution2", action="store_true")
        p.add_argument("--seed", type=int)
        p.add_argument("--repetitions", type=int)
        p.add_argument("--csv")
        p.set_defaults(func=func)
        if name == "run":
            p.add_argument("--native", action="store_true", help="no cluster overlay overhead")
            p.add_argument("--trace", help="write the hop-level trace as JSON lines")
        else:
            p.add_argument("--variants", default="native,host,proxy,env,env+solution2")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ExperimentError, MeshConfigError, cl.ClusterError, cl.ManifestError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
