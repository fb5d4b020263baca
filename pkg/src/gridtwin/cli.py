"""Command-line front end.

Subcommands: ``generate``, ``identify-topology``, ``estimate-impedance``,
``evaluate`` and ``pipeline``. Global flags (``--seed``, ``--out-dir``,
``--threads``, ``--format``) may also come from ``GRIDTWIN_SEED``,
``GRIDTWIN_OUT_DIR``, ``GRIDTWIN_THREADS`` and ``GRIDTWIN_FORMAT``; an explicit
flag wins over the environment.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import io
from .errors import ConfigError, DataError, GridTwinError, NumericalError, UnrootedTopology
from .fixtures import BUILTIN, LOAD_SCALE, load_builtin, synthetic_loads
from .impedance import METHODS, sweep
from .metrics import evaluate
from .network import TreeTopology
from .powerflow import NoiseSpec, corrupt_voltages, generate_samples
from .topology import fit_laplacian, orient_tree, recover_topology

log = logging.getLogger("gridtwin")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
FORMATS = ("json", "csv", "md")
DEFAULT_LOAD_SCALE = 0.01


def _env(name, default, cast=str):
    raw = os.environ.get(f"GRIDTWIN_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"GRIDTWIN_{name}={raw!r} is not a valid {cast.__name__}") from None


def _global_flags(parser, suppress=False):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=d(_env("SEED", 1, int)), help="base random seed (default 1)")
    g.add_argument("--out-dir", default=d(_env("OUT_DIR", "out")), help="directory for outputs (default ./out)")
    g.add_argument("--threads", type=int, default=d(_env("THREADS", 1, int)), help="worker threads within a sweep layer")
    g.add_argument("--format", choices=FORMATS, default=d(_env("FORMAT", "json")), help="report format (default json)")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _generate_flags(p):
    p.add_argument("--fixture", default="feeder13", help=f"builtin name {sorted(BUILTIN)} or a network JSON path")
    p.add_argument("--library", help="library JSON; builtin fixtures bring their own")
    p.add_argument("-K", "--samples-count", dest="K", type=int, default=200, help="number of hourly snapshots")
    p.add_argument("--load-scale", type=float, help="per-bus load scale in p.u. (default: fixture-specific)")
    p.add_argument("--v0", type=float, default=1.0, help="squared substation voltage")
    p.add_argument("--sigma-v", type=float, default=0.0)
    p.add_argument("--sigma-p", type=float, default=0.0)
    p.add_argument("--sigma-q", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0, help="fraction of snapshots with gross voltage errors")
    p.add_argument("--outlier-size", type=float, default=0.05, help="relative size of a gross voltage error")


def _topology_flags(p):
    p.add_argument("--gamma", type=int, help="minimum neighbour count (default max(4, ceil(0.05 n)))")
    p.add_argument("--xi", default="auto", help="neighbourhood radius on normalised entries, or 'auto'")
    p.add_argument("--joint", action="store_true", help="cluster all off-diagonal entries together")


def _impedance_flags(p):
    p.add_argument("--method", choices=METHODS, default="lad")
    p.add_argument("--model", choices=("nonlinear", "linear"), default="nonlinear")
    p.add_argument("--x-max", type=float, default=1.0, help="upper bound on reactance, p.u.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtwin", description="Topology and impedance identification from smart-meter data.")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise meter data for a feeder")
    _global_flags(p, suppress=True)
    _generate_flags(p)

    p = sub.add_parser("identify-topology", help="stage 1: recover the edge set")
    _global_flags(p, suppress=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--sub", required=True)
    _topology_flags(p)
    p.add_argument("--out", help="topology JSON (default OUT_DIR/topology.json)")
    p.add_argument("--emit-heatmap", metavar="CSV", help="write the row-normalised Laplacian estimate")

    p = sub.add_parser("estimate-impedance", help="stage 2: per-branch impedances")
    _global_flags(p, suppress=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--sub", required=True)
    p.add_argument("--topology", required=True, help="topology JSON from identify-topology, or a network JSON")
    p.add_argument("--library", required=True)
    _impedance_flags(p)
    p.add_argument("--out", help="impedance JSON (default OUT_DIR/impedances.json)")

    p = sub.add_parser("evaluate", help="compare estimates with the true network")
    _global_flags(p, suppress=True)
    p.add_argument("--est", help="impedance JSON")
    p.add_argument("--topology", help="topology JSON")
    p.add_argument("--truth", required=True, help="network JSON")
    p.add_argument("--out", help="report path; the extension (.json/.csv/.md) picks the format")

    p = sub.add_parser("pipeline", help="generate, identify, estimate and evaluate in one run")
    _global_flags(p, suppress=True)
    _generate_flags(p)
    _topology_flags(p)
    _impedance_flags(p)
    p.add_argument("--known-topology", action="store_true", help="skip stage 1 and use the true tree")
    return parser


# ---------------------------------------------------------------------------


def _resolve_fixture(args):
    if args.fixture in BUILTIN:
        net, lib = load_builtin(args.fixture)
        scale = LOAD_SCALE[args.fixture]
    elif Path(args.fixture).suffix == ".json":
        net = io.read_network(args.fixture)
        lib = None
        scale = DEFAULT_LOAD_SCALE
    else:
        raise ConfigError(f"--fixture must be one of {sorted(BUILTIN)} or a .json network file")
    if args.library:
        lib = io.read_library(args.library)
    if args.load_scale is not None:
        scale = args.load_scale
    return net, lib, scale


def _make_samples(args, net, scale):
    if args.K < 0:
        raise ConfigError("-K must be non-negative")
    p, q = synthetic_loads(net.n, args.K, args.seed, scale=scale)
    noise = NoiseSpec(args.sigma_v, args.sigma_p, args.sigma_q)
    samples = generate_samples(net, p, q, noise=noise, v0=args.v0, seed=args.seed)
    if args.outliers:
        samples = corrupt_voltages(samples, args.outliers, args.outlier_size, seed=args.seed)
    return samples


def cmd_generate(args) -> int:
    out = Path(args.out_dir)
    net, lib, scale = _resolve_fixture(args)
    samples = _make_samples(args, net, scale)
    io.write_network(out / "network.json", net)
    io.write_samples(out / "samples.csv", out / "sub.csv", samples)
    if lib is not None:
        io.write_library(out / "library.json", lib)
    print(f"wrote {samples.K} snapshots x {samples.n} buses to {out}")
    return 0


def _xi(raw):
    if raw == "auto":
        return "auto"
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"--xi must be a number or 'auto', got {raw!r}") from None


def _stage1(args, samples):
    est = fit_laplacian(samples)
    adj = recover_topology(est, gamma=args.gamma, xi=_xi(args.xi), joint=args.joint)
    return est, adj


def cmd_identify(args) -> int:
    samples = io.read_samples(args.samples, args.sub)
    est, adj = _stage1(args, samples)
    out = Path(args.out or Path(args.out_dir) / "topology.json")
    io.write_topology(out, est, adj)
    if args.emit_heatmap:
        io.write_heatmap(args.emit_heatmap, est.Y_star)
    print(f"{len(adj.edges)} edges, {len(adj.root_adjacent)} root-adjacent bus(es), lambda*={est.lambda_star:.4f} -> {out}")
    return 0


def _load_topology(path) -> TreeTopology:
    data = io.read_json(path)
    if "branches" in data:
        return TreeTopology.from_network(io.network_from_dict(data, str(path)))
    data = io.read_topology(path)
    try:
        parents, _ = orient_tree(io.topology_tree_edges(data), n=int(data["n"]))
    except DataError as exc:
        raise UnrootedTopology(f"{path}: {exc}") from exc
    return TreeTopology.from_parents(parents)


def cmd_estimate(args) -> int:
    topo = _load_topology(args.topology)
    samples = io.read_samples(args.samples, args.sub, n=topo.n)
    lib = io.read_library(args.library)
    res = sweep(topo, samples, lib, args.method, args.model, x_max=args.x_max, threads=args.threads)
    out = Path(args.out or Path(args.out_dir) / "impedances.json")
    io.write_impedances(out, res, lib)
    low = sum(e.confidence != "high" for e in res.estimates.values())
    print(f"estimated {len(res.estimates)} branches ({low} low-confidence) -> {out}")
    return 0


def _report_format(out, fallback):
    if out is None:
        return fallback
    ext = Path(out).suffix.lstrip(".")
    return ext if ext in FORMATS else fallback


def cmd_evaluate(args) -> int:
    if not (args.est or args.topology):
        raise ConfigError("evaluate needs --est and/or --topology")
    truth = io.read_network(args.truth)
    topo_edges = None
    if args.topology:
        data = io.read_topology(args.topology)
        topo_edges = {frozenset(int(b) for b in e) for e in data["edges"]}
    imp = io.read_impedances(args.est) if args.est else None
    report = evaluate(truth, topo_edges, imp)
    fmt = _report_format(args.out, args.format)
    text = report.render(fmt)
    if args.out:
        io.write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pipeline(args) -> int:
    out = Path(args.out_dir)
    times = {}
    t = time.perf_counter()
    net, lib, scale = _resolve_fixture(args)
    if lib is None:
        raise ConfigError("a custom network needs --library for the impedance stage")
    samples = _make_samples(args, net, scale)
    io.write_network(out / "network.json", net)
    io.write_samples(out / "samples.csv", out / "sub.csv", samples)
    io.write_library(out / "library.json", lib)
    times["generate"] = time.perf_counter() - t

    info = {"fixture": args.fixture, "K": samples.K, "seed": args.seed, "method": args.method,
            "model": args.model, "known_topology": args.known_topology}
    t = time.perf_counter()
    adj = None
    if args.known_topology:
        topo = TreeTopology.from_network(net)
    else:
        est, adj = _stage1(args, samples)
        io.write_topology(out / "topology.json", est, adj)
        io.write_heatmap(out / "heatmap.csv", est.Y_star)
        topo = _load_topology(out / "topology.json")
        info["lambda_star"] = est.lambda_star
        info["root_adjacent_correct"] = adj.root_adjacent == [j for j in range(1, net.n + 1) if net.parent[j] == 0]
    times["topology"] = time.perf_counter() - t

    t = time.perf_counter()
    res = sweep(topo, samples, lib, args.method, args.model, x_max=args.x_max, threads=args.threads)
    io.write_impedances(out / "impedances.json", res, lib)
    times["impedance"] = time.perf_counter() - t

    t = time.perf_counter()
    report = evaluate(net, adj.edges if adj is not None else None, io.read_impedances(out / "impedances.json"),
                      info=info)
    times["evaluate"] = time.perf_counter() - t
    report.runtimes = times
    for fmt in FORMATS:
        io.write_text(out / f"report.{fmt}", report.render(fmt))
    print(f"precision={report.edge_precision:.3f} recall={report.edge_recall:.3f} "
          f"max_err_r={report.max_rel_err_r:.3e}% max_err_x={report.max_rel_err_x:.3e}% -> {out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "identify-topology": cmd_identify,
    "estimate-impedance": cmd_estimate,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    try:
        parser = build_parser()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GridTwinError as exc:  # pragma: no cover - every concrete error has a family
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
