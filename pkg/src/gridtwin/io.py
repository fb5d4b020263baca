"""Readers and writers for every on-disk artifact.

Floats are written with ``repr`` (shortest round-trip form), so reading a file
and writing it back reproduces it byte for byte.

* network JSON: ``{"buses": [{"id", "name"}], "branches": [{"id", "parent", "r", "x"}], "base": {...}}``
* samples CSV: ``k,bus,p,q,v``, one row per snapshot and bus; substation CSV: ``k,v0``
* library JSON: ``{"ratios": [...]}``
* topology JSON, impedances JSON: outputs of the two stages
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError
from .network import Branch, Bus, ConductorLibrary, RadialNetwork, build_network
from .powerflow import SampleSet

log = logging.getLogger(__name__)


def _f(v: float) -> str:
    return repr(float(v))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


def write_text(path, text: str):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _fields(record: dict, required: tuple, optional: tuple, where: str) -> dict:
    missing = [k for k in required if k not in record]
    if missing:
        raise SchemaError(f"{where}: missing required field(s) {missing}")
    extra = sorted(set(record) - set(required) - set(optional))
    if extra:
        log.warning("%s: ignoring unknown field(s) %s", where, extra)
    return record


# ---------------------------------------------------------------------------
# network


def network_to_dict(net: RadialNetwork) -> dict:
    buses = []
    for b in net.buses:
        d = {"id": b.id}
        if b.name is not None:
            d["name"] = b.name
        buses.append(d)
    branches = [{"id": b.id, "parent": b.parent, "r": b.r, "x": b.x} for b in net.branches]
    out = {"buses": buses, "branches": branches}
    if net.base:
        out["base"] = net.base
    return out


def network_from_dict(data: dict, where: str = "network") -> RadialNetwork:
    _fields(data, ("buses", "branches"), ("base",), where)
    buses = []
    for i, b in enumerate(data["buses"]):
        _fields(b, ("id",), ("name",), f"{where}: bus #{i}")
        buses.append(Bus(int(b["id"]), None if b.get("name") is None else str(b["name"])))
    branches = []
    for i, b in enumerate(data["branches"]):
        _fields(b, ("id", "parent", "r", "x"), (), f"{where}: branch #{i}")
        branches.append(Branch(int(b["id"]), int(b["parent"]), float(b["r"]), float(b["x"])))
    return build_network(buses, branches, base=data.get("base"))


def write_network(path, net: RadialNetwork):
    write_text(path, _dump(network_to_dict(net)))


def read_network(path) -> RadialNetwork:
    return network_from_dict(read_json(path), str(path))


# ---------------------------------------------------------------------------
# samples


def samples_to_csv(samples: SampleSet) -> tuple[str, str]:
    rows = ["k,bus,p,q,v"]
    for k in range(samples.K):
        for j in range(samples.n):
            rows.append(f"{k},{j + 1},{_f(samples.p[k, j])},{_f(samples.q[k, j])},{_f(samples.v[k, j])}")
    sub = ["k,v0"] + [f"{k},{_f(samples.v0[k])}" for k in range(samples.K)]
    return "\n".join(rows) + "\n", "\n".join(sub) + "\n"


def write_samples(samples_path, sub_path, samples: SampleSet):
    body, sub = samples_to_csv(samples)
    write_text(samples_path, body)
    write_text(sub_path, sub)


def _read_csv(path, columns):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in columns if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {missing}")
            extra = [c for c in header if c not in columns]
            if extra:
                log.warning("%s: ignoring unknown column(s) %s", path, extra)
            return list(reader)
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None


def read_samples(samples_path, sub_path, n: int | None = None) -> SampleSet:
    """Read meter data; ``n`` is required only to shape an empty file."""
    rows = _read_csv(samples_path, ("k", "bus", "p", "q", "v"))
    sub = _read_csv(sub_path, ("k", "v0"))
    try:
        ks = np.array([int(r["k"]) for r in rows], dtype=int)
        bus = np.array([int(r["bus"]) for r in rows], dtype=int)
        vals = np.array([[float(r["p"]), float(r["q"]), float(r["v"])] for r in rows]).reshape(-1, 3)
        v0_rows = {int(r["k"]): float(r["v0"]) for r in sub}
    except ValueError as exc:
        raise SchemaError(f"{samples_path}: non-numeric entry ({exc})") from exc
    K = len(v0_rows)
    if n is None:
        n = int(bus.max()) if len(bus) else 0
    if sorted(v0_rows) != list(range(K)):
        raise SchemaError(f"{sub_path}: snapshot indices must be 0..K-1")
    if len(rows) != K * n or (len(rows) and (ks.min() < 0 or ks.max() >= K or bus.min() < 1 or bus.max() > n)):
        raise SchemaError(f"{samples_path}: expected {K} snapshots x {n} buses")
    p = np.full((K, n), np.nan)
    q = np.full((K, n), np.nan)
    v = np.full((K, n), np.nan)
    p[ks, bus - 1], q[ks, bus - 1], v[ks, bus - 1] = vals[:, 0], vals[:, 1], vals[:, 2]
    if np.isnan(p).any():
        raise SchemaError(f"{samples_path}: duplicate or missing (k, bus) rows")
    v0 = np.array([v0_rows[k] for k in range(K)])
    return SampleSet(p, q, v, v0)


# ---------------------------------------------------------------------------
# library


def write_library(path, lib: ConductorLibrary):
    write_text(path, _dump({"ratios": [float(r) for r in lib.ratios]}))


def read_library(path) -> ConductorLibrary:
    data = read_json(path)
    _fields(data, ("ratios",), (), str(path))
    return ConductorLibrary(float(r) for r in data["ratios"])


# ---------------------------------------------------------------------------
# stage outputs


def topology_to_dict(est, adj) -> dict:
    """Stage-1 output: fitted ``lambda``, diagnostics and the recovered edges."""
    return {
        "n": adj.n,
        "edges": sorted(sorted(int(b) for b in e) for e in adj.edges),
        "root_adjacent": [int(b) for b in adj.root_adjacent],
        "lambda_star": est.lambda_star,
        "residual_norm": est.residual_norm,
        "condition": est.condition_diag,
        "K": est.K,
        "gamma": adj.gamma,
        "xi": adj.xi,
        "rows": [
            {"row": r.row, "radius": r.radius, "bulk_size": r.bulk_size, "bulk_floor": r.bulk_floor, "flagged": r.flagged}
            for r in adj.rows
        ],
    }


def write_topology(path, est, adj):
    write_text(path, _dump(topology_to_dict(est, adj)))


def read_topology(path) -> dict:
    data = read_json(path)
    _fields(data, ("n", "edges", "root_adjacent"),
            ("lambda_star", "residual_norm", "condition", "K", "gamma", "xi", "rows"), str(path))
    return data


def topology_tree_edges(data: dict) -> set[frozenset]:
    edges = {frozenset(int(b) for b in e) for e in data["edges"]}
    return edges | {frozenset((0, int(j))) for j in data["root_adjacent"]}


def impedances_to_dict(result, library: ConductorLibrary | None) -> dict:
    branches = []
    topo = result.topology
    for j in sorted(result.estimates):
        e = result.estimates[j]
        branches.append({
            "branch": j,
            "parent": int(topo.parent[j]),
            "layer": int(topo.depth[j]),
            "r": e.r_hat,
            "x": e.x_hat,
            "lambda_index": e.z_hat,
            "lambda": None if e.z_hat is None or library is None else float(library[e.z_hat]),
            "objective": e.objective,
            "confidence": e.confidence,
            "forced": e.forced,
        })
    return {"method": result.method, "model": result.model, "branches": branches}


def write_impedances(path, result, library):
    write_text(path, _dump(impedances_to_dict(result, library)))


def read_impedances(path) -> dict[int, tuple[float, float]]:
    data = read_json(path)
    _fields(data, ("branches",), ("method", "model"), str(path))
    out = {}
    for i, b in enumerate(data["branches"]):
        _fields(b, ("branch", "r", "x"),
                ("parent", "layer", "lambda_index", "lambda", "objective", "confidence", "forced"), f"{path}: branch #{i}")
        out[int(b["branch"])] = (float(b["r"]), float(b["x"]))
    return out


def write_heatmap(path, Y: np.ndarray):
    """Row-wise min-max normalised off-diagonal entries of ``Y``; the diagonal is left blank."""
    n = Y.shape[0]
    lines = ["row," + ",".join(str(j + 1) for j in range(n))]
    for i in range(n):
        others = np.r_[0:i, i + 1:n]
        z = np.full(n, np.nan)
        row = Y[i, others]
        if np.ptp(row) > 0:
            z[others] = (row - row.min()) / np.ptp(row)
        lines.append(f"{i + 1}," + ",".join("" if np.isnan(t) else _f(t) for t in z))
    write_text(path, "\n".join(lines) + "\n")
