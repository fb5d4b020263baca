"""Evaluation: topology precision/recall, per-branch relative errors, report tables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConstantRow, UniverseMismatch


def normalize_minmax(row) -> np.ndarray:
    """Rescale to [0, 1]; order preserving."""
    row = np.asarray(row, dtype=float)
    lo, hi = np.min(row), np.max(row)
    if not hi > lo:
        raise ConstantRow("row has fewer than two distinct values")
    return (row - lo) / (hi - lo)


def _edge_set(obj) -> tuple[set[frozenset], int | None]:
    """Edges among buses ``1..n`` and the universe size ``n`` when known."""
    if hasattr(obj, "edges") and callable(obj.edges):  # RadialNetwork / TreeTopology
        return {frozenset(e) for e in obj.edges(include_root=False)}, obj.n
    if hasattr(obj, "edges"):  # AdjacencyEstimate
        return {frozenset(e) for e in obj.edges if 0 not in e}, obj.n
    return {frozenset(e) for e in obj if 0 not in e}, None


def compare_topology(est, truth) -> tuple[float, float]:
    """Edge precision and recall on unordered pairs among buses ``1..n``.

    Either argument may be an adjacency estimate, a network or a plain iterable
    of pairs; edges touching the root are ignored. An empty estimate has
    precision 1 and an empty truth has recall 1.
    """
    E, n_e = _edge_set(est)
    T, n_t = _edge_set(truth)
    if n_e is not None and n_t is not None and n_e != n_t:
        raise UniverseMismatch(f"estimate covers {n_e} buses, truth {n_t}")
    hit = len(E & T)
    precision = hit / len(E) if E else 1.0
    recall = hit / len(T) if T else 1.0
    return precision, recall


@dataclass
class BranchError:
    branch: int
    name: str | None
    layer: int
    r_true: float
    r_hat: float
    rel_err_r: float  # percent
    x_true: float
    x_hat: float
    rel_err_x: float


def relative_errors(est, truth) -> tuple[list[BranchError], float, float]:
    """Per-branch ``|hat - true| / true`` in percent, and the maxima for r and x.

    ``est`` is a sweep result or a mapping ``branch -> (r_hat, x_hat)``.
    """
    if hasattr(est, "estimates"):
        pairs = {j: (e.r_hat, e.x_hat) for j, e in est.estimates.items()}
    else:
        pairs = {int(j): (float(r), float(x)) for j, (r, x) in dict(est).items()}
    if set(pairs) != set(range(1, truth.n + 1)):
        raise UniverseMismatch(f"estimates cover branches {sorted(pairs)}, truth has 1..{truth.n}")
    names = truth.names
    rows = []
    for j in range(1, truth.n + 1):
        r_hat, x_hat = pairs[j]
        r, x = float(truth.r[j - 1]), float(truth.x[j - 1])
        rows.append(BranchError(j, names.get(j), int(truth.depth[j]), r, r_hat, abs(r_hat - r) / r * 100.0,
                                x, x_hat, abs(x_hat - x) / x * 100.0))
    max_r = max((b.rel_err_r for b in rows), default=0.0)
    max_x = max((b.rel_err_x for b in rows), default=0.0)
    return rows, max_r, max_x


def propagation_trace(rows: list[BranchError]) -> list[dict]:
    """Largest relative error per layer, deepest layer first (the sweep's order)."""
    out = {}
    for b in rows:
        t = out.setdefault(b.layer, {"layer": b.layer, "branches": 0, "max_rel_err_r": 0.0, "max_rel_err_x": 0.0})
        t["branches"] += 1
        t["max_rel_err_r"] = max(t["max_rel_err_r"], b.rel_err_r)
        t["max_rel_err_x"] = max(t["max_rel_err_x"], b.rel_err_x)
    return [out[d] for d in sorted(out, reverse=True)]


@dataclass
class EvaluationReport:
    edge_precision: float
    edge_recall: float
    max_rel_err_r: float
    max_rel_err_x: float
    per_branch_errors: list[BranchError] = field(default_factory=list)
    propagation_trace: list[dict] = field(default_factory=list)
    runtimes: dict[str, float] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def to_dict(self, runtimes: bool = True) -> dict:
        d = asdict(self)
        if not runtimes:
            d.pop("runtimes")
        return d

    def to_json(self, runtimes: bool = True) -> str:
        return json.dumps(self.to_dict(runtimes), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Per-branch table; one row per branch, suitable for bar-chart plotting."""
        buf = io.StringIO()
        cols = list(BranchError.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for b in self.per_branch_errors:
            w.writerow([_fmt(getattr(b, c)) for c in cols])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["# Identification report", ""]
        for k, v in sorted(self.info.items()):
            lines.append(f"- {k}: {v}")
        lines += [
            f"- edge precision: {self.edge_precision:.4f}",
            f"- edge recall: {self.edge_recall:.4f}",
            f"- max relative error r: {self.max_rel_err_r:.3e} %",
            f"- max relative error x: {self.max_rel_err_x:.3e} %",
            "",
            "## Per-branch errors",
            "",
            "| branch | name | layer | r true | r est | err r (%) | x true | x est | err x (%) |",
            "|---:|:---|---:|---:|---:|---:|---:|---:|---:|",
        ]
        for b in self.per_branch_errors:
            lines.append(f"| {b.branch} | {b.name or ''} | {b.layer} | {b.r_true:.6g} | {b.r_hat:.6g} | {b.rel_err_r:.3e} "
                         f"| {b.x_true:.6g} | {b.x_hat:.6g} | {b.rel_err_x:.3e} |")
        if self.propagation_trace:
            lines += ["", "## Errors by layer", "", "| layer | branches | max err r (%) | max err x (%) |", "|---:|---:|---:|---:|"]
            for t in self.propagation_trace:
                lines.append(f"| {t['layer']} | {t['branches']} | {t['max_rel_err_r']:.3e} | {t['max_rel_err_x']:.3e} |")
        if self.runtimes:
            lines += ["", "## Runtimes (s)", ""]
            lines += [f"- {k}: {v:.3f}" for k, v in self.runtimes.items()]
        return "\n".join(lines) + "\n"

    def render(self, fmt: str) -> str:
        if fmt == "json":
            return self.to_json()
        if fmt == "csv":
            return self.to_csv()
        if fmt == "md":
            return self.to_markdown()
        raise ValueError(f"unknown report format {fmt!r}")


def _fmt(v):
    return repr(v) if isinstance(v, float) else ("" if v is None else v)


def evaluate(truth, topology_est=None, impedance_est=None, runtimes=None, info=None) -> EvaluationReport:
    """Assemble a report; either stage may be missing, in which case its fields are NaN."""
    prec = rec = float("nan")
    if topology_est is not None:
        prec, rec = compare_topology(topology_est, truth)
    rows, max_r, max_x = [], float("nan"), float("nan")
    trace = []
    if impedance_est is not None:
        rows, max_r, max_x = relative_errors(impedance_est, truth)
        trace = propagation_trace(rows)
    return EvaluationReport(prec, rec, max_r, max_x, rows, trace, dict(runtimes or {}), dict(info or {}))
