"""Stage 2: per-branch impedance regression under a conductor library, and the bottom-up sweep.

With the branch ratio fixed to a library value ``lam`` (so ``r = lam * x``) the
voltage-drop mismatch of snapshot ``k`` is a quadratic in ``x`` alone::

    e_k(x) = dV_k - 2 x (lam P_k + Q_k) - (1 + lam^2) x^2 (P_k^2 + Q_k^2) / v_k

Each library entry therefore leaves a one-dimensional polynomial problem that
is minimised exactly (quartic for least squares, piecewise quadratic for least
absolute deviations). Enumerating the library returns the global optimum of the
mixed-integer problem without any relaxation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    AllCandidatesDegenerate,
    BranchSolveError,
    DimensionMismatch,
    GridTwinError,
    InsufficientSamples,
    NotATree,
    UnrootedTopology,
    ZeroVoltage,
)
from .network import ConductorLibrary, RadialNetwork, TreeTopology
from .powerflow import V_EPS, BranchFlows, SampleSet, update_receiving_flows, update_sending_flows

log = logging.getLogger(__name__)

METHODS = ("lad", "ls")
MODELS = ("nonlinear", "linear")
X_MAX = 1.0
EXCITATION_TOL = 1e-12
_EPS = np.finfo(float).eps


@dataclass
class BranchInput:
    """Per-snapshot regression data of one branch ``i -> j``."""

    dV: np.ndarray  # v_i - v_j
    P: np.ndarray  # receiving-end flows
    Q: np.ndarray
    v: np.ndarray  # v_j

    def __post_init__(self):
        self.dV, self.P, self.Q, self.v = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (self.dV, self.P, self.Q, self.v))
        if not (self.dV.shape == self.P.shape == self.Q.shape == self.v.shape) or self.dV.ndim != 1:
            raise DimensionMismatch("dV, P, Q, v must be 1-D arrays of equal length")
        if np.any(self.v <= V_EPS):
            raise ZeroVoltage(f"receiving-end squared voltage at or below {V_EPS}")

    @property
    def K(self) -> int:
        return len(self.dV)

    def coefficients(self, lam: float, linear: bool = False):
        """``(c0, c1, c2)`` with ``e_k(x) = c0 + c1 x + c2 x^2``; ``linear`` drops the loss term."""
        c0 = self.dV
        c1 = -2.0 * (lam * self.P + self.Q)
        if linear:
            c2 = np.zeros_like(c0)
        else:
            c2 = -(1.0 + lam * lam) * (self.P ** 2 + self.Q ** 2) / self.v
        return c0, c1, c2

    @property
    def excited(self) -> bool:
        return bool(max(np.max(np.abs(self.P), initial=0.0), np.max(np.abs(self.Q), initial=0.0)) > EXCITATION_TOL)


def mismatch(x, lam: float, inp: BranchInput, k=None, linear: bool = False):
    """Voltage-drop mismatch at reactance ``x`` and ratio ``lam``; all snapshots, or snapshot ``k``."""
    c0, c1, c2 = inp.coefficients(lam, linear)
    if k is not None:
        c0, c1, c2 = c0[k], c1[k], c2[k]
    return c0 + (c1 + c2 * x) * x


@dataclass
class BranchEstimate:
    r_hat: float
    x_hat: float
    z_hat: int | None  # index into the sorted library; None when unconstrained or forced
    objective: float
    residuals: np.ndarray
    per_z_objectives: np.ndarray
    method: str = "lad"
    confidence: str = "high"
    underdetermined: bool = False
    forced: bool = False


def _evaluate(c0, c1, c2, xs, method):
    E = c0[:, None] + (c1[:, None] + c2[:, None] * xs[None, :]) * xs[None, :]
    return (E * E).sum(axis=0) if method == "ls" else np.abs(E).sum(axis=0)


def _scale(c0, method):
    # objective size at x = 0; used to decide when two objectives are the same number
    return float(np.sum(c0 * c0)) if method == "ls" else float(np.sum(np.abs(c0)))


def _pick(xs, objs, tol):
    """Smallest x whose objective is within ``tol`` of the best one."""
    order = np.argsort(xs, kind="stable")
    xs, objs = xs[order], objs[order]
    best = objs.min()
    t = int(np.flatnonzero(objs <= best + tol)[0])
    return float(xs[t]), float(objs[t])


def _ls_candidates(c0, c1, c2, x_max):
    # g(x) = sum e_k^2; g'(x) / 2 = a3 x^3 + a2 x^2 + a1 x + a0
    a3 = 2.0 * np.sum(c2 * c2)
    a2 = 3.0 * np.sum(c1 * c2)
    a1 = np.sum(c1 * c1 + 2.0 * c0 * c2)
    a0 = np.sum(c0 * c1)
    coeffs = np.array([a3, a2, a1, a0])
    cands = [0.0, x_max]
    if np.any(coeffs[:-1] != 0):
        roots = np.roots(coeffs)
        # keep nearly-real roots; extra candidates cost one evaluation each
        for z in roots:
            if abs(z.imag) <= 1e-6 * max(abs(z), 1e-300):
                cands.append(min(max(z.real, 0.0), x_max))
    polished = []
    for x in cands[2:]:
        for _ in range(3):
            e = c0 + (c1 + c2 * x) * x
            de = c1 + 2.0 * c2 * x
            g1 = np.sum(e * de)
            g2 = np.sum(de * de + 2.0 * c2 * e)
            if not g2 > 0:
                break
            x_new = x - g1 / g2
            if not 0.0 <= x_new <= x_max or x_new == x:
                break
            x = x_new
        polished.append(x)
    return np.array(cands + polished)


def _quadratic_roots(c0, c1, c2):
    """Real roots of ``c0 + c1 x + c2 x^2`` for every k, cancellation-free."""
    out = []
    quad = c2 != 0
    disc = c1 * c1 - 4.0 * c2 * c0
    ok = quad & (disc >= 0)
    if np.any(ok):
        sq = np.sqrt(disc[ok])
        qq = -0.5 * (c1[ok] + np.copysign(sq, c1[ok]))
        out.append(qq / c2[ok])
        nz = qq != 0
        out.append(c0[ok][nz] / qq[nz])
    lin = ~quad & (c1 != 0)
    if np.any(lin):
        out.append(-c0[lin] / c1[lin])
    return np.concatenate(out) if out else np.empty(0)


def _lad_candidates(c0, c1, c2, x_max):
    roots = _quadratic_roots(c0, c1, c2)
    bps = np.unique(np.concatenate([[0.0, x_max], roots[(roots >= 0) & (roots <= x_max)]]))
    cands = [bps]
    if len(bps) > 1:
        # on each interval every e_k keeps its sign, so h is one quadratic there
        mid = 0.5 * (bps[:-1] + bps[1:])
        S = np.sign(c0[:, None] + (c1[:, None] + c2[:, None] * mid[None, :]) * mid[None, :])
        A1 = S.T @ c1
        A2 = S.T @ c2
        with np.errstate(divide="ignore", invalid="ignore"):
            xv = -A1 / (2.0 * A2)
        keep = (A2 > 0) & (xv > bps[:-1]) & (xv < bps[1:])
        cands.append(xv[keep])
    return np.concatenate(cands)


def _solve_fixed_ratio(inp: BranchInput, lam: float, method: str, x_max: float, linear: bool):
    c0, c1, c2 = inp.coefficients(lam, linear)
    xs = _ls_candidates(c0, c1, c2, x_max) if method == "ls" else _lad_candidates(c0, c1, c2, x_max)
    objs = _evaluate(c0, c1, c2, xs, method)
    return _pick(xs, objs, 64 * _EPS * _scale(c0, method))


def solve_branch(inp: BranchInput, library: ConductorLibrary, method: str = "lad", x_max: float = X_MAX,
                 linear: bool = False, tie_rtol: float = 1e-12) -> BranchEstimate:
    """Globally optimal ``(r, x)`` with ``r / x`` in the library, by enumeration.

    For every library ratio the optimal ``x`` in ``[0, x_max]`` is found exactly;
    the ratio with the lowest objective wins. Objectives within ``tie_rtol``
    (relative) of the best count as equal and the smaller library index is taken.
    ``linear=True`` drops the loss term from the mismatch.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if inp.K == 0 or (method == "ls" and inp.K < 2):
        raise InsufficientSamples(f"{method} regression needs {'two samples' if method == 'ls' else 'a sample'}, got K={inp.K}")
    if not inp.excited:
        raise AllCandidatesDegenerate("branch flows are zero in every sample")
    lib = library if isinstance(library, ConductorLibrary) else ConductorLibrary(library)

    xs = np.empty(len(lib))
    objs = np.empty(len(lib))
    for z, lam in enumerate(lib):
        xs[z], objs[z] = _solve_fixed_ratio(inp, float(lam), method, x_max, linear)
    best = objs.min()
    tol = max(tie_rtol * abs(best), 64 * _EPS * _scale(inp.dV, method))
    z_hat = int(np.flatnonzero(objs <= best + tol)[0])
    lam, x = float(lib[z_hat]), float(xs[z_hat])
    res = mismatch(x, lam, inp, linear=linear)
    return BranchEstimate(
        r_hat=lam * x,
        x_hat=x,
        z_hat=z_hat,
        objective=float(objs[z_hat]),
        residuals=res,
        per_z_objectives=objs,
        method=method,
        confidence="high" if x > 0 else "low",
        underdetermined=inp.K == 1,
    )


def solve_branch_ls(inp: BranchInput, library, x_max: float = X_MAX, linear: bool = False) -> BranchEstimate:
    return solve_branch(inp, library, "ls", x_max, linear)


def solve_branch_lad(inp: BranchInput, library, x_max: float = X_MAX, linear: bool = False) -> BranchEstimate:
    return solve_branch(inp, library, "lad", x_max, linear)


def solve_branch_free(inp: BranchInput, method: str = "ls") -> BranchEstimate:
    """Linear-model fit of ``(r, x)`` with no library: ``dV ~ 2 r P + 2 x Q``.

    Only least squares is offered; this is the baseline whose ill-posedness the
    library constraint removes.
    """
    if method != "ls":
        raise ValueError("the unconstrained baseline is least squares only")
    if inp.K < 2:
        raise InsufficientSamples("need at least two samples for two unknowns")
    M = 2.0 * np.column_stack([inp.P, inp.Q])
    (r, x), *_ = np.linalg.lstsq(M, inp.dV, rcond=None)
    res = inp.dV - M @ np.array([r, x])
    return BranchEstimate(float(r), float(x), None, float(res @ res), res, np.empty(0), method,
                          confidence="high" if r > 0 and x > 0 else "low")


def _fallback(inp: BranchInput, lib: ConductorLibrary, chosen: Sequence[int], method: str) -> BranchEstimate:
    """Unexcited branch: most frequently chosen ratio so far, ``x`` from the linear term only."""
    if chosen:
        counts = np.bincount(np.asarray(chosen), minlength=len(lib))
        z = int(np.argmax(counts))
    else:
        z = 0
    lam = float(lib[z])
    _, c1, _ = inp.coefficients(lam, linear=True)
    den = float(c1 @ c1)
    x = max(-float(inp.dV @ c1) / den, 0.0) if den > 0 else 0.0
    res = mismatch(x, lam, inp)
    obj = float(res @ res) if method == "ls" else float(np.abs(res).sum())
    return BranchEstimate(lam * x, x, z, obj, res, np.full(len(lib), np.nan), method,
                          confidence="low", underdetermined=True)


# ---------------------------------------------------------------------------
# bottom-up sweep


@dataclass
class LayerTrace:
    layer: int
    branches: list[int]
    P: np.ndarray
    Q: np.ndarray
    Pbar: np.ndarray
    Qbar: np.ndarray


@dataclass
class SweepResult:
    estimates: dict[int, BranchEstimate]
    flow_trace: list[LayerTrace]
    layer_order: list[int]
    topology: TreeTopology
    method: str = "lad"
    model: str = "nonlinear"
    flows: BranchFlows | None = field(default=None, repr=False)

    @property
    def r(self) -> np.ndarray:
        return np.array([self.estimates[j].r_hat for j in sorted(self.estimates)])

    @property
    def x(self) -> np.ndarray:
        return np.array([self.estimates[j].x_hat for j in sorted(self.estimates)])


def as_topology(topology) -> TreeTopology:
    """Accept a network, a tree, a stage-1 adjacency estimate or a parent list."""
    from .topology import AdjacencyEstimate, orient_tree

    if isinstance(topology, TreeTopology):
        return topology
    if isinstance(topology, RadialNetwork):
        return TreeTopology.from_network(topology)
    if isinstance(topology, AdjacencyEstimate):
        try:
            parents, _ = orient_tree(topology.tree_edges(), n=topology.n)
        except NotATree as exc:
            raise UnrootedTopology(f"recovered adjacency is not a tree rooted at 0: {exc}") from exc
        return TreeTopology.from_parents(parents)
    return TreeTopology.from_parents(topology)


def sweep(topology, samples: SampleSet, library, method: str = "lad", model: str = "nonlinear",
          x_max: float = X_MAX, forced: dict[int, tuple[float, float]] | None = None,
          threads: int = 1) -> SweepResult:
    """Estimate every branch layer by layer, from the deepest layer up to the root.

    In each layer the receiving-end flows are rebuilt from the meters and the
    children's sending-end flows, each branch is regressed, and its sending-end
    flows are formed with the new estimate for use by the next layer up.
    ``model="linear"`` uses the lossless mismatch and lossless flow updates;
    with ``library=None`` it fits ``(r, x)`` without the library.
    ``forced`` pins chosen branches to given ``(r, x)`` instead of estimating them.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}")
    linear = model == "linear"
    if library is None and not linear:
        raise ValueError("the nonlinear sweep needs a conductor library")
    lib = None if library is None else (library if isinstance(library, ConductorLibrary) else ConductorLibrary(library))
    topo = as_topology(topology)
    if samples.n != topo.n:
        raise DimensionMismatch(f"samples have {samples.n} buses, topology has {topo.n}")
    forced = dict(forced or {})

    K, n = samples.K, topo.n
    flows = BranchFlows.empty(K, n)
    estimates: dict[int, BranchEstimate] = {}
    trace = []
    order = list(range(topo.D, 0, -1))
    chosen: list[int] = []

    def upstream_v(j):
        i = topo.parent[j]
        return samples.v0 if i == 0 else samples.v[:, i - 1]

    def estimate(d, j, P, Q):
        try:
            inp = BranchInput(upstream_v(j) - samples.v[:, j - 1], P, Q, samples.v[:, j - 1])
            if j in forced:
                r, x = forced[j]
                res = inp.dV - 2.0 * (r * inp.P + x * inp.Q)
                if not linear:
                    res = res - (r * r + x * x) * (inp.P ** 2 + inp.Q ** 2) / inp.v
                obj = float(res @ res) if method == "ls" else float(np.abs(res).sum())
                return BranchEstimate(float(r), float(x), None, obj, res, np.empty(0), method, forced=True)
            if lib is None:
                return solve_branch_free(inp, method)
            try:
                return solve_branch(inp, lib, method, x_max, linear)
            except AllCandidatesDegenerate:
                log.warning("branch %d carries no flow; using low-confidence fallback", j)
                return _fallback(inp, lib, chosen, method)
        except GridTwinError as exc:
            raise BranchSolveError(d, j, exc) from exc

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for d in order:
            buses, P, Q = update_receiving_flows(topo, d, flows, samples.p, samples.q)
            args = [(d, j, P[:, m], Q[:, m]) for m, j in enumerate(buses)]
            ests = list(pool.map(lambda a: estimate(*a), args)) if pool else [estimate(*a) for a in args]
            Pb = np.empty_like(P)
            Qb = np.empty_like(Q)
            for m, (j, est) in enumerate(zip(buses, ests)):
                estimates[j] = est
                if est.z_hat is not None and not est.underdetermined:
                    chosen.append(est.z_hat)
                c = j - 1
                flows.P[:, c], flows.Q[:, c] = P[:, m], Q[:, m]
                if linear:
                    Pb[:, m], Qb[:, m] = P[:, m], Q[:, m]
                else:
                    try:
                        Pb[:, m], Qb[:, m] = update_sending_flows(P[:, m], Q[:, m], samples.v[:, c], est.r_hat, est.x_hat)
                    except ZeroVoltage as exc:
                        raise BranchSolveError(d, j, exc) from exc
                flows.Pbar[:, c], flows.Qbar[:, c] = Pb[:, m], Qb[:, m]
            trace.append(LayerTrace(d, list(buses), P, Q, Pb, Qb))
    finally:
        if pool:
            pool.shutdown()
    return SweepResult(estimates, trace, order, topo, method, model, flows)
