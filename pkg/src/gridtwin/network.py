"""Radial network data model and tree algebra.

Buses are dense integers ``0..n`` with 0 the substation secondary bus. Branch
``j`` is labelled by its downstream bus ``j``, so branch quantities live in
length-``n`` arrays where position ``j - 1`` belongs to branch/bus ``j``. The
same offset applies to the rows and columns of every ``n x n`` matrix here.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DataError,
    Disconnected,
    DuplicateDownstreamBus,
    NonPositiveImpedance,
)


@dataclass(frozen=True)
class Bus:
    id: int
    name: str | None = None


@dataclass(frozen=True)
class Branch:
    id: int
    parent: int
    r: float
    x: float

    @property
    def ratio(self) -> float:
        return self.r / self.x


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RadialNetwork:
    """Validated tree rooted at bus 0. Build it with :func:`build_network`."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]  # sorted by id, branches[j - 1].id == j
    base: dict = field(default_factory=dict)

    # derived, filled in by build_network
    parent: np.ndarray = field(init=False, repr=False)
    r: np.ndarray = field(init=False, repr=False)
    x: np.ndarray = field(init=False, repr=False)
    children: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    depth: np.ndarray = field(init=False, repr=False)
    paths: tuple[frozenset, ...] = field(init=False, repr=False)
    A: np.ndarray = field(init=False, repr=False)
    a0: np.ndarray = field(init=False, repr=False)

    @property
    def n(self) -> int:
        return len(self.branches)

    @property
    def D(self) -> int:
        return int(self.depth.max()) if self.n else 0

    @property
    def ratios(self) -> np.ndarray:
        return self.r / self.x

    @property
    def names(self) -> dict[int, str]:
        return {b.id: b.name for b in self.buses if b.name is not None}

    def layer(self, d: int) -> list[int]:
        """Buses (equivalently branches) at depth ``d``, ascending."""
        return [int(j) for j in np.flatnonzero(self.depth == d) if j != 0]

    def layers(self) -> dict[int, list[int]]:
        return {d: self.layer(d) for d in range(1, self.D + 1)}

    def edges(self, include_root: bool = False) -> set[frozenset]:
        out = set()
        for b in self.branches:
            if b.parent == 0 and not include_root:
                continue
            out.add(frozenset((b.parent, b.id)))
        return out

    def with_impedances(self, r: Sequence[float], x: Sequence[float]) -> "RadialNetwork":
        branches = [Branch(b.id, b.parent, float(ri), float(xi)) for b, ri, xi in zip(self.branches, r, x)]
        return build_network(self.buses, branches, base=self.base)


def build_network(buses: Iterable[Bus] | int, branches: Iterable[Branch], base: dict | None = None) -> RadialNetwork:
    """Validate a bus/branch list and compute the derived tree structures.

    ``buses`` may also be an int ``n + 1`` for anonymous buses.
    """
    if isinstance(buses, int):
        buses = [Bus(i) for i in range(buses)]
    buses = sorted(buses, key=lambda b: b.id)
    ids = [b.id for b in buses]
    if ids != list(range(len(ids))):
        raise DataError(f"bus ids must be contiguous 0..n with one root, got {ids}")
    nb = len(buses)
    if nb < 2:
        raise DataError("network needs at least one branch")

    seen = {}
    for br in branches:
        if br.id <= 0 or br.id >= nb:
            raise DataError(f"branch {br.id}: downstream bus must be in 1..{nb - 1}")
        if br.parent < 0 or br.parent >= nb:
            raise DataError(f"branch {br.id}: unknown parent bus {br.parent}")
        if br.parent == br.id:
            raise CycleDetected(f"branch {br.id} is a self loop")
        if br.id in seen:
            raise DuplicateDownstreamBus(f"bus {br.id} is the downstream end of more than one branch")
        if not (br.r > 0 and br.x > 0) or not (np.isfinite(br.r) and np.isfinite(br.x)):
            raise NonPositiveImpedance(f"branch {br.id}: r={br.r}, x={br.x} must be positive")
        seen[br.id] = br
    missing = [j for j in range(1, nb) if j not in seen]
    if missing:
        raise Disconnected(f"buses {missing} have no upstream branch")

    n = nb - 1
    parent = np.full(nb, -1, dtype=int)
    for j, br in seen.items():
        parent[j] = br.parent

    # walk to root from every bus; a revisit means a cycle that never reaches 0
    depth = np.full(nb, -1, dtype=int)
    depth[0] = 0
    for j in range(1, nb):
        trail = []
        k = j
        on_trail = set()
        while depth[k] < 0:
            if k in on_trail:
                raise CycleDetected(f"cycle through buses {sorted(on_trail)}")
            on_trail.add(k)
            trail.append(k)
            k = parent[k]
        d = depth[k]
        for t in reversed(trail):
            d += 1
            depth[t] = d

    children = [[] for _ in range(nb)]
    for j in range(1, nb):
        children[parent[j]].append(j)

    paths = [frozenset()] * nb
    for j in sorted(range(1, nb), key=lambda b: depth[b]):
        paths[j] = paths[parent[j]] | {j}

    A = np.zeros((n, n))
    a0 = np.zeros(n)
    for j in range(1, nb):
        A[j - 1, j - 1] = -1.0
        if parent[j] == 0:
            a0[j - 1] = 1.0
        else:
            A[parent[j] - 1, j - 1] = 1.0

    ordered = tuple(seen[j] for j in range(1, nb))
    net = RadialNetwork(tuple(buses), ordered, dict(base or {}))
    object.__setattr__(net, "parent", _readonly(parent))
    object.__setattr__(net, "r", _readonly(np.array([b.r for b in ordered], dtype=float)))
    object.__setattr__(net, "x", _readonly(np.array([b.x for b in ordered], dtype=float)))
    object.__setattr__(net, "children", tuple(tuple(c) for c in children))
    object.__setattr__(net, "depth", _readonly(depth))
    object.__setattr__(net, "paths", tuple(paths))
    object.__setattr__(net, "A", _readonly(A))
    object.__setattr__(net, "a0", _readonly(a0))

    # A^{-T} a0 = -1 holds for any tree; a failure here is a bug, not bad input
    z = np.linalg.solve(A.T, a0)
    assert np.allclose(z, -1.0, atol=1e-10, rtol=0), "reduced incidence check failed"
    return net


def network_from_parents(parents: Sequence[int], r: Sequence[float], x: Sequence[float], names=None, base=None) -> RadialNetwork:
    """Shorthand: ``parents[j - 1]`` is the parent of bus ``j``."""
    n = len(parents)
    buses = [Bus(i, None if names is None else names[i]) for i in range(n + 1)]
    branches = [Branch(j, int(parents[j - 1]), float(r[j - 1]), float(x[j - 1])) for j in range(1, n + 1)]
    return build_network(buses, branches, base=base)


def reduced_incidence_inverse(net: RadialNetwork) -> np.ndarray:
    """A^{-1} built entrywise: b_ij = -1 when bus i lies on the path from j to the root."""
    n = net.n
    B = np.zeros((n, n))
    for j in range(1, n + 1):
        for i in net.paths[j]:
            B[i - 1, j - 1] = -1.0
    return B


def true_weighted_laplacian(net: RadialNetwork) -> np.ndarray:
    """Weighted Laplacian A X^{-1} A^T assembled from the tree structure."""
    n = net.n
    w = 1.0 / net.x
    Y = np.zeros((n, n))
    for j in range(1, n + 1):
        Y[j - 1, j - 1] = w[j - 1] + sum(w[k - 1] for k in net.children[j])
        i = net.parent[j]
        if i != 0:
            Y[i - 1, j - 1] = Y[j - 1, i - 1] = -w[j - 1]
    return Y


def delta_lambda_matrix(net: RadialNetwork, ratios: np.ndarray | None = None) -> np.ndarray:
    """Heterogeneity matrix A diag(lambda - mean(lambda)) A^{-1}, assembled entrywise.

    For i an ancestor of j (i != j) the entry is the deviation of branch i minus
    the deviation of i's child on the way down to j; the diagonal is the deviation
    of branch i; everything else is zero.
    """
    lam = net.ratios if ratios is None else np.asarray(ratios, dtype=float)
    dl = lam - lam.mean()
    n = net.n
    out = np.zeros((n, n))
    for j in range(1, n + 1):
        out[j - 1, j - 1] = dl[j - 1]
        # climb from j; ``below`` is the child of ``i`` on the path to j
        below = j
        i = net.parent[j]
        while i != 0:
            out[i - 1, j - 1] = dl[i - 1] - dl[below - 1]
            below = i
            i = net.parent[i]
    return out


class ConductorLibrary:
    """Sorted, de-duplicated set of admissible R/X ratios."""

    def __init__(self, ratios: Iterable[float], tol: float = 1e-9):
        vals = sorted(float(v) for v in ratios)
        if not vals:
            raise DataError("conductor library is empty")
        if vals[0] <= 0 or not all(np.isfinite(vals)):
            raise DataError("library ratios must be finite and strictly positive")
        kept = [vals[0]]
        for v in vals[1:]:
            if v - kept[-1] > tol:
                kept.append(v)
        self.ratios = np.array(kept)
        self.ratios.setflags(write=False)

    def __len__(self):
        return len(self.ratios)

    def __iter__(self):
        return iter(self.ratios)

    def __getitem__(self, z):
        return self.ratios[z]

    def __repr__(self):
        return f"ConductorLibrary({self.ratios.tolist()})"

    def index_of(self, ratio: float, tol: float = 1e-6) -> int | None:
        d = np.abs(self.ratios - ratio)
        z = int(np.argmin(d))
        return z if d[z] <= tol * max(1.0, ratio) else None


def random_tree(n: int, rng: np.random.Generator, x_range=(1e-3, 5e-2), ratio_range=(0.3, 3.5), ratios=None) -> RadialNetwork:
    """Random recursive tree on buses 0..n (each bus attaches to an earlier one)."""
    parents = [int(rng.integers(0, j)) for j in range(1, n + 1)]
    x = rng.uniform(*x_range, size=n)
    lam = rng.uniform(*ratio_range, size=n) if ratios is None else np.asarray(ratios, dtype=float)
    return network_from_parents(parents, lam * x, x)


@dataclass(frozen=True)
class TreeTopology:
    """Parent structure of a rooted tree without impedances.

    Exposes the same ``n``, ``parent``, ``children``, ``depth``, ``D`` and
    ``layer`` interface as :class:`RadialNetwork`, which is all the sweep needs.
    """

    parent: tuple[int, ...]  # parent[0] == -1
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        nb = len(self.parent)
        if nb < 2 or self.parent[0] != -1 or any(not 0 <= p < nb for p in self.parent[1:]):
            raise DataError("parents must name buses 0..n, with -1 only for the root")
        children = [[] for _ in range(nb)]
        depth = [0] * nb
        for j in range(1, nb):
            children[self.parent[j]].append(j)
        order = [0]
        for i in order:
            for c in children[i]:
                depth[c] = depth[i] + 1
                order.append(c)
        if len(order) != nb:
            raise CycleDetected("parent list does not describe a tree rooted at 0")
        object.__setattr__(self, "children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "depth", np.array(depth))

    @classmethod
    def from_parents(cls, parents: Sequence[int], names=None) -> "TreeTopology":
        """``parents[j - 1]`` is the parent of bus ``j``."""
        return cls((-1, *(int(p) for p in parents)), dict(names or {}))

    @classmethod
    def from_network(cls, net: RadialNetwork) -> "TreeTopology":
        return cls(tuple(int(p) for p in net.parent), net.names)

    @property
    def n(self) -> int:
        return len(self.parent) - 1

    @property
    def D(self) -> int:
        return int(self.depth.max()) if self.n else 0

    def layer(self, d: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.depth == d) if j != 0]

    def edges(self, include_root: bool = False) -> set[frozenset]:
        return {frozenset((self.parent[j], j)) for j in range(1, self.n + 1)
                if include_root or self.parent[j] != 0}


def bfs_order(net: RadialNetwork) -> list[int]:
    order, queue = [], deque([0])
    while queue:
        i = queue.popleft()
        order.append(i)
        queue.extend(net.children[i])
    return order
