"""Stage 1: weighted Laplacian regression and clustering-based adjacency recovery.

Under the lossless linear model with a single R/X ratio ``lam`` every snapshot
satisfies ``Y (v - v0) = 2 (lam p + q)`` where ``Y = A X^{-1} A^T``. Fitting
``Y`` and ``lam`` jointly by least squares over many snapshots gives an estimate
whose off-diagonal entries are clearly negative exactly on tree edges.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize, sparse

from .errors import (
    DegenerateRow,
    DimensionMismatch,
    IllConditioned,
    InsufficientSamples,
    NoClusterFound,
    NotATree,
    SingularNormalMatrix,
    TooFewPoints,
)
from .network import RadialNetwork, delta_lambda_matrix, true_weighted_laplacian
from .powerflow import SampleSet

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
MIN_SAMPLE_RATIO = 3


@dataclass
class LaplacianEstimate:
    Y_star: np.ndarray
    lambda_star: float
    residual_norm: float
    condition_diag: float
    K: int = 0

    @property
    def n(self) -> int:
        return self.Y_star.shape[0]


def _upper_index(n):
    iu, ju = np.triu_indices(n)
    return iu, ju


def _dup_matrix(n):
    """Sparse map from upper-triangle parameters to row-major vec(Y)."""
    iu, ju = _upper_index(n)
    m = len(iu)
    rows = np.concatenate([iu * n + ju, (ju * n + iu)[iu != ju]])
    cols = np.concatenate([np.arange(m), np.arange(m)[iu != ju]])
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n * n, m))


def _check_samples(samples: SampleSet, strict_ratio: bool):
    K, n = samples.K, samples.n
    if samples.v0.shape != (K,):
        raise DimensionMismatch("one substation voltage per snapshot required")
    if K == 0 or n == 0:
        raise InsufficientSamples("sample set is empty")
    if K < n + 2:
        raise InsufficientSamples(f"K={K} snapshots cannot determine a {n}-bus Laplacian")
    if K < MIN_SAMPLE_RATIO * n:
        msg = f"K={K} is below {MIN_SAMPLE_RATIO}n={MIN_SAMPLE_RATIO * n}; estimate may be poorly excited"
        if strict_ratio:
            raise InsufficientSamples(msg)
        log.warning(msg)


def fit_laplacian(samples: SampleSet, refine: int = 2, strict_ratio: bool = False,
                  cond_limit: float = COND_LIMIT) -> LaplacianEstimate:
    """Joint least-squares fit of a symmetric ``Y`` and a common ratio ``lam``.

    Unknowns are the upper triangle of ``Y`` (symmetry as a hard constraint)
    followed by ``lam``. The normal equations are assembled in closed form from
    ``S = sum d d^T`` with ``d = v - v0``, equilibrated by their diagonal and
    solved by Cholesky; ``refine`` rounds of correction use residuals recomputed
    from the raw data, which recovers accuracy lost to squaring the condition.
    ``condition_diag`` is the 1-norm condition estimate of the equilibrated system.
    """
    _check_samples(samples, strict_ratio)
    K, n = samples.K, samples.n
    Dm = samples.v - samples.v0[:, None]
    P, Q = samples.p, samples.q

    T = _dup_matrix(n)
    S = Dm.T @ Dm
    H = sparse.kron(sparse.identity(n, format="csr"), sparse.csr_matrix(S), format="csr")
    NYY = (T.T @ H @ T).toarray()
    C = P.T @ Dm  # C[i, j] = sum_k p_i d_j
    NYl = -2.0 * (T.T @ C.ravel())
    Nll = 4.0 * np.sum(P * P)
    m = NYY.shape[0]
    N = np.empty((m + 1, m + 1))
    N[:m, :m] = NYY
    N[:m, m] = N[m, :m] = NYl
    N[m, m] = Nll
    rhs = np.concatenate([2.0 * (T.T @ (Q.T @ Dm).ravel()), [-4.0 * np.sum(P * Q)]])

    diag = np.diag(N).copy()
    if np.any(diag <= 0):
        raise IllConditioned("a bus or the ratio column carries no excitation", condition=math.inf)
    s = 1.0 / np.sqrt(diag)
    Ns = N * s[:, None] * s[None, :]
    try:
        cf = linalg.cho_factor(Ns, lower=False, check_finite=False)
    except linalg.LinAlgError as exc:
        raise IllConditioned("normal matrix is not positive definite", condition=math.inf) from exc
    anorm = np.abs(Ns).sum(axis=0).max()
    rcond, _ = linalg.lapack.dpocon(cf[0], anorm)
    cond = math.inf if rcond == 0 else 1.0 / rcond
    if cond > cond_limit:
        raise IllConditioned(f"normal matrix condition {cond:.3g} exceeds {cond_limit:.0e}; "
                             "snapshots do not excite every bus independently", condition=cond)

    theta = s * linalg.cho_solve(cf, s * rhs, check_finite=False)
    iu, ju = _upper_index(n)
    for _ in range(refine):
        Y, lam = _unpack(theta, n, iu, ju)
        E = Dm @ Y - 2.0 * lam * P - 2.0 * Q
        G = E.T @ Dm
        grad_Y = (G + G.T)[iu, ju]
        grad_Y[iu == ju] *= 0.5
        grad = np.concatenate([grad_Y, [-2.0 * np.sum(E * P)]])
        theta = theta - s * linalg.cho_solve(cf, s * grad, check_finite=False)

    Y, lam = _unpack(theta, n, iu, ju)
    E = Dm @ Y - 2.0 * lam * P - 2.0 * Q
    return LaplacianEstimate(Y, float(lam), float(np.linalg.norm(E)), float(cond), K)


def _unpack(theta, n, iu, ju):
    Y = np.zeros((n, n))
    Y[iu, ju] = theta[:-1]
    Y[ju, iu] = theta[:-1]
    return Y, theta[-1]


def fit_laplacian_full(samples: SampleSet) -> LaplacianEstimate:
    """Unconstrained fit over all ``n^2`` entries of ``Y`` plus ``lam``.

    Without the symmetry constraint the problem splits by rows once ``lam`` is
    fixed: row ``i`` of ``Y`` is the least-squares solution of ``Dm y = 2 lam p_i + 2 q_i``.
    Eliminating the rows through a QR factorisation of ``Dm`` leaves a scalar
    problem in ``lam`` solved in closed form.
    """
    _check_samples(samples, strict_ratio=False)
    Dm = samples.v - samples.v0[:, None]
    P, Q = samples.p, samples.q
    Qf, R = np.linalg.qr(Dm)
    if np.min(np.abs(np.diag(R))) <= np.finfo(float).eps * np.max(np.abs(np.diag(R))) * Dm.shape[0]:
        raise SingularNormalMatrix("voltage deviations are rank deficient")

    def perp(M):
        return M - Qf @ (Qf.T @ M)

    Pp, Qp = perp(P), perp(Q)
    denom = np.sum(Pp * Pp)
    lam = -np.sum(Pp * Qp) / denom if denom > 0 else 0.0
    rhs = 2.0 * lam * P + 2.0 * Q
    Y = linalg.solve_triangular(R, Qf.T @ rhs).T
    E = Dm @ Y.T - rhs
    sv = np.linalg.svd(Dm, compute_uv=False)
    return LaplacianEstimate(Y, float(lam), float(np.linalg.norm(E)), float((sv[0] / sv[-1]) ** 2), samples.K)


# ---------------------------------------------------------------------------
# clustering


def normalize_minmax(row) -> np.ndarray:
    from .metrics import normalize_minmax as _nm

    return _nm(row)


def dbscan_1d(values, radius: float, min_neighbors: int) -> np.ndarray:
    """Density clustering on the real line.

    A point is *core* when at least ``min_neighbors`` other points lie within
    ``radius``. Core points within ``radius`` of each other share a cluster;
    a non-core point within ``radius`` of a core point joins the nearest such
    core's cluster; everything else is labelled ``-1``. Labels are numbered
    in increasing value order.
    """
    z = np.asarray(values, dtype=float)
    order = np.argsort(z, kind="stable")
    zs = z[order]
    lo = np.searchsorted(zs, zs - radius, side="left")
    hi = np.searchsorted(zs, zs + radius, side="right")
    # the shifted bounds can round differently from the distances themselves; settle on |a - b| <= radius
    m = len(zs)
    for t in range(m):
        while lo[t] > 0 and zs[t] - zs[lo[t] - 1] <= radius:
            lo[t] -= 1
        while lo[t] < t and zs[t] - zs[lo[t]] > radius:
            lo[t] += 1
        while hi[t] < m and zs[hi[t]] - zs[t] <= radius:
            hi[t] += 1
        while hi[t] > t + 1 and zs[hi[t] - 1] - zs[t] > radius:
            hi[t] -= 1
    core = (hi - lo - 1) >= min_neighbors

    lab_sorted = np.full(len(zs), -1)
    cid = -1
    last_core = None
    for t in np.flatnonzero(core):
        if last_core is None or zs[t] - zs[last_core] > radius:
            cid += 1
        lab_sorted[t] = cid
        last_core = t

    core_idx = np.flatnonzero(core)
    if len(core_idx):
        core_vals = zs[core_idx]
        for t in np.flatnonzero(~core):
            pos = np.searchsorted(core_vals, zs[t])
            best, best_d = None, math.inf
            for c in (pos - 1, pos):
                if 0 <= c < len(core_idx):
                    dist = abs(core_vals[c] - zs[t])
                    if dist <= radius and dist < best_d:
                        best, best_d = core_idx[c], dist
            if best is not None:
                lab_sorted[t] = lab_sorted[best]

    labels = np.empty(len(z), dtype=int)
    labels[order] = lab_sorted
    return labels


def auto_radius(values, min_neighbors: int) -> float:
    """Neighbourhood radius at the knee of the sorted k-distance curve.

    ``k``-distance is each point's distance to its ``min_neighbors``-th nearest
    other point. Sorted ascending, the curve is flat through dense regions and
    bends up where isolated points begin. The knee is taken on a log scale, as
    the point followed by the largest step of ``log(k-distance)`` (first one on
    ties), so it does not depend on how far out the isolated points sit.
    Distances are floored at 2% of the value span, which sets the smallest
    gap treated as a density drop.
    """
    z = np.sort(np.asarray(values, dtype=float))
    m = len(z)
    if m < 3:
        raise TooFewPoints(f"need at least 3 values, got {m}")
    k = min(min_neighbors, m - 1)
    dist = np.abs(z[:, None] - z[None, :])
    dist.sort(axis=1)
    span = z[-1] - z[0]
    floor = 2e-2 * span if span > 0 else 1e-12
    kd = np.maximum(np.sort(dist[:, k]), floor)  # column 0 is the point itself
    knee = int(np.argmax(np.diff(np.log(kd))))
    return float(kd[knee])


def default_gamma(n: int) -> int:
    return max(4, math.ceil(0.05 * n))


@dataclass
class RowDiagnostics:
    row: int
    radius: float
    bulk_size: int
    bulk_floor: float
    flagged: list[int]


@dataclass
class AdjacencyEstimate:
    n: int
    edges: set[frozenset]
    labels: np.ndarray
    root_adjacent: list[int]
    root_scores: np.ndarray
    gamma: int
    xi: float | str
    rows: list[RowDiagnostics] = field(default_factory=list)

    def tree_edges(self) -> set[frozenset]:
        return self.edges | {frozenset((0, j)) for j in self.root_adjacent}


def _classify_row(raw: np.ndarray, gamma: int, xi):
    if np.ptp(raw) == 0:
        raise DegenerateRow("all off-diagonal entries identical")
    z = (raw - raw.min()) / np.ptp(raw)
    radius = auto_radius(z, gamma) if xi == "auto" else float(xi)
    labels = dbscan_1d(z, radius, gamma)
    clusters = sorted(set(labels) - {-1})
    if not clusters:
        raise NoClusterFound(f"no dense cluster at radius {radius:.3g} with gamma={gamma}")
    # the unconnected entries form the dense bulk around zero
    sizes = {c: int(np.sum(labels == c)) for c in clusters}
    top = max(sizes.values())
    bulk = min((c for c in clusters if sizes[c] == top), key=lambda c: abs(raw[labels == c].mean()))
    floor = z[labels == bulk].min()
    flagged = (labels != bulk) & (z < floor) & (raw < 0)
    margin = np.where(flagged, floor - z, 0.0)
    return flagged, margin, radius, sizes[bulk], float(floor)


def recover_topology(est: LaplacianEstimate | np.ndarray, gamma: int | None = None, xi="auto",
                     joint: bool = False) -> AdjacencyEstimate:
    """Label each off-diagonal entry connected/unconnected and emit the edge set.

    Each row's off-diagonal entries are min-max scaled and density-clustered.
    The largest cluster is the unconnected bulk; entries that are negative and
    lie below it are flagged. ``(i, j)`` becomes an edge when both rows flag it,
    or when one row flags it with a margin wider than twice the larger of the
    two rows' radii.
    ``joint=True`` clusters all off-diagonal entries of the matrix at once.
    """
    Y = est.Y_star if isinstance(est, LaplacianEstimate) else np.asarray(est, dtype=float)
    n = Y.shape[0]
    gamma = default_gamma(n) if gamma is None else int(gamma)
    if gamma < 1:
        raise ValueError("gamma must be at least 1")
    if xi != "auto" and not float(xi) > 0:
        raise ValueError("xi must be positive or 'auto'")

    F = np.zeros((n, n), dtype=bool)
    M = np.zeros((n, n))
    radii = np.zeros(n)
    rows = []
    if n == 1:
        pass
    elif joint:
        mask = ~np.eye(n, dtype=bool)
        flagged, margin, radius, bsize, floor = _classify_row(Y[mask], gamma, xi)
        F[mask] = flagged
        M[mask] = margin
        radii[:] = radius
        rows.append(RowDiagnostics(-1, radius, bsize, floor, []))
    else:
        for i in range(n):
            others = np.r_[0:i, i + 1:n]
            flagged, margin, radius, bsize, floor = _classify_row(Y[i, others], gamma, xi)
            F[i, others] = flagged
            M[i, others] = margin
            radii[i] = radius
            rows.append(RowDiagnostics(i + 1, radius, bsize, floor, [int(others[t]) + 1 for t in np.flatnonzero(flagged)]))

    wide = M > 2.0 * np.maximum(radii[:, None], radii[None, :])
    L = (F & F.T) | (F & wide) | (F.T & wide.T)
    np.fill_diagonal(L, False)
    edges = {frozenset((i + 1, j + 1)) for i, j in zip(*np.nonzero(np.triu(L)))}

    # a child of the root keeps its own 1/x in the diagonal, so its row sum over
    # the recovered neighbourhood stays positive; elsewhere it cancels
    rowsum = np.diag(Y) + np.where(L, Y, 0.0).sum(axis=1)
    scores = rowsum / np.abs(np.diag(Y))
    root_adj = []
    for comp in _components(n, L):
        root_adj.append(max(comp, key=lambda b: (scores[b - 1], -b)))
    return AdjacencyEstimate(n, edges, L, sorted(root_adj), scores, gamma, xi, rows)


def _components(n, L):
    seen = np.zeros(n, dtype=bool)
    out = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            a = stack.pop()
            comp.append(a + 1)
            for b in np.flatnonzero(L[a]):
                if not seen[b]:
                    seen[b] = True
                    stack.append(b)
        out.append(sorted(comp))
    return out


def orient_tree(edges, n: int | None = None, root: int = 0):
    """Breadth-first orientation of an undirected tree on buses ``0..n``.

    Returns ``(parents, layers)``: ``parents[j - 1]`` is bus ``j``'s parent and
    ``layers`` maps depth to the buses at that depth.
    """
    pairs = [tuple(sorted(e)) for e in edges]
    if any(a == b for a, b in pairs):
        raise NotATree("self loop in edge list")
    buses = {b for e in pairs for b in e} | {root}
    if n is None:
        n = max(buses)
    if buses != set(range(n + 1)):
        raise NotATree(f"edges must span buses 0..{n}")
    if len(set(pairs)) != len(pairs) or len(pairs) != n:
        raise NotATree(f"a tree on {n + 1} buses has {n} edges, got {len(pairs)}")
    adj = {b: [] for b in range(n + 1)}
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    parent = {root: -1}
    depth = {root: 0}
    frontier = [root]
    while frontier:
        nxt = []
        for a in frontier:
            for b in sorted(adj[a]):
                if b not in parent:
                    parent[b] = a
                    depth[b] = depth[a] + 1
                    nxt.append(b)
        frontier = nxt
    if len(parent) != n + 1:
        raise NotATree("edge list is disconnected")
    layers = {}
    for b in range(1, n + 1):
        layers.setdefault(depth[b], []).append(b)
    return [parent[j] for j in range(1, n + 1)], dict(sorted(layers.items()))


# ---------------------------------------------------------------------------
# robustness certificate


@dataclass
class RobustnessCertificate:
    lhs: float
    eps: float
    delta_norm: float
    delta_norm_fro: float
    holds: bool

    @property
    def rhs(self) -> float:
        return self.eps * self.delta_norm


def _min_eig_arrow(S, C, s):
    """Smallest eigenvalue of [[I (x) S, vec(C)], [vec(C)^T, s]] (row-major vec).

    Rotating every diagonal block by the eigenvectors of ``S`` turns the matrix
    into an arrowhead; its smallest eigenvalue is either the root of the secular
    equation below ``min eig(S)`` or ``min eig(S)`` itself.
    """
    w_s, U = np.linalg.eigh(S)
    lo = w_s[0]
    if lo <= 0:
        raise SingularNormalMatrix("voltage-deviation Gram matrix is singular")
    W = (C @ U) ** 2  # weight of each eigen-direction, per row
    wt = W.sum(axis=0)

    def f(mu):
        return s - mu - np.sum(wt / (w_s - mu))

    if f(0.0) <= 0:
        raise SingularNormalMatrix("normal matrix is not positive definite")
    top = lo * (1.0 - 1e-14)
    if f(top) >= 0:
        return float(lo)
    return float(optimize.brentq(f, 0.0, top, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def verify_prop3(net: RadialNetwork, samples: SampleSet, est: LaplacianEstimate | None = None,
                 atol: float = 1e-6) -> RobustnessCertificate:
    """Check ``||vec(Y_fit) - vec(Y_true)|| <= eps ||Delta||`` for linear-model data.

    ``eps = 2 ||H^{-1}|| sum_k ||[G_k p_k]^T|| ||p_k||`` with ``G_k = I (x) d_k^T``
    and ``H = sum_k [G_k p_k]^T [G_k p_k]``. Matrix norms are spectral, vector
    norms Euclidean; ``delta_norm`` is the spectral norm of the heterogeneity
    matrix (the Frobenius norm is reported alongside). The fit compared is the
    unconstrained one from :func:`fit_laplacian_full` unless ``est`` is given.
    ``atol`` absorbs round-off when the network is (numerically) homogeneous.
    """
    if est is None:
        est = fit_laplacian_full(samples)
    Dm = samples.v - samples.v0[:, None]
    P = samples.p
    S = Dm.T @ Dm
    C = P.T @ Dm
    s = float(np.sum(P * P))
    lam_min = _min_eig_arrow(S, C, s)
    # [G p][G p]^T = |d|^2 I + p p^T, so its spectral norm is sqrt(|d|^2 + |p|^2)
    dn2 = np.sum(Dm * Dm, axis=1)
    pn2 = np.sum(P * P, axis=1)
    eps = 2.0 / lam_min * float(np.sum(np.sqrt(dn2 + pn2) * np.sqrt(pn2)))
    Delta = delta_lambda_matrix(net)
    dnorm = float(np.linalg.norm(Delta, 2)) if net.n else 0.0
    lhs = float(np.linalg.norm(est.Y_star - true_weighted_laplacian(net)))
    return RobustnessCertificate(lhs, eps, dnorm, float(np.linalg.norm(Delta)), bool(lhs <= eps * dnorm + atol))
