"""Branch flow (DistFlow) solvers and the flow-update steps of the bottom-up sweep.

Conventions, all per-unit:

* ``p``, ``q`` are net injections, loads negative. With this sign the receiving
  end flow of branch ``j`` is ``P_j = sum(Pbar_k for k in children(j)) - p_j``.
* ``v`` holds squared voltage magnitudes, ``v0`` the squared substation voltage.
* Arrays are ``(K, n)``: one row per snapshot, column ``j - 1`` for bus/branch ``j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionMismatch, MissingChildFlow, NonConvergence, ZeroVoltage
from .network import RadialNetwork, reduced_incidence_inverse

V_EPS = 1e-6


@dataclass
class BranchFlows:
    P: np.ndarray
    Q: np.ndarray
    Pbar: np.ndarray
    Qbar: np.ndarray

    @classmethod
    def empty(cls, K, n):
        return cls(*(np.full((K, n), np.nan) for _ in range(4)))

    def copy(self):
        return BranchFlows(self.P.copy(), self.Q.copy(), self.Pbar.copy(), self.Qbar.copy())


@dataclass
class Snapshot:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    v0: float


@dataclass
class SampleSet:
    """K coherent smart-meter snapshots; ``truth`` keeps solver flows for evaluation only."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    v0: np.ndarray
    truth: BranchFlows | None = None

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_2d(np.asarray(self.q, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        self.v0 = np.broadcast_to(np.asarray(self.v0, dtype=float), (self.p.shape[0],)).copy()
        if not (self.p.shape == self.q.shape == self.v.shape):
            raise DimensionMismatch(f"p {self.p.shape}, q {self.q.shape}, v {self.v.shape} disagree")
        if self.K and (np.any(self.v <= 0) or np.any(self.v0 <= 0)):
            raise DataError("squared voltages must be positive")

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @property
    def n(self) -> int:
        return self.p.shape[1]

    def __getitem__(self, k) -> Snapshot:
        return Snapshot(self.p[k], self.q[k], self.v[k], float(self.v0[k]))

    def subset(self, idx) -> "SampleSet":
        """Copy of the selected snapshots (never a view)."""
        truth = None
        if self.truth is not None:
            t = self.truth
            truth = BranchFlows(*(np.array(a[idx], copy=True) for a in (t.P, t.Q, t.Pbar, t.Qbar)))
        return SampleSet(*(np.array(a[idx], copy=True) for a in (self.p, self.q, self.v, self.v0)), truth)


@dataclass
class PowerFlowResult:
    v: np.ndarray
    flows: BranchFlows
    iterations: int


def _as_2d(a, n):
    a = np.asarray(a, dtype=float)
    squeeze = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != n:
        raise DimensionMismatch(f"expected {n} buses, got {a.shape[1]}")
    return a, squeeze


def _backward(net, order_up, p, q, v, flows):
    r, x = net.r, net.x
    for j in order_up:
        c = j - 1
        kids = [k - 1 for k in net.children[j]]
        P = -p[:, c] + (flows.Pbar[:, kids].sum(axis=1) if kids else 0.0)
        Q = -q[:, c] + (flows.Qbar[:, kids].sum(axis=1) if kids else 0.0)
        s = (P * P + Q * Q) / v[:, c]
        flows.P[:, c] = P
        flows.Q[:, c] = Q
        flows.Pbar[:, c] = P + r[c] * s
        flows.Qbar[:, c] = Q + x[c] * s


def solve_exact(net: RadialNetwork, p, q, v0=1.0, tol=1e-12, max_iter=200) -> PowerFlowResult:
    """Solve the angle-relaxed branch flow equations by backward/forward sweeps.

    Flows are computed leaf-to-root from the current voltages, then voltages
    root-to-leaf from those flows, until the largest voltage update is below
    ``tol``. Accepts one snapshot (``(n,)`` arrays) or a batch ``(K, n)``.
    """
    n = net.n
    p, squeeze = _as_2d(p, n)
    q, _ = _as_2d(q, n)
    K = p.shape[0]
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (K,)).copy()
    if np.any(v0 <= 0):
        raise DataError("v0 must be positive")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise DataError("injections must be finite")

    order_down = sorted(range(1, n + 1), key=lambda j: net.depth[j])
    order_up = order_down[::-1]
    r, x = net.r, net.x
    z2 = r * r + x * x

    v = np.repeat(v0[:, None], n, axis=1)
    flows = BranchFlows.empty(K, n)
    for it in range(1, max_iter + 1):
        _backward(net, order_up, p, q, v, flows)
        v_new = np.empty_like(v)
        for j in order_down:
            c = j - 1
            i = net.parent[j]
            vi = v0 if i == 0 else v_new[:, i - 1]
            P, Q = flows.P[:, c], flows.Q[:, c]
            v_new[:, c] = vi - 2.0 * (r[c] * P + x[c] * Q) - z2[c] * (P * P + Q * Q) / v[:, c]
        bad = np.any(v_new <= 0, axis=1)
        if np.any(bad):
            raise NonConvergence("voltage collapse during sweep", sample=int(np.flatnonzero(bad)[0]))
        step = np.abs(v_new - v).max(axis=1)
        v = v_new
        if step.max() <= tol:
            break
    else:
        raise NonConvergence(f"no convergence in {max_iter} sweeps", sample=int(np.argmax(step)))
    _backward(net, order_up, p, q, v, flows)
    if squeeze:
        flows = BranchFlows(flows.P[0], flows.Q[0], flows.Pbar[0], flows.Qbar[0])
        v = v[0]
    return PowerFlowResult(v, flows, it)


def flow_residuals(net: RadialNetwork, p, q, v, v0, flows: BranchFlows) -> np.ndarray:
    """Largest violation of each branch flow equation, per snapshot: shape ``(K, 5)``.

    Columns: P balance, Pbar loss, Q balance, Qbar loss, voltage drop.
    """
    n = net.n
    p, _ = _as_2d(p, n)
    q, _ = _as_2d(q, n)
    v, _ = _as_2d(v, n)
    P, Q, Pb, Qb = (np.atleast_2d(a) for a in (flows.P, flows.Q, flows.Pbar, flows.Qbar))
    K = p.shape[0]
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (K,))
    C = np.zeros((n, n))  # C[k-1, j-1] = 1 when k is a child of j
    for j in range(1, n + 1):
        for k in net.children[j]:
            C[k - 1, j - 1] = 1.0
    par = net.parent[1:]
    v_up = np.where(par == 0, v0[:, None], v[:, np.maximum(par - 1, 0)])
    s = (P * P + Q * Q) / v
    res = np.stack(
        [
            P - (Pb @ C - p),
            Pb - (P + net.r * s),
            Q - (Qb @ C - q),
            Qb - (Q + net.x * s),
            (v_up - v) - (2 * (net.r * P + net.x * Q) + (net.r ** 2 + net.x ** 2) * s),
        ],
        axis=-1,
    )
    return np.abs(res).max(axis=1)


def linear_sensitivities(net: RadialNetwork):
    """(2 A^{-T} R A^{-1}, 2 A^{-T} X A^{-1}), the LinDistFlow voltage sensitivities."""
    B = reduced_incidence_inverse(net)
    return 2.0 * B.T @ (net.r[:, None] * B), 2.0 * B.T @ (net.x[:, None] * B)


def solve_linearized(net: RadialNetwork, p, q, v0=1.0) -> np.ndarray:
    """Squared voltages from the lossless linear model; same shape as ``p``."""
    n = net.n
    p, squeeze = _as_2d(p, n)
    q, _ = _as_2d(q, n)
    Sr, Sx = linear_sensitivities(net)
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (p.shape[0],))
    v = p @ Sr.T + q @ Sx.T + v0[:, None]
    return v[0] if squeeze else v


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian measurement noise, applied after the flow solve."""

    sigma_v: float = 0.0
    sigma_p: float = 0.0
    sigma_q: float = 0.0

    @property
    def active(self) -> bool:
        return bool(self.sigma_v or self.sigma_p or self.sigma_q)


def generate_samples(net: RadialNetwork, p, q, noise: NoiseSpec | None = None, v0=1.0, seed: int = 0,
                     model: str = "exact") -> SampleSet:
    """Solve every snapshot and package it as meter data.

    Noise for snapshot ``k`` is drawn from ``default_rng(seed + k)``, so the
    output does not depend on how snapshots are batched.
    """
    n = net.n
    p, _ = _as_2d(p, n)
    q, _ = _as_2d(q, n)
    K = p.shape[0]
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), (K,)).copy()
    if K == 0:
        return SampleSet(p, q, np.empty((0, n)), v0, BranchFlows.empty(0, n))
    if model == "exact":
        res = solve_exact(net, p, q, v0)
        v, truth = res.v, res.flows
    elif model == "linear":
        v = solve_linearized(net, p, q, v0)
        truth = None
    else:
        raise ValueError(f"unknown model {model!r}")

    p_m, q_m, v_m = p.copy(), q.copy(), v.copy()
    noise = noise or NoiseSpec()
    if noise.active:
        for k in range(K):
            g = np.random.default_rng(seed + k)
            e = g.standard_normal((3, n))
            v_m[k] += noise.sigma_v * e[0]
            p_m[k] += noise.sigma_p * e[1]
            q_m[k] += noise.sigma_q * e[2]
    return SampleSet(p_m, q_m, v_m, v0, truth)


def corrupt_voltages(samples: SampleSet, fraction: float, size: float = 0.05, seed: int = 0) -> SampleSet:
    """Gross meter errors: in a random ``fraction`` of snapshots every voltage is scaled by ``1 +/- size``.

    Signs are drawn independently per bus. The input is not modified.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    out = samples.subset(slice(None))
    m = int(round(fraction * samples.K))
    if m == 0:
        return out
    g = np.random.default_rng([seed, 1])
    ks = np.sort(g.choice(samples.K, size=m, replace=False))
    signs = g.choice([-1.0, 1.0], size=(m, samples.n))
    out.v[ks] = out.v[ks] * (1.0 + size * signs)
    return out


def update_receiving_flows(net: RadialNetwork, d: int, flows: BranchFlows, p, q):
    """Receiving-end flows for every branch in layer ``d`` from children's sending-end flows.

    Returns ``(buses, P, Q)`` with ``P``/``Q`` shaped ``(K, len(buses))``.
    """
    buses = net.layer(d)
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    K = p.shape[0]
    P = np.empty((K, len(buses)))
    Q = np.empty((K, len(buses)))
    for m, j in enumerate(buses):
        kids = [k - 1 for k in net.children[j]]
        if kids:
            Pb = np.atleast_2d(flows.Pbar)[:, kids]
            Qb = np.atleast_2d(flows.Qbar)[:, kids]
            if np.isnan(Pb).any() or np.isnan(Qb).any():
                missing = [kids[c] + 1 for c in range(len(kids)) if np.isnan(Pb[:, c]).any() or np.isnan(Qb[:, c]).any()]
                raise MissingChildFlow(f"bus {j}: sending-end flows of children {missing} unknown")
            P[:, m] = Pb.sum(axis=1) - p[:, j - 1]
            Q[:, m] = Qb.sum(axis=1) - q[:, j - 1]
        else:
            P[:, m] = -p[:, j - 1]
            Q[:, m] = -q[:, j - 1]
    return buses, P, Q


def update_sending_flows(P, Q, v, r_hat, x_hat):
    """Sending-end flows: receiving-end flow plus the branch's estimated losses."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= V_EPS):
        raise ZeroVoltage(f"squared voltage below {V_EPS}")
    s = (np.square(P) + np.square(Q)) / v
    return P + r_hat * s, Q + x_hat * s
