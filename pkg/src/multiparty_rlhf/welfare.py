"""Welfare objectives, pessimistic evaluation and policy search.

A deterministic policy is an integer array ``pi`` of length ``S``.  Every
value here is an expectation over a nonnegative state weighting ``w``
(the initial distribution for bandits, an occupancy measure for MDPs).

Normalised rewards use the per-state zero ``R0_m(s) = min_a R_m(s, a)``
unless a reference policy is supplied, in which case ``R0_m(s) =
R_m(s, ref(s))``.  With the min zero the normalised reward of party ``m``
under ``pi`` is ``max_a theta_m^T (phi(s, pi(s)) - phi(s, a))``: convex in
``theta_m``, which is what the inner solvers below exploit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .confidence import ConfidenceSet

SOLUTION_SCHEMA = "policy-solution/v1"


class WelfareKind(str, Enum):
    NASH = "nash"
    UTILITARIAN = "utilitarian"
    LEXIMIN = "leximin"

    @classmethod
    def parse(cls, value) -> "WelfareKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        if v in ("util", "utilitarian", "sum"):
            return cls.UTILITARIAN
        return cls(v)


class EnumerationCapError(ValueError):
    pass


@dataclass
class SolveOptions:
    inner_tol: float = 1e-7
    n_starts: int = 8
    max_sweeps: int = 200
    enum_cap: int = 10**6
    ridge: float = 1e-8
    start_seed: int = 0
    leximin_dp_cap: int = 8
    max_alt_iters: int = 100
    reference_policy: np.ndarray | None = None


# -- exact welfare on reward tables ----------------------------------------


def normalized_rewards(R: np.ndarray, reference=None) -> np.ndarray:
    """``R - R0`` for a reward table of shape ``(M, S, A)``."""
    R = np.asarray(R, dtype=float)
    if reference is None:
        R0 = R.min(axis=2, keepdims=True)
    else:
        ref = np.asarray(reference, dtype=int)
        R0 = R[:, np.arange(R.shape[1]), ref][:, :, None]
    return R - R0


def welfare_table(R: np.ndarray, kind, reference=None) -> np.ndarray:
    """Per-state welfare of every action, shape ``(S, A)``."""
    kind = WelfareKind.parse(kind)
    R = np.asarray(R, dtype=float)
    if kind is WelfareKind.UTILITARIAN:
        return R.sum(axis=0)
    G = normalized_rewards(R, reference)
    if kind is WelfareKind.NASH:
        return np.prod(G, axis=0)
    return G.min(axis=0)


def policy_value(table: np.ndarray, weights, policy) -> float:
    policy = np.asarray(policy, dtype=int)
    return float(np.dot(weights, table[np.arange(table.shape[0]), policy]))


def true_value(inst, policy, kind, weights=None, params=None, reference=None) -> float:
    """Exact welfare ``J(pi)`` of a policy on a tabular instance."""
    weights = inst.initial_dist if weights is None else weights
    R = inst.rewards(params)
    return policy_value(welfare_table(R, kind, reference), weights, policy)


def party_values(inst, policy, weights=None) -> np.ndarray:
    """Raw expected reward of each party, ``E_w theta_m^T phi(s, pi(s))``."""
    weights = inst.initial_dist if weights is None else weights
    R = inst.rewards()
    pol = np.asarray(policy, dtype=int)
    return R[:, np.arange(R.shape[1]), pol] @ weights


def party_suboptimality(inst, policy, weights=None) -> np.ndarray:
    """Per-party gap to that party's own best policy (raw rewards)."""
    weights = inst.initial_dist if weights is None else weights
    R = inst.rewards()
    return R.max(axis=2) @ weights - party_values(inst, policy, weights)


def statewise_argmax(table: np.ndarray) -> np.ndarray:
    return np.argmax(table, axis=1)


def optimal_policy(inst, kind, weights=None, reference=None) -> tuple[np.ndarray, float]:
    """``pi*`` for a bandit instance.

    With fixed state weights the objective separates over states, so the
    state-wise argmax (lowest action on ties) equals the lexicographically
    first maximiser of full enumeration.
    """
    weights = inst.initial_dist if weights is None else weights
    T = welfare_table(inst.rewards(), kind, reference)
    pi = statewise_argmax(T)
    return pi, policy_value(T, weights, pi)


def all_policies(S: int, A: int, cap: int | None = None) -> np.ndarray:
    """Every deterministic policy in lexicographic order, shape ``(A**S, S)``."""
    count = A**S
    if cap is not None and count > cap:
        raise EnumerationCapError(
            f"{A}^{S} = {count} policies exceeds enum_cap={cap}; use alternating mode")
    dtype = np.int16 if A < 2**15 else np.int64
    return np.indices((A,) * S, dtype=dtype).reshape(S, -1).T


# -- inner minimisation ---------------------------------------------------


def confidence_sets(fit, ridge: float = 1e-8) -> list[ConfidenceSet]:
    return [ConfidenceSet(fit.theta_hat[m], fit.sigma[m], fit.gamma, fit.param_bound, ridge)
            for m in range(fit.num_parties)]


@dataclass
class _Block:
    value: float
    theta: np.ndarray
    lower: float
    method: str

    @property
    def residual(self) -> float:
        return max(self.value - self.lower, 0.0)


def _hinge_value(D, w, theta):
    # sum_s w_s max(0, max_p D[s,p] . theta)
    z = D @ theta
    return float(np.dot(w, np.maximum(z.max(axis=1), 0.0)))


def _linear_block(cs, c):
    theta = cs.lmo(c)
    v = float(c @ theta)
    return _Block(v, theta, v, "lmo")


def _block_min(cs: ConfidenceSet, D: np.ndarray, w: np.ndarray, theta0: np.ndarray,
               tol: float) -> _Block:
    """``min_{theta in cs} sum_s w_s max(0, max_p D[s,p] . theta)`` with ``w >= 0``.

    The objective is the support function of a Minkowski sum of polytopes,
    so by minimax its value equals ``max_c h(c)`` over that polytope with
    ``h(c) = min_cs c . theta`` (exact, via the linear oracle).  Strategy:

    1. active-piece fixed point: freeze the maximising piece in every state,
       solve the resulting linear problem exactly, repeat.  If the pieces are
       stable the point is optimal and the duality gap is zero.
    2. otherwise maximise the concave dual over the product of simplices
       with SLSQP, and polish the primal on the epigraph form.
    Returns the best primal point together with the best dual bound.
    """
    keep = w > 0
    D, w = D[keep], w[keep]
    best_theta = np.array(theta0, dtype=float)
    best_val = _hinge_value(D, w, best_theta) if w.size else 0.0
    if best_val <= 0.0:
        return _Block(0.0, best_theta, 0.0, "zero")
    S_, P, d = D.shape
    WD = w[:, None, None] * D
    flat = WD.reshape(-1, d)
    lower = 0.0

    def active(theta):
        z = D @ theta
        k = z.argmax(axis=1)
        on = z[np.arange(S_), k] > 0.0
        return k, on

    def coeffs(k, on):
        lam = np.zeros((S_, P))
        lam[np.arange(S_)[on], k[on]] = 1.0
        return lam

    # 1. fixed point on active pieces
    k, on = active(best_theta)
    seen = []
    lam_hist = []
    for _ in range(50):
        lam = coeffs(k, on)
        lam_hist.append(lam)
        c = lam.reshape(-1) @ flat
        theta = cs.lmo(c)
        h = float(c @ theta)
        lower = max(lower, h)
        val = _hinge_value(D, w, theta)
        if val < best_val:
            best_val, best_theta = val, theta
        if best_val - lower <= tol * max(1.0, abs(best_val)):
            return _Block(best_val, best_theta, lower, "active-set")
        key = (tuple(k[on]), tuple(np.flatnonzero(on)))
        if key in seen:
            break
        seen.append(key)
        k, on = active(theta)

    # 2. primal epigraph solve, certified by KKT multipliers
    theta = _epigraph_polish(cs, D, w, best_theta)
    if theta is not None:
        val = _hinge_value(D, w, theta)
        if val < best_val:
            best_val, best_theta = val, theta
    if best_val <= tol:
        return _Block(best_val, best_theta, lower, "epigraph")
    lam = _kkt_multipliers(cs, D, w, best_theta)
    if lam is not None:
        c = lam.reshape(-1) @ flat
        lower = max(lower, float(c @ cs.lmo(c)))
        if best_val - lower <= tol * max(1.0, abs(best_val)):
            return _Block(best_val, best_theta, lower, "epigraph")
    else:
        lam = np.mean(lam_hist, axis=0)

    # 3. last resort: concave dual over products of simplices
    E = np.zeros((S_, S_ * P))
    for s in range(S_):
        E[s, s * P:(s + 1) * P] = 1.0

    def neg_dual(x):
        c = x @ flat
        th = cs.lmo(c)
        return -float(c @ th), -(flat @ th)

    try:
        res = minimize(neg_dual, lam.reshape(-1), jac=True, method="SLSQP",
                       bounds=[(0.0, 1.0)] * (S_ * P),
                       constraints=[{"type": "ineq", "fun": lambda x: 1.0 - E @ x, "jac": lambda x: -E}],
                       options={"ftol": 1e-14, "maxiter": 300})
        x = np.clip(res.x, 0.0, 1.0)
        x = x / np.repeat(np.maximum(E @ x, 1.0), P)
        c = x @ flat
        theta = cs.lmo(c)
        lower = max(lower, float(c @ theta))
        val = _hinge_value(D, w, theta)
        if val < best_val:
            best_val, best_theta = val, theta
    except (ValueError, FloatingPointError):
        pass
    return _Block(best_val, best_theta, min(lower, best_val), "dual")


def _kkt_multipliers(cs: ConfidenceSet, D, w, theta, rel: float = 1e-6):
    """Piece weights ``lambda`` certifying ``theta`` through the KKT system.

    Solves a nonnegative least-squares problem over the near-active pieces
    and the normals of the near-active constraints.  Any returned ``lambda``
    (per-state sums at most one) is dual feasible, so ``h(c(lambda))`` is a
    valid lower bound whatever the quality of ``theta``.
    """
    from scipy.optimize import nnls

    S_, P, d = D.shape
    z = D @ theta
    zmax = np.maximum(z.max(axis=1), 0.0)
    scale = max(1.0, float(np.abs(z).max()))
    cols, idx = [], []
    for s in range(S_):
        for p in range(P):
            if z[s, p] >= zmax[s] - rel * scale:
                cols.append(w[s] * D[s, p])
                idx.append((s, p))
    if not cols:
        return None
    n_l = len(cols)
    normals = []
    r = theta - cs.center
    if cs.sigma_norm(r) >= cs.gamma * (1.0 - rel):
        normals.append(cs.sigma @ r)
    if np.linalg.norm(theta) >= cs.bound * (1.0 - rel):
        normals.append(theta)
    # zero-piece slack for states where it is active
    slack = [s for s in range(S_) if zmax[s] <= rel * scale]
    ncol = n_l + len(normals) + len(slack)
    weight = 10.0 * max(1.0, float(np.max(np.abs(np.array(cols)))))
    Amat = np.zeros((d + S_, ncol))
    Amat[:d, :n_l] = np.array(cols).T
    for j, nv in enumerate(normals):
        Amat[:d, n_l + j] = nv
    for j, (s, p) in enumerate(idx):
        Amat[d + s, j] = weight
    for j, s in enumerate(slack):
        Amat[d + s, n_l + len(normals) + j] = weight
    b = np.concatenate([np.zeros(d), np.full(S_, weight)])
    try:
        x, _ = nnls(Amat, b, maxiter=50 * ncol)
    except RuntimeError:
        return None
    lam = np.zeros((S_, P))
    for j, (s, p) in enumerate(idx):
        lam[s, p] = x[j]
    sums = lam.sum(axis=1)
    lam /= np.maximum(sums, 1.0)[:, None]
    return lam


def _epigraph_polish(cs: ConfidenceSet, D, w, theta0):
    if cs.gamma == 0:
        return None
    S_, P, d = D.shape
    W = cs.evecs @ np.diag(1.0 / np.sqrt(cs.evals)) @ cs.evecs.T
    Winv = cs.evecs @ np.diag(np.sqrt(cs.evals)) @ cs.evecs.T
    G = cs.gamma
    c0 = cs.center
    B2 = cs.bound**2
    base = D @ c0  # (S', P)
    slope = G * (D @ W)  # (S', P, d)
    rows = S_ * P
    Alin = np.zeros((rows, d + S_))
    Alin[:, :d] = -slope.reshape(rows, d)
    for s in range(S_):
        Alin[s * P:(s + 1) * P, d + s] = 1.0
    blin = -base.reshape(rows)
    u0 = Winv @ (theta0 - c0) / G
    t0 = np.maximum((base + slope @ u0).max(axis=1), 0.0)
    obj_grad = np.concatenate([np.zeros(d), w])

    def theta_of(z):
        return c0 + G * (W @ z[:d])

    cons = [
        {"type": "ineq", "fun": lambda z: Alin @ z + blin, "jac": lambda z: Alin},
        {"type": "ineq", "fun": lambda z: 1.0 - z[:d] @ z[:d],
         "jac": lambda z: np.concatenate([-2.0 * z[:d], np.zeros(S_)])},
        {"type": "ineq", "fun": lambda z: B2 - theta_of(z) @ theta_of(z),
         "jac": lambda z: np.concatenate([-2.0 * G * (W.T @ theta_of(z)), np.zeros(S_)])},
    ]
    try:
        res = minimize(lambda z: (float(w @ z[d:]), obj_grad), np.concatenate([u0, t0]), jac=True,
                       method="SLSQP", bounds=[(None, None)] * d + [(0.0, None)] * S_,
                       constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
    except (ValueError, FloatingPointError):
        return None
    theta = theta_of(res.x)
    if not cs.contains(theta, 0.0):
        theta = cs.project(theta)
    return theta


def _pieces(features, policy, reference=None):
    """Differences ``phi(s, pi(s)) - phi(s, a)`` as ``(S, P, d)``.

    For the min zero, all actions except ``pi(s)`` (their zero piece is
    implicit).  For a reference zero, the single piece against ``ref(s)``.
    """
    F = np.asarray(features, dtype=float)
    S, A, d = F.shape
    pol = np.asarray(policy, dtype=int)
    chosen = F[np.arange(S), pol]  # (S, d)
    if reference is not None:
        ref = np.asarray(reference, dtype=int)
        return (chosen - F[np.arange(S), ref])[:, None, :]
    if A == 1:
        return np.zeros((S, 1, d))
    others = np.array([[a for a in range(A) if a != pol[s]] for s in range(S)])
    return chosen[:, None, :] - F[np.arange(S)[:, None], others]


def _factors(D, thetas, reference):
    # (M, S) normalised rewards at the given parameters
    z = np.einsum("spd,md->msp", D, thetas)
    if reference is not None:
        return z[:, :, 0]
    return np.maximum(z.max(axis=2), 0.0)


def _block(cs, D, w, theta0, tol, reference):
    if reference is not None:
        return _linear_block(cs, np.einsum("s,sd->d", w, D[:, 0, :]))
    return _block_min(cs, D, w, theta0, tol)


def _starts(sets, n_starts, seed):
    """Feasible joint starting points: the centres, the two ends of every
    party's longest ellipsoid axis, then random interior points."""
    rng = np.random.default_rng(seed)
    out = [np.array([cs.center for cs in sets])]
    if n_starts >= 2:
        for sign in (1.0, -1.0):
            th = []
            for cs in sets:
                e = cs.evecs[:, 0] / math.sqrt(cs.evals[0])
                th.append(cs.pull_inside(cs.center + sign * cs.gamma * e))
            out.append(np.array(th))
    while len(out) < n_starts:
        th = []
        for cs in sets:
            u = rng.normal(size=cs.dim)
            u *= rng.uniform() ** (1.0 / cs.dim) / max(np.linalg.norm(u), 1e-300)
            y = cs.evecs @ (cs.evecs.T @ u / np.sqrt(cs.evals))
            th.append(cs.pull_inside(cs.center + cs.gamma * y))
        out.append(np.array(th))
    return out[:max(n_starts, 1)]


class InnerModel:
    """Confidence sets of a fit plus the (policy-independent) start points."""

    def __init__(self, fit, opts):
        self.sets = confidence_sets(fit, opts.ridge)
        self._starts = None
        self._key = (opts.n_starts, opts.start_seed)

    def starts(self, opts):
        key = (opts.n_starts, opts.start_seed)
        if self._starts is None or key != self._key:
            self._starts, self._key = _starts(self.sets, opts.n_starts, opts.start_seed), key
        return self._starts


def _nash_inner(model, D, w, opts, reference):
    sets = model.sets
    M = len(sets)
    best = None
    info = {"starts": 0, "sweeps": [], "block_solves": 0, "max_block_residual": 0.0}
    for start in model.starts(opts):
        thetas = start.copy()
        G = _factors(D, thetas, reference)
        val = float(w @ np.prod(G, axis=0))
        sweeps = 0
        resid = 0.0
        while sweeps < opts.max_sweeps:
            sweeps += 1
            old = val
            resid = 0.0
            for m in range(M):
                ws = w * np.prod(np.delete(G, m, axis=0), axis=0)
                if reference is None and not np.any(ws > 0):
                    continue
                blk = _block(sets[m], D, ws, thetas[m], opts.inner_tol, reference)
                info["block_solves"] += 1
                resid = max(resid, blk.residual)
                cur = float(ws @ G[m])
                if blk.value < cur:
                    thetas[m] = blk.theta
                    G[m] = _factors(D, thetas[m:m + 1], reference)[0]
            val = float(w @ np.prod(G, axis=0))
            if reference is None and val <= 0.0:
                break
            if old - val <= opts.inner_tol * max(1.0, abs(old)):
                break
        info["starts"] += 1
        info["sweeps"].append(sweeps)
        if best is None or val < best[0]:
            best = (val, thetas.copy(), resid)
        if reference is None and best[0] <= 0.0:
            break
    info["max_block_residual"] = best[2]
    return best[0], best[1], info


def _leximin_inner(sets, D, w, opts, reference):
    M = len(sets)
    support = np.flatnonzero(w > 0)
    k = support.size
    info = {"block_solves": 0, "max_block_residual": 0.0}
    if k == 0:
        return 0.0, np.array([cs.center for cs in sets]), dict(info, method="empty")
    Ds, ws = D[support], w[support]
    centers = np.array([cs.center for cs in sets])

    def solve_subset(m, mask_bits):
        wm = np.where(mask_bits, ws, 0.0)
        blk = _block(sets[m], Ds, wm, centers[m], opts.inner_tol, reference)
        info["block_solves"] += 1
        info["max_block_residual"] = max(info["max_block_residual"], blk.residual)
        return blk

    if k <= opts.leximin_dp_cap:
        # exact: min over assignments of states to the party attaining the min
        n_mask = 1 << k
        bits = ((np.arange(n_mask)[:, None] >> np.arange(k)) & 1).astype(bool)
        val = np.zeros((M, n_mask))
        th = np.zeros((M, n_mask, centers.shape[1]))
        for m in range(M):
            th[m, 0] = centers[m]
            for mask in range(1, n_mask):
                blk = solve_subset(m, bits[mask])
                val[m, mask], th[m, mask] = blk.value, blk.theta
        best = val[0].copy()
        choice = [np.arange(n_mask)]
        for m in range(1, M):
            nb = np.full(n_mask, np.inf)
            ch = np.zeros(n_mask, dtype=int)
            for mask in range(n_mask):
                sub = mask
                while True:
                    v = best[mask ^ sub] + val[m, sub]
                    if v < nb[mask]:
                        nb[mask], ch[mask] = v, sub
                    if sub == 0:
                        break
                    sub = (sub - 1) & mask
            best = nb
            choice.append(ch)
        mask = n_mask - 1
        thetas = centers.copy()
        for m in range(M - 1, -1, -1):
            sub = choice[m][mask] if m > 0 else mask
            thetas[m] = th[m, sub]
            mask ^= sub
        value = float(best[-1])
        info["method"] = "subset-dp"
    else:
        thetas = centers.copy()
        assign = _factors(Ds, thetas, reference).argmin(axis=0)
        for _ in range(opts.max_sweeps):
            for m in range(M):
                blk = solve_subset(m, assign == m)
                thetas[m] = blk.theta
            new = _factors(Ds, thetas, reference).argmin(axis=0)
            if np.array_equal(new, assign):
                break
            assign = new
        value = float(ws @ _factors(Ds, thetas, reference).min(axis=0))
        info["method"] = "alternating-assignment"
    # the assignment bound is attained at the returned parameters
    value = min(value, float(ws @ _factors(Ds, thetas, reference).min(axis=0))) if k else value
    return value, thetas, info


def pessimistic_value(fit, features, weights, policy, kind, opts: SolveOptions | None = None,
                      model=None) -> tuple[float, np.ndarray, dict]:
    """``min`` of the welfare of ``policy`` over every party's confidence set.

    Returns ``(value, thetas, diagnostics)``; ``thetas`` attain ``value``.
    """
    opts = opts or SolveOptions()
    kind = WelfareKind.parse(kind)
    F = np.asarray(features, dtype=float)
    w = np.asarray(weights, dtype=float)
    pol = np.asarray(policy, dtype=int)
    ref = opts.reference_policy
    if not isinstance(model, InnerModel):
        model = InnerModel(fit, opts)
    sets = model.sets
    ridged = [cs.ridged for cs in sets]
    diag: dict = {"kind": kind.value, "ridged": ridged}
    centers = np.array([cs.center for cs in sets])
    if all(cs.gamma == 0.0 for cs in sets):
        R = np.einsum("sad,md->msa", F, centers)
        diag.update(method="zero-radius", certified=True, residual=0.0)
        return policy_value(welfare_table(R, kind, ref), w, pol), centers, diag

    if kind is WelfareKind.UTILITARIAN:
        v = w @ F[np.arange(F.shape[0]), pol]
        thetas = np.array([cs.lmo(v) for cs in sets])
        value = float(np.sum(thetas @ v))
        lower_ref = float(sum(cs.ellipsoid_lower_bound(v) for cs in sets))
        diag.update(method="exact-lmo", certified=True, residual=0.0, ellipsoid_lower_reference=lower_ref)
        return value, thetas, diag

    D = _pieces(F, pol, ref)
    if kind is WelfareKind.NASH:
        value, thetas, info = _nash_inner(model, D, w, opts, ref)
        diag["method"] = "block-coordinate"
    else:
        value, thetas, info = _leximin_inner(sets, D, w, opts, ref)
    diag.update(info)
    res = info.get("max_block_residual", 0.0)
    diag["residual"] = res
    diag["certified"] = bool(res <= opts.inner_tol * max(1.0, abs(value)))
    return value, thetas, diag


# -- outer policy search ------------------------------------------------


@dataclass
class PolicySolution:
    policy: np.ndarray
    pessimistic_value: float
    inner_thetas: np.ndarray
    solver_mode: str
    kind: str
    true_value: float | None = None
    optimal_true_value: float | None = None
    suboptimality: float | None = None
    optimal_policy: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": SOLUTION_SCHEMA,
            "kind": self.kind,
            "solver_mode": self.solver_mode,
            "policy": [int(a) for a in self.policy],
            "pessimistic_value": self.pessimistic_value,
            "true_value": self.true_value,
            "optimal_true_value": self.optimal_true_value,
            "suboptimality": self.suboptimality,
            "optimal_policy": None if self.optimal_policy is None else [int(a) for a in self.optimal_policy],
            "inner_thetas": np.asarray(self.inner_thetas).tolist(),
            "diagnostics": _plain(self.diagnostics),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PolicySolution":
        if doc.get("schema") != SOLUTION_SCHEMA:
            raise ValueError(f"expected schema {SOLUTION_SCHEMA!r}, got {doc.get('schema')!r}")
        opt = doc.get("optimal_policy")
        return cls(np.asarray(doc["policy"], dtype=int), doc["pessimistic_value"],
                   np.asarray(doc["inner_thetas"], dtype=float), doc["solver_mode"], doc["kind"],
                   doc.get("true_value"), doc.get("optimal_true_value"), doc.get("suboptimality"),
                   None if opt is None else np.asarray(opt, dtype=int), doc.get("diagnostics", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


WeightsArg = np.ndarray | Callable[[np.ndarray], np.ndarray]


def _weights_for(weights: WeightsArg, policy):
    return weights(policy) if callable(weights) else weights


def _center_values(fit, F, weights, kind, ref, policies):
    R = np.einsum("sad,md->msa", F, fit.theta_hat)
    T = welfare_table(R, kind, ref)
    S = F.shape[0]
    if callable(weights):
        return np.array([float(weights(p) @ T[np.arange(S), p]) for p in policies])
    w = np.asarray(weights, dtype=float)
    return T[np.arange(S)[None, :], policies] @ w


def _value_at(F, thetas, kind, ref, weights, policies):
    """Welfare of each row of ``policies`` at fixed parameters ``thetas``."""
    T = welfare_table(np.einsum("sad,md->msa", F, thetas), kind, ref)
    return T[np.arange(F.shape[0])[None, :], policies] @ np.asarray(weights, dtype=float)


def solve_policy(fit, features, weights: WeightsArg, kind, mode: str = "exact",
                 opts: SolveOptions | None = None, true_params=None) -> PolicySolution:
    """``argmax_pi`` of the pessimistic value.

    ``mode="exact"`` scans every deterministic policy.  Policies are visited in
    decreasing order of their value at the confidence-set centres, an upper
    bound on the pessimistic value, so the scan stops once no remaining
    policy can win.  Policies whose welfare at an already found inner
    minimiser falls below the incumbent are skipped as well.  The winner is
    the lexicographically first maximiser.
    ``mode="alternating"`` alternates state-wise improvement against the
    current inner parameters with re-solving the inner problem (heuristic).

    ``weights`` is an array over states or a callable ``policy -> weights``
    (occupancy measures).  With ``true_params`` the solution also carries
    the true value and sub-optimality under the same weights.
    """
    opts = opts or SolveOptions()
    kind = WelfareKind.parse(kind)
    mode = {"exact_enumeration": "exact", "alt": "alternating"}.get(mode, mode)
    F = np.asarray(features, dtype=float)
    S, A, _ = F.shape
    ref = opts.reference_policy
    model = InnerModel(fit, opts)
    scale_tol = 1e-12

    if mode == "exact":
        policies = all_policies(S, A, opts.enum_cap)
        ub = _center_values(fit, F, weights, kind, ref, policies)
        order = np.lexsort((np.arange(len(ub)), -ub))
        # any feasible parameter tuple bounds every policy's pessimistic
        # value from above; the inner minimisers found so far are reused
        pool_ub = np.full(len(ub), np.inf)
        pool = []
        best_v, best_i, best = -np.inf, -1, None
        evaluated = pruned = 0
        for i in order:
            tie = scale_tol * max(1.0, abs(best_v)) if np.isfinite(best_v) else 0.0
            if ub[i] < best_v - tie:
                break
            pol = policies[i].astype(int)
            if callable(weights) and pool:
                wi = weights(pol)
                pool_ub[i] = min(_value_at(F, th, kind, ref, wi, pol[None, :])[0] for th in pool)
            if pool_ub[i] < best_v - tie:
                pruned += 1
                continue
            v, th, dg = pessimistic_value(fit, F, _weights_for(weights, pol), pol, kind, opts, model)
            evaluated += 1
            if v > best_v + tie or (abs(v - best_v) <= tie and i < best_i):
                best_v, best_i, best = v, i, (pol, th, dg)
            pool.append(th)
            if not callable(weights):
                np.minimum(pool_ub, _value_at(F, th, kind, ref, weights, policies), out=pool_ub)
        pol, th, dg = best
        diag = {"evaluated": evaluated, "pruned_by_pool": pruned,
                "num_policies": int(len(policies)), "inner": dg}
        sol = PolicySolution(pol, best_v, th, "exact_enumeration", kind.value, diagnostics=diag)
    elif mode == "alternating":
        R = np.einsum("sad,md->msa", F, fit.theta_hat)
        pol = statewise_argmax(welfare_table(R, kind, ref))
        seen = set()
        best = None
        it = 0
        while it < opts.max_alt_iters:
            it += 1
            v, th, dg = pessimistic_value(fit, F, _weights_for(weights, pol), pol, kind, opts, model)
            if best is None or v > best[0]:
                best = (v, pol.copy(), th, dg)
            seen.add(tuple(pol))
            R = np.einsum("sad,md->msa", F, th)
            new = statewise_argmax(welfare_table(R, kind, ref))
            if tuple(new) in seen:
                break
            pol = new
        v, pol, th, dg = best
        diag = {"iterations": it, "inner": dg, "heuristic": True}
        sol = PolicySolution(pol, v, th, "alternating", kind.value, diagnostics=diag)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if true_params is not None:
        attach_truth(sol, F, weights, true_params, opts)
    return sol


def attach_truth(sol: PolicySolution, features, weights: WeightsArg, true_params, opts=None) -> PolicySolution:
    """Fill the true value, ``J(pi*)`` and the sub-optimality of a solution."""
    opts = opts or SolveOptions()
    F = np.asarray(features, dtype=float)
    R = np.einsum("sad,md->msa", F, np.asarray(true_params, dtype=float))
    T = welfare_table(R, sol.kind, opts.reference_policy)
    S = F.shape[0]
    sol.true_value = policy_value(T, _weights_for(weights, sol.policy), sol.policy)
    if callable(weights):
        best_v, best_p = -np.inf, None
        for p in all_policies(S, F.shape[1], opts.enum_cap):
            v = policy_value(T, weights(p), p)
            if best_p is None or v > best_v + 1e-12 * max(1.0, abs(best_v)):
                best_v, best_p = v, p.astype(int)
    else:
        best_p = statewise_argmax(T)
        best_v = policy_value(T, weights, best_p)
    sol.optimal_policy = best_p
    sol.optimal_true_value = best_v
    sol.suboptimality = best_v - sol.true_value
    return sol


def suboptimality(inst, solution: PolicySolution, kind=None, weights=None) -> float:
    """``J(pi*) - J(pi_hat)`` on the ground-truth instance."""
    kind = WelfareKind.parse(kind or solution.kind)
    _, best = optimal_policy(inst, kind, weights)
    return best - true_value(inst, solution.policy, kind, weights)


# -- concentrability ------------------------------------------------------


@dataclass
class ConcentrabilityReport:
    c_star: float
    rows: list  # dicts: party, policy_name, policy, contribution
    statewise: np.ndarray  # (S,)

    def table(self) -> str:
        lines = [f"{'party':>5}  {'policy':<12}  contribution"]
        for r in self.rows:
            lines.append(f"{r['party']:>5}  {r['policy_name']:<12}  {r['contribution']:.6g}")
        lines.append(f"C* = {self.c_star:.6g}")
        return "\n".join(lines)


def _inv_sqrt(sigma, ridge):
    evals, evecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if evals[0] <= ridge:
        evals = evals + ridge
    return evecs @ np.diag(evals**-0.5) @ evecs.T


def concentrability(features, sigma, kind, true_params, pi_star=None, inner_thetas=None,
                    weights=None, ridge: float = 1e-8) -> ConcentrabilityReport:
    """Coverage coefficient ``max_m max_pi ||Sigma_m^{-1/2} E_w phi(s, pi(s))||``.

    Utilitarian uses ``{pi*}`` only.  Nash and Leximin add the per-party
    minimising policies under the true parameters and, when ``inner_thetas``
    is given, under those.  ``statewise`` holds the same maximum without the
    expectation, state by state.
    """
    kind = WelfareKind.parse(kind)
    F = np.asarray(features, dtype=float)
    S, A, d = F.shape
    theta = np.atleast_2d(np.asarray(true_params, dtype=float))
    M = theta.shape[0]
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = np.broadcast_to(sigma, (M, d, d))
    R = np.einsum("sad,md->msa", F, theta)
    if pi_star is None:
        pi_star = statewise_argmax(welfare_table(R, kind))
    rows = []
    statewise = np.zeros(S)
    for m in range(M):
        Wm = _inv_sqrt(sigma[m], ridge)
        cands = [("pi_star", np.asarray(pi_star, dtype=int))]
        if kind is not WelfareKind.UTILITARIAN:
            cands.append(("pi_low_true", np.argmin(R[m], axis=1)))
            if inner_thetas is not None:
                cands.append(("pi_low_inner", np.argmin(F @ np.asarray(inner_thetas)[m], axis=1)))
        for name, pol in cands:
            phis = F[np.arange(S), pol]
            val = float(np.linalg.norm(Wm @ (w @ phis)))
            rows.append({"party": m, "policy_name": name, "policy": pol.tolist(), "contribution": val})
            statewise = np.maximum(statewise, np.linalg.norm(phis @ Wm.T, axis=1))
    return ConcentrabilityReport(max(r["contribution"] for r in rows), rows, statewise)


# -- audits -------------------------------------------------------------


@dataclass
class StateVerdict:
    state: int
    passed: bool
    tightest_tau: float
    witness: int | None = None  # offending alternative action


def audit_pareto_table(G: np.ndarray, policy, tau, tol: float = 1e-12) -> list[StateVerdict]:
    """Pareto audit on normalised rewards ``G`` of shape ``(M, S, A)``.

    At state ``s`` an alternative ``a`` violates ``tau``-approximate
    efficiency when every party weakly gains and one gains by a factor
    above ``1 + tau``.  ``tightest_tau`` is the smallest ``tau`` that passes
    (infinite when a dominating action helps a party whose current reward
    is zero).
    """
    G = np.asarray(G, dtype=float)
    M, S, A = G.shape
    taus = np.broadcast_to(np.asarray(tau, dtype=float), (S,))
    out = []
    for s in range(S):
        c = int(policy[s])
        cur = G[:, s, c]
        tight, witness, failed = 0.0, None, False
        for a in range(A):
            if a == c:
                continue
            alt = G[:, s, a]
            if not np.all(alt >= cur - tol):
                continue
            if not np.any(alt > cur + tol):
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(cur > tol, alt / np.where(cur > tol, cur, 1.0) - 1.0,
                                 np.where(alt > cur + tol, np.inf, 0.0))
            need = float(ratio.max())
            if need > tight:
                tight = need
            if np.any(alt > (1.0 + taus[s]) * cur + tol):
                failed, witness = True, a if witness is None else witness
        out.append(StateVerdict(s, not failed, tight, witness))
    return out


def audit_pareto(inst, policy, tau=0.0, kind="nash", params=None) -> list[StateVerdict]:
    """Per-state ``tau``-approximate Pareto audit on the normalised rewards."""
    del kind  # the audit is defined on normalised rewards for every kind
    return audit_pareto_table(normalized_rewards(inst.rewards(params)), policy, tau)


def audit_pigou_dalton_table(R: np.ndarray, policy, tau, sum_tol: float = 1e-9,
                             tol: float = 1e-12) -> list[StateVerdict]:
    """Pigou-Dalton audit on a raw reward table ``(M, S, A)``.

    Flags an alternative that narrows the normalised gap between two parties
    while keeping their raw reward sum (to ``sum_tol``) and raises the Nash
    product by more than ``tau``.  ``tightest_tau`` is the largest such
    product gain (0 when no qualifying move exists).
    """
    R = np.asarray(R, dtype=float)
    M, S, A = R.shape
    if M < 2:
        raise ValueError("the Pigou-Dalton audit needs at least two parties")
    G = normalized_rewards(R)
    prod = np.prod(G, axis=0)
    out = []
    for s in range(S):
        c = int(policy[s])
        tight, witness = 0.0, None
        for a in range(A):
            if a == c:
                continue
            gain = prod[s, a] - prod[s, c]
            if gain <= tight:
                continue
            for i in range(M):
                for j in range(i + 1, M):
                    narrows = abs(G[i, s, a] - G[j, s, a]) < abs(G[i, s, c] - G[j, s, c]) - tol
                    keeps = abs(R[i, s, a] + R[j, s, a] - R[i, s, c] - R[j, s, c]) <= sum_tol
                    if narrows and keeps:
                        tight, witness = gain, a
                        break
                else:
                    continue
                break
        out.append(StateVerdict(s, tight <= float(np.broadcast_to(tau, (S,))[s]), tight, witness))
    return out


def audit_pigou_dalton(inst, policy, tau=0.0, params=None) -> list[StateVerdict]:
    return audit_pigou_dalton_table(inst.rewards(params), policy, tau)


def pareto_tau_bound(inst, fit, c_statewise, pi_star, K: float = 1.0) -> np.ndarray:
    """Scaled per-state tolerance ``xi / (V(s, pi*) - xi)`` with ``xi = K M Gamma C*(s)``.

    Infinite where ``V(s, pi*) <= xi`` (the bound is vacuous there).
    """
    M = inst.num_parties
    xi = K * M * fit.gamma * np.asarray(c_statewise, dtype=float)
    G = normalized_rewards(inst.rewards())
    V = np.prod(G[:, np.arange(inst.num_states), np.asarray(pi_star, dtype=int)], axis=0)
    with np.errstate(divide="ignore"):
        return np.where(V > xi, xi / np.maximum(V - xi, 1e-300), np.inf)
