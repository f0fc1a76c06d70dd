"""Reward-free aggregation through pessimistic von Neumann winners.

Per state, comparisons are summarised by skew-symmetric preference matrices
``N_{s,m}(a, a') = (#(a > a') - #(a' > a)) / n0``; their party average
``N_s`` is shrunk by a count-based bonus and the max-min mixed strategy of
``N_s - B_s`` is the per-state winner.  The policy-level strategy is the
product of the per-state ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WINNER_SCHEMA = "vn-winner/v1"


class GameSolverError(RuntimeError):
    pass


# -- preference tables ------------------------------------------------------


@dataclass
class PreferenceTables:
    wins: np.ndarray  # (M, S, A, A) count of a beating a'
    N_party: np.ndarray  # (M, S, A, A)
    N: np.ndarray  # (S, A, A)
    bonus: np.ndarray  # (S, A, A)
    delta: float
    N_star_party: np.ndarray | None = None
    N_star: np.ndarray | None = None

    @property
    def visits(self) -> np.ndarray:
        """``n0(m, s, a, a')``: comparisons of the unordered pair."""
        return self.wins + np.swapaxes(self.wins, 2, 3)

    num_parties = property(lambda self: self.N_party.shape[0])
    num_states = property(lambda self: self.N.shape[0])
    num_actions = property(lambda self: self.N.shape[1])


def preference_matrix(wins: np.ndarray) -> np.ndarray:
    """``(#(a > a') - #(a' > a)) / n0`` with 0 on unseen pairs (last two axes)."""
    wins = np.asarray(wins, dtype=float)
    wt = np.swapaxes(wins, -1, -2)
    n0 = wins + wt
    out = np.zeros_like(wins)
    np.divide(wins - wt, n0, out=out, where=n0 > 0)
    idx = np.arange(wins.shape[-1])
    out[..., idx, idx] = 0.0
    return out


def bonus_matrix(visits: np.ndarray, M: int, S: int, A: int, delta: float) -> np.ndarray:
    """``sqrt(2 log(4 M S A^2 / delta) / max(min_m n0, 1))`` with a zero diagonal."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    nmin = np.maximum(np.asarray(visits).min(axis=0), 1.0)
    B = np.sqrt(2.0 * math.log(4.0 * M * S * A * A / delta) / nmin)
    idx = np.arange(A)
    B[:, idx, idx] = 0.0
    return B


def count_wins(data, S: int, A: int) -> np.ndarray:
    M = data.num_parties
    wins = np.zeros((M, S, A, A))
    winner = np.where(data.label == 1, data.action_1, data.action_0)
    loser = np.where(data.label == 1, data.action_0, data.action_1)
    for m in range(M):
        np.add.at(wins[m], (data.state[m], winner[m], loser[m]), 1.0)
    idx = np.arange(A)
    wins[:, :, idx, idx] = 0.0  # self-comparisons carry no information
    return wins


def truth_tables(inst) -> tuple[np.ndarray, np.ndarray]:
    """Population matrices under BTL: ``N*(a, a') = 2 sigmoid(R(a) - R(a')) - 1``."""
    R = inst.rewards()
    Np = np.tanh(0.5 * (R[:, :, :, None] - R[:, :, None, :]))
    return Np, Np.mean(axis=0)


def build_tables(data, S: int, A: int, delta: float, truth=None) -> PreferenceTables:
    """Tables from a comparison dataset; ``truth`` is an instance or ``(N*_party, N*)``."""
    wins = count_wins(data, S, A)
    Np = preference_matrix(wins)
    B = bonus_matrix(wins + np.swapaxes(wins, 2, 3), data.num_parties, S, A, delta)
    tables = PreferenceTables(wins, Np, Np.mean(axis=0), B, delta)
    if truth is not None:
        if isinstance(truth, tuple):
            tables.N_star_party, tables.N_star = (np.asarray(t, dtype=float) for t in truth)
        else:
            tables.N_star_party, tables.N_star = truth_tables(truth)
    return tables


def exact_tables(N_star_party, delta: float = 0.1) -> PreferenceTables:
    """Tables that equal a given truth with no sampling noise and no bonus."""
    Np = np.asarray(N_star_party, dtype=float)
    M, S, A, _ = Np.shape
    return PreferenceTables(np.zeros_like(Np), Np.copy(), Np.mean(axis=0), np.zeros((S, A, A)),
                            delta, Np.copy(), Np.mean(axis=0))


def concentration_holds(tables: PreferenceTables) -> bool:
    """``|N_s - N*_s| <= B_s`` in every cell."""
    if tables.N_star is None:
        raise ValueError("truth tables required")
    return bool(np.all(np.abs(tables.N - tables.N_star) <= tables.bonus + 1e-15))


# -- matrix games -----------------------------------------------------------


@dataclass
class GameSolution:
    p: np.ndarray
    q: np.ndarray
    value: float
    lower: float  # min over pure columns of p^T Mat
    upper: float  # max over pure rows of Mat q
    method: str
    pivots: int = 0

    @property
    def gap(self) -> float:
        return self.upper - self.lower


def _simplex_bland(P: np.ndarray, max_pivots: int):
    """Solve ``max 1^T y  s.t.  P y <= 1, y >= 0`` for ``P > 0`` by a dense tableau.

    Bland's rule (lowest eligible index enters and leaves) rules out cycling.
    Returns the optimal basis or ``None`` when the pivot cap is hit.
    """
    m, n = P.shape
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = P
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = 1.0
    T[m, :n] = -1.0
    basis = list(range(n, n + m))
    eps = 1e-12
    for k in range(max_pivots + 1):
        enter = next((j for j in range(n + m) if T[m, j] < -eps), None)
        if enter is None:
            return basis, k
        if k == max_pivots:
            return None, k
        col = T[:m, enter]
        rows = np.flatnonzero(col > eps)
        ratios = T[rows, -1] / col[rows]
        rmin = ratios.min()
        tied = rows[ratios <= rmin + eps * max(1.0, rmin)]
        leave = min(tied, key=lambda i: basis[i])
        T[leave] /= T[leave, enter]
        for i in range(m + 1):
            if i != leave and T[i, enter] != 0.0:
                T[i] -= T[i, enter] * T[leave]
        basis[leave] = enter
    return None, max_pivots


def _resolve_basis(P, basis):
    # recompute primal y and dual x from the original data for full precision
    m, n = P.shape
    full = np.hstack([P, np.eye(m)])
    Bm = full[:, basis]
    cB = np.array([1.0 if j < n else 0.0 for j in basis])
    yB = np.linalg.solve(Bm, np.ones(m))
    x = np.linalg.solve(Bm.T, cB)
    y = np.zeros(n + m)
    y[basis] = yB
    return np.maximum(y[:n], 0.0), np.maximum(x, 0.0)


def _certify(Mat, p, q):
    return float((p @ Mat).min()), float((Mat @ q).max())


def _mw(Mat, rounds: int):
    """Multiplicative weights self-play; averaged strategies."""
    m, n = Mat.shape
    span = max(float(Mat.max() - Mat.min()), 1e-300)
    eta = math.sqrt(8.0 * math.log(max(m, n, 2)) / rounds) / span
    lp, lq = np.zeros(m), np.zeros(n)
    pa, qa = np.zeros(m), np.zeros(n)
    for _ in range(rounds):
        p = np.exp(lp - lp.max())
        p /= p.sum()
        q = np.exp(lq - lq.max())
        q /= q.sum()
        pa += p
        qa += q
        lp += eta * (Mat @ q)
        lq -= eta * (p @ Mat)
    return pa / rounds, qa / rounds


def solve_matrix_game(Mat, tol: float = 1e-9, max_pivots: int | None = None,
                      mw_rounds: int = 20000, mw_tol: float | None = None) -> GameSolution:
    """Max-min mixed strategies of the (row-maximising) game ``Mat``.

    The matrix is shifted to be positive and the column player's LP is solved
    by the simplex method; the row strategy is read off the dual.  The
    certificate is ``min_j (p^T Mat)_j >= value - tol`` and
    ``max_i (Mat q)_i <= value + tol``.  If the simplex hits its pivot cap,
    multiplicative weights is tried and accepted when its certificate gap is
    within ``mw_tol`` (default ``tol``).
    """
    Mat = np.atleast_2d(np.asarray(Mat, dtype=float))
    if not np.all(np.isfinite(Mat)):
        raise ValueError("matrix entries must be finite")
    m, n = Mat.shape
    shift = 1.0 - float(Mat.min())
    P = Mat + shift
    cap = max_pivots if max_pivots is not None else 50 * (m + n) + 100
    basis, pivots = _simplex_bland(P, cap)
    if basis is not None:
        y, x = _resolve_basis(P, basis)
        q = y / y.sum()
        p = x / x.sum()
        value = 1.0 / y.sum() - shift
        lo, hi = _certify(Mat, p, q)
        if lo >= value - tol and hi <= value + tol:
            return GameSolution(p, q, value, lo, hi, "simplex", pivots)
    p, q = _mw(Mat, mw_rounds)
    lo, hi = _certify(Mat, p, q)
    if hi - lo <= (mw_tol if mw_tol is not None else tol):
        return GameSolution(p, q, 0.5 * (lo + hi), lo, hi, "multiplicative-weights", pivots)
    raise GameSolverError(
        f"no certified solution: simplex stopped after {pivots} pivots "
        f"({'cap reached' if basis is None else 'inaccurate basis'}); "
        f"multiplicative weights gap {hi - lo:.3g} after {mw_rounds} rounds")


# -- winners ----------------------------------------------------------------


@dataclass
class WinnerSolution:
    p: np.ndarray  # (S, A)
    q: np.ndarray  # (S, A)
    values: np.ndarray  # (S,) game value of N_s - B_s
    lower: np.ndarray  # (S,) certified min over pure columns
    tol: float
    methods: list = field(default_factory=list)

    def policy_probability(self, policy) -> float:
        pol = np.asarray(policy, dtype=int)
        return float(np.prod(self.p[np.arange(self.p.shape[0]), pol]))

    def total_mass(self) -> float:
        """``sum_pi p(pi)`` evaluated through the per-state factors."""
        return float(np.prod(self.p.sum(axis=1)))

    def enumerate_product(self) -> tuple[np.ndarray, np.ndarray]:
        S, A = self.p.shape
        if S * math.log2(max(A, 2)) > 20:
            raise ValueError("explicit product enumeration is limited to S log2 A <= 20")
        pols = np.indices((A,) * S).reshape(S, -1).T
        probs = np.prod(self.p[np.arange(S), pols], axis=1)
        return pols, probs

    def to_json(self) -> dict:
        return {
            "schema": WINNER_SCHEMA,
            "p": self.p.tolist(), "q": self.q.tolist(),
            "values": self.values.tolist(), "certified_lower": self.lower.tolist(),
            "tol": self.tol, "methods": list(self.methods),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "WinnerSolution":
        if doc.get("schema") != WINNER_SCHEMA:
            raise ValueError(f"expected schema {WINNER_SCHEMA!r}, got {doc.get('schema')!r}")
        return cls(np.asarray(doc["p"]), np.asarray(doc["q"]), np.asarray(doc["values"]),
                   np.asarray(doc["certified_lower"]), doc["tol"], doc.get("methods", []))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def _clean(p):
    p = np.where(p < 0, 0.0, p)
    return p / p.sum()


def von_neumann_winner(tables: PreferenceTables, tol: float = 1e-9, pessimistic: bool = True) -> WinnerSolution:
    """Per-state max-min strategies of ``N_s - B_s`` (of ``N_s`` if not pessimistic)."""
    S, A = tables.num_states, tables.num_actions
    p, q = np.zeros((S, A)), np.zeros((S, A))
    vals, lows, methods = np.zeros(S), np.zeros(S), []
    for s in range(S):
        Mat = tables.N[s] - (tables.bonus[s] if pessimistic else 0.0)
        g = solve_matrix_game(Mat, tol)
        p[s], q[s] = _clean(g.p), _clean(g.q)
        vals[s], lows[s] = g.value, g.lower
        methods.append(g.method)
    return WinnerSolution(p, q, vals, lows, tol, methods)


def approx_winner_gap(solution: WinnerSolution, N_star: np.ndarray, rho=None) -> tuple[np.ndarray, float]:
    """``min_q p_s^T N*_s q`` per state and the policy-level ``min_q p^T T* q``.

    The total matrix is state-separable for product strategies, so the second
    is ``sum_s rho_s`` times the per-state minima over pure replies.
    """
    N_star = np.asarray(N_star, dtype=float)
    S = N_star.shape[0]
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=float)
    per_state = np.einsum("sa,sab->sb", solution.p, N_star).min(axis=1)
    return per_state, float(rho @ per_state)


def winner_concentrability(N_star: np.ndarray, pair_gen: np.ndarray, rho) -> float:
    """``max_{s, a != a'} p*_s(a) / d_s(a, a')`` with ``d_s = rho_s (g_s + g_s^T)``.

    The maximum over the opponent's strategy in the coverage ratio is attained
    at a point mass, which reduces it to this per-pair form; infinite when a
    pair the winner needs is never compared.
    """
    N_star = np.asarray(N_star, dtype=float)
    S, A, _ = N_star.shape
    best = 0.0
    for s in range(S):
        ps = _clean(solve_matrix_game(N_star[s]).p)
        dg = rho[s] * (pair_gen[s] + pair_gen[s].T)
        for a in range(A):
            for b in range(A):
                if a == b or ps[a] <= 0:
                    continue
                best = max(best, math.inf if dg[a, b] <= 0 else ps[a] / dg[a, b])
    return best


def expost_tau(A: int, M: int, S: int, delta: float, c_star: float, n: int, K: float = 1.0) -> float:
    """``K (A log(2 M S A^2 / delta) sqrt(C*/n))^(1/2)``."""
    return K * math.sqrt(A * math.log(2.0 * M * S * A * A / delta) * math.sqrt(c_star / n))


def is_transitive(Nm: np.ndarray, tol: float = 1e-12) -> bool:
    """``N(x,y) >= 0  =>  N(x,z) >= N(y,z)`` for all ``x, y, z``."""
    Nm = np.asarray(Nm, dtype=float)
    A = Nm.shape[0]
    for x in range(A):
        for y in range(A):
            if Nm[x, y] >= -tol and np.any(Nm[x] < Nm[y] - tol):
                return False
    return True


@dataclass
class ExpostVerdict:
    state: int
    dominated: list
    max_dominated_mass: float
    passed: bool
    transitive: list  # per party
    in_scope: bool
    note: str = ""


def dominated_actions(N_star_party_s: np.ndarray, tol: float = 1e-12) -> list:
    """Actions ``b`` with some ``a`` weakly preferred by all and strictly by one."""
    Ns = np.asarray(N_star_party_s, dtype=float)  # (M, A, A)
    A = Ns.shape[1]
    out = []
    for b in range(A):
        for a in range(A):
            if a != b and np.all(Ns[:, a, b] >= -tol) and np.any(Ns[:, a, b] > tol):
                out.append(b)
                break
    return out


def audit_expost(solution: WinnerSolution, N_star_party: np.ndarray, tau: float) -> list[ExpostVerdict]:
    """Per-state check that dominated actions get probability at most ``tau``.

    States where some party's preferences are intransitive fall outside the
    guarantee; their verdict is reported but annotated rather than asserted.
    """
    Np = np.asarray(N_star_party, dtype=float)
    M, S, A, _ = Np.shape
    out = []
    for s in range(S):
        dom = dominated_actions(Np[:, s])
        mass = float(max((solution.p[s, b] for b in dom), default=0.0))
        trans = [is_transitive(Np[m, s]) for m in range(M)]
        in_scope = all(trans)
        note = "" if in_scope else "intransitive preferences: outside the guarantee"
        if not dom:
            note = note or "no dominated actions (vacuous)"
        out.append(ExpostVerdict(s, dom, mass, mass <= tau + 1e-12, trans, in_scope, note))
    return out


# -- fixtures -----------------------------------------------------------------


def rps_truth() -> np.ndarray:
    """Rock-paper-scissors as a one-party, one-state truth ``(1, 1, 3, 3)``."""
    R = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]])
    return R[None, None]


def cyclic_unanimous_profile(M: int = 3) -> np.ndarray:
    """Every party holds the same deterministic cycle ``a > b > c > a``.

    Each alternative is beaten by another one unanimously, so all three are
    Pareto-dominated; the preferences are intransitive, and the winner
    (uniform) keeps mass 1/3 on every dominated alternative.
    """
    return np.broadcast_to(rps_truth()[0], (M, 1, 3, 3)).copy()


@dataclass
class ProfileD2:
    N_party: np.ndarray  # (M, 1, M, M)
    bound: float  # certified upper bound on max_p min_m min_q p^T N_m q
    p: np.ndarray
    solution: GameSolution


def build_prop_d2_profile(M: int) -> ProfileD2:
    """``M`` parties, ``M`` actions: party ``m`` ranks action ``m`` above all.

    Row ``m`` of party ``m``'s matrix is ``+1`` off the diagonal and column
    ``m`` is ``-1``; other entries are 0.  The worst case over parties and
    replies is the game on the stacked ``M x (M M)`` matrix, whose value is
    ``-(M - 1)/M``; the column strategy certifies the upper bound
    ``max_i (stacked q)_i``, which is what is reported.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    N = np.zeros((M, M, M))
    for m in range(M):
        N[m, m, :] = 1.0
        N[m, :, m] = -1.0
        N[m, m, m] = 0.0
    stacked = np.concatenate([N[m] for m in range(M)], axis=1)  # (M actions, M*M replies)
    g = solve_matrix_game(stacked)
    return ProfileD2(N[:, None], g.upper, _clean(g.p), g)
