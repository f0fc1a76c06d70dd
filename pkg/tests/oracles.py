"""Independent brute-force oracles for the tests.

None of these import the solvers under test: they loop over explicit
cases, sample sets densely, enumerate trajectories or call scipy's LP and
NLP solvers.
"""
import itertools
import math

import numpy as np
from scipy.optimize import linprog, minimize


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gamma_formula(delta, n, M, d, r, K=1.0):
    return K * math.sqrt(r * r / n + (d * r * r * math.log(d) + r * math.log(M / delta)) / (M * n))


def reward_table(features, params):
    """``R[m][s][a]`` by explicit dot products."""
    S, A, _ = features.shape
    return np.array([[[float(np.dot(th, features[s, a])) for a in range(A)] for s in range(S)] for th in params])


def welfare_value(R, rho, policy, kind):
    """Expected welfare of a deterministic policy, state by state."""
    M, S, _ = R.shape
    total = 0.0
    for s in range(S):
        a = policy[s]
        norm = [R[m, s, a] - min(R[m, s]) for m in range(M)]
        if kind == "nash":
            w = 1.0
            for g in norm:
                w *= g
        elif kind == "utilitarian":
            w = sum(R[m, s, a] for m in range(M))
        else:
            w = min(norm)
        total += rho[s] * w
    return total


def best_policies(R, rho, kind, tol=1e-12):
    """Optimal value and every optimal policy by exhaustive enumeration."""
    _, S, A = R.shape
    vals = {pol: welfare_value(R, rho, pol, kind) for pol in itertools.product(range(A), repeat=S)}
    best = max(vals.values())
    return best, sorted(p for p, v in vals.items() if v >= best - tol)


def covariance(diffs):
    d = len(diffs[0])
    out = np.zeros((d, d))
    for x in diffs:
        out += np.outer(x, x)
    return out / len(diffs)


def set_boundary(center, sigma, gamma, B, n=20000):
    """Dense sample of the boundary of ``{||t|| <= B} & {||t - c||_Sigma <= gamma}`` in 2-d."""
    ang = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    circ = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    evals, evecs = np.linalg.eigh(sigma)
    ell = center + (circ / np.sqrt(evals)) @ evecs.T * gamma
    ball = B * circ
    ell = ell[np.linalg.norm(ell, axis=1) <= B]
    q = np.einsum("ni,ij,nj->n", ball - center, sigma, ball - center)
    ball = ball[q <= gamma**2]
    return np.vstack([ell, ball])


def set_grid(center, sigma, gamma, B, step=0.005):
    evals = np.linalg.eigvalsh(sigma)
    half = gamma / math.sqrt(evals[0])
    ax = [np.arange(c - half, c + half + step, step) for c in center]
    g = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, 2)
    q = np.einsum("ni,ij,nj->n", g - center, sigma, g - center)
    return g[(q <= gamma**2) & (np.linalg.norm(g, axis=1) <= B)]


def nash_one_state_oracle(features, policy_action, centers, sigmas, gamma, B, step=0.005):
    """Grid plus boundary minimum of the Nash welfare at a single state.

    The normalised factors are nonnegative and each depends on one party's
    parameter only, so the minimum of their product is the product of the
    per-party minima.  Each factor is convex and its minimum over a bounded
    convex set sits on the boundary, which is sampled densely.
    """
    F = features[0]
    D = F[policy_action] - F  # (A, d)
    value = 1.0
    for c, sig in zip(centers, sigmas):
        pts = np.vstack([set_grid(c, sig, gamma, B, step), set_boundary(c, sig, gamma, B)])
        g = np.max(pts @ D.T, axis=1)
        value *= float(np.min(g))
    return value


def linear_min_over_set(c, center, sigma, gamma, B):
    """``min c^T t`` over ball & ellipsoid with SLSQP from the centre."""
    cons = [{"type": "ineq", "fun": lambda t: B * B - t @ t, "jac": lambda t: -2 * t},
            {"type": "ineq", "fun": lambda t: gamma**2 - (t - center) @ sigma @ (t - center),
             "jac": lambda t: -2 * sigma @ (t - center)}]
    res = minimize(lambda t: c @ t, center, jac=lambda t: c, constraints=cons, method="SLSQP",
                   options={"ftol": 1e-14, "maxiter": 500})
    return float(res.fun)


def game_value_lp(Mat):
    """Value and a max-min strategy of ``max_p min_q p^T Mat q`` by linprog."""
    Mat = np.asarray(Mat, dtype=float)
    A, B = Mat.shape
    # variables (p, v): maximise v s.t. Mat^T p >= v, sum p = 1
    c = np.zeros(A + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-Mat.T, np.ones((B, 1))])
    A_eq = np.hstack([np.ones((1, A)), np.zeros((1, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(B), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * A + [(None, None)], method="highs")
    return -res.fun, res.x[:A]


def occupancy_by_paths(rho, transitions, policy, H):
    """``d^pi`` by summing the probability of every state path."""
    S = len(rho)
    d = np.zeros(S)
    for path in itertools.product(range(S), repeat=H):
        p = rho[path[0]]
        for h in range(1, H):
            p *= transitions[h - 1][path[h - 1]][policy[path[h - 1]]][path[h]]
        for s in path:
            d[s] += p
    return d


def pareto_dominated(G, s, a):
    """Does some action weakly help every party and strictly help one, against ``a``?"""
    M, _, A = G.shape
    for b in range(A):
        if b == a:
            continue
        if all(G[m, s, b] >= G[m, s, a] for m in range(M)) and any(G[m, s, b] > G[m, s, a] for m in range(M)):
            return True
    return False


def bonus(delta, M, S, A, n0):
    return math.sqrt(2.0 * math.log(4 * M * S * A * A / delta) / max(n0, 1))
