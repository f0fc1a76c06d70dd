"""Shared-representation maximum-likelihood reward estimation.

All parties share an orthonormal ``d x r`` factor ``U`` and each has its own
coefficient ``alpha_m`` in the radius-``B`` ball; the estimate is
``theta_m = U alpha_m``.  The pooled BTL negative log-likelihood

    l(U, alpha) = 1/(M n) sum_{m,i} softplus(-(2 y - 1) <U alpha_m, x_{m,i}>)

is minimised by block alternation: exact ball-constrained logistic solves for
every ``alpha_m``, then one Riemannian gradient step on ``U`` (QR
retraction), each with an Armijo line search.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .instances import CBInstance

FIT_SCHEMA = "reward-fit/v1"
ARMIJO_C = 1e-4


class FitError(RuntimeError):
    pass


@dataclass
class FitOptions:
    tol: float = 1e-9
    max_iters: int = 5000
    grad_tol: float = 1e-6
    ridge: float = 1e-8
    k_const: float = 1.0
    delta: float = 0.1
    init_ridge: float = 1e-6


@dataclass
class RewardFit:
    U_hat: np.ndarray  # (d, r)
    alpha_hat: np.ndarray  # (M, r)
    sigma: np.ndarray  # (M, d, d)
    gamma: float
    param_bound: float
    n: int = 0
    delta: float = 0.1
    k_const: float = 1.0
    loss_trace: list = field(default_factory=list)
    converged: bool = True
    grad_norm: float = 0.0
    theta_hat: np.ndarray = field(init=False)

    def __post_init__(self):
        self.U_hat = np.asarray(self.U_hat, dtype=float)
        self.alpha_hat = np.atleast_2d(np.asarray(self.alpha_hat, dtype=float))
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.theta_hat = self.alpha_hat @ self.U_hat.T

    num_parties = property(lambda self: self.alpha_hat.shape[0])
    feature_dim = property(lambda self: self.U_hat.shape[0])
    rank = property(lambda self: self.U_hat.shape[1])

    def sigma_is_pd(self) -> np.ndarray:
        return np.array([np.linalg.eigvalsh(s)[0] > 0 for s in self.sigma])

    def with_gamma(self, gamma: float) -> "RewardFit":
        out = RewardFit(self.U_hat, self.alpha_hat, self.sigma, gamma, self.param_bound, self.n,
                        self.delta, self.k_const, list(self.loss_trace), self.converged, self.grad_norm)
        return out

    @classmethod
    def from_truth(cls, inst: CBInstance, sigma=None, gamma: float = 0.0) -> "RewardFit":
        """A 'fit' centred on the true parameters (population covariance by default)."""
        from .instances import population_covariance

        if sigma is None:
            sigma = population_covariance(inst)
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim == 2:
            sigma = np.broadcast_to(sigma, (inst.num_parties,) + sigma.shape).copy()
        return cls(inst.shared_factor, inst.party_coeffs, sigma, gamma, inst.param_bound)

    def to_json(self) -> dict:
        return {
            "schema": FIT_SCHEMA,
            "U_hat": self.U_hat.tolist(),
            "alpha_hat": self.alpha_hat.tolist(),
            "theta_hat": self.theta_hat.tolist(),
            "sigma": self.sigma.tolist(),
            "gamma": self.gamma,
            "param_bound": self.param_bound,
            "n": self.n,
            "delta": self.delta,
            "k_const": self.k_const,
            "loss_trace": [list(t) for t in self.loss_trace],
            "converged": self.converged,
            "grad_norm": self.grad_norm,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RewardFit":
        if doc.get("schema") != FIT_SCHEMA:
            raise ValueError(f"expected schema {FIT_SCHEMA!r}, got {doc.get('schema')!r}")
        return cls(
            np.asarray(doc["U_hat"]), np.asarray(doc["alpha_hat"]), np.asarray(doc["sigma"]),
            doc["gamma"], doc["param_bound"], doc.get("n", 0), doc.get("delta", 0.1),
            doc.get("k_const", 1.0), [tuple(t) for t in doc.get("loss_trace", [])],
            doc.get("converged", True), doc.get("grad_norm", 0.0),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "RewardFit":
        return cls.from_json(json.loads(Path(path).read_text()))


def confidence_radius(delta: float, n: int, M: int, d: int, r: int, K: float = 1.0) -> float:
    """``K * sqrt(r^2/n + (d r^2 log d + r log(M/delta)) / (M n))`` (natural logs)."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if min(n, M, d, r) <= 0 or K < 0:
        raise ValueError("n, M, d, r must be positive and K nonnegative")
    return K * math.sqrt(r**2 / n + (d * r**2 * math.log(d) + r * math.log(M / delta)) / (M * n))


def _differences(data, features) -> tuple[np.ndarray, np.ndarray]:
    X = data.feature_differences(np.asarray(features, dtype=float))
    return X, np.asarray(data.label)


def covariance_matrices(features, data) -> np.ndarray:
    """``Sigma_m = X_m^T X_m / n`` for every party, shape ``(M, d, d)``."""
    X, _ = _differences(data, features)
    if X.shape[1] == 0:
        raise ValueError("cannot form a covariance from an empty party dataset")
    return np.einsum("mni,mnj->mij", X, X) / X.shape[1]


def sigma_norm(v: np.ndarray, sigma: np.ndarray) -> float:
    return math.sqrt(max(float(v @ sigma @ v), 0.0))


def in_confidence_set(theta, fit: RewardFit, m: int, rtol: float = 1e-12) -> bool:
    """Membership in ``{||theta|| <= B, ||theta - theta_hat_m||_{Sigma_m} <= Gamma}``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fit.feature_dim,):
        raise ValueError("dimension mismatch")
    if np.linalg.norm(theta) > fit.param_bound * (1 + rtol):
        return False
    return sigma_norm(theta - fit.theta_hat[m], fit.sigma[m]) <= fit.gamma * (1 + rtol) + 1e-15


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def _nll_terms(z, c1, c0):
    # c1 * softplus(-z) + c0 * softplus(z), zero-count rows contribute nothing
    return c1 * np.logaddexp(0.0, -z) + c0 * np.logaddexp(0.0, z)


def _nll_dz(z, c1, c0):
    return c0 * expit(z) - c1 * expit(-z)


def _project_ball(v, B):
    nv = np.linalg.norm(v)
    return v if nv <= B else v * (B / nv)


def _compress(X, y):
    """Merge identical difference rows of each party into label counts.

    Returns ``(Xu (M, K, d), c1 (M, K), c0 (M, K))`` with rows padded by
    zero counts.  The likelihood is unchanged, but its cost no longer grows
    with ``n`` when comparisons come from a finite set of cells.
    """
    M, n, d = X.shape
    rows, ones, zeros = [], [], []
    for m in range(M):
        u, inv = np.unique(X[m], axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        pos = np.bincount(inv, weights=y[m], minlength=len(u))
        tot = np.bincount(inv, minlength=len(u)).astype(float)
        rows.append(u)
        ones.append(pos)
        zeros.append(tot - pos)
    K = max(len(u) for u in rows)
    Xu = np.zeros((M, K, d))
    c1 = np.zeros((M, K))
    c0 = np.zeros((M, K))
    for m in range(M):
        k = len(rows[m])
        Xu[m, :k], c1[m, :k], c0[m, :k] = rows[m], ones[m], zeros[m]
    return Xu, c1, c0


def _solve_ball_logistic(Z, c1, c0, scale, alpha, B, tol, max_iter=100, ridge=0.0):
    """Minimise ``scale * sum nll(Z a) + ridge/2 |a|^2`` over ``|a| <= B``.

    Newton steps while the iterate stays interior, Armijo projected-gradient
    steps once the ball constraint bites.
    """
    def f(a):
        return scale * _nll_terms(Z @ a, c1, c0).sum() + 0.5 * ridge * (a @ a)

    cnt = c1 + c0
    lip = 0.25 * scale * np.linalg.eigvalsh((Z.T * cnt) @ Z)[-1] + ridge + 1e-300
    fa = f(alpha)
    for _ in range(max_iter):
        z = Z @ alpha
        grad = scale * (Z.T @ _nll_dz(z, c1, c0)) + ridge * alpha
        pg = alpha - _project_ball(alpha - grad, B)
        if np.linalg.norm(pg) <= tol:
            break
        w = cnt * expit(z) * expit(-z)
        H = scale * (Z.T * w) @ Z + ridge * np.eye(Z.shape[1])
        step = None
        try:
            nd = -np.linalg.solve(H + 1e-14 * np.trace(H) * np.eye(H.shape[0]), grad)
            if np.linalg.norm(alpha + nd) <= B and grad @ nd < 0:
                step = nd
        except np.linalg.LinAlgError:
            pass
        t = 1.0
        if step is not None:
            while t > 1e-12:
                cand = alpha + t * step
                fc = f(cand)
                if fc <= fa + ARMIJO_C * t * (grad @ step):
                    break
                t *= 0.5
        else:
            t = 1.0 / lip
            while True:
                cand = _project_ball(alpha - t * grad, B)
                fc = f(cand)
                if fc <= fa + ARMIJO_C * (grad @ (cand - alpha)) or t < 1e-12 / lip:
                    break
                t *= 0.5
        if fc > fa:
            break
        done = fa - fc <= 1e-16 * max(1.0, abs(fa))
        alpha, fa = cand, fc
        if done:
            break
    return alpha, fa


def _retract(U):
    Q, R = np.linalg.qr(U)
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


class _Problem:
    def __init__(self, X, y):
        M, n, d = X.shape
        self.X, self.c1, self.c0 = _compress(X, y)  # (M, K, d)
        self.M, self.n, self.d = M, n, d
        self.scale = 1.0 / (M * n)

    def loss(self, U, alpha):
        z = np.einsum("mkd,md->mk", self.X, alpha @ U.T)
        return self.scale * _nll_terms(z, self.c1, self.c0).sum()

    def grads(self, U, alpha):
        z = np.einsum("mkd,md->mk", self.X, alpha @ U.T)
        g = _nll_dz(z, self.c1, self.c0)
        G = self.scale * np.einsum("mkd,mk->md", self.X, g)  # d loss / d theta_m
        return G @ U, G.T @ alpha  # (M, r), (d, r)

    def covariances(self):
        cnt = self.c1 + self.c0
        return np.einsum("mk,mki,mkj->mij", cnt, self.X, self.X) / self.n


def _stationarity(prob, U, alpha, B):
    ga, gU = prob.grads(U, alpha)
    pa = np.array([a - _project_ball(a - g, B) for a, g in zip(alpha, ga)])
    rU = gU - U @ (0.5 * (U.T @ gU + gU.T @ U))
    return math.sqrt(float(np.sum(pa**2) + np.sum(rU**2))), rU


def independent_fits(X, y, B, ridge=1e-6, tol=1e-10) -> np.ndarray:
    """Per-party full-dimensional ball-constrained logistic estimates, ``(M, d)``."""
    X = np.asarray(X, dtype=float)
    M, n, d = X.shape
    Xu, c1, c0 = _compress(X, np.asarray(y, dtype=float))
    out = np.zeros((M, d))
    for m in range(M):
        out[m], _ = _solve_ball_logistic(Xu[m], c1[m], c0[m], 1.0 / n, np.zeros(d), B, tol, ridge=ridge)
    return out


def fit_mle_arrays(X, y, rank: int, bound: float, opts: FitOptions | None = None) -> RewardFit:
    """Shared-representation MLE from raw feature differences ``X (M, n, d)``."""
    opts = opts or FitOptions()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    M, n, d = X.shape
    if rank > d:
        raise ValueError("rank must not exceed the feature dimension")
    if bound <= 0:
        raise ValueError("bound must be positive")
    prob = _Problem(X, y)
    Xc = prob.X

    # spectral warm start from (nearly) unconstrained independent estimates
    theta0 = np.zeros((M, d))
    for m in range(M):
        theta0[m], _ = _solve_ball_logistic(Xc[m], prob.c1[m], prob.c0[m], 1.0 / n, np.zeros(d),
                                            np.inf, 1e-10, ridge=opts.init_ridge)
    u, _, _ = np.linalg.svd(theta0.T, full_matrices=True)
    U = u[:, :rank].copy()
    alpha = np.array([_project_ball(U.T @ t, bound) for t in theta0])

    loss = prob.loss(U, alpha)
    if not np.isfinite(loss):
        raise FitError("non-finite negative log-likelihood at initialisation")
    trace = [(0, loss)]
    step_U = None
    converged = False
    gnorm = math.inf
    sq_norm = float(np.einsum("mk,mkd,mkd->", prob.c1 + prob.c0, Xc, Xc))
    for it in range(1, opts.max_iters + 1):
        prev = loss
        # (a) exact alpha blocks
        Z = np.einsum("mkd,dr->mkr", Xc, U)
        for m in range(M):
            alpha[m], _ = _solve_ball_logistic(Z[m], prob.c1[m], prob.c0[m], prob.scale, alpha[m], bound,
                                               tol=0.1 * opts.grad_tol)
        loss = prob.loss(U, alpha)
        # (b) one Riemannian step on U
        _, gU = prob.grads(U, alpha)
        rgrad = gU - U @ (0.5 * (U.T @ gU + gU.T @ U))
        g2 = float(np.sum(rgrad**2))
        if g2 > 0:
            if step_U is None:
                step_U = 1.0 / (prob.scale * sq_norm / 4.0 * max(np.max(np.sum(alpha**2, 1)), 1e-12) + 1e-300)
            t = 4.0 * step_U
            while t > 1e-14 * step_U:
                Uc = _retract(U - t * rgrad)
                lc = prob.loss(Uc, alpha)
                if lc <= loss - ARMIJO_C * t * g2:
                    U, loss, step_U = Uc, lc, t
                    break
                t *= 0.5
        if not np.isfinite(loss):
            raise FitError("non-finite negative log-likelihood")
        trace.append((it, loss))
        gnorm, _ = _stationarity(prob, U, alpha, bound)
        rel = (prev - loss) / max(abs(prev), 1e-300)
        if rel < opts.tol and gnorm <= opts.grad_tol:
            converged = True
            break
        if rel <= 0 and gnorm > opts.grad_tol and g2 == 0:
            break

    sigma = prob.covariances()
    gamma = confidence_radius(opts.delta, n, M, d, rank, opts.k_const)
    return RewardFit(U, alpha, sigma, gamma, bound, n, opts.delta, opts.k_const, trace, converged, gnorm)


def fit_mle(data, features, rank: int, bound: float, opts: FitOptions | None = None) -> RewardFit:
    """Fit the shared-representation BTL model to a comparison or trajectory dataset."""
    X, y = _differences(data, features)
    return fit_mle_arrays(X, y, rank, bound, opts)


def estimation_errors(fit: RewardFit, true_params: np.ndarray) -> np.ndarray:
    """``||theta_hat_m - theta*_m||_{Sigma_m}`` for every party."""
    diff = fit.theta_hat - np.asarray(true_params)
    return np.sqrt(np.maximum(np.einsum("mi,mij,mj->m", diff, fit.sigma, diff), 0.0))
