"""Geometry of ``{theta : ||theta|| <= B, ||theta - c||_Sigma <= Gamma}``.

Provides exact projections (ball in closed form, ellipsoid by Newton on the
Lagrange multiplier, the intersection by Dykstra's alternating projections)
and an exact linear minimisation oracle over the intersection.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq


class ConfidenceSet:
    """Ball-truncated ellipsoid around ``center``.

    ``sigma`` must be symmetric PSD; when its smallest eigenvalue does not
    exceed ``ridge`` the set uses ``sigma + ridge * I`` instead (flagged by
    :attr:`ridged`).
    """

    def __init__(self, center, sigma, gamma: float, bound: float, ridge: float = 1e-8):
        self.center = np.asarray(center, dtype=float)
        sigma = 0.5 * (np.asarray(sigma, dtype=float) + np.asarray(sigma, dtype=float).T)
        evals, evecs = np.linalg.eigh(sigma)
        self.ridged = bool(evals[0] <= ridge)
        if self.ridged:
            evals = evals + ridge
            sigma = sigma + ridge * np.eye(sigma.shape[0])
        self.sigma = sigma
        self.evals = evals
        self.evecs = evecs
        self.gamma = float(gamma)
        self.bound = float(bound)
        self._xc = evecs.T @ self.center
        self._cnorm2 = float(self.center @ self.center)

    @property
    def dim(self) -> int:
        return self.center.size

    def sigma_norm(self, v) -> float:
        y = self.evecs.T @ v
        return math.sqrt(max(float(np.sum(self.evals * y * y)), 0.0))

    def inv_norm(self, v) -> float:
        """``||v||_{Sigma^{-1}}``."""
        y = self.evecs.T @ v
        return math.sqrt(float(np.sum(y * y / self.evals)))

    def contains(self, theta, tol: float = 1e-9) -> bool:
        return (np.linalg.norm(theta) <= self.bound + tol
                and self.sigma_norm(theta - self.center) <= self.gamma + tol)

    # -- projections ------------------------------------------------------

    def project_ball(self, z):
        nz = np.linalg.norm(z)
        return z if nz <= self.bound else z * (self.bound / nz)

    def project_ellipsoid(self, z, tol: float = 1e-12):
        """Euclidean projection onto ``||theta - c||_Sigma <= Gamma``.

        The projection is ``c + (I + lam Sigma)^{-1} (z - c)`` with ``lam``
        the root of the (convex, decreasing) constraint residual, found by
        Newton's method started at zero.
        """
        y = self.evecs.T @ (z - self.center)
        s = self.evals
        g2 = self.gamma**2
        if np.sum(s * y * y) <= g2:
            return np.array(z, dtype=float)
        if self.gamma == 0:
            return self.center.copy()
        lam = 0.0
        for _ in range(200):
            q = 1.0 + lam * s
            f = np.sum(s * y * y / q**2) - g2
            if f <= tol * g2:
                break
            fp = -2.0 * np.sum(s * s * y * y / q**3)
            lam -= f / fp
        return self.center + self.evecs @ (y / (1.0 + lam * s))

    def project(self, z, tol: float = 1e-13, max_iter: int = 10000):
        """Dykstra's algorithm for the ball-ellipsoid intersection."""
        x = np.array(z, dtype=float)
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        for _ in range(max_iter):
            y = self.project_ball(x + p)
            p = x + p - y
            x_new = self.project_ellipsoid(y + q)
            q = y + q - x_new
            if np.linalg.norm(x_new - x) <= tol * max(1.0, np.linalg.norm(x)):
                x = x_new
                break
            x = x_new
        return x

    def pull_inside(self, z):
        """Point of the segment from the centre to ``z`` (assumed inside the
        ellipsoid) farthest along it that also lies in the ball."""
        z = np.asarray(z, dtype=float)
        if np.linalg.norm(z) <= self.bound:
            return z
        c, v = self.center, z - self.center
        a, b, cc = v @ v, 2.0 * (c @ v), c @ c - self.bound**2
        t = (-b + math.sqrt(max(b * b - 4.0 * a * cc, 0.0))) / (2.0 * a)
        return c + min(max(t, 0.0), 1.0) * v

    # -- linear minimisation --------------------------------------------

    def ellipsoid_lower_bound(self, c) -> float:
        """``min_{ellipsoid} c^T theta = c^T center - Gamma ||c||_{Sigma^{-1}}``.

        A lower bound for the minimum over the (smaller) intersection.
        """
        return float(c @ self.center) - self.gamma * self.inv_norm(c)

    def lmo(self, c) -> np.ndarray:
        """Exact ``argmin c^T theta`` over the intersection.

        If neither single constraint's minimiser satisfies the other, both are
        active.  Aggregating them as ``ellipsoid + nu * ball`` gives, for each
        ``nu >= 0``, an ellipsoid whose linear minimiser is closed-form; the
        dual is concave in ``nu`` and its derivative has the sign of
        ``||theta_nu||^2 - B^2``, so a bracketed root find on ``nu`` recovers the optimum.
        """
        c = np.asarray(c, dtype=float)
        cn = np.linalg.norm(c)
        if cn == 0.0 or self.gamma == 0.0:
            return self.center.copy()
        s = self.evals
        ch = self.evecs.T @ c
        xc = self._xc
        B = self.bound

        step = -self.gamma * (ch / s) / math.sqrt(float(np.sum(ch * ch / s)))
        x_e = xc + step
        if float(x_e @ x_e) <= B * B:
            return self.evecs @ x_e
        x_b = -B * ch / cn
        dd = x_b - xc
        if float(np.sum(s * dd * dd)) <= self.gamma**2:
            return self.evecs @ x_b

        def theta_nu(nu):
            q = s + nu
            m = (s / q) * xc
            rho2 = self.gamma**2 + nu * B * B - nu * float(np.sum(s * xc * xc / q))
            rho = math.sqrt(max(rho2, 0.0))
            return m - rho * (ch / q) / math.sqrt(float(np.sum(ch * ch / q)))

        def h(nu):
            x = theta_nu(nu)
            return float(x @ x) - B * B

        lo, hi = 0.0, max(float(s.max()), 1e-12) * 1e-3
        while h(hi) > 0:
            lo, hi = hi, hi * 10.0
            if hi > 1e300:
                break
        nu = brentq(h, lo, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
        return self.evecs @ theta_nu(nu)

    def linear_min(self, c) -> tuple[float, np.ndarray]:
        theta = self.lmo(c)
        return float(np.asarray(c) @ theta), theta
