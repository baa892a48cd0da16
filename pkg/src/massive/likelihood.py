"""Conditional Gaussian likelihood of (X, Y) given the instruments.

Everything is evaluated from :class:`SufficientStats`; no per-row data is touched.
Internally the instruments are standardized by their standard deviations so the
mean structure is expressed directly in the scaled parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from massive.errors import DegenerateInputError, InconsistentMomentsError, MassiveError
from massive.types import ScaledParams, SufficientStats

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ConditionalMoments:
    var_x_g: float
    cov_xy_g: float
    var_y_g: float
    rx: np.ndarray
    ry: np.ndarray

    @property
    def corr_xy_g(self) -> float:
        return self.cov_xy_g / np.sqrt(self.var_x_g * self.var_y_g)

    @property
    def residual_var_y(self) -> float:
        """Var(Y | G, X), the Schur complement of the conditional covariance."""
        return self.var_y_g - self.cov_xy_g**2 / self.var_x_g

    def matrix(self) -> np.ndarray:
        return np.array([[self.var_x_g, self.cov_xy_g], [self.cov_xy_g, self.var_y_g]])


def conditional_moments(stats: SufficientStats) -> ConditionalMoments:
    """Regression coefficients and residual (co)variances of X and Y on G."""
    gg, gz, zz = stats.second_moments()
    try:
        chol = np.linalg.cholesky(gg)
    except np.linalg.LinAlgError:
        raise DegenerateInputError("instrument second-moment matrix is not positive definite") from None
    # Solve via the Cholesky factor; reuse it for the quadratic forms.
    half = np.linalg.solve(chol, gz)
    coef = np.linalg.solve(chol.T, half)
    resid = zz - half.T @ half
    var_x, cov_xy, var_y = resid[0, 0], 0.5 * (resid[0, 1] + resid[1, 0]), resid[1, 1]
    if not var_x > 1e-12 * zz[0, 0]:
        raise DegenerateInputError(f"Var(X|G) = {var_x:.3g} is not positive; X is determined by G")
    if not var_y > 1e-12 * zz[1, 1]:
        raise DegenerateInputError(f"Var(Y|G) = {var_y:.3g} is not positive; Y is determined by G")
    if not var_x * var_y - cov_xy**2 > 1e-12 * var_x * var_y:
        raise InconsistentMomentsError(
            "conditional covariance of (X, Y) given G is not positive definite"
        )
    return ConditionalMoments(float(var_x), float(cov_xy), float(var_y), coef[:, 0], coef[:, 1])


def scaled_sigma(beta_t, gamma_x_t, gamma_y_t):
    """Entries (s00, s01, s11) of the unit-noise covariance; broadcasts over arrays."""
    s00 = 1.0 + gamma_x_t**2
    s01 = beta_t * s00 + gamma_x_t * gamma_y_t
    s11 = 1.0 + beta_t**2 + (gamma_y_t + beta_t * gamma_x_t) ** 2
    return s00, s01, s11


def model_sigma(p: ScaledParams) -> np.ndarray:
    """Conditional covariance of (X, Y) given G on the data scale."""
    s00, s01, s11 = scaled_sigma(p.beta_t, p.gamma_x_t, p.gamma_y_t)
    sx, sy = np.exp(p.log_sd_x), np.exp(p.log_sd_y)
    return np.array([[sx * sx * s00, sx * sy * s01], [sx * sy * s01, sy * sy * s11]])


class LikelihoodEngine:
    """Vectorized log-likelihood and gradient over stacks of flat parameter vectors.

    ``theta`` has shape ``(k, 2J+5)`` in the :class:`ScaledParams` flat layout.
    """

    def __init__(self, stats: SufficientStats):
        gg, gz, zz = stats.second_moments()
        sd = stats.sd_g
        self.j = stats.j
        self.n = float(stats.n)
        self.w = gg / np.outer(sd, sd)
        self.wz = gz / sd[:, None]
        self.zz = zz

    def _unpack(self, theta):
        j = self.j
        a = theta[:, :j]
        kap = theta[:, j : 2 * j]
        b, lx, ly, gx, gy = (theta[:, 2 * j + i] for i in range(5))
        return a, kap, b, lx, ly, gx, gy

    def evaluate(self, theta: np.ndarray, gradient: bool = True):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        a, kap, b, lx, ly, gx, gy = self._unpack(theta)
        b1 = b[:, None] * a + kap
        wb0 = a @ self.w
        wb1 = b1 @ self.w
        ex, ey = np.exp(-lx), np.exp(-ly)
        # Q = Wz L^{-1}; R = L^{-1} Mzz L^{-1}
        b0q0 = (a @ self.wz[:, 0]) * ex
        b0q1 = (a @ self.wz[:, 1]) * ey
        b1q0 = (b1 @ self.wz[:, 0]) * ex
        b1q1 = (b1 @ self.wz[:, 1]) * ey
        r00 = self.zz[0, 0] * ex * ex
        r01 = self.zz[0, 1] * ex * ey
        r11 = self.zz[1, 1] * ey * ey
        b0wb0 = np.einsum("kj,kj->k", a, wb0)
        b0wb1 = np.einsum("kj,kj->k", a, wb1)
        b1wb1 = np.einsum("kj,kj->k", b1, wb1)
        t00 = r00 - 2.0 * b0q0 + b0wb0
        t01 = r01 - b0q1 - b1q0 + b0wb1
        t11 = r11 - 2.0 * b1q1 + b1wb1

        s00, s01, s11 = scaled_sigma(b, gx, gy)
        det = 1.0 + gx * gx + gy * gy
        p00, p01, p11 = s11 / det, -s01 / det, s00 / det
        trace = p00 * t00 + 2.0 * p01 * t01 + p11 * t11
        ll = -0.5 * self.n * (2.0 * LOG_2PI + np.log(det) + 2.0 * (lx + ly) + trace)
        if not gradient:
            return ll

        n = self.n
        c0 = wb0 - self.wz[:, 0][None, :] * ex[:, None]
        c1 = wb1 - self.wz[:, 1][None, :] * ey[:, None]
        gb0 = 2.0 * (c0 * p00[:, None] + c1 * p01[:, None])
        gb1 = 2.0 * (c0 * p01[:, None] + c1 * p11[:, None])
        grad = np.empty_like(theta)
        j = self.j
        grad[:, :j] = -0.5 * n * (gb0 + b[:, None] * gb1)
        grad[:, j : 2 * j] = -0.5 * n * gb1
        d_beta = -0.5 * n * np.einsum("kj,kj->k", a, gb1)

        # M = R - B^T Q
        m00 = r00 - b0q0
        m01 = r01 - b0q1
        m10 = r01 - b1q0
        m11 = r11 - b1q1
        grad[:, 2 * j + 1] = -n * (1.0 - (p00 * m00 + p01 * m10))
        grad[:, 2 * j + 2] = -n * (1.0 - (p01 * m01 + p11 * m11))

        # d ll = -(n/2) tr((P - P T P) dSigma)
        pt00 = p00 * t00 + p01 * t01
        pt01 = p00 * t01 + p01 * t11
        pt10 = p01 * t00 + p11 * t01
        pt11 = p01 * t01 + p11 * t11
        g00 = p00 - (pt00 * p00 + pt01 * p01)
        g01 = p01 - (pt00 * p01 + pt01 * p11)
        g11 = p11 - (pt10 * p01 + pt11 * p11)

        def contract(d00, d01, d11):
            return -0.5 * n * (g00 * d00 + 2.0 * g01 * d01 + g11 * d11)

        u = gy + b * gx
        zero = np.zeros_like(b)
        grad[:, 2 * j] = d_beta + contract(zero, s00, 2.0 * b + 2.0 * u * gx)
        grad[:, 2 * j + 3] = contract(2.0 * gx, 2.0 * b * gx + gy, 2.0 * u * b)
        grad[:, 2 * j + 4] = contract(zero, gx, 2.0 * u)
        return ll, grad


def log_likelihood(stats: SufficientStats, p: ScaledParams) -> float:
    """Conditional Gaussian log-likelihood of the whole sample."""
    if p.j != stats.j:
        raise MassiveError(f"parameter dimension J={p.j} does not match data J={stats.j}")
    value = LikelihoodEngine(stats).evaluate(p.to_vector()[None, :], gradient=False)[0]
    if not np.isfinite(value):
        raise MassiveError("log-likelihood evaluation overflowed")
    return float(value)
