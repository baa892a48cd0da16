"""Spike-and-slab priors, local posterior optima and Laplace evidence per model."""

from __future__ import annotations

import logging
import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from massive.errors import (
    ApproximationError,
    HyperparameterError,
    MassiveError,
    OptimizationError,
)
from massive.likelihood import LOG_2PI, ConditionalMoments, LikelihoodEngine, conditional_moments, scaled_sigma
from massive.manifold import init_list, ml_given_confounding
from massive.types import Hyperparams, ModelIndicator, ScaledParams, SufficientStats

log = logging.getLogger(__name__)

GRAD_TOL = 1e-6
MAX_ITER = 500
MAX_MODES = 5
MODE_DEDUP_TOL = 1e-4
ORIGIN_TOL = 1e-4
FD_STEP = 1e-5
EIG_FLOOR = 1e-8

WEAK_FACTORS = ("literal_101", "derived")


# --------------------------------------------------------------------------
# hyperparameters
# --------------------------------------------------------------------------


def _strength_ratios(stats: SufficientStats, cm: ConditionalMoments) -> np.ndarray:
    return stats.sd_g**2 * cm.rx**2 / cm.var_x_g


def spike_equation(c: float, n: int, a: float) -> float:
    """Residual of (n + 1 - C) * a + log C = 0.

    The difference n + 1 - C is formed exactly, so the result reflects the
    quality of ``c`` rather than cancellation in the evaluation. No double
    can do better than about ``a * ulp(C) / 2``.
    """
    term = float((Fraction(int(n) + 1) - Fraction(c)) * Fraction(a))
    return term + math.log(c)


def solve_spike_ratio(n: int, a: float) -> float:
    """Unique root C > 1 of the spike equation.

    Solved for the offset x = C - (n + 1), which keeps the residual accurate
    when C is large.
    """
    if not (a > 0 and math.isfinite(a)):
        raise HyperparameterError(f"spike equation coefficient must be positive, got {a}")

    def g(x):
        return math.log(n + 1 + x) - a * x

    lo, hi = 0.0, max(1.0, math.log(n + 2) / a)
    for _ in range(200):
        if g(hi) < 0:
            break
        hi *= 2.0
    g_lo, g_hi = g(lo), g(hi)
    if not (g_lo > 0 > g_hi):
        raise HyperparameterError(
            f"no root of the spike equation in bracket: residual {g_lo:.3g} at C={n + 1 + lo:.6g}, "
            f"{g_hi:.3g} at C={n + 1 + hi:.6g}"
        )
    x = optimize.brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return n + 1 + x


def empirical_hyperparams(
    stats: SufficientStats,
    n: int | None = None,
    var_weak: float = 10.0,
    weak_factor: str = "literal_101",
) -> Hyperparams:
    """Slab and spike scales calibrated on the ML instrument strengths.

    ``weak_factor`` picks the multiplier from averaging (1 + gamma_x^2) over the
    confounding prior: ``"literal_101"`` uses 101, ``"derived"`` uses
    ``1 + var_weak``.
    """
    if weak_factor not in WEAK_FACTORS:
        raise MassiveError(f"weak_factor must be one of {WEAK_FACTORS}")
    factor = 101.0 if weak_factor == "literal_101" else 1.0 + var_weak
    n = stats.n if n is None else int(n)
    cm = conditional_moments(stats)
    d2 = _strength_ratios(stats, cm)
    if not np.any(d2 > 0):
        raise HyperparameterError("all ML instrument strengths are zero")
    slab = math.sqrt(factor * float(np.mean(d2)))
    a = (factor * float(np.min(d2)) / slab) ** 2
    if a == 0.0:
        raise HyperparameterError("smallest instrument strength is zero; spike scale undefined")
    c = solve_spike_ratio(n, a)
    return Hyperparams(sd_slab=slab, sd_spike=slab / math.sqrt(c), var_weak=var_weak)


# --------------------------------------------------------------------------
# prior and posterior
# --------------------------------------------------------------------------


def prior_precision(j: int, model: ModelIndicator, h: Hyperparams) -> np.ndarray:
    """Diagonal prior precision in the flat layout; zero on the flat log-scale priors."""
    if model.j != j:
        raise MassiveError(f"model has {model.j} indicators, data has J={j}")
    lam = np.empty(2 * j + 5)
    lam[:j] = 1.0 / h.sd_slab**2
    lam[j : 2 * j] = 1.0 / h.kappa_sd(model) ** 2
    lam[2 * j :] = [1.0 / h.var_weak, 0.0, 0.0, 1.0 / h.var_weak, 1.0 / h.var_weak]
    return lam


def _prior_constant(lam: np.ndarray) -> float:
    proper = lam[lam > 0]
    return float(-0.5 * np.sum(LOG_2PI - np.log(proper)))


def log_prior(p: ScaledParams, m: ModelIndicator, h: Hyperparams) -> float:
    lam = prior_precision(p.j, m, h)
    theta = p.to_vector()
    return _prior_constant(lam) - 0.5 * float(np.sum(lam * theta**2))


class ModelObjective:
    """Log-posterior of one model, batched over rows of flat parameter vectors."""

    def __init__(self, engine: LikelihoodEngine, model: ModelIndicator, h: Hyperparams):
        self.engine = engine
        self.model = model
        self.hyper = h
        self.j = engine.j
        self.dim = 2 * engine.j + 5
        self.lam = prior_precision(engine.j, model, h)
        self.const = _prior_constant(self.lam)

    def value(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        ll = self.engine.evaluate(theta, gradient=False)
        return ll + self.const - 0.5 * (theta**2) @ self.lam

    def value_and_grad(self, theta):
        theta = np.atleast_2d(theta)
        ll, g = self.engine.evaluate(theta)
        return ll + self.const - 0.5 * (theta**2) @ self.lam, g - theta * self.lam

    # -- profiling the instrument and pleiotropy coefficients ---------------

    def inner_solution(self, phi) -> np.ndarray:
        """Full parameter vectors maximizing over (alpha_t, kappa_t) for fixed
        ``phi = (beta_t, log_sd_x, log_sd_y, gamma_x_t, gamma_y_t)`` (rows of a stack).

        The log-posterior is quadratic in those coefficients, so this is one
        linear solve per row.
        """
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        b, lx, ly, gx, gy = phi.T
        j, n, eng = self.j, self.engine.n, self.engine
        s00, s01, s11 = scaled_sigma(b, gx, gy)
        det = 1.0 + gx * gx + gy * gy
        p = np.stack([np.stack([s11, -s01], -1), np.stack([-s01, s00], -1)], -2) / det[:, None, None]
        t = np.zeros_like(p)
        t[:, 0, 0] = t[:, 1, 1] = 1.0
        t[:, 0, 1] = b
        pt = p @ np.swapaxes(t, 1, 2)
        p_hat = t @ pt
        q = eng.wz[None, :, :] * np.exp(-np.stack([lx, ly], -1))[:, None, :]
        rhs = n * (q @ pt)
        k = phi.shape[0]
        a_mat = n * (p_hat[:, :, None, :, None] * eng.w[None, None, :, None, :]).reshape(k, 2 * j, 2 * j)
        a_mat[:, np.arange(2 * j), np.arange(2 * j)] += self.lam[: 2 * j]
        v = np.linalg.solve(a_mat, np.swapaxes(rhs, 1, 2).reshape(k, 2 * j, 1))[:, :, 0]
        return np.concatenate([v, phi], axis=1)

    def profile(self, phi):
        """Profiled log-posterior over stacked ``phi`` rows: (values, full gradients, full vectors)."""
        theta = self.inner_solution(phi)
        val, grad = self.value_and_grad(theta)
        return val, grad, theta


def log_posterior(stats: SufficientStats, p: ScaledParams, m: ModelIndicator, h: Hyperparams) -> float:
    """Unnormalized log-posterior: log-likelihood plus log-prior."""
    obj = ModelObjective(LikelihoodEngine(stats), m, h)
    return float(obj.value(p.to_vector())[0])


def grad_log_posterior(
    stats: SufficientStats, p: ScaledParams, m: ModelIndicator, h: Hyperparams
) -> np.ndarray:
    obj = ModelObjective(LikelihoodEngine(stats), m, h)
    return obj.value_and_grad(p.to_vector())[1][0]


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------


class ManifoldChart:
    """Outer coordinates measured from the ML manifold.

    ``psi = (d_beta, d_log_sd_x, d_log_sd_y, gamma_x_t, gamma_y_t)`` maps to
    ``phi`` by adding the manifold point at (gamma_x_t, gamma_y_t) to the
    offsets. The likelihood is flat along the manifold and steep across it, so
    in these coordinates the two scales separate.
    """

    def __init__(self, cm: ConditionalMoments):
        self.log_var_x = 0.5 * math.log(cm.var_x_g)
        self.log_resid = 0.5 * math.log(cm.residual_var_y)
        self.rho = cm.cov_xy_g / math.sqrt(cm.var_x_g * cm.residual_var_y)

    def base(self, gx, gy):
        d = 1.0 + gx * gx + gy * gy
        ax = 1.0 + gx * gx
        lx = self.log_var_x - 0.5 * np.log(ax)
        ly = self.log_resid + 0.5 * np.log(ax) - 0.5 * np.log(d)
        b = (self.rho * np.sqrt(d) - gx * gy) / ax
        return b, lx, ly

    def to_phi(self, psi) -> np.ndarray:
        psi = np.atleast_2d(psi)
        b, lx, ly = self.base(psi[:, 3], psi[:, 4])
        phi = psi.copy()
        phi[:, 0] += b
        phi[:, 1] += lx
        phi[:, 2] += ly
        return phi

    def to_psi(self, phi) -> np.ndarray:
        phi = np.atleast_2d(phi)
        b, lx, ly = self.base(phi[:, 3], phi[:, 4])
        psi = phi.copy()
        psi[:, 0] -= b
        psi[:, 1] -= lx
        psi[:, 2] -= ly
        return psi

    def pullback(self, psi, grad_phi) -> np.ndarray:
        """Gradient with respect to ``psi`` from the gradient with respect to ``phi``."""
        gx, gy = psi[:, 3], psi[:, 4]
        d = 1.0 + gx * gx + gy * gy
        ax = 1.0 + gx * gx
        sd = np.sqrt(d)
        b = (self.rho * sd - gx * gy) / ax
        jac = np.zeros((psi.shape[0], 3, 2))
        jac[:, 0, 0] = (self.rho * gx / sd - gy) / ax - 2.0 * gx * b / ax
        jac[:, 0, 1] = (self.rho * gy / sd - gx) / ax
        jac[:, 1, 0] = -gx / ax
        jac[:, 2, 0] = gx / ax - gx / d
        jac[:, 2, 1] = -gy / d
        out = grad_phi.copy()
        out[:, 3:] += np.einsum("kij,ki->kj", jac, grad_phi[:, :3])
        return out


def _maximize_profile(obj: ModelObjective, chart: ManifoldChart, phi0, fix_gamma: bool = False):
    """Maximize the profiled log-posterior starting from ``phi0``.

    Newton steps in manifold coordinates, with a finite-difference Hessian,
    do the work; BFGS is a fallback when they stall. The Newton phase follows
    directions of negative curvature out of saddle points (notably the
    gamma = 0 plane, where the gamma gradient vanishes by symmetry) and accepts
    steps on gradient reduction once value differences fall below rounding
    noise. With ``fix_gamma`` the confounding coefficients stay put.
    """
    psi0 = chart.to_psi(np.asarray(phi0, dtype=float))[0]
    free = slice(0, 3) if fix_gamma else slice(0, 5)
    j2 = 2 * obj.j

    def full(xs):
        xs = np.atleast_2d(xs)
        psi = np.repeat(psi0[None, :], xs.shape[0], axis=0)
        psi[:, free] = xs
        return psi

    def neg(xs):
        psi = full(xs)
        val, grad, _ = obj.profile(chart.to_phi(psi))
        return -val, -chart.pullback(psi, grad[:, j2:])[:, free]

    def neg1(x):
        v, g = neg(x)
        if not np.isfinite(v[0]):
            return np.inf, np.zeros_like(x)
        return v[0], g[0]

    def newton(x, iters):
        k = x.size
        f0, g0 = neg1(x)
        for _ in range(iters):
            steps = FD_STEP * np.maximum(1.0, np.abs(x))
            _, gp = neg(np.concatenate([x + np.diag(steps), x - np.diag(steps)]))
            hess = (gp[:k] - gp[k:]) / (2.0 * steps[:, None])
            hess = 0.5 * (hess + hess.T)
            if not np.all(np.isfinite(hess)):
                break
            w, u = np.linalg.eigh(hess)
            scale = max(abs(w[-1]), 1.0)
            saddle = w[0] < -EIG_FLOOR * scale
            if np.max(np.abs(g0)) < 0.1 * GRAD_TOL and not saddle:
                break
            coef = u.T @ g0
            step = -u @ (coef / np.maximum(np.abs(w), EIG_FLOOR * scale))
            if saddle:
                # push along the most negative curvature direction as well
                direction = u[:, 0] * (-np.sign(coef[0]) if coef[0] != 0 else 1.0)
                step = step + direction * max(1e-3, min(1.0, np.sqrt(abs(w[0]) / scale)))
            norm = np.linalg.norm(step)
            if norm > 1.0:
                step /= norm
            noise = 1e-13 * (1.0 + abs(f0)) * k
            t = 1.0
            while t > 1e-10:
                f1, g1 = neg1(x + t * step)
                if f1 < f0 - noise or (
                    f1 <= f0 + noise and np.max(np.abs(g1)) < np.max(np.abs(g0)) and not saddle
                ):
                    break
                t *= 0.5
            else:
                break
            x, f0, g0 = x + t * step, f1, g1
        return x, g0

    x, g = newton(psi0[free].copy(), 40)
    if not np.max(np.abs(g)) < 0.1 * GRAD_TOL:
        # Newton stalled; let BFGS get closer and polish again
        with np.errstate(over="ignore", invalid="ignore"):
            res = optimize.minimize(
                neg1, x, jac=True, method="BFGS", options={"gtol": 1e-2 * GRAD_TOL, "maxiter": MAX_ITER}
            )
        if np.all(np.isfinite(res.x)):
            x, _ = newton(res.x, 60)
    val, grad, theta = obj.profile(chart.to_phi(full(x)))
    return theta[0], float(val[0]), grad[0]


def _stationary(grad) -> bool:
    return bool(np.all(np.isfinite(grad)) and np.max(np.abs(grad)) < GRAD_TOL)


@dataclass(frozen=True)
class Mode:
    theta: np.ndarray
    log_post: float

    @property
    def gamma(self) -> np.ndarray:
        return self.theta[-2:]


class PosteriorProblem:
    """Stats-level precomputation shared by every model of one analysis."""

    def __init__(self, stats: SufficientStats, hyper: Hyperparams):
        self.stats = stats
        self.hyper = hyper
        self.engine = LikelihoodEngine(stats)
        self.cm = conditional_moments(stats)
        self.inits = init_list(stats, self.cm)
        self.chart = ManifoldChart(self.cm)

    def objective(self, model: ModelIndicator) -> ModelObjective:
        return ModelObjective(self.engine, model, self.hyper)

    def local_optima(self, model: ModelIndicator) -> list[Mode]:
        obj = self.objective(model)
        found: list[Mode] = []
        failures = []
        for start in self.inits:
            phi0 = start.to_vector()[-5:]
            try:
                theta, val, grad = _maximize_profile(obj, self.chart, phi0)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                failures.append(str(exc))
                continue
            if not (np.isfinite(val) and _stationary(grad)):
                failures.append(f"gradient norm {np.max(np.abs(grad)):.3g} at start {phi0[-2:]}")
                continue
            found.append(Mode(theta, val))
        if not found:
            raise OptimizationError(
                f"posterior optimization failed from every start for model {model}: {failures}"
            )
        for msg in failures:
            log.warning("model %s: dropped start (%s)", model, msg)
        modes: list[Mode] = []
        for mode in found:
            candidates = [mode]
            if np.linalg.norm(mode.gamma) >= ORIGIN_TOL:
                mirrored = mode.theta.copy()
                mirrored[-2:] *= -1.0
                candidates.append(Mode(mirrored, mode.log_post))
            for cand in candidates:
                if all(np.linalg.norm(cand.gamma - m.gamma) >= MODE_DEDUP_TOL for m in modes):
                    modes.append(cand)
        modes.sort(key=lambda m: (-m.log_post, tuple(m.gamma)))
        if len(modes) > MAX_MODES:
            log.warning("model %s: %d distinct modes found, keeping the best %d", model, len(modes), MAX_MODES)
            modes = modes[:MAX_MODES]
        return modes

    def laplace(self, model: ModelIndicator, mode: Mode | np.ndarray) -> "LaplaceComponent":
        obj = self.objective(model)
        theta = mode.theta if isinstance(mode, Mode) else np.asarray(mode, dtype=float)
        return _laplace(obj, theta)

    def evidence(self, model: ModelIndicator) -> "ModelEvidence":
        obj = self.objective(model)
        comps = [_laplace(obj, m.theta) for m in self.local_optima(model)]
        return ModelEvidence(model, float(logsumexp([c.log_mass for c in comps])), comps)

    def profile_grid(self, model: ModelIndicator, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        if grid.size == 0 or grid.shape[-1] != 2:
            raise MassiveError("grid must be a non-empty array of (gamma_x, gamma_y) pairs")
        obj = self.objective(model)
        flat = grid.reshape(-1, 2)
        out = np.full(flat.shape[0], np.nan)
        for i, (gx, gy) in enumerate(flat):
            start = ml_given_confounding(self.stats, gx, gy, self.cm).to_vector()[-5:]
            try:
                _, val, grad = _maximize_profile(obj, self.chart, start, fix_gamma=True)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                log.warning("profile cell (%g, %g) failed: %s", gx, gy, exc)
                continue
            if np.isfinite(val) and np.max(np.abs(grad[:-2])) < GRAD_TOL:
                out[i] = val
            else:
                log.warning("profile cell (%g, %g) did not converge", gx, gy)
        return out.reshape(grid.shape[:-1])


# --------------------------------------------------------------------------
# Laplace approximation
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LaplaceComponent:
    mode: ScaledParams
    log_post_at_mode: float
    log_det_hessian: float
    log_mass: float
    hessian: np.ndarray = field(repr=False)
    floored: int = 0

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.hessian)


@dataclass(frozen=True, eq=False)
class ModelEvidence:
    model: ModelIndicator
    log_evidence: float
    components: list[LaplaceComponent]


def fd_hessian(grad_fn, theta: np.ndarray) -> np.ndarray:
    """Central differences of a batched gradient; returns the symmetrized Hessian."""
    d = theta.size
    steps = FD_STEP * np.maximum(1.0, np.abs(theta))
    points = np.concatenate([theta + np.diag(steps), theta - np.diag(steps)])
    g = grad_fn(points)
    hess = (g[:d] - g[d:]) / (2.0 * steps[:, None])
    return 0.5 * (hess + hess.T)


def laplace_from_hessian(theta: np.ndarray, log_post: float, neg_hessian: np.ndarray) -> LaplaceComponent:
    w, u = np.linalg.eigh(neg_hessian)
    top = w[-1]
    if not top > 0:
        raise ApproximationError("negative Hessian has no positive eigenvalue at the mode")
    floor = EIG_FLOOR * top
    floored = int(np.sum(w < floor))
    w = np.maximum(w, floor)
    h = (u * w) @ u.T
    d = theta.size
    log_det = float(np.sum(np.log(w)))
    log_mass = log_post + 0.5 * d * LOG_2PI - 0.5 * log_det
    return LaplaceComponent(ScaledParams.from_vector(theta), float(log_post), log_det, float(log_mass), h, floored)


def _laplace(obj: ModelObjective, theta: np.ndarray) -> LaplaceComponent:
    val, grad = obj.value_and_grad(theta)
    if np.max(np.abs(grad)) > 1e-4:
        raise ApproximationError(
            f"Laplace approximation requested at a non-stationary point (|grad| = {np.max(np.abs(grad)):.3g})"
        )
    neg_h = -fd_hessian(lambda pts: obj.value_and_grad(pts)[1], theta)
    return laplace_from_hessian(theta, float(val[0]), neg_h)


# --------------------------------------------------------------------------
# functional interface
# --------------------------------------------------------------------------


def find_local_optima(stats: SufficientStats, m: ModelIndicator, h: Hyperparams) -> list[ScaledParams]:
    """Local posterior maxima from the preset starts, mirrored and deduplicated."""
    return [ScaledParams.from_vector(mode.theta) for mode in PosteriorProblem(stats, h).local_optima(m)]


def laplace_component(
    stats: SufficientStats, mode: ScaledParams, m: ModelIndicator, h: Hyperparams
) -> LaplaceComponent:
    obj = ModelObjective(LikelihoodEngine(stats), m, h)
    return _laplace(obj, mode.to_vector())


def model_evidence(stats: SufficientStats, m: ModelIndicator, h: Hyperparams) -> ModelEvidence:
    return PosteriorProblem(stats, h).evidence(m)


def profile_posterior_grid(stats: SufficientStats, m: ModelIndicator, h: Hyperparams, grid) -> np.ndarray:
    """Best log-posterior at each fixed (gamma_x_t, gamma_y_t); NaN where the optimizer failed."""
    return PosteriorProblem(stats, h).profile_grid(m, grid)
