"""Synthetic data from the linear structural model and baseline estimators."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from massive.errors import MassiveError, PreconditionError
from massive.rng import make_rng, sub_seed
from massive.types import SufficientStats, UnscaledParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """One simulation setting.

    ``k`` counts candidates with a nonzero pleiotropic effect (invalid
    instruments); ``j - k`` are valid.
    """

    n: int
    j: int
    k: int
    beta: float
    sigma: float
    ploidy: int = 2
    seed: int = 0
    directional: bool = False
    gaussian_g: bool = False

    def __post_init__(self):
        if self.n < 1 or self.j < 1:
            raise PreconditionError("n and j must be positive")
        if not 0 <= self.k <= self.j:
            raise PreconditionError(f"k must lie in [0, j], got {self.k}")
        if not self.sigma > 0:
            raise PreconditionError("sigma must be positive")
        if self.ploidy < 1:
            raise PreconditionError("ploidy must be at least 1")

    @property
    def valid(self) -> int:
        return self.j - self.k

    def to_dict(self) -> dict:
        return asdict(self)


def simulate_dataset(c: SimConfig) -> tuple[np.ndarray, UnscaledParams]:
    """Draw an ``n x (j + 2)`` table (G_1..G_j, X, Y) and return it with the true parameters.

    Random draws happen in a fixed order: allele frequencies, instrument
    strengths, pleiotropic magnitudes, pleiotropic signs, genotypes, confounder,
    exposure noise, outcome noise.
    """
    rng = make_rng(c.seed)
    p = rng.uniform(0.1, 0.9, size=c.j)
    alpha = 0.5 + np.abs(rng.normal(0.0, 0.5, size=c.j))
    magnitude = rng.normal(0.0, 0.2, size=c.j)
    signs = rng.choice([-1.0, 1.0], size=c.j)
    if c.directional:
        kappa = np.abs(magnitude)
    else:
        kappa = signs * magnitude
    kappa[c.k :] = 0.0

    if c.gaussian_g:
        g = rng.normal(c.ploidy * p, np.sqrt(c.ploidy * p * (1 - p)), size=(c.n, c.j))
    else:
        g = rng.binomial(c.ploidy, p, size=(c.n, c.j)).astype(float)
    u = rng.normal(size=c.n)
    eps_x = rng.normal(0.0, c.sigma, size=c.n)
    eps_y = rng.normal(0.0, c.sigma, size=c.n)
    x = g @ alpha + c.sigma * u + eps_x
    y = g @ kappa + c.sigma * u + c.beta * x + eps_y
    truth = UnscaledParams(alpha, kappa, c.beta, c.sigma, c.sigma, c.sigma, c.sigma)
    return np.column_stack([g, x, y]), truth


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


def observational_estimate(stats: SufficientStats) -> float:
    """Confounded regression slope Cov(X, Y) / Var(X)."""
    if not stats.var_x > 0:
        raise MassiveError("exposure has zero variance")
    return stats.cov_xy / stats.var_x


def ivw_estimate(r_x, r_y, se_y) -> float:
    """Inverse-variance weighted mean of the per-instrument ratios r_y / r_x."""
    r_x, r_y, se_y = (np.asarray(v, dtype=float) for v in (r_x, r_y, se_y))
    keep = r_x != 0
    if not np.all(keep):
        warnings.warn(f"excluding {np.sum(~keep)} instrument(s) with zero strength", stacklevel=2)
    if not np.any(keep):
        raise MassiveError("no instrument with nonzero strength")
    r_x, r_y, se_y = r_x[keep], r_y[keep], se_y[keep]
    weights = r_x**2 / se_y**2
    return float(np.sum(weights * (r_y / r_x)) / np.sum(weights))


def marginal_associations(stats: SufficientStats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-instrument simple regression slopes of X and Y and the standard error of the Y slope."""
    var_g = np.diag(stats.cov_gg)
    cov_gx = stats.m_gx - stats.mean_g * stats.mean_x
    cov_gy = stats.m_gy - stats.mean_g * stats.mean_y
    r_x = cov_gx / var_g
    r_y = cov_gy / var_g
    se_y = np.sqrt(np.maximum(stats.var_y / var_g - r_y**2, 0.0) / stats.n)
    return r_x, r_y, se_y


def ivw_from_stats(stats: SufficientStats) -> float:
    return ivw_estimate(*marginal_associations(stats))


# --------------------------------------------------------------------------
# RMSE benchmark
# --------------------------------------------------------------------------

# An estimator maps (stats, truth, seed) to a point estimate of the causal effect.
Estimator = Callable[[SufficientStats, UnscaledParams, int], float]


def bootstrap_rmse_ci(errors, resamples: int = 1000, seed: int = 0, level: float = 0.95):
    errors = np.asarray(errors, dtype=float)
    rng = make_rng(seed)
    idx = rng.integers(0, errors.size, size=(resamples, errors.size))
    boot = np.sqrt(np.mean(errors[idx] ** 2, axis=1))
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(boot, [tail, 100.0 - tail])
    return float(lo), float(hi)


def massive_estimator(config=None) -> Estimator:
    """Posterior median from a full MASSIVE run."""
    from massive.search import RunConfig, run_massive

    config = config or RunConfig()

    def estimate(stats, truth, seed):
        run = run_massive(stats, config.replace(seed=seed))
        return run.median

    return estimate


def default_estimators(config=None) -> dict[str, Estimator]:
    return {
        "massive": massive_estimator(config),
        "ivw": lambda stats, truth, seed: ivw_from_stats(stats),
        "observational": lambda stats, truth, seed: observational_estimate(stats),
    }


def _replicate(args):
    ci, ri, config, master_seed, estimators, intercept = args
    seed = sub_seed(master_seed, ci, ri)
    rows, truth = simulate_dataset(SimConfig(**{**config.to_dict(), "seed": seed}))
    from massive.ingest import moments_from_rows

    stats = moments_from_rows(rows, intercept=intercept)
    out = {}
    for name, est in estimators.items():
        try:
            out[name] = float(est(stats, truth, seed)) - truth.beta
        except MassiveError as exc:
            log.warning("config %d replicate %d: %s failed: %s", ci, ri, name, exc)
            out[name] = math.nan
    return out


def rmse_benchmark(
    configs: Sequence[SimConfig],
    reps: int,
    estimators: Mapping[str, Estimator],
    master_seed: int = 0,
    resamples: int = 1000,
    intercept: bool = False,
    map_fn=map,
) -> list[dict]:
    """RMSE of each estimator's point estimate against the true effect, with bootstrap CI.

    Replicate ``r`` of config ``c`` is simulated with a seed derived from
    ``(master_seed, c, r)``, so results do not depend on execution order.
    ``map_fn`` may be a parallel map.
    """
    if reps < 2:
        raise PreconditionError("need at least 2 replicates")
    table = []
    for ci, config in enumerate(configs):
        jobs = [(ci, ri, config, master_seed, estimators, intercept) for ri in range(reps)]
        results = list(map_fn(_replicate, jobs))
        for ei, name in enumerate(estimators):
            errors = np.array([r[name] for r in results])
            ok = errors[np.isfinite(errors)]
            failures = int(errors.size - ok.size)
            if ok.size:
                rmse = float(np.sqrt(np.mean(ok**2)))
                lo, hi = bootstrap_rmse_ci(ok, resamples, seed=sub_seed(master_seed, ci, ei, 1))
            else:
                rmse = lo = hi = math.nan
            table.append(
                {
                    "n": config.n,
                    "j": config.j,
                    "k": config.k,
                    "valid": config.valid,
                    "beta": config.beta,
                    "sigma": config.sigma,
                    "estimator": name,
                    "rmse": rmse,
                    "ci_low": lo,
                    "ci_high": hi,
                    "failures": failures,
                }
            )
    return table
