"""Closed-form maximum likelihood manifold and its preset starting points.

Fixing the two scaled confounding coefficients pins down every other parameter
at the likelihood maximum. The resulting two-dimensional family of equally good
solutions is where the posterior optimizer starts.
"""

from __future__ import annotations

import logging

import numpy as np

from massive.errors import DegenerateConstraintError, NoInitializationError
from massive.likelihood import ConditionalMoments, conditional_moments
from massive.types import ScaledParams, SufficientStats

log = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-6


def ml_given_confounding(
    stats: SufficientStats, gx: float, gy: float, cm: ConditionalMoments | None = None
) -> ScaledParams:
    """Likelihood-maximizing parameters with the confounding coefficients held fixed."""
    if cm is None:
        cm = conditional_moments(stats)
    gx, gy = float(gx), float(gy)
    var_x = cm.var_x_g / (1.0 + gx * gx)
    var_y = cm.residual_var_y * (1.0 + gx * gx) / (1.0 + gx * gx + gy * gy)
    sx, sy = np.sqrt(var_x), np.sqrt(var_y)
    beta_t = (cm.cov_xy_g / (sx * sy) - gx * gy) / (1.0 + gx * gx)
    sd_g = stats.sd_g
    alpha_t = sd_g * cm.rx / sx
    kappa_t = sd_g * cm.ry / sy - beta_t * alpha_t
    return ScaledParams(alpha_t, kappa_t, beta_t, np.log(sx), np.log(sy), gx, gy)


def confounding_for_effect(cm: ConditionalMoments, beta: float) -> tuple[float, float]:
    """Manifold coordinates with |gx| = |gy|, gx >= 0 whose ML causal effect is ``beta``.

    ``c`` is the conditional correlation between X and Y - beta*X. Zero causal
    effect for the adjusted outcome requires gx*gy = c / (1 - |c|).
    """
    adjusted = cm.cov_xy_g - beta * cm.var_x_g
    c = adjusted / np.sqrt(cm.var_x_g * (cm.residual_var_y + adjusted**2 / cm.var_x_g))
    if not abs(c) < 1.0 - 1e-12:
        raise DegenerateConstraintError(f"confounding constraint degenerate (c = {c})")
    product = c / (1.0 - abs(c))
    g = np.sqrt(abs(product))
    return float(g), float(np.sign(product) * g)


def init_no_confounding(stats: SufficientStats, cm: ConditionalMoments | None = None) -> ScaledParams:
    return ml_given_confounding(stats, 0.0, 0.0, cm)


def init_no_causal_effect(stats: SufficientStats, cm: ConditionalMoments | None = None) -> ScaledParams:
    if cm is None:
        cm = conditional_moments(stats)
    gx, gy = confounding_for_effect(cm, 0.0)
    return ml_given_confounding(stats, gx, gy, cm)


def min_pleiotropy_effect(rx: np.ndarray, ry: np.ndarray) -> float:
    """Least-squares slope of ``ry`` on ``rx`` through the origin."""
    denom = float(np.dot(rx, rx))
    if not denom > 0:
        raise DegenerateConstraintError("all instrument strengths are zero")
    return float(np.dot(rx, ry)) / denom


def init_min_pleiotropy(stats: SufficientStats, cm: ConditionalMoments | None = None) -> ScaledParams:
    if cm is None:
        cm = conditional_moments(stats)
    beta = min_pleiotropy_effect(cm.rx, cm.ry)
    gx, gy = confounding_for_effect(cm, beta)
    return ml_given_confounding(stats, gx, gy, cm)


def init_list(stats: SufficientStats, cm: ConditionalMoments | None = None) -> list[ScaledParams]:
    """The available subset of the three preset starting points, duplicates collapsed."""
    if cm is None:
        cm = conditional_moments(stats)
    points: list[ScaledParams] = []
    for make in (init_no_confounding, init_no_causal_effect, init_min_pleiotropy):
        try:
            p = make(stats, cm)
        except DegenerateConstraintError as exc:
            log.info("skipping %s: %s", make.__name__, exc)
            continue
        if all(np.linalg.norm(p.gamma - q.gamma) >= DUPLICATE_TOL for q in points):
            points.append(p)
    if not points:
        raise NoInitializationError("no valid initialization point on the ML manifold")
    return points
