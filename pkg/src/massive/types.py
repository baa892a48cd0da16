"""Shared value types and the scaled/unscaled parameter transforms."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from massive.errors import DegenerateInputError, PreconditionError


def _frozen_array(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise PreconditionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PreconditionError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """First and second raw moments of (G, X, Y) plus the sample size.

    ``intercept`` selects how the moments enter the likelihood. When False the
    structural model has no location terms and raw moments are used as is.
    When True, free intercepts for X and Y are profiled out, which amounts to
    working with mean-centered moments.
    """

    n: int
    mean_g: np.ndarray
    mean_x: float
    mean_y: float
    m_gg: np.ndarray
    m_gx: np.ndarray
    m_gy: np.ndarray
    m_xx: float
    m_yy: float
    m_xy: float
    intercept: bool = False

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise PreconditionError(f"sample size must be a positive integer, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        for name in ("mean_g", "m_gx", "m_gy"):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), 1, name))
        object.__setattr__(self, "m_gg", _frozen_array(self.m_gg, 2, "m_gg"))
        for name in ("mean_x", "mean_y", "m_xx", "m_yy", "m_xy"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise PreconditionError(f"{name} is not finite")
            object.__setattr__(self, name, value)
        j = self.mean_g.shape[0]
        if j < 1:
            raise PreconditionError("at least one candidate instrument is required")
        if self.m_gg.shape != (j, j) or self.m_gx.shape != (j,) or self.m_gy.shape != (j,):
            raise PreconditionError("moment blocks have inconsistent dimensions")
        scale = max(1.0, float(np.max(np.abs(self.m_gg))))
        if not np.allclose(self.m_gg, self.m_gg.T, rtol=0.0, atol=1e-12 * scale):
            raise PreconditionError("m_gg must be symmetric")
        try:
            np.linalg.cholesky(self.cov_gg)
        except np.linalg.LinAlgError:
            raise DegenerateInputError(
                "instrument covariance matrix Var(G) is not positive definite"
            ) from None

    @property
    def j(self) -> int:
        return self.mean_g.shape[0]

    @property
    def cov_gg(self) -> np.ndarray:
        return self.m_gg - np.outer(self.mean_g, self.mean_g)

    @property
    def sd_g(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_gg))

    @property
    def var_x(self) -> float:
        return self.m_xx - self.mean_x**2

    @property
    def var_y(self) -> float:
        return self.m_yy - self.mean_y**2

    @property
    def cov_xy(self) -> float:
        return self.m_xy - self.mean_x * self.mean_y

    def second_moments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return the (G,G), (G,[X,Y]) and ([X,Y],[X,Y]) blocks the likelihood uses.

        Raw moments without an intercept, centered moments with one.
        """
        gz = np.column_stack([self.m_gx, self.m_gy])
        zz = np.array([[self.m_xx, self.m_xy], [self.m_xy, self.m_yy]])
        if not self.intercept:
            return np.array(self.m_gg), gz, zz
        mz = np.array([self.mean_x, self.mean_y])
        return self.cov_gg, gz - np.outer(self.mean_g, mz), zz - np.outer(mz, mz)

    def with_intercept(self, intercept: bool) -> "SufficientStats":
        return dataclasses.replace(self, intercept=intercept)


@dataclass(frozen=True, eq=False)
class UnscaledParams:
    alpha: np.ndarray
    kappa: np.ndarray
    beta: float
    gamma_x: float
    gamma_y: float
    sd_x: float
    sd_y: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, 1, "alpha"))
        object.__setattr__(self, "kappa", _frozen_array(self.kappa, 1, "kappa"))
        if self.alpha.shape != self.kappa.shape or self.alpha.size < 1:
            raise PreconditionError("alpha and kappa must share a common length J >= 1")
        for name in ("beta", "gamma_x", "gamma_y", "sd_x", "sd_y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.sd_x > 0 and self.sd_y > 0):
            raise PreconditionError("noise scales must be positive")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "kappa": self.kappa.tolist(),
            "beta": self.beta,
            "gamma_x": self.gamma_x,
            "gamma_y": self.gamma_y,
            "sd_x": self.sd_x,
            "sd_y": self.sd_y,
        }


@dataclass(frozen=True, eq=False)
class ScaledParams:
    """Scale-free parameter vector of dimension 2J + 5.

    The flat layout used by optimizers is
    ``(alpha_t, kappa_t, beta_t, log_sd_x, log_sd_y, gamma_x_t, gamma_y_t)``.
    """

    alpha_t: np.ndarray
    kappa_t: np.ndarray
    beta_t: float
    log_sd_x: float
    log_sd_y: float
    gamma_x_t: float
    gamma_y_t: float

    def __post_init__(self):
        object.__setattr__(self, "alpha_t", _frozen_array(self.alpha_t, 1, "alpha_t"))
        object.__setattr__(self, "kappa_t", _frozen_array(self.kappa_t, 1, "kappa_t"))
        if self.alpha_t.shape != self.kappa_t.shape or self.alpha_t.size < 1:
            raise PreconditionError("alpha_t and kappa_t must share a common length J >= 1")
        for name in ("beta_t", "log_sd_x", "log_sd_y", "gamma_x_t", "gamma_y_t"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise PreconditionError(f"{name} is not finite")
            object.__setattr__(self, name, value)

    @property
    def j(self) -> int:
        return self.alpha_t.shape[0]

    @property
    def dim(self) -> int:
        return 2 * self.j + 5

    @property
    def gamma(self) -> np.ndarray:
        return np.array([self.gamma_x_t, self.gamma_y_t])

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.alpha_t,
                self.kappa_t,
                [self.beta_t, self.log_sd_x, self.log_sd_y, self.gamma_x_t, self.gamma_y_t],
            ]
        )

    @classmethod
    def from_vector(cls, theta) -> "ScaledParams":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or (theta.size - 5) % 2 or theta.size < 7:
            raise PreconditionError(f"parameter vector of length {theta.size} is not 2J+5")
        j = (theta.size - 5) // 2
        return cls(theta[:j], theta[j : 2 * j], *theta[2 * j :])

    def flip_confounding(self) -> "ScaledParams":
        return dataclasses.replace(self, gamma_x_t=-self.gamma_x_t, gamma_y_t=-self.gamma_y_t)

    def causal_effect(self) -> float:
        """Causal effect on the data scale."""
        return float(np.exp(self.log_sd_y - self.log_sd_x) * self.beta_t)

    def to_dict(self) -> dict:
        return {
            "alpha_t": self.alpha_t.tolist(),
            "kappa_t": self.kappa_t.tolist(),
            "beta_t": self.beta_t,
            "log_sd_x": self.log_sd_x,
            "log_sd_y": self.log_sd_y,
            "gamma_x_t": self.gamma_x_t,
            "gamma_y_t": self.gamma_y_t,
        }


@dataclass(frozen=True, order=True)
class ModelIndicator:
    """Spike (0) / slab (1) assignment of every pleiotropic effect.

    Stored as an integer bitmask; bit ``k`` holds the indicator of candidate ``k``
    (zero based). Python integers are unbounded, so there is no cap on J.
    """

    j: int
    mask: int = 0

    def __post_init__(self):
        if self.j < 1:
            raise PreconditionError("model needs at least one indicator")
        if self.mask < 0 or self.mask >> self.j:
            raise PreconditionError(f"bitmask {self.mask} does not fit {self.j} indicators")

    @classmethod
    def from_delta(cls, delta) -> "ModelIndicator":
        bits = [int(b) for b in delta]
        if any(b not in (0, 1) for b in bits):
            raise PreconditionError("indicators must be 0 or 1")
        return cls(len(bits), sum(b << k for k, b in enumerate(bits)))

    @classmethod
    def from_string(cls, text: str) -> "ModelIndicator":
        """Parse a bit string such as ``"0110"`` (candidate 1 first)."""
        return cls.from_delta([int(c) for c in text.strip()])

    @classmethod
    def all_spike(cls, j: int) -> "ModelIndicator":
        return cls(j, 0)

    @classmethod
    def all_slab(cls, j: int) -> "ModelIndicator":
        return cls(j, (1 << j) - 1)

    @classmethod
    def enumerate(cls, j: int) -> Iterator["ModelIndicator"]:
        for mask in range(1 << j):
            yield cls(j, mask)

    @property
    def delta(self) -> np.ndarray:
        return np.array([(self.mask >> k) & 1 for k in range(self.j)], dtype=bool)

    def flip(self, k: int) -> "ModelIndicator":
        if not 0 <= k < self.j:
            raise PreconditionError(f"indicator index {k} out of range")
        return ModelIndicator(self.j, self.mask ^ (1 << k))

    def count(self) -> int:
        return bin(self.mask).count("1")

    def __int__(self) -> int:
        return self.mask

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.delta)


@dataclass(frozen=True)
class Hyperparams:
    sd_slab: float
    sd_spike: float
    var_weak: float = 10.0

    def __post_init__(self):
        if not (0 < self.sd_spike < self.sd_slab):
            raise PreconditionError(
                f"need 0 < sd_spike < sd_slab, got spike={self.sd_spike}, slab={self.sd_slab}"
            )
        if not self.var_weak > 0:
            raise PreconditionError("var_weak must be positive")

    def kappa_sd(self, model: ModelIndicator) -> np.ndarray:
        return np.where(model.delta, self.sd_slab, self.sd_spike)

    def to_dict(self) -> dict:
        return {"sd_slab": self.sd_slab, "sd_spike": self.sd_spike, "var_weak": self.var_weak}


def _check_sd_g(sd_g, j: int) -> np.ndarray:
    sd_g = np.asarray(sd_g, dtype=float)
    if sd_g.shape != (j,):
        raise PreconditionError(f"sd_g must have length {j}")
    if not np.all(sd_g > 0):
        raise PreconditionError("instrument scales must be positive")
    return sd_g


def scale_params(p: UnscaledParams, sd_g) -> ScaledParams:
    sd_g = _check_sd_g(sd_g, p.alpha.size)
    return ScaledParams(
        alpha_t=sd_g * p.alpha / p.sd_x,
        kappa_t=sd_g * p.kappa / p.sd_y,
        beta_t=p.sd_x * p.beta / p.sd_y,
        log_sd_x=np.log(p.sd_x),
        log_sd_y=np.log(p.sd_y),
        gamma_x_t=p.gamma_x / p.sd_x,
        gamma_y_t=p.gamma_y / p.sd_y,
    )


def unscale_params(p: ScaledParams, sd_g) -> UnscaledParams:
    sd_g = _check_sd_g(sd_g, p.j)
    sd_x = np.exp(p.log_sd_x)
    sd_y = np.exp(p.log_sd_y)
    return UnscaledParams(
        alpha=sd_x * p.alpha_t / sd_g,
        kappa=sd_y * p.kappa_t / sd_g,
        beta=np.exp(p.log_sd_y - p.log_sd_x) * p.beta_t,
        gamma_x=sd_x * p.gamma_x_t,
        gamma_y=sd_y * p.gamma_y_t,
        sd_x=sd_x,
        sd_y=sd_y,
    )
