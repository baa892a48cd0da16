"""Search over spike/slab models, Occam's window pruning and BMA sampling.

The pipeline is

1. greedy hill climbing from the all-spike model,
2. an MC3 random walk started from the greedy optimum,
3. Occam's window over every model whose evidence was computed,
4. a mixture posterior with weights proportional to evidence times model prior,
5. Monte Carlo draws from that mixture of Laplace components.

Every evidence goes through a single :class:`EvidenceCache`, so each model is
fitted at most once per run and the result does not depend on the order in
which models are visited.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, softmax

from massive.errors import MassiveError, PreconditionError
from massive.ingest import lower_median
from massive.posterior import WEAK_FACTORS, ModelEvidence, PosteriorProblem, empirical_hyperparams
from massive.rng import make_rng, sub_seed
from massive.types import Hyperparams, ModelIndicator, ScaledParams, SufficientStats

log = logging.getLogger(__name__)

EvidenceFn = Callable[[ModelIndicator], ModelEvidence]


def log_model_prior(model: ModelIndicator, rate: float = 0.5) -> float:
    """Independent Bernoulli(rate) prior on each slab indicator."""
    if not 0.0 < rate < 1.0:
        raise PreconditionError(f"model prior rate must lie in (0, 1), got {rate}")
    k = model.count()
    return k * math.log(rate) + (model.j - k) * math.log1p(-rate)


class EvidenceCache:
    """Thread-safe memo of model evidences.

    Each model is evaluated at most once; concurrent requests for the same
    model wait on the first. Failed evaluations are remembered too (as
    ``None``) so they are not retried.

    Parameters
    ----------
    evidence_fn : callable
        Maps a :class:`ModelIndicator` to a :class:`ModelEvidence`. Any
        :class:`MassiveError` it raises marks the model as failed.
    threads : int, optional
        Worker threads for :meth:`get_many`. ``1`` evaluates serially.
    prior_rate : float
        Bernoulli rate of the model prior used by :meth:`score`.
    """

    def __init__(self, evidence_fn: EvidenceFn, threads: int = 1, prior_rate: float = 0.5):
        if threads < 1:
            raise PreconditionError("threads must be at least 1")
        log_model_prior(ModelIndicator(1), prior_rate)  # validates the rate
        self.evidence_fn = evidence_fn
        self.threads = threads
        self.prior_rate = prior_rate
        self._lock = threading.Lock()
        self._entries: dict[ModelIndicator, ModelEvidence | None] = {}
        self._pending: dict[ModelIndicator, threading.Event] = {}
        self.failures: dict[ModelIndicator, str] = {}
        self.calls = 0

    def get(self, model: ModelIndicator) -> ModelEvidence | None:
        while True:
            with self._lock:
                if model in self._entries:
                    return self._entries[model]
                event = self._pending.get(model)
                if event is None:
                    event = self._pending[model] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                result = self.evidence_fn(model)
                error = None
            except MassiveError as exc:
                result, error = None, str(exc)
            with self._lock:
                self._entries[model] = result
                self.calls += 1
                if error is not None:
                    self.failures[model] = error
                del self._pending[model]
            event.set()
            if error is not None:
                log.warning("evidence for model %s failed: %s", model, error)
            return result

    def get_many(self, models: Iterable[ModelIndicator]) -> list[ModelEvidence | None]:
        models = list(models)
        if self.threads == 1 or len(models) < 2:
            return [self.get(m) for m in models]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(self.get, models))

    def score(self, model: ModelIndicator) -> float:
        """Unnormalized log model posterior; ``-inf`` when the evidence failed."""
        ev = self.get(model)
        if ev is None:
            return -math.inf
        return ev.log_evidence + log_model_prior(model, self.prior_rate)

    def evaluated(self) -> dict[ModelIndicator, ModelEvidence]:
        """Successful evaluations, in bitmask order."""
        with self._lock:
            return {m: e for m, e in sorted(self._entries.items(), key=lambda kv: (kv[0].j, kv[0].mask)) if e is not None}

    def __contains__(self, model) -> bool:
        with self._lock:
            return model in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# --------------------------------------------------------------------------
# search
# --------------------------------------------------------------------------


def greedy_search(cache: EvidenceCache, j: int) -> ModelIndicator:
    """Best-improvement hill climb over single indicator flips from the all-spike model.

    Ties go to the lowest candidate index. Neighbors whose evidence fails are
    skipped.
    """
    if j < 1:
        raise PreconditionError("need at least one candidate")
    current = ModelIndicator.all_spike(j)
    score = cache.score(current)
    if not math.isfinite(score):
        raise MassiveError(f"evidence of the all-spike starting model failed: {cache.failures.get(current)}")
    while True:
        neighbors = [current.flip(k) for k in range(j)]
        cache.get_many(neighbors)
        scores = [cache.score(m) for m in neighbors]
        best = int(np.argmax(scores))
        if not scores[best] > score:
            return current
        current, score = neighbors[best], scores[best]


@dataclass
class SearchTrace:
    """Record of one MC3 run.

    ``chain`` holds the state after every step, starting with the initial
    model, so it has ``iters + 1`` entries.
    """

    evaluated: dict[ModelIndicator, ModelEvidence]
    chain: list[ModelIndicator]
    accepted_count: int
    seed: int
    start: ModelIndicator | None = None

    def visit_counts(self) -> dict[ModelIndicator, int]:
        counts: dict[ModelIndicator, int] = {}
        for m in self.chain:
            counts[m] = counts.get(m, 0) + 1
        return counts


def mc3_search(cache: EvidenceCache, start: ModelIndicator, iters: int, seed: int) -> SearchTrace:
    """Metropolis random walk over models with uniform single-flip proposals.

    Each step draws, in this order, the index of the indicator to flip and a
    uniform number for the acceptance test; both are drawn even when the
    proposal's evidence fails (the proposal is then rejected).
    """
    if iters < 1:
        raise PreconditionError("mc3 needs at least one iteration")
    rng = make_rng(seed)
    current = start
    score = cache.score(current)
    if not math.isfinite(score):
        raise MassiveError(f"evidence of the MC3 start model {start} failed")
    chain = [current]
    accepted = 0
    for _ in range(iters):
        k = int(rng.integers(start.j))
        u = rng.random()
        proposal = current.flip(k)
        new = cache.score(proposal)
        if math.isfinite(new) and math.log(u) < new - score:
            current, score = proposal, new
            accepted += 1
        chain.append(current)
    return SearchTrace(cache.evaluated(), chain, accepted, seed, start)


# --------------------------------------------------------------------------
# model averaging
# --------------------------------------------------------------------------


def occams_window_prune(
    evaluated: Mapping[ModelIndicator, ModelEvidence], ratio: float = 20.0, prior_rate: float = 0.5
) -> list[tuple[ModelIndicator, ModelEvidence]]:
    """Models whose posterior probability is within ``ratio`` of the best one.

    The result is sorted by decreasing posterior, ties by bitmask.
    """
    if not evaluated:
        raise PreconditionError("cannot prune an empty model set")
    if not ratio > 1.0:
        raise PreconditionError(f"Occam's window ratio must exceed 1, got {ratio}")
    scored = [(ev.log_evidence + log_model_prior(m, prior_rate), m, ev) for m, ev in evaluated.items()]
    best = max(s for s, _, _ in scored)
    cut = best - math.log(ratio)
    kept = [(s, m, ev) for s, m, ev in scored if s >= cut]
    kept.sort(key=lambda t: (-t[0], t[1].mask))
    return [(m, ev) for _, m, ev in kept]


@dataclass(frozen=True)
class WeightedModel:
    model: ModelIndicator
    weight: float
    evidence: ModelEvidence


@dataclass(frozen=True)
class BmaPosterior:
    models: list[WeightedModel]
    hyper: Hyperparams
    prior_rate: float = 0.5

    def __post_init__(self):
        if not self.models:
            raise PreconditionError("BMA posterior needs at least one model")

    @property
    def j(self) -> int:
        return self.models[0].model.j

    @property
    def dim(self) -> int:
        return 2 * self.j + 5

    @property
    def weights(self) -> np.ndarray:
        return np.array([wm.weight for wm in self.models])


def bma_posterior(
    pruned: list[tuple[ModelIndicator, ModelEvidence]], h: Hyperparams, prior_rate: float = 0.5
) -> BmaPosterior:
    """Normalize evidence times model prior over the pruned set."""
    if not pruned:
        raise PreconditionError("cannot average over an empty model set")
    scores = np.array([ev.log_evidence + log_model_prior(m, prior_rate) for m, ev in pruned])
    weights = softmax(scores)
    return BmaPosterior([WeightedModel(m, float(w), ev) for (m, ev), w in zip(pruned, weights)], h, prior_rate)


def inclusion_probabilities(bma: BmaPosterior) -> np.ndarray:
    """Posterior probability that each pleiotropic effect sits in the slab."""
    out = np.zeros(bma.j)
    for wm in bma.models:
        out += wm.weight * wm.model.delta
    return np.clip(out, 0.0, 1.0)


@dataclass
class PosteriorSamples:
    """Draws from the BMA mixture in the scaled parameterization.

    ``theta`` rows use the flat layout (alpha_t, kappa_t, beta_t, log_sd_x,
    log_sd_y, gamma_x_t, gamma_y_t); ``beta`` is the causal effect on the data
    scale. ``model_index`` and ``component_index`` say which mixture component
    produced each row.
    """

    theta: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    model_index: np.ndarray = field(repr=False)
    component_index: np.ndarray = field(repr=False)
    seed: int = 0

    def __len__(self) -> int:
        return self.beta.size

    def draw(self, i: int) -> ScaledParams:
        return ScaledParams.from_vector(self.theta[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self.draw(i), float(self.beta[i])


def _component_weights(ev: ModelEvidence) -> np.ndarray:
    masses = np.array([c.log_mass for c in ev.components])
    return np.exp(masses - logsumexp(masses))


def sample_posterior(bma: BmaPosterior, n_samples: int, seed: int) -> PosteriorSamples:
    """Draw from the mixture of Laplace components.

    Random numbers are consumed in three blocks: the model of every draw, then
    the component within each model (models in list order), then one standard
    normal vector per draw.
    """
    if n_samples < 1:
        raise PreconditionError("need at least one sample")
    for wm in bma.models:
        if not wm.evidence.components:
            raise PreconditionError(f"model {wm.model} has no Laplace components to sample from")
    rng = make_rng(seed)
    model_idx = rng.choice(len(bma.models), size=n_samples, p=bma.weights)
    comp_idx = np.zeros(n_samples, dtype=np.int64)
    for i, wm in enumerate(bma.models):
        rows = np.flatnonzero(model_idx == i)
        if rows.size:
            comp_idx[rows] = rng.choice(len(wm.evidence.components), size=rows.size, p=_component_weights(wm.evidence))
    z = rng.standard_normal((n_samples, bma.dim))
    theta = np.empty_like(z)
    for i, wm in enumerate(bma.models):
        for c, comp in enumerate(wm.evidence.components):
            rows = np.flatnonzero((model_idx == i) & (comp_idx == c))
            if not rows.size:
                continue
            # precision = L L^T, so L^{-T} z has covariance precision^{-1}
            chol = np.linalg.cholesky(comp.hessian)
            dev = solve_triangular(chol, z[rows].T, lower=True, trans="T").T
            theta[rows] = comp.mode.to_vector() + dev
    j = bma.j
    beta = np.exp(theta[:, 2 * j + 2] - theta[:, 2 * j + 1]) * theta[:, 2 * j]
    return PosteriorSamples(theta, beta, model_idx, comp_idx, seed)


def point_estimate(beta_draws) -> float:
    """Median of the causal-effect draws (lower middle value for even counts)."""
    beta_draws = np.asarray(beta_draws, dtype=float)
    if beta_draws.size == 0:
        raise PreconditionError("no samples")
    return lower_median(beta_draws)


def central_interval(beta_draws, level: float = 0.9) -> tuple[float, float]:
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(beta_draws, dtype=float), [tail, 1.0 - tail])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# full run
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Knobs of one MASSIVE run; every default is recorded in the output.

    ``hyper_override`` is an optional ``(sd_slab, sd_spike)`` pair replacing the
    empirical choice. ``threads=None`` uses every available core.
    """

    seed: int = 0
    mc3_iters: int = 1000
    occam_ratio: float = 20.0
    n_samples: int = 100_000
    hyper_override: tuple[float, float] | None = None
    model_prior_rate: float = 0.5
    weak_factor: str = "literal_101"
    threads: int | None = None

    def __post_init__(self):
        if self.mc3_iters < 1:
            raise PreconditionError("mc3_iters must be at least 1")
        if not self.occam_ratio > 1:
            raise PreconditionError("occam_ratio must exceed 1")
        if self.n_samples < 1:
            raise PreconditionError("n_samples must be at least 1")
        if not 0 < self.model_prior_rate < 1:
            raise PreconditionError("model_prior_rate must lie in (0, 1)")
        if self.weak_factor not in WEAK_FACTORS:
            raise PreconditionError(f"weak_factor must be one of {WEAK_FACTORS}")
        if self.threads is not None and self.threads < 1:
            raise PreconditionError("threads must be at least 1")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def worker_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hyper_override"] = list(self.hyper_override) if self.hyper_override else None
        return d


@dataclass
class MassiveRun:
    bma: BmaPosterior
    samples: PosteriorSamples
    inclusion: np.ndarray
    trace: SearchTrace
    greedy_model: ModelIndicator
    config: RunConfig
    evidence_failures: dict[ModelIndicator, str] = field(default_factory=dict)

    @property
    def hyper(self) -> Hyperparams:
        return self.bma.hyper

    @property
    def median(self) -> float:
        return point_estimate(self.samples.beta)

    def interval(self, level: float = 0.9) -> tuple[float, float]:
        return central_interval(self.samples.beta, level)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MassiveError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def run_massive(stats: SufficientStats, config: RunConfig = RunConfig()) -> MassiveRun:
    """Hyperparameters, greedy search, MC3, Occam's window, BMA and sampling, in that order.

    The MC3 chain and the sampler get independent seeds derived from
    ``config.seed``.
    """
    if config.hyper_override is not None:
        slab, spike = config.hyper_override
        hyper = _stage("hyperparameters", Hyperparams, float(slab), float(spike))
    else:
        hyper = _stage("hyperparameters", empirical_hyperparams, stats, weak_factor=config.weak_factor)
    problem = _stage("initialization", PosteriorProblem, stats, hyper)
    cache = EvidenceCache(problem.evidence, threads=config.worker_threads, prior_rate=config.model_prior_rate)
    greedy = _stage("greedy search", greedy_search, cache, stats.j)
    trace = _stage("mc3 search", mc3_search, cache, greedy, config.mc3_iters, sub_seed(config.seed, 1))
    pruned = _stage("occam window", occams_window_prune, trace.evaluated, config.occam_ratio, config.model_prior_rate)
    bma = _stage("model averaging", bma_posterior, pruned, hyper, config.model_prior_rate)
    samples = _stage("sampling", sample_posterior, bma, config.n_samples, sub_seed(config.seed, 2))
    return MassiveRun(
        bma=bma,
        samples=samples,
        inclusion=inclusion_probabilities(bma),
        trace=trace,
        greedy_model=greedy,
        config=config,
        evidence_failures=dict(cache.failures),
    )


def fit_single_model(stats: SufficientStats, model: ModelIndicator, hyper: Hyperparams, n_samples: int, seed: int):
    """Posterior draws under one fixed model (no model search)."""
    ev = PosteriorProblem(stats, hyper).evidence(model)
    bma = bma_posterior([(model, ev)], hyper)
    return bma, sample_posterior(bma, n_samples, seed)
