#!/usr/bin/env python3
"""
Optimization loop: propose a batch, evaluate it, update the model, recommend.

The GP is fitted in model space: the domain box is mapped onto the unit cube
and observed values are standardized. Records in the history stay in the
original coordinates; model-space copies are rebuilt whenever the maps change.
"""

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from acquisition import (
    AcquisitionSettings,
    dei_maximize,
    ei_maximize,
    fantasy_channels,
    kg_maximize,
    latin_hypercube,
    outer_maximize,
    posteriors_for,
    ucb_beta,
    ucb_pe_select,
)
from bench import BenchmarkDef, NoiseSpec, evaluate, immediate_regret
from bo_models import (
    ContractViolationError,
    FantasyMode,
    HyperSample,
    IterationRecord,
    KernelSpec,
    ObjectiveEvaluationError,
    ObservationRecord,
    RunTrace,
)
from gp_model import GpPosterior, build_posterior
from hyper import HyperPrior, hyper_digest, sample_hyperparameters


ACQUISITIONS = ('dkg', 'kg', 'ei', 'dei', 'ucbpe')
RESAMPLE_WARMUP = 5
RESAMPLE_EVERY = 5
GRID_POINTS_1D = 2001
GRID_POINTS_2D = 101


class Objective(Protocol):
    def evaluate(self, x: np.ndarray, mask: Optional[Sequence[bool]], direction: Optional[np.ndarray],
                 rng: np.random.Generator) -> ObservationRecord:
        ...


@dataclass
class BenchmarkObjective:
    """Noisy benchmark evaluations; the noise-free value serves regret accounting."""
    bench: BenchmarkDef
    noise: NoiseSpec

    def evaluate(self, x, mask, direction, rng) -> ObservationRecord:
        return evaluate(self.bench, x, self.noise, mask, rng, direction)

    def true_value(self, x: np.ndarray) -> float:
        return float(self.bench.value_fn(np.asarray(x, dtype=float)))

    def regret(self, x: np.ndarray) -> Tuple[float, float]:
        return immediate_regret(self.bench, x)


@dataclass
class ProblemSpec:
    bounds: np.ndarray
    q: int
    budget: int
    acquisition: str = 'dkg'
    mode: FantasyMode = FantasyMode.DIRECTIONAL
    mask: Optional[Tuple[bool, ...]] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    n_initial: Optional[int] = None
    kernel: Optional[KernelSpec] = None  # fixed hyperparameters, in the original coordinates
    prior_mean: float = 0.0
    hyper_samples: int = 10
    walkers: Optional[int] = None
    burn_in: int = 200
    num_fantasies: int = 256
    budgets: Dict[str, int] = field(default_factory=dict)
    finite_domain: Optional[np.ndarray] = None

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        self.mode = FantasyMode(self.mode)
        d = self.dim
        if self.q < 1 or self.budget < 1:
            raise ContractViolationError(f"q and budget must be at least 1, got q={self.q}, N={self.budget}")
        if self.acquisition not in ACQUISITIONS:
            raise ContractViolationError(f"Unknown acquisition {self.acquisition!r}")
        if self.mask is None:
            self.mask = (self.mode != FantasyMode.VALUE,) * d
        self.mask = tuple(bool(m) for m in self.mask)
        if len(self.mask) != d:
            raise ContractViolationError(f"Mask must have {d} entries, got {len(self.mask)}")
        if self.n_initial is None:
            self.n_initial = 2 * (d + 1)
        if self.finite_domain is not None:
            self.finite_domain = np.atleast_2d(np.asarray(self.finite_domain, dtype=float))

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]

    @property
    def observed_mask(self) -> Tuple[bool, ...]:
        if self.mode == FantasyMode.VALUE:
            return (False,) * self.dim
        if self.mode == FantasyMode.FULL:
            return (True,) * self.dim
        return self.mask


@dataclass(frozen=True)
class ModelMaps:
    """Affine maps between original and model coordinates."""
    lower: np.ndarray
    width: np.ndarray
    value_shift: float = 0.0
    value_scale: float = 1.0

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.lower) / self.width

    def from_unit(self, z: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(z) * self.width

    def direction_from_unit(self, theta: np.ndarray) -> np.ndarray:
        scaled = theta * self.width
        return scaled / np.linalg.norm(scaled)

    def direction_to_unit(self, direction: np.ndarray) -> np.ndarray:
        scaled = np.asarray(direction) / self.width
        return scaled / np.linalg.norm(scaled)

    def to_model(self, record: ObservationRecord) -> ObservationRecord:
        """Chain rule: partials scale by width / value_scale."""
        value = None if record.value is None else (record.value - self.value_shift) / self.value_scale
        partials = None
        if record.partials is not None:
            partials = tuple(np.asarray(record.partials) * self.width / self.value_scale)
        direction, directional = None, None
        if record.direction is not None:
            stretch = np.linalg.norm(np.asarray(record.direction) / self.width)
            direction = self.direction_to_unit(record.direction)
            directional = record.directional / (stretch * self.value_scale)
        return ObservationRecord(location=tuple(self.to_unit(record.location)), value=value, partials=partials,
                                 partials_mask=record.partials_mask, direction=direction, directional=directional)


def fit_maps(problem: ProblemSpec, history: Sequence[ObservationRecord]) -> ModelMaps:
    if problem.kernel is not None:
        return ModelMaps(lower=np.zeros(problem.dim), width=np.ones(problem.dim))
    values = np.array([r.value for r in history if r.value is not None])
    shift = float(np.mean(values)) if values.size else 0.0
    scale = float(np.std(values)) if values.size > 1 else 1.0
    if scale < 1e-12:
        scale = 1.0
    return ModelMaps(lower=problem.bounds[:, 0].copy(), width=problem.width, value_shift=shift, value_scale=scale)


@dataclass
class DriverState:
    problem: ProblemSpec
    objective: Objective
    history: Tuple[ObservationRecord, ...]
    trace: RunTrace
    control_rng: np.random.Generator
    eval_rng: np.random.Generator
    iteration: int = 0
    maps: Optional[ModelMaps] = None
    hyper_samples: Tuple[HyperSample, ...] = ()
    posteriors: Tuple[GpPosterior, ...] = ()
    aborted: bool = False


def acquisition_settings(problem: ProblemSpec, maps: ModelMaps) -> AcquisitionSettings:
    finite = None if problem.finite_domain is None else maps.to_unit(problem.finite_domain)
    mask = problem.mask if problem.mode == FantasyMode.MASKED else None
    bounds = np.column_stack([maps.to_unit(problem.bounds[:, 0]), maps.to_unit(problem.bounds[:, 1])])
    return AcquisitionSettings(bounds=bounds, mode=problem.mode, mask=mask, finite_domain=finite, **problem.budgets)


def _next_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2 ** 32))


def _evaluate_with_retry(state: DriverState, x: np.ndarray,
                         direction: Optional[np.ndarray]) -> Optional[ObservationRecord]:
    """Evaluates x; after a failure the point is re-drawn once uniformly in the box."""
    problem = state.problem
    mask = None if direction is not None else problem.observed_mask
    try:
        return state.objective.evaluate(x, mask, direction, state.eval_rng)
    except ObjectiveEvaluationError as e:
        logging.warning(f"Objective failed at {np.asarray(x).tolist()}: {e}; re-drawing the point")
    x_retry = state.eval_rng.uniform(problem.bounds[:, 0], problem.bounds[:, 1])
    try:
        return state.objective.evaluate(x_retry, mask, direction, state.eval_rng)
    except ObjectiveEvaluationError as e:
        logging.error(f"Objective failed again at {x_retry.tolist()}: {e}; aborting the run")
        state.trace.failure = str(e)
        return None


def initial_design(problem: ProblemSpec, rng: np.random.Generator) -> np.ndarray:
    """Scrambled Halton points in the box, or distinct points of the finite domain."""
    if problem.finite_domain is not None:
        count = min(problem.n_initial, problem.finite_domain.shape[0])
        return problem.finite_domain[np.sort(rng.choice(problem.finite_domain.shape[0], count, replace=False))]
    sampler = qmc.Halton(d=problem.dim, seed=rng)
    return qmc.scale(sampler.random(problem.n_initial), problem.bounds[:, 0], problem.bounds[:, 1])


def start(problem: ProblemSpec, objective: Objective, seed=0) -> DriverState:
    """Evaluates the initial design and returns the state before the first acquisition step."""
    design_rng, control_rng, eval_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    trace = RunTrace(bounds=problem.bounds.copy())
    state = DriverState(problem=problem, objective=objective, history=(), trace=trace,
                        control_rng=control_rng, eval_rng=eval_rng)
    maps = fit_maps(problem, ())
    records = []
    for x in initial_design(problem, design_rng):
        direction = None
        if problem.mode == FantasyMode.DIRECTIONAL:
            theta = design_rng.standard_normal(problem.dim)
            direction = maps.direction_from_unit(theta / np.linalg.norm(theta))
        record = _evaluate_with_retry(state, x, direction)
        if record is None:
            return dataclasses.replace(state, aborted=True)
        records.append(record)
    trace.initial_design = list(records)
    logging.info(f"Initial design: {len(records)} evaluations")
    return dataclasses.replace(state, history=tuple(records), maps=fit_maps(problem, records))


def _refresh_hyperparameters(state: DriverState, t: int, model_history: List[ObservationRecord]) -> Tuple[HyperSample, ...]:
    problem = state.problem
    if problem.kernel is not None:
        return (HyperSample(kernel=problem.kernel, prior_mean=problem.prior_mean, log_posterior=0.0),)
    seed = _next_seed(state.control_rng)
    if state.hyper_samples and t > RESAMPLE_WARMUP and t % RESAMPLE_EVERY != 0:
        return state.hyper_samples
    prior = HyperPrior(dim=problem.dim, derivative_scales=tuple(state.maps.width))
    samples = sample_hyperparameters(model_history, m=problem.hyper_samples, walkers=problem.walkers,
                                     burn_in=problem.burn_in, seed=seed, prior=prior)
    logging.debug(f"Iteration {t}: resampled {len(samples)} hyperparameter sets, digest {hyper_digest(samples)}")
    return tuple(samples)


def _propose(state: DriverState, t: int, posteriors: List[GpPosterior], samples: Sequence[HyperSample]):
    problem = state.problem
    settings = acquisition_settings(problem, state.maps)
    seed = _next_seed(state.control_rng)
    if problem.acquisition == 'dkg':
        return outer_maximize(posteriors, problem.q, seed=seed, settings=settings)
    if problem.acquisition == 'kg':
        return kg_maximize(posteriors, problem.q, seed=seed, settings=settings)

    # EI-type and UCB criteria use the most probable hyperparameter sample
    best = posteriors[int(np.argmax([s.log_posterior for s in samples]))]
    if problem.acquisition == 'ei':
        return ei_maximize(best, problem.q, seed, settings, problem.num_fantasies)
    if problem.acquisition == 'dei':
        return dei_maximize(best, problem.q, seed, settings, problem.num_fantasies)
    channels = fantasy_channels(FantasyMode.MASKED, problem.dim, mask=problem.observed_mask)
    batch = ucb_pe_select(best, problem.q, ucb_beta(problem.dim, t), seed, settings, channels)
    return batch, None


def step(state: DriverState) -> DriverState:
    """One acquisition step: q new evaluations, refreshed posterior and recommendation."""
    problem = state.problem
    if state.aborted or state.iteration >= problem.budget:
        raise ContractViolationError("Budget exhausted or run aborted; no further steps")
    started = time.perf_counter()
    t = state.iteration + 1
    maps = fit_maps(problem, state.history)
    state = dataclasses.replace(state, maps=maps)
    model_history = [maps.to_model(r) for r in state.history]
    samples = _refresh_hyperparameters(state, t, model_history)
    posteriors = posteriors_for(samples, model_history)

    batch, estimate = _propose(state, t, posteriors, samples)
    direction = None if batch.direction is None else maps.direction_from_unit(batch.direction)
    points = np.clip(maps.from_unit(batch.points), problem.bounds[:, 0], problem.bounds[:, 1])

    new_records = []
    for x in points:
        record = _evaluate_with_retry(state, x, direction)
        if record is None:
            return dataclasses.replace(state, aborted=True)
        new_records.append(record)
    history = state.history + tuple(new_records)

    posteriors = [p.condition_on([maps.to_model(r) for r in new_records]) for p in posteriors]
    state = dataclasses.replace(state, history=history, hyper_samples=samples, posteriors=tuple(posteriors))
    recommendation = recommend(state)
    true_value = getattr(state.objective, 'true_value', None)
    previous = state.trace.eval_count
    record = IterationRecord(
        iteration=t, eval_count=previous + len(new_records),
        batch=np.array([r.location for r in new_records]), direction=direction,
        observations=new_records, recommendation=recommendation,
        recommendation_value=None if true_value is None else true_value(recommendation),
        acquisition_value=float('nan') if estimate is None else estimate.value,
        wall_ms=1000.0 * (time.perf_counter() - started), hyper_digest=hyper_digest(samples))
    state.trace.iterations.append(record)
    state.trace.value_shift, state.trace.value_scale = maps.value_shift, maps.value_scale
    logging.info(f"Iteration {t}: {record.eval_count} evaluations, recommendation {recommendation.tolist()}"
                 + ("" if record.recommendation_value is None else f", f = {record.recommendation_value:.6g}"))
    return dataclasses.replace(state, iteration=t)


def minimize_posterior_mean(posteriors: Sequence[GpPosterior], settings: AcquisitionSettings,
                            seed=0) -> np.ndarray:
    """argmin of the averaged f-channel posterior mean over the model-space box."""
    def averaged(x):
        x = np.atleast_2d(x)
        return np.mean([p.f_mean(x) for p in posteriors], axis=0)

    if settings.finite_domain is not None:
        return settings.finite_domain[int(np.argmin(averaged(settings.finite_domain)))]

    def objective(x):
        value = float(averaged(x)[0])
        grad = np.mean([p.mean_gradient(x) for p in posteriors], axis=0)
        return value, grad

    d = settings.dim
    rng = np.random.default_rng(seed)
    candidates = [p.evaluated_points for p in posteriors[:1]]
    if d <= 2:
        axes = [np.linspace(lo, hi, GRID_POINTS_1D if d == 1 else GRID_POINTS_2D) for lo, hi in settings.bounds]
        candidates.append(np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, d))
    candidates.append(latin_hypercube(settings.raw_samples, settings.bounds, rng))
    candidates = np.vstack(candidates)
    values = averaged(candidates)
    starts = candidates[np.argsort(values, kind='stable')[:settings.restarts]]

    best_x, best_value = starts[0], float(np.min(values))
    for x0 in starts:
        result = minimize(objective, x0, jac=True, method='L-BFGS-B', bounds=[tuple(b) for b in settings.bounds])
        if result.fun < best_value:
            best_x, best_value = np.asarray(result.x), float(result.fun)
    return best_x


def recommend(state: DriverState) -> np.ndarray:
    """Point of the original domain minimizing the averaged posterior mean."""
    maps = state.maps or fit_maps(state.problem, state.history)
    posteriors = list(state.posteriors)
    if not posteriors:
        problem = state.problem
        kernel = problem.kernel or KernelSpec(1.0, (0.25,) * problem.dim, (0.1,) * (problem.dim + 1))
        posteriors = [build_posterior(problem.prior_mean, kernel, [maps.to_model(r) for r in state.history])]
    z = minimize_posterior_mean(posteriors, acquisition_settings(state.problem, maps), _next_seed(state.control_rng))
    return np.clip(maps.from_unit(z), state.problem.bounds[:, 0], state.problem.bounds[:, 1])


def run(problem: ProblemSpec, objective: Objective, seed=0) -> RunTrace:
    """Initial design, N acquisition steps, and a trace flagged complete unless a step aborted."""
    state = start(problem, objective, seed)
    while not state.aborted and state.iteration < problem.budget:
        state = step(state)
    state.trace.complete = not state.aborted and len(state.trace.iterations) == problem.budget
    if state.aborted:
        logging.error(f"Run aborted after {len(state.trace.iterations)} iterations: {state.trace.failure}")
    return state.trace
