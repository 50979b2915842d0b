#!/usr/bin/env python3
"""
Acquisition functions: derivative-enabled knowledge gradient (d-KG) and baselines.

d-KG is estimated without discretization. For a fantasy draw W the future
posterior mean is mu(x) + sigma_hat(x)·W, its minimum over the box is found by
multi-start projected gradient descent, and the envelope theorem gives an
unbiased stochastic gradient with respect to the batch and the direction,
which drives stochastic gradient ascent over candidate batches.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from bo_models import (
    AcquisitionEstimate,
    CandidateBatch,
    ContractViolationError,
    FantasyDraw,
    FantasyMode,
    HyperSample,
    ObservationRecord,
)
from gp_model import (
    GpPosterior,
    build_posterior,
    expand_functionals,
    functional_covariance,
    functional_noise,
    identity_channels,
    jittered_cholesky,
)


MAX_ENUMERATED_BATCHES = 2000
MINIMUM_VARIANCE_FRACTION = 1e-9
# fantasy covariance nugget, relative to the signal variance
FANTASY_NUGGET = 1e-12


@dataclass
class AcquisitionSettings:
    """Budgets of the inner/outer optimizers and the model-space domain."""
    bounds: np.ndarray
    mode: FantasyMode = FantasyMode.DIRECTIONAL
    mask: Optional[Tuple[bool, ...]] = None
    inner_steps: int = 30
    inner_starts: int = 8
    raw_samples: int = 128
    sga_steps: int = 50
    restarts: int = 8
    rerank_fantasies: int = 64
    learning_rate: float = 0.03
    learning_rate_decay: float = 0.7
    outer_ratio: float = 10.0
    interior_margin: float = 1e-6
    finite_domain: Optional[np.ndarray] = None

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=float))
        self.mode = FantasyMode(self.mode)
        if self.finite_domain is not None:
            self.finite_domain = np.atleast_2d(np.asarray(self.finite_domain, dtype=float))
        if self.mode == FantasyMode.MASKED and self.mask is None:
            raise ContractViolationError("Masked fantasy mode needs a partial-derivative mask")
        for name in ('inner_steps', 'inner_starts', 'raw_samples', 'sga_steps', 'restarts', 'rerank_fantasies'):
            if getattr(self, name) < 1:
                raise ContractViolationError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.raw_samples < self.inner_starts:
            raise ContractViolationError(
                f"raw_samples ({self.raw_samples}) must be at least inner_starts ({self.inner_starts})")

    @classmethod
    def unit_cube(cls, d: int, **kwargs) -> 'AcquisitionSettings':
        return cls(bounds=np.tile([0.0, 1.0], (d, 1)), **kwargs)

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    def inner_rate(self, t: int) -> float:
        return self.learning_rate / t ** self.learning_rate_decay

    def outer_rate(self, t: int) -> float:
        return self.outer_ratio * self.inner_rate(t)


def fantasy_channels(mode: FantasyMode, d: int, direction: Optional[np.ndarray] = None,
                     mask: Optional[Sequence[bool]] = None) -> np.ndarray:
    """Weight rows of the quantities observed at every batch point."""
    value_row = np.zeros((1, d + 1))
    value_row[0, 0] = 1.0
    if mode == FantasyMode.VALUE:
        return value_row
    if mode == FantasyMode.FULL:
        return identity_channels(d)
    if mode == FantasyMode.MASKED:
        selected = [i for i, observed in enumerate(mask) if observed]
        return np.vstack([value_row, identity_channels(d)[[i + 1 for i in selected]]])
    if direction is None:
        raise ContractViolationError("Directional fantasy mode needs a direction")
    return np.vstack([value_row, np.concatenate(([0.0], direction))[None, :]])


def latin_hypercube(n: int, bounds: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=bounds.shape[0], seed=rng)
    return qmc.scale(sampler.random(n), bounds[:, 0], bounds[:, 1])


def seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence for an int seed, or an unspawned copy of a given one."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def _streams(seed, count: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in seed_sequence(seed).spawn(count)]


class SigmaFactor:
    """sigma-hat: maps a standard normal W to the change of the posterior mean.

    Fantasy functionals are ordered channel-major: the q value channels come
    first, so the leading q entries of W drive the function-value fantasies.
    """

    def __init__(self, posterior: GpPosterior, batch: CandidateBatch, channels: np.ndarray):
        self.posterior = posterior
        self.batch = batch
        self.channels = channels
        self.locations, self.weights = expand_functionals(batch.points, channels, channel_major=True)
        covariance = posterior.covariance(self.locations, self.weights)
        covariance = covariance + np.diag(functional_noise(self.weights, posterior.kernel))
        # a re-observed noise-free point has a fantasy covariance of pure round-off
        signal = posterior.kernel.signal_variance
        covariance = covariance + FANTASY_NUGGET * signal * np.eye(covariance.shape[0])
        self.cholesky = jittered_cholesky(covariance, scale_floor=signal)
        if posterior.num_channels:
            self._whitened_fantasy = posterior.whitened_cross(self.locations, self.weights)
        else:
            self._whitened_fantasy = None

    @property
    def num_fantasy_channels(self) -> int:
        return self.weights.shape[0]

    def _rows_for(self, locations: np.ndarray, weights: np.ndarray) -> np.ndarray:
        cross = functional_covariance(locations, weights, self.locations, self.weights, self.posterior.kernel)
        if self._whitened_fantasy is not None:
            cross = cross - self.posterior.whitened_cross(locations, weights).T @ self._whitened_fantasy
        return linalg.solve_triangular(self.cholesky, cross.T, lower=True).T

    def rows(self, xs: np.ndarray) -> np.ndarray:
        """First row of sigma-hat(x) for each point, shape (n, m)."""
        xs = np.atleast_2d(xs)
        weights = np.zeros((xs.shape[0], self.posterior.dim + 1))
        weights[:, 0] = 1.0
        return self._rows_for(xs, weights)

    def values(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xs = np.atleast_2d(xs)
        return self.posterior.f_mean(xs), self.rows(xs)

    def values_and_gradients(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean with its gradient (n, d+1) and sigma-hat rows with their gradients (n, d+1, m)."""
        xs = np.atleast_2d(xs)
        d = self.posterior.dim
        locations, weights = expand_functionals(xs, identity_channels(d))
        means = self.posterior.mean(locations, weights).reshape(xs.shape[0], d + 1)
        rows = self._rows_for(locations, weights).reshape(xs.shape[0], d + 1, -1)
        return means, rows


def sigma_factor(p: GpPosterior, batch: CandidateBatch, mode: Optional[FantasyMode] = None,
                 mask: Optional[Sequence[bool]] = None) -> SigmaFactor:
    if batch.dim != p.dim:
        raise ContractViolationError(f"Batch dimension {batch.dim} does not match posterior dimension {p.dim}")
    if mode is None:
        mode = FantasyMode.DIRECTIONAL if batch.direction is not None else FantasyMode.FULL
    channels = fantasy_channels(FantasyMode(mode), p.dim, batch.direction, mask)
    return SigmaFactor(p, batch, channels)


def _factor_for(p: GpPosterior, batch: CandidateBatch, settings: AcquisitionSettings) -> SigmaFactor:
    return sigma_factor(p, batch, settings.mode, settings.mask)


def _minimize_fantasies(factor: SigmaFactor, draws: np.ndarray, settings: AcquisitionSettings,
                        rng: np.random.Generator, starts: Optional[int] = None,
                        anchor: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Minimizes mu(x) + rows(x)·w for every row w of draws; returns (x_star (N, d), values (N,))."""
    bounds = settings.bounds
    n_draws, d = draws.shape[0], bounds.shape[0]
    if settings.finite_domain is not None:
        mu, rows = factor.values(settings.finite_domain)
        objective = mu[None, :] + draws @ rows.T
        best = np.argmin(objective, axis=1)
        return settings.finite_domain[best], objective[np.arange(n_draws), best]

    starts = min(settings.inner_starts if starts is None else starts, settings.raw_samples)
    raw = latin_hypercube(settings.raw_samples, bounds, rng)
    mu_raw, rows_raw = factor.values(raw)
    objective_raw = mu_raw[None, :] + draws @ rows_raw.T
    order = np.argsort(objective_raw, axis=1, kind='stable')[:, :starts]
    x = raw[order].copy()
    if anchor is not None:
        x[:, -1, :] = anchor

    best_x = x.copy()
    best_value = np.full(x.shape[:2], np.inf)
    active = np.ones(x.shape[:2], dtype=bool)
    for t in range(1, settings.inner_steps + 2):
        means, rows = factor.values_and_gradients(x.reshape(-1, d))
        means = means.reshape(n_draws, starts, d + 1)
        rows = rows.reshape(n_draws, starts, d + 1, -1)
        total = means + np.einsum('nscm,nm->nsc', rows, draws)
        value, grad = total[..., 0], total[..., 1:]

        improved = value < best_value
        best_value = np.where(improved, value, best_value)
        best_x = np.where(improved[..., None], x, best_x)
        if t > settings.inner_steps:
            break

        finite = np.all(np.isfinite(grad), axis=-1)
        if not np.all(finite | ~active):
            logging.warning(f"Non-finite inner gradient, aborting {np.sum(~finite & active)} descent start(s)")
        active &= finite
        step = np.where(active[..., None], settings.inner_rate(t) * np.nan_to_num(grad), 0.0)
        x = np.clip(x - step, bounds[:, 0], bounds[:, 1])

    winner = np.argmin(best_value, axis=1)
    return best_x[np.arange(n_draws), winner], best_value[np.arange(n_draws), winner]


def inner_minimize(p: GpPosterior, factor: SigmaFactor, w: FantasyDraw, starts: int = 8, seed=0,
                   settings: Optional[AcquisitionSettings] = None) -> Tuple[np.ndarray, float]:
    """Multi-start projected gradient descent on mu(x) + rows(x)·w."""
    if starts < 1:
        raise ContractViolationError("inner_minimize needs at least one start")
    settings = settings or AcquisitionSettings.unit_cube(p.dim)
    rng = np.random.default_rng(seed)
    x_star, values = _minimize_fantasies(factor, np.atleast_2d(w.w), settings, rng, starts=starts)
    return x_star[0], float(values[0])


def _draws(seed, num_fantasies: int, dim: int) -> np.ndarray:
    draw_rng, = _streams(seed, 1)
    return draw_rng.standard_normal((num_fantasies, dim))


def _kg_family_value(p: GpPosterior, batch: CandidateBatch, settings: AcquisitionSettings,
                     num_fantasies: int, seed, draws: Optional[np.ndarray]) -> AcquisitionEstimate:
    if num_fantasies < 1:
        raise ContractViolationError("num_fantasies must be at least 1")
    factor = _factor_for(p, batch, settings)
    m = factor.num_fantasy_channels
    if draws is None:
        draws = _draws(seed, num_fantasies, m)
    else:
        draws = np.atleast_2d(draws)[:, :m]
    start_rng = np.random.default_rng(seed_sequence(seed).spawn(2)[1])

    # min of the current posterior mean uses the same descent with W = 0
    anchor_x, anchor_value = _minimize_fantasies(factor, np.zeros((1, m)), settings, start_rng)
    start_rng = np.random.default_rng(seed_sequence(seed).spawn(2)[1])
    _, minima = _minimize_fantasies(factor, draws, settings, start_rng, anchor=anchor_x[0])
    samples = anchor_value[0] - minima
    return _estimate(samples)


def _estimate(samples: np.ndarray) -> AcquisitionEstimate:
    n = samples.shape[0]
    std_error = float(np.std(samples, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return AcquisitionEstimate(value=float(np.mean(samples)), std_error=std_error, num_fantasies=n,
                               samples=samples)


def dkg_value(p: GpPosterior, batch: CandidateBatch, num_fantasies: int = 64, seed=0,
              settings: Optional[AcquisitionSettings] = None,
              draws: Optional[np.ndarray] = None) -> AcquisitionEstimate:
    """Monte-Carlo d-KG: E[min mu(x) - min (mu(x) + sigma_hat(x)·W)]."""
    settings = settings or _default_settings(p, batch)
    return _kg_family_value(p, batch, settings, num_fantasies, seed, draws)


def kg_value(p: GpPosterior, batch: CandidateBatch, num_fantasies: int = 64, seed=0,
             settings: Optional[AcquisitionSettings] = None,
             draws: Optional[np.ndarray] = None) -> AcquisitionEstimate:
    """Batch KG without derivatives: fantasies over the function values only."""
    settings = _value_only(settings or AcquisitionSettings.unit_cube(p.dim))
    value_batch = CandidateBatch(points=batch.points)
    return _kg_family_value(p, value_batch, settings, num_fantasies, seed, draws)


def _default_settings(p: GpPosterior, batch: CandidateBatch) -> AcquisitionSettings:
    mode = FantasyMode.DIRECTIONAL if batch.direction is not None else FantasyMode.FULL
    return AcquisitionSettings.unit_cube(p.dim, mode=mode)


def _value_only(settings: AcquisitionSettings) -> AcquisitionSettings:
    return AcquisitionSettings(**{**settings.__dict__, 'mode': FantasyMode.VALUE, 'mask': None})


def _envelope_gradient(factor: SigmaFactor, x_star: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of rows(x_star)·w with x_star held fixed, over batch points and channel weights.

    Returns (grad_points (q, d), grad_weights (m, d+1)) where m counts fantasy functionals.
    """
    p = factor.posterior
    d = p.dim
    chol = factor.cholesky
    loc_f, wts_f = factor.locations, factor.weights
    x_f = np.atleast_2d(x_star)
    e0 = np.zeros((1, d + 1))
    e0[0, 0] = 1.0

    k = p.covariance(loc_f, wts_f, x_f, e0)[:, 0]
    v = linalg.solve_triangular(chol, w, lower=True, trans='T')
    a = linalg.solve_triangular(chol, k, lower=True)
    # reverse-mode Cholesky: d(rows·w) = dk·v - <dSigma, Psi>
    lower = np.tril(np.outer(w, a), -1) + np.diag(0.5 * w * a)
    left = linalg.solve_triangular(chol, lower, lower=True, trans='T')
    psi = linalg.solve_triangular(chol, left.T, lower=True, trans='T').T
    psi = 0.5 * (psi + psi.T)

    dk_loc = p.covariance_location_grad(loc_f, wts_f, x_f, e0)[:, 0, :]
    dsigma_loc = p.covariance_location_grad(loc_f, wts_f, loc_f, wts_f)
    grad_loc = v[:, None] * dk_loc - 2.0 * np.einsum('abd,ab->ad', dsigma_loc, psi)

    basis_loc, basis_wts = expand_functionals(loc_f, identity_channels(d))
    dk_wts = p.covariance(basis_loc, basis_wts, x_f, e0).reshape(-1, d + 1)
    dsigma_wts = p.covariance(basis_loc, basis_wts, loc_f, wts_f).reshape(-1, d + 1, loc_f.shape[0])
    noise = np.asarray(p.kernel.noise_variances)
    grad_wts = (v[:, None] * dk_wts
                - 2.0 * np.einsum('ajb,ab->aj', dsigma_wts, psi)
                - 2.0 * np.diag(psi)[:, None] * wts_f * noise[None, :])

    q = factor.batch.q
    grad_points = grad_loc.reshape(-1, q, d).sum(axis=0)
    return grad_points, grad_wts


def _batch_gradient(factor: SigmaFactor, x_star: np.ndarray, w: np.ndarray) -> np.ndarray:
    """-(gradient of rows(x*)·w) over (z, theta); theta part is tangent to the unit sphere."""
    grad_points, grad_wts = _envelope_gradient(factor, x_star, w)
    pieces = [-grad_points.ravel()]
    direction = factor.batch.direction
    if direction is not None:
        q = factor.batch.q
        grad_theta = grad_wts[q:2 * q, 1:].sum(axis=0)  # directional block follows the value block
        grad_theta = grad_theta - direction * (direction @ grad_theta)
        pieces.append(-grad_theta)
    return np.concatenate(pieces)


def dkg_gradient(p: GpPosterior, batch: CandidateBatch, w: FantasyDraw, seed=0,
                 settings: Optional[AcquisitionSettings] = None) -> np.ndarray:
    """Envelope-theorem stochastic gradient of d-KG over (z^(1:q), theta)."""
    settings = settings or _default_settings(p, batch)
    factor = _factor_for(p, batch, settings)
    if w.dim != factor.num_fantasy_channels:
        raise ContractViolationError(
            f"Fantasy draw has dimension {w.dim}, expected {factor.num_fantasy_channels}")
    rng = np.random.default_rng(seed)
    x_star, _ = _minimize_fantasies(factor, w.w[None, :], settings, rng)
    return _batch_gradient(factor, x_star[0], w.w)


def kg_gradient(p: GpPosterior, batch: CandidateBatch, w: FantasyDraw, seed=0,
                settings: Optional[AcquisitionSettings] = None) -> np.ndarray:
    settings = _value_only(settings or AcquisitionSettings.unit_cube(p.dim))
    return dkg_gradient(p, CandidateBatch(points=batch.points), w, seed, settings)


def _as_posteriors(p: Union[GpPosterior, Sequence[GpPosterior]]) -> List[GpPosterior]:
    if isinstance(p, GpPosterior):
        return [p]
    posteriors = list(p)
    if not posteriors:
        raise ContractViolationError("At least one posterior is required")
    return posteriors


def _random_direction(d: int, rng: np.random.Generator) -> np.ndarray:
    direction = rng.standard_normal(d)
    return direction / np.linalg.norm(direction)


def initial_batches(settings: AcquisitionSettings, q: int, restarts: int, seed) -> List[CandidateBatch]:
    """Latin-hypercube starting batches of the outer ascent, one per restart."""
    init_rng, = _streams(seed, 1)
    interior = _interior_bounds(settings)
    batches = []
    for _ in range(restarts):
        points = latin_hypercube(q, interior, init_rng)
        direction = _random_direction(settings.dim, init_rng) if settings.mode == FantasyMode.DIRECTIONAL else None
        batches.append(CandidateBatch(points=points, direction=direction))
    return batches


def _interior_bounds(settings: AcquisitionSettings) -> np.ndarray:
    margin = settings.interior_margin
    return np.column_stack([settings.bounds[:, 0] + margin, settings.bounds[:, 1] - margin])


def _averaged_value(posteriors: List[GpPosterior], batch: CandidateBatch, settings: AcquisitionSettings,
                    num_fantasies: int, seed) -> AcquisitionEstimate:
    estimates = [_kg_family_value(p, batch, settings, num_fantasies, seed, None) for p in posteriors]
    return combine_estimates(estimates)


def combine_estimates(estimates: Sequence[AcquisitionEstimate]) -> AcquisitionEstimate:
    """Arithmetic mean of values; standard errors combined in quadrature."""
    values = np.array([e.value for e in estimates])
    errors = np.array([e.std_error for e in estimates])
    return AcquisitionEstimate(value=float(np.mean(values)),
                               std_error=float(np.sqrt(np.sum(errors ** 2)) / len(estimates)),
                               num_fantasies=int(sum(e.num_fantasies for e in estimates)))


def outer_maximize(p: Union[GpPosterior, Sequence[GpPosterior]], q: int, restarts: Optional[int] = None,
                   sga_steps: Optional[int] = None, seed=0,
                   settings: Optional[AcquisitionSettings] = None) -> Tuple[CandidateBatch, AcquisitionEstimate]:
    """Multi-start stochastic gradient ascent of d-KG over the batch and the direction.

    With several posteriors (hyperparameter samples) every step uses one posterior
    chosen uniformly, which keeps the gradient of the averaged acquisition unbiased.
    """
    posteriors = _as_posteriors(p)
    settings = settings or AcquisitionSettings.unit_cube(posteriors[0].dim)
    restarts = settings.restarts if restarts is None else restarts
    sga_steps = settings.sga_steps if sga_steps is None else sga_steps
    if q < 1 or restarts < 1 or sga_steps < 1:
        raise ContractViolationError("q, restarts and sga_steps must be at least 1")

    init_seed, walk_seed, eval_seed = seed_sequence(seed).spawn(3)
    if settings.finite_domain is not None:
        candidates = _enumerate_batches(settings, q, np.random.default_rng(init_seed))
    else:
        starts = initial_batches(settings, q, restarts, init_seed)
        walk_rngs = _streams(walk_seed, restarts)
        candidates = []
        for index, (batch, rng) in enumerate(zip(starts, walk_rngs)):
            candidates.append(batch)
            candidates.append(_ascend(posteriors, batch, settings, sga_steps, rng, index))

    best_batch, best_estimate = None, None
    for batch in candidates:
        try:
            estimate = _averaged_value(posteriors, batch, settings, settings.rerank_fantasies, eval_seed)
        except np.linalg.LinAlgError as e:
            # a batch whose fantasy covariance collapsed carries no information
            logging.warning(f"Singular fantasy covariance for batch {batch.points.tolist()} ({e}), scored as 0")
            estimate = AcquisitionEstimate(value=0.0, std_error=0.0, num_fantasies=0)
        if best_estimate is None or estimate.value > best_estimate.value:
            best_batch, best_estimate = batch, estimate
    logging.debug(f"Selected batch {best_batch.points.tolist()} with acquisition value {best_estimate.value:.6g}")
    return best_batch, best_estimate


def _ascend(posteriors: List[GpPosterior], batch: CandidateBatch, settings: AcquisitionSettings,
            steps: int, rng: np.random.Generator, restart: int) -> CandidateBatch:
    interior = _interior_bounds(settings)
    points = batch.points.copy()
    direction = None if batch.direction is None else batch.direction.copy()
    q, d = points.shape
    for t in range(1, steps + 1):
        posterior = posteriors[rng.integers(len(posteriors))]
        current = CandidateBatch(points=points, direction=direction)
        try:
            factor = _factor_for(posterior, current, settings)
        except np.linalg.LinAlgError as e:
            logging.warning(f"Restart {restart}: singular fantasy covariance at step {t} ({e}), stopping ascent")
            break
        w = rng.standard_normal(factor.num_fantasy_channels)
        x_star, _ = _minimize_fantasies(factor, w[None, :], settings, rng)
        # ascent on d-KG, whose gradient is minus the envelope gradient
        grad = _batch_gradient(factor, x_star[0], w)
        if not np.all(np.isfinite(grad)):
            logging.warning(f"Restart {restart}: non-finite d-KG gradient at step {t}, stopping ascent")
            break
        rate = settings.outer_rate(t)
        points = np.clip(points + rate * grad[:q * d].reshape(q, d), interior[:, 0], interior[:, 1])
        if direction is not None:
            direction = direction + rate * grad[q * d:]
            direction = direction / np.linalg.norm(direction)
    return CandidateBatch(points=points, direction=direction)


def _enumerate_batches(settings: AcquisitionSettings, q: int, rng: np.random.Generator) -> List[CandidateBatch]:
    domain = settings.finite_domain
    n, d = domain.shape
    if comb(n, q) <= MAX_ENUMERATED_BATCHES:
        subsets = [list(c) for c in combinations(range(n), q)]
    else:
        subsets = [sorted(rng.choice(n, size=q, replace=False)) for _ in range(MAX_ENUMERATED_BATCHES)]
    if settings.mode == FantasyMode.DIRECTIONAL:
        directions = list(np.eye(d))
    else:
        directions = [None]
    return [CandidateBatch(points=domain[subset], direction=direction)
            for subset in subsets for direction in directions]


def kg_maximize(p: Union[GpPosterior, Sequence[GpPosterior]], q: int, restarts: Optional[int] = None,
                sga_steps: Optional[int] = None, seed=0,
                settings: Optional[AcquisitionSettings] = None) -> Tuple[CandidateBatch, AcquisitionEstimate]:
    posteriors = _as_posteriors(p)
    settings = _value_only(settings or AcquisitionSettings.unit_cube(posteriors[0].dim))
    return outer_maximize(posteriors, q, restarts, sga_steps, seed, settings)


def integrated_acquisition(hyper_samples: Sequence[HyperSample], history: Sequence[ObservationRecord],
                           batch: CandidateBatch, acquisition: str = 'dkg', num_fantasies: int = 64, seed=0,
                           settings: Optional[AcquisitionSettings] = None) -> AcquisitionEstimate:
    """Average of the acquisition over hyperparameter samples."""
    if not hyper_samples:
        raise ContractViolationError("integrated_acquisition needs at least one hyperparameter sample")
    posteriors = posteriors_for(hyper_samples, history)
    settings = settings or _default_settings(posteriors[0], batch)
    estimates = []
    for posterior in posteriors:
        if acquisition == 'dkg':
            estimates.append(dkg_value(posterior, batch, num_fantasies, seed, settings))
        elif acquisition == 'kg':
            estimates.append(kg_value(posterior, batch, num_fantasies, seed, settings))
        elif acquisition in ('dei', 'ei'):
            estimates.append(d_ei_value(posterior, batch, num_fantasies, seed))
        else:
            raise ContractViolationError(f"Unknown acquisition {acquisition!r}")
    return combine_estimates(estimates)


def posteriors_for(hyper_samples: Sequence[HyperSample], history: Sequence[ObservationRecord]) -> List[GpPosterior]:
    return [build_posterior(s.prior_mean, s.kernel, history) for s in hyper_samples]


def incumbent(p: GpPosterior) -> float:
    """Smallest posterior mean over the evaluated points."""
    points = p.evaluated_points
    if points.shape[0] == 0:
        return p.prior_mean
    return float(np.min(p.f_mean(points)))


def ei_value(p: GpPosterior, x: np.ndarray) -> float:
    """Closed-form expected improvement below the incumbent."""
    x = np.atleast_2d(x)
    best = incumbent(p)
    mu = float(p.f_mean(x)[0])
    variance = float(p.f_variance(x)[0])
    if variance <= MINIMUM_VARIANCE_FRACTION * p.kernel.signal_variance:
        return max(best - mu, 0.0)
    sigma = np.sqrt(variance)
    z = (best - mu) / sigma
    return float((best - mu) * norm.cdf(z) + sigma * norm.pdf(z))


def d_ei_value(p: GpPosterior, batch: CandidateBatch, num_fantasies: int = 1024, seed=0) -> AcquisitionEstimate:
    """Monte-Carlo batch EI under the (derivative-aware) posterior of f at the batch."""
    if num_fantasies < 1:
        raise ContractViolationError("num_fantasies must be at least 1")
    points = batch.points
    weights = np.zeros((points.shape[0], p.dim + 1))
    weights[:, 0] = 1.0
    mu = p.mean(points, weights)
    factor = jittered_cholesky(p.covariance(points, weights), scale_floor=p.kernel.signal_variance)
    draws = _draws(seed, num_fantasies, points.shape[0])
    samples = np.maximum(incumbent(p) - np.min(mu[None, :] + draws @ factor.T, axis=1), 0.0)
    return _estimate(samples)


def _multistart_minimize(fun, starts: np.ndarray, bounds: np.ndarray, jac: bool) -> Tuple[np.ndarray, float]:
    best_x, best_value = None, np.inf
    for x0 in starts:
        result = minimize(fun, x0, jac=jac, method='L-BFGS-B', bounds=[tuple(b) for b in bounds])
        if result.fun < best_value:
            best_x, best_value = np.asarray(result.x), float(result.fun)
    return best_x, best_value


def _best_raw(values: np.ndarray, raw: np.ndarray, count: int) -> np.ndarray:
    return raw[np.argsort(values, kind='stable')[:count]]


def _maximize_improvement(p: GpPosterior, q: int, seed=0,
                          settings: Optional[AcquisitionSettings] = None,
                          num_fantasies: int = 256) -> Tuple[CandidateBatch, AcquisitionEstimate]:
    """Maximizes EI (q = 1, closed form) or batch EI (sample average with fixed draws)."""
    settings = settings or AcquisitionSettings.unit_cube(p.dim)
    start_rng, = _streams(seed, 1)
    d = p.dim
    if settings.finite_domain is not None:
        candidates = _enumerate_batches(_value_only(settings), q, start_rng)
        scored = [(d_ei_value(p, batch, num_fantasies, seed), batch) for batch in candidates]
        best_estimate, best_batch = max(scored, key=lambda item: item[0].value)
        return best_batch, best_estimate

    if q == 1:
        raw = latin_hypercube(settings.raw_samples, settings.bounds, start_rng)
        raw_values = np.array([-ei_value(p, x) for x in raw])
        starts = _best_raw(raw_values, raw, settings.restarts)
        x, value = _multistart_minimize(lambda x: -ei_value(p, x), starts, settings.bounds, jac=False)
        batch = CandidateBatch(points=x[None, :])
        return batch, AcquisitionEstimate(value=-value, std_error=0.0, num_fantasies=0)

    draws = _draws(seed, num_fantasies, q)
    best = incumbent(p)
    e0 = np.zeros((q, d + 1))
    e0[:, 0] = 1.0

    def negative_batch_ei(flat):
        points = flat.reshape(q, d)
        mu = p.mean(points, e0)
        factor = jittered_cholesky(p.covariance(points, e0), scale_floor=p.kernel.signal_variance)
        return -float(np.mean(np.maximum(best - np.min(mu[None, :] + draws @ factor.T, axis=1), 0.0)))

    starts = [latin_hypercube(q, settings.bounds, start_rng).ravel() for _ in range(settings.restarts)]
    flat, _ = _multistart_minimize(negative_batch_ei, np.array(starts), np.tile(settings.bounds, (q, 1)), jac=False)
    batch = CandidateBatch(points=flat.reshape(q, d))
    return batch, d_ei_value(p, batch, num_fantasies, seed)


def ei_maximize(p: GpPosterior, q: int = 1, seed=0, settings: Optional[AcquisitionSettings] = None,
                num_fantasies: int = 256) -> Tuple[CandidateBatch, AcquisitionEstimate]:
    """EI ignores derivative observations, so it works on the value-only posterior."""
    return _maximize_improvement(p.without_derivatives(), q, seed, settings, num_fantasies)


def dei_maximize(p: GpPosterior, q: int = 1, seed=0, settings: Optional[AcquisitionSettings] = None,
                 num_fantasies: int = 256) -> Tuple[CandidateBatch, AcquisitionEstimate]:
    """EI with derivatives: same criterion under the posterior conditioned on every observed channel."""
    return _maximize_improvement(p, q, seed, settings, num_fantasies)


def _f_moments_with_gradients(p: GpPosterior, x: np.ndarray):
    """mu, grad mu, var, grad var of f at a single point."""
    d = p.dim
    x = np.atleast_2d(x)
    locations, weights = expand_functionals(x, identity_channels(d))
    means = p.mean(locations, weights)
    cov_row = p.covariance(locations[:1], weights[:1], locations, weights)[0]
    return means[0], means[1:], cov_row[0], 2.0 * cov_row[1:]


def ucb_beta(d: int, t: int, delta: float = 0.1) -> float:
    return 2.0 * np.log(d * t ** 2 * np.pi ** 2 / (6.0 * delta))


def record_from_channels(x: np.ndarray, channels: np.ndarray, values: np.ndarray) -> ObservationRecord:
    """Builds an observation record observing the given functionals at x."""
    d = channels.shape[1] - 1
    value, partials, mask, direction, directional = None, None, None, None, None
    for row, observed in zip(channels, values):
        nonzero = np.flatnonzero(row)
        if row[0] == 1.0 and nonzero.size == 1:
            value = float(observed)
        elif nonzero.size == 1 and row[nonzero[0]] == 1.0:
            if partials is None:
                partials, mask = [0.0] * d, [False] * d
            partials[nonzero[0] - 1] = float(observed)
            mask[nonzero[0] - 1] = True
        else:
            direction, directional = row[1:], float(observed)
    return ObservationRecord(location=tuple(x), value=value, partials=partials, partials_mask=mask,
                             direction=direction, directional=directional)


def ucb_pe_select(p: GpPosterior, q: int, beta: float, seed=0, settings: Optional[AcquisitionSettings] = None,
                  channels: Optional[np.ndarray] = None) -> CandidateBatch:
    """GP-UCB-PE for minimization: the lower-confidence-bound minimizer plus q-1 pure-exploration points.

    Pending points are conditioned with the observation channels given (value only
    by default), so derivative observations shrink the exploration variance too.
    """
    settings = settings or AcquisitionSettings.unit_cube(p.dim)
    d = p.dim
    channels = channels if channels is not None else fantasy_channels(FantasyMode.VALUE, d)
    start_rng, = _streams(seed, 1)
    sqrt_beta = np.sqrt(beta)

    def lcb(x):
        mu, grad_mu, var, grad_var = _f_moments_with_gradients(p, x)
        sigma = np.sqrt(max(var, 1e-300))
        return mu - sqrt_beta * sigma, grad_mu - sqrt_beta * grad_var / (2.0 * sigma)

    candidates = settings.finite_domain
    raw = candidates if candidates is not None else latin_hypercube(settings.raw_samples, settings.bounds, start_rng)

    raw_lcb = p.f_mean(raw) - sqrt_beta * np.sqrt(p.f_variance(raw))
    if candidates is not None:
        first = raw[np.argmin(raw_lcb)]
    else:
        first, _ = _multistart_minimize(lcb, _best_raw(raw_lcb, raw, settings.restarts), settings.bounds, jac=True)
    selected = [first]

    pending = p
    for _ in range(q - 1):
        x_last = selected[-1]
        locations, weights = expand_functionals(np.atleast_2d(x_last), channels)
        believed = pending.mean(locations, weights)
        pending = pending.condition_on([record_from_channels(x_last, channels, believed)])

        def negative_variance(x, posterior=pending):
            _, _, var, grad_var = _f_moments_with_gradients(posterior, x)
            return -var, -grad_var

        raw_var = -pending.f_variance(raw)
        if candidates is not None:
            nxt = raw[np.argmin(raw_var)]
        else:
            nxt, _ = _multistart_minimize(negative_variance, _best_raw(raw_var, raw, settings.restarts),
                                          settings.bounds, jac=True)
        selected.append(nxt)
    return CandidateBatch(points=np.array(selected))
