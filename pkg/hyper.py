#!/usr/bin/env python3
"""
Hyperparameters of the derivative-aware GP: marginal likelihood and ensemble MCMC.

The sampler works on the vector
    [log signal_variance, log l_1 .. log l_d, log value_noise, log derivative_noise, prior_mean]
with independent log-normal priors on the positive entries and a flat prior on the mean.
Derivative noise is tied across channels: channel i gets derivative_noise * scale_i^2.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import emcee
import numpy as np
from scipy import linalg

from bo_models import (
    ContractViolationError,
    HyperSample,
    KernelSpec,
    ObservationRecord,
    SamplerInitializationError,
    SingularModelError,
)
from gp_model import (
    build_posterior,
    functional_covariance,
    functional_covariance_log_length_grad,
)


ACCEPTANCE_RANGE = (0.1, 0.9)
INITIAL_SPREAD = 0.1


def log_marginal_likelihood(kernel: KernelSpec, prior_mean: float,
                            history: Sequence[ObservationRecord]) -> float:
    """Gaussian log evidence of every observed channel; -inf when the Gram matrix is singular."""
    try:
        posterior = build_posterior(prior_mean, kernel, history)
    except SingularModelError:
        return -np.inf
    n = posterior.num_channels
    if n == 0:
        return 0.0
    log_det = 2.0 * np.sum(np.log(np.diag(posterior.gram_cholesky)))
    return float(-0.5 * posterior.alpha @ posterior.alpha - 0.5 * log_det - 0.5 * n * np.log(2 * np.pi))


def log_marginal_likelihood_gradient(kernel: KernelSpec, prior_mean: float,
                                     history: Sequence[ObservationRecord]) -> np.ndarray:
    """Gradient with respect to [log signal_variance, log l_1, ..., log l_d]."""
    posterior = build_posterior(prior_mean, kernel, history)
    if posterior.num_channels == 0:
        return np.zeros(kernel.dim + 1)
    locations, weights = posterior.obs_locations, posterior.obs_weights
    representer = linalg.solve_triangular(posterior.gram_cholesky, posterior.alpha, lower=True, trans='T')
    gram_inverse = linalg.cho_solve((posterior.gram_cholesky, True), np.eye(posterior.num_channels))
    # 0.5 tr((a a^T - G^-1) dG)
    outer = np.outer(representer, representer) - gram_inverse

    d_signal = functional_covariance(locations, weights, locations, weights, kernel)
    d_lengths = functional_covariance_log_length_grad(locations, weights, locations, weights, kernel)
    grad = np.empty(kernel.dim + 1)
    grad[0] = 0.5 * np.sum(outer * d_signal)
    grad[1:] = 0.5 * np.einsum('ab,abk->k', outer, d_lengths)
    return grad


@dataclass
class HyperPrior:
    """Log-normal priors of the positive hyperparameters; the prior mean is flat.

    length_median defaults to a quarter of the unit-cube width.
    """
    dim: int
    signal_median: float = 1.0
    length_median: float = 0.25
    noise_median: float = 0.1
    log_sd: float = 1.0
    derivative_scales: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.derivative_scales is None:
            self.derivative_scales = (1.0,) * self.dim
        self.derivative_scales = tuple(float(s) for s in self.derivative_scales)
        if len(self.derivative_scales) != self.dim:
            raise ContractViolationError(f"Expected {self.dim} derivative noise scales")

    @property
    def num_params(self) -> int:
        return self.dim + 4

    @property
    def medians(self) -> np.ndarray:
        return np.log(np.concatenate((
            [self.signal_median], np.full(self.dim, self.length_median), [self.noise_median, self.noise_median])))

    def log_prior(self, params: np.ndarray) -> float:
        logs = params[:-1]
        # log-normal priors are normal in the sampled log coordinates
        return float(-0.5 * np.sum(((logs - self.medians) / self.log_sd) ** 2))

    def unpack(self, params: np.ndarray) -> Tuple[KernelSpec, float]:
        d = self.dim
        signal = np.exp(params[0])
        lengths = np.exp(params[1:d + 1])
        value_noise, derivative_noise = np.exp(params[d + 1]), np.exp(params[d + 2])
        noise = (value_noise,) + tuple(derivative_noise * s ** 2 for s in self.derivative_scales)
        return KernelSpec(signal, tuple(lengths), noise), float(params[d + 3])


def log_posterior(params: np.ndarray, prior: HyperPrior, history: Sequence[ObservationRecord]) -> float:
    if not np.all(np.isfinite(params)) or np.any(np.abs(params[:-1]) > 50):
        return -np.inf
    kernel, prior_mean = prior.unpack(params)
    return prior.log_prior(params) + log_marginal_likelihood(kernel, prior_mean, history)


@dataclass
class EnsembleResult:
    chain: np.ndarray  # (steps * walkers, n)
    log_prob: np.ndarray
    acceptance_fraction: float


def run_ensemble(log_density: Callable[[np.ndarray], float], initial: np.ndarray,
                 burn_in: int, steps: int, seed=0) -> EnsembleResult:
    """Affine-invariant stretch-move sampling; returns the flattened post-burn-in chain."""
    initial = np.atleast_2d(initial)
    walkers, n = initial.shape
    if walkers < 2 * n:
        raise ContractViolationError(f"Need at least {2 * n} walkers for {n} parameters, got {walkers}")
    start = np.array([log_density(p) for p in initial])
    if not np.any(np.isfinite(start)):
        raise SamplerInitializationError("Every walker starts at a -inf log posterior")

    sampler = emcee.EnsembleSampler(walkers, n, log_density)
    sampler.random_state = np.random.RandomState(np.random.SeedSequence(seed).generate_state(1)[0]).get_state()
    sampler.run_mcmc(initial, burn_in + steps, progress=False)

    acceptance = float(np.mean(sampler.acceptance_fraction))
    logging.debug(f"Ensemble sampler: {walkers} walkers, acceptance fraction {acceptance:.3f}")
    if not ACCEPTANCE_RANGE[0] < acceptance < ACCEPTANCE_RANGE[1]:
        logging.warning(f"Ensemble acceptance fraction {acceptance:.3f} is outside {ACCEPTANCE_RANGE}")
    return EnsembleResult(chain=sampler.get_chain(discard=burn_in, flat=True),
                          log_prob=sampler.get_log_prob(discard=burn_in, flat=True),
                          acceptance_fraction=acceptance)


def sample_hyperparameters(history: Sequence[ObservationRecord], m: int = 10, walkers: Optional[int] = None,
                           burn_in: int = 200, seed=0, prior: Optional[HyperPrior] = None,
                           steps: int = 50) -> List[HyperSample]:
    """Draws m thinned posterior samples of the kernel hyperparameters and the prior mean."""
    if not history:
        raise ContractViolationError("Hyperparameter sampling needs a nonempty history")
    if m < 1:
        raise ContractViolationError("m must be at least 1")
    d = history[0].dim
    prior = prior or HyperPrior(dim=d)
    n = prior.num_params
    walkers = walkers or max(20, 2 * n)

    init_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    values = [r.value for r in history if r.value is not None]
    center = np.concatenate((prior.medians, [np.mean(values) if values else 0.0]))
    initial = center + INITIAL_SPREAD * init_rng.standard_normal((walkers, n))

    result = run_ensemble(lambda p: log_posterior(p, prior, history), initial, burn_in, steps, seed)
    finite = np.isfinite(result.log_prob)
    chain, log_prob = result.chain[finite], result.log_prob[finite]
    if m == 1:
        picked = [int(np.argmax(log_prob))]
    else:
        picked = np.linspace(0, chain.shape[0] - 1, m).round().astype(int)

    samples = []
    for index in picked:
        kernel, prior_mean = prior.unpack(chain[index])
        samples.append(HyperSample(kernel=kernel, prior_mean=prior_mean, log_posterior=float(log_prob[index])))
    return samples


def hyper_digest(samples: Sequence[HyperSample]) -> str:
    """First 12 hex digits of the SHA-1 over the sampled parameter vectors."""
    digest = hashlib.sha1()
    for sample in samples:
        vector = np.concatenate(([sample.kernel.signal_variance], sample.kernel.length_scales,
                                 sample.kernel.noise_variances, [sample.prior_mean]))
        digest.update(np.ascontiguousarray(vector, dtype=np.float64).tobytes())
    return digest.hexdigest()[:12]
