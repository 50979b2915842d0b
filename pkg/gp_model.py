#!/usr/bin/env python3
"""
Совместный гауссовский процесс для функции и её градиента.

Любая наблюдаемая величина представляется линейным функционалом c·(f(x), ∇f(x)):
значение функции, частная производная или производная по направлению.
Ковариации функционалов для квадратично-экспоненциального ядра считаются
в замкнутой форме, без явной сборки блоков (d+1)x(d+1).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from bo_models import (
    ContractViolationError,
    KernelSpec,
    ObservationRecord,
    SingularModelError,
    check_unit_direction,
)


JITTER_START = 1e-10
JITTER_MAX = 1e-4


def _check_dim(points: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != kernel.dim:
        raise ContractViolationError(
            f"Point dimension {points.shape[1]} does not match kernel dimension {kernel.dim}")
    return points


def joint_covariance(x: np.ndarray, x_prime: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Prior covariance of (f, ∇f)(x) with (f, ∇f)(x').

    Returns [[K, J(x,x')], [J(x',x)^T, H(x,x')]] where J is the gradient of K
    with respect to x' and H the cross Hessian.
    """
    x = np.asarray(x, dtype=float)
    x_prime = np.asarray(x_prime, dtype=float)
    if x.shape != (kernel.dim,) or x_prime.shape != (kernel.dim,):
        raise ContractViolationError(
            f"Expected points of dimension {kernel.dim}, got {x.shape} and {x_prime.shape}")
    inv_l2 = 1.0 / np.square(kernel.length_scales)
    delta = x - x_prime
    k = kernel.signal_variance * np.exp(-0.5 * np.sum(delta ** 2 * inv_l2))
    u = delta * inv_l2

    d = kernel.dim
    block = np.empty((d + 1, d + 1))
    block[0, 0] = k
    block[0, 1:] = k * u  # dK/dx'
    block[1:, 0] = -k * u  # dK/dx
    block[1:, 1:] = k * (np.diag(inv_l2) - np.outer(u, u))
    return block


def functional_covariance(xa: np.ndarray, ca: np.ndarray, xb: np.ndarray, cb: np.ndarray,
                          kernel: KernelSpec) -> np.ndarray:
    """Prior covariance between functionals ca[i]·(f,∇f)(xa[i]) and cb[j]·(f,∇f)(xb[j])."""
    k, u, a, b, inv_l2 = _functional_terms(xa, ca, xb, cb, kernel)
    ca0, cag = ca[:, 0], ca[:, 1:]
    cb0, cbg = cb[:, 0], cb[:, 1:]
    cross = (cag * inv_l2) @ cbg.T
    return k * (np.outer(ca0, cb0) + ca0[:, None] * b - a * cb0[None, :] + cross - a * b)


def functional_covariance_location_grad(xa: np.ndarray, ca: np.ndarray, xb: np.ndarray, cb: np.ndarray,
                                        kernel: KernelSpec) -> np.ndarray:
    """Derivative of functional_covariance with respect to xa, shape (na, nb, d)."""
    k, u, a, b, inv_l2 = _functional_terms(xa, ca, xb, cb, kernel)
    ca0, cag = ca[:, 0], ca[:, 1:]
    cb0, cbg = cb[:, 0], cb[:, 1:]
    cross = (cag * inv_l2) @ cbg.T
    cov = k * (np.outer(ca0, cb0) + ca0[:, None] * b - a * cb0[None, :] + cross - a * b)

    lam_ca = (cag * inv_l2)[:, None, :]
    lam_cb = (cbg * inv_l2)[None, :, :]
    inner = (ca0[:, None, None] * lam_cb
             - cb0[None, :, None] * lam_ca
             - lam_ca * b[..., None]
             - lam_cb * a[..., None])
    return -u * cov[..., None] + k[..., None] * inner


def functional_covariance_log_length_grad(xa: np.ndarray, ca: np.ndarray, xb: np.ndarray, cb: np.ndarray,
                                          kernel: KernelSpec) -> np.ndarray:
    """Derivative of functional_covariance with respect to log length scales, shape (na, nb, d)."""
    k, u, a, b, inv_l2 = _functional_terms(xa, ca, xb, cb, kernel)
    ca0, cag = ca[:, 0], ca[:, 1:]
    cb0, cbg = cb[:, 0], cb[:, 1:]
    cross = (cag * inv_l2) @ cbg.T
    cov = k * (np.outer(ca0, cb0) + ca0[:, None] * b - a * cb0[None, :] + cross - a * b)

    delta = xa[:, None, :] - xb[None, :, :]
    uca = u * cag[:, None, :]  # u_k * ca_k
    ucb = u * cbg[None, :, :]  # u_k * cb_k
    inner = (-ca0[:, None, None] * ucb
             + uca * cb0[None, :, None]
             - inv_l2 * cag[:, None, :] * cbg[None, :, :]
             + uca * b[..., None]
             + a[..., None] * ucb)
    return delta ** 2 * inv_l2 * cov[..., None] + 2.0 * k[..., None] * inner


def _functional_terms(xa, ca, xb, cb, kernel: KernelSpec):
    xa = _check_dim(xa, kernel)
    xb = _check_dim(xb, kernel)
    inv_l2 = 1.0 / np.square(kernel.length_scales)
    delta = xa[:, None, :] - xb[None, :, :]
    k = kernel.signal_variance * np.exp(-0.5 * np.einsum('abd,d->ab', delta ** 2, inv_l2))
    u = delta * inv_l2
    a = np.einsum('abd,ad->ab', u, ca[:, 1:])
    b = np.einsum('abd,bd->ab', u, cb[:, 1:])
    return k, u, a, b, inv_l2


def functional_noise(weights: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Noise variance of each functional: sum_k c_k^2 sigma_k^2."""
    return np.square(weights) @ np.asarray(kernel.noise_variances)


def expand_functionals(points: np.ndarray, channels: np.ndarray,
                       channel_major: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Pairs every point with every weight row.

    Point-major order gives (x1,c1), (x1,c2), ..., channel-major gives (x1,c1), (x2,c1), ...
    """
    points = np.atleast_2d(points)
    n, m = points.shape[0], channels.shape[0]
    if channel_major:
        return np.tile(points, (m, 1)), np.repeat(channels, n, axis=0)
    return np.repeat(points, m, axis=0), np.tile(channels, (n, 1))


def identity_channels(d: int) -> np.ndarray:
    return np.eye(d + 1)


def jittered_cholesky(matrix: np.ndarray, row_owner: Optional[Sequence[int]] = None,
                      scale_floor: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor; on failure adds growing jitter to the diagonal.

    Jitter starts at 1e-10 of max(mean diagonal, scale_floor) and grows x10 up to 1e-4.
    Callers pass the prior signal variance as scale_floor when the matrix may be
    a posterior covariance that has collapsed to round-off.
    """
    n = matrix.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    factor, info = lapack.dpotrf(matrix, lower=1)
    if info == 0:
        return factor

    mean_diag = float(np.mean(np.diag(matrix)))
    scale = max(mean_diag, scale_floor)
    if scale <= 0:
        scale = 1.0
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        factor, info = lapack.dpotrf(matrix + np.eye(n) * jitter * scale, lower=1)
        if info == 0:
            logging.warning(f"Added jitter of {jitter * scale:.3e} to a {n}x{n} covariance matrix")
            return factor
        jitter *= 10

    # info > 0 is the 1-based order of the failing leading minor
    record_index = None
    if info > 0 and row_owner is not None:
        record_index = int(row_owner[info - 1])
    raise SingularModelError(
        f"Covariance matrix is not positive definite even with jitter {JITTER_MAX:g}"
        + (f"; failing record index {record_index}" if record_index is not None else ""),
        record_index=record_index)


def draw_prior_path(kernel: KernelSpec, prior_mean: float, points: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Samples (f, ∇f) jointly at the given points from the prior, shape (n, d+1)."""
    points = _check_dim(points, kernel)
    locations, weights = expand_functionals(points, identity_channels(kernel.dim))
    cov = functional_covariance(locations, weights, locations, weights, kernel)
    factor = jittered_cholesky(0.5 * (cov + cov.T))
    sample = factor @ rng.standard_normal(cov.shape[0])
    sample = sample.reshape(points.shape[0], kernel.dim + 1)
    sample[:, 0] += prior_mean
    return sample


@dataclass(frozen=True)
class BivariateProjection:
    """Posterior of (f(x), θ^T∇f(x)) obtained by projecting the joint posterior."""
    direction: np.ndarray
    posterior: 'GpPosterior'

    @property
    def channels(self) -> np.ndarray:
        d = self.direction.shape[0]
        value_row = np.zeros(d + 1)
        value_row[0] = 1.0
        return np.vstack([value_row, np.concatenate(([0.0], self.direction))])

    def mean_fn(self, x: np.ndarray) -> np.ndarray:
        locations, weights = expand_functionals(np.atleast_2d(x), self.channels)
        return self.posterior.mean(locations, weights)

    def cov_fn(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        la, wa = expand_functionals(np.atleast_2d(x1), self.channels)
        lb, wb = expand_functionals(np.atleast_2d(x2), self.channels)
        return self.posterior.covariance(la, wa, lb, wb)

    @property
    def noise_variances(self) -> np.ndarray:
        """sigma-hat^2: value noise and the (θ^T)^2-weighted derivative noise."""
        return functional_noise(self.channels, self.posterior.kernel)


class GpPosterior:
    """Неизменяемое апостериорное состояние ГП после условия на историю наблюдений."""

    def __init__(self, kernel: KernelSpec, prior_mean: float, history: Tuple[ObservationRecord, ...],
                 obs_locations: np.ndarray, obs_weights: np.ndarray, obs_values: np.ndarray,
                 gram_cholesky: np.ndarray, alpha: np.ndarray):
        self.kernel = kernel
        self.prior_mean = float(prior_mean)
        self.history = history
        self.obs_locations = obs_locations
        self.obs_weights = obs_weights
        self.obs_values = obs_values
        self.gram_cholesky = gram_cholesky
        # alpha = L^{-1} (y - m); _representer = G^{-1} (y - m)
        self.alpha = alpha
        if len(alpha):
            self._representer = linalg.solve_triangular(gram_cholesky, alpha, lower=True, trans='T')
        else:
            self._representer = np.zeros(0)
        for array in (self.obs_locations, self.obs_weights, self.obs_values,
                      self.gram_cholesky, self.alpha, self._representer):
            array.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.kernel.dim

    @property
    def num_channels(self) -> int:
        return self.obs_values.shape[0]

    @property
    def evaluated_points(self) -> np.ndarray:
        if not self.history:
            return np.zeros((0, self.dim))
        return np.array([record.location for record in self.history])

    def whitened_cross(self, locations: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """L^{-1} K(O, A), shape (m, na)."""
        cross = functional_covariance(self.obs_locations, self.obs_weights, locations, weights, self.kernel)
        return linalg.solve_triangular(self.gram_cholesky, cross, lower=True)

    def mean(self, locations: np.ndarray, weights: np.ndarray) -> np.ndarray:
        locations = _check_dim(locations, self.kernel)
        prior = weights[:, 0] * self.prior_mean
        if self.num_channels == 0:
            return prior
        cross = functional_covariance(locations, weights, self.obs_locations, self.obs_weights, self.kernel)
        return prior + cross @ self._representer

    def covariance(self, xa: np.ndarray, ca: np.ndarray,
                   xb: Optional[np.ndarray] = None, cb: Optional[np.ndarray] = None) -> np.ndarray:
        symmetric = xb is None
        if symmetric:
            xb, cb = xa, ca
        prior = functional_covariance(xa, ca, xb, cb, self.kernel)
        if self.num_channels == 0:
            cov = prior
        else:
            va = self.whitened_cross(xa, ca)
            vb = va if symmetric else self.whitened_cross(xb, cb)
            cov = prior - va.T @ vb
        if symmetric:
            cov = 0.5 * (cov + cov.T)
        return cov

    def covariance_location_grad(self, xa: np.ndarray, ca: np.ndarray,
                                 xb: np.ndarray, cb: np.ndarray) -> np.ndarray:
        """Derivative of the posterior covariance with respect to xa, shape (na, nb, d)."""
        grad = functional_covariance_location_grad(xa, ca, xb, cb, self.kernel)
        if self.num_channels == 0:
            return grad
        grad_ao = functional_covariance_location_grad(xa, ca, self.obs_locations, self.obs_weights, self.kernel)
        solved_ob = linalg.cho_solve(
            (self.gram_cholesky, True),
            functional_covariance(self.obs_locations, self.obs_weights, xb, cb, self.kernel))
        return grad - np.einsum('aod,ob->abd', grad_ao, solved_ob)

    def f_variance(self, xs: np.ndarray) -> np.ndarray:
        """Posterior variance of the function value at each point."""
        xs = _check_dim(xs, self.kernel)
        weights = np.zeros((xs.shape[0], self.dim + 1))
        weights[:, 0] = 1.0
        prior = np.full(xs.shape[0], self.kernel.signal_variance)
        if self.num_channels == 0:
            return prior
        whitened = self.whitened_cross(xs, weights)
        return np.maximum(prior - np.sum(whitened ** 2, axis=0), 0.0)

    def f_mean(self, xs: np.ndarray) -> np.ndarray:
        xs = _check_dim(xs, self.kernel)
        weights = np.zeros((xs.shape[0], self.dim + 1))
        weights[:, 0] = 1.0
        return self.mean(xs, weights)

    def posterior_query(self, xs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xs = _check_dim(xs, self.kernel)
        if xs.shape[0] == 0:
            raise ContractViolationError("posterior_query needs at least one point")
        locations, weights = expand_functionals(xs, identity_channels(self.dim))
        means = self.mean(locations, weights).reshape(xs.shape[0], self.dim + 1)
        return means, self.covariance(locations, weights)

    def mean_gradient(self, x: np.ndarray) -> np.ndarray:
        """Exact gradient of the f-channel posterior mean: the posterior mean of ∇f."""
        xs = _check_dim(x, self.kernel)
        locations, weights = expand_functionals(xs, identity_channels(self.dim)[1:])
        grads = self.mean(locations, weights).reshape(xs.shape[0], self.dim)
        return grads[0] if np.ndim(x) == 1 else grads

    def project_directional(self, theta: np.ndarray) -> BivariateProjection:
        theta = check_unit_direction(theta)
        if theta.shape != (self.dim,):
            raise ContractViolationError(f"Direction must have {self.dim} entries")
        return BivariateProjection(direction=theta, posterior=self)

    def condition_on(self, records: Sequence[ObservationRecord]) -> 'GpPosterior':
        return build_posterior(self.prior_mean, self.kernel, tuple(self.history) + tuple(records))

    def without_derivatives(self) -> 'GpPosterior':
        """Posterior over the same locations without derivative observations."""
        stripped = [ObservationRecord(location=r.location, value=r.value)
                    for r in self.history if r.value is not None]
        return build_posterior(self.prior_mean, self.kernel, stripped)


def build_posterior(prior_mean: float, kernel: KernelSpec,
                    history: Sequence[ObservationRecord]) -> GpPosterior:
    history = tuple(history)
    d = kernel.dim
    locations, weights, values, owners = [], [], [], []
    for index, record in enumerate(history):
        if record.dim != d:
            raise ContractViolationError(
                f"Record {index} has dimension {record.dim}, kernel has {d}")
        rows = record.channel_weights()
        locations.append(np.tile(record.location, (rows.shape[0], 1)))
        weights.append(rows)
        values.append(record.channel_values())
        owners.extend([index] * rows.shape[0])

    if not history:
        empty = np.zeros((0, d))
        return GpPosterior(kernel, prior_mean, history, empty, np.zeros((0, d + 1)), np.zeros(0),
                           np.zeros((0, 0)), np.zeros(0))

    obs_locations = np.vstack(locations)
    obs_weights = np.vstack(weights)
    obs_values = np.concatenate(values)

    gram = functional_covariance(obs_locations, obs_weights, obs_locations, obs_weights, kernel)
    gram = 0.5 * (gram + gram.T) + np.diag(functional_noise(obs_weights, kernel))
    factor = jittered_cholesky(gram, row_owner=owners)
    centered = obs_values - obs_weights[:, 0] * prior_mean
    alpha = linalg.solve_triangular(factor, centered, lower=True)
    logging.debug(f"Built posterior over {len(history)} records, {obs_values.shape[0]} channels")
    return GpPosterior(kernel, prior_mean, history, obs_locations, obs_weights, obs_values, factor, alpha)
