#!/usr/bin/env python3
"""
Synthetic benchmarks with analytic gradients, noise injection and regret accounting.

Also builds the one-dimensional illustration comparing KG, d-KG, EI and d-EI
on a GP sample path.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from acquisition import AcquisitionSettings, dkg_value, ei_value, kg_value
from bo_models import CandidateBatch, ContractViolationError, FantasyMode, KernelSpec, ObservationRecord
from gp_model import GpPosterior, build_posterior, draw_prior_path


BOX_TOLERANCE = 1e-12
REGRET_FLOOR = 1e-12
AUDIT_POINTS = 100
AUDIT_STEP = 1e-6
AUDIT_TOLERANCE = 1e-5
MINIMUM_TOLERANCE = 1e-6
# sample path on which d-KG and d-EI pick points of clearly different d-KG value
FIGURE_SEED = 2


@dataclass(frozen=True)
class BenchmarkDef:
    """Тестовая функция: значение, градиент, область и известный минимум."""
    name: str
    bounds: np.ndarray
    value_fn: Callable[[np.ndarray], float]
    gradient_fn: Callable[[np.ndarray], np.ndarray]
    f_min: float
    minimizers: Tuple[Tuple[float, ...], ...]
    default_mask: Tuple[bool, ...]
    default_q: int

    @property
    def dim(self) -> int:
        return self.bounds.shape[0]

    @property
    def full_gradient(self) -> bool:
        return all(self.default_mask)

    def contains(self, x: np.ndarray) -> bool:
        return bool(np.all(x >= self.bounds[:, 0] - BOX_TOLERANCE) and np.all(x <= self.bounds[:, 1] + BOX_TOLERANCE))


@dataclass(frozen=True)
class NoiseSpec:
    value_sigma: float = 0.0
    gradient_sigma: float = 0.0

    def __post_init__(self):
        if self.value_sigma < 0 or self.gradient_sigma < 0:
            raise ContractViolationError("Noise standard deviations must be nonnegative")

    @classmethod
    def uniform(cls, sigma: float) -> 'NoiseSpec':
        return cls(value_sigma=sigma, gradient_sigma=sigma)


def _branin(x):
    b, c, t = 5.1 / (4 * np.pi ** 2), 5 / np.pi, 1 / (8 * np.pi)
    h = x[1] - b * x[0] ** 2 + c * x[0] - 6
    return h ** 2 + 10 * (1 - t) * np.cos(x[0]) + 10


def _branin_grad(x):
    b, c, t = 5.1 / (4 * np.pi ** 2), 5 / np.pi, 1 / (8 * np.pi)
    h = x[1] - b * x[0] ** 2 + c * x[0] - 6
    return np.array([2 * h * (c - 2 * b * x[0]) - 10 * (1 - t) * np.sin(x[0]), 2 * h])


def _rosenbrock(x):
    return float(np.sum(100 * (x[1:] - x[:-1] ** 2) ** 2 + (1 - x[:-1]) ** 2))


def _rosenbrock_grad(x):
    grad = np.zeros_like(x)
    grad[:-1] = -400 * x[:-1] * (x[1:] - x[:-1] ** 2) - 2 * (1 - x[:-1])
    grad[1:] += 200 * (x[1:] - x[:-1] ** 2)
    return grad


def _ackley(x):
    d = x.shape[0]
    r = np.sqrt(np.sum(x ** 2) / d)
    return float(-20 * np.exp(-0.2 * r) - np.exp(np.sum(np.cos(2 * np.pi * x)) / d) + 20 + np.e)


def _ackley_grad(x):
    d = x.shape[0]
    r = np.sqrt(np.sum(x ** 2) / d)
    trig = 2 * np.pi / d * np.sin(2 * np.pi * x) * np.exp(np.sum(np.cos(2 * np.pi * x)) / d)
    if r == 0.0:
        # not differentiable at the origin; the minimizer gets a zero gradient
        return np.zeros(d)
    return 4 * np.exp(-0.2 * r) * x / (d * r) + trig


def _levy(x):
    w = 1 + (x - 1) / 4
    body = (w[:-1] - 1) ** 2 * (1 + 10 * np.sin(np.pi * w[:-1] + 1) ** 2)
    tail = (w[-1] - 1) ** 2 * (1 + np.sin(2 * np.pi * w[-1]) ** 2)
    return float(np.sin(np.pi * w[0]) ** 2 + np.sum(body) + tail)


def _levy_grad(x):
    w = 1 + (x - 1) / 4
    grad_w = np.zeros_like(w)
    grad_w[0] += 2 * np.pi * np.sin(np.pi * w[0]) * np.cos(np.pi * w[0])
    s = np.sin(np.pi * w[:-1] + 1)
    grad_w[:-1] += (2 * (w[:-1] - 1) * (1 + 10 * s ** 2)
                    + (w[:-1] - 1) ** 2 * 20 * np.pi * s * np.cos(np.pi * w[:-1] + 1))
    s_tail = np.sin(2 * np.pi * w[-1])
    grad_w[-1] += (2 * (w[-1] - 1) * (1 + s_tail ** 2)
                   + (w[-1] - 1) ** 2 * 4 * np.pi * s_tail * np.cos(2 * np.pi * w[-1]))
    return grad_w / 4


HARTMANN_A = np.array([[10, 3, 17, 3.5, 1.7, 8],
                       [0.05, 10, 17, 0.1, 8, 14],
                       [3, 3.5, 1.7, 10, 17, 8],
                       [17, 8, 0.05, 10, 0.1, 14]])
HARTMANN_P = 1e-4 * np.array([[1312, 1696, 5569, 124, 8283, 5886],
                              [2329, 4135, 8307, 3736, 1004, 9991],
                              [2348, 1451, 3522, 2883, 3047, 6650],
                              [4047, 8828, 8732, 5743, 1091, 381]])
HARTMANN_C = np.array([1.0, 1.2, 3.0, 3.2])


def _hartmann6(x):
    inner = np.sum(HARTMANN_A * (x - HARTMANN_P) ** 2, axis=1)
    return float(-np.sum(HARTMANN_C * np.exp(-inner)))


def _hartmann6_grad(x):
    inner = np.sum(HARTMANN_A * (x - HARTMANN_P) ** 2, axis=1)
    weights = HARTMANN_C * np.exp(-inner)
    return np.sum(weights[:, None] * 2 * HARTMANN_A * (x - HARTMANN_P), axis=0)


def _cosine_mixture(x):
    return float(0.1 * np.sum(np.cos(5 * np.pi * x)) + np.sum(x ** 2))


def _cosine_mixture_grad(x):
    return -0.5 * np.pi * np.sin(5 * np.pi * x) + 2 * x


COSINE_MINIMIZER = 0.184872823182918


def _box(lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    return np.column_stack([np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)])


def _mask(d: int, observed: Sequence[int]) -> Tuple[bool, ...]:
    return tuple(i in observed for i in range(d))


def _definitions() -> Dict[str, BenchmarkDef]:
    t = 1 / (8 * np.pi)
    return {
        'branin2': BenchmarkDef(
            'branin2', _box([-5, 0], [15, 15]), _branin, _branin_grad, 10 * t,
            ((-np.pi, 12.275), (np.pi, 2.275), (3 * np.pi, 2.475)), _mask(2, range(2)), 4),
        'rosenbrock3': BenchmarkDef(
            'rosenbrock3', _box([-2] * 3, [2] * 3), _rosenbrock, _rosenbrock_grad, 0.0,
            ((1.0, 1.0, 1.0),), _mask(3, [2]), 4),
        'ackley5': BenchmarkDef(
            'ackley5', _box([-2] * 5, [2] * 5), _ackley, _ackley_grad, 0.0,
            ((0.0,) * 5,), _mask(5, range(5)), 4),
        'levy4': BenchmarkDef(
            'levy4', _box([-10] * 4, [10] * 4), _levy, _levy_grad, 0.0,
            ((1.0,) * 4,), _mask(4, [3]), 8),
        'hartmann6': BenchmarkDef(
            'hartmann6', _box([0] * 6, [1] * 6), _hartmann6, _hartmann6_grad, -3.32236801141551,
            ((0.20168952, 0.15001069, 0.47687398, 0.27533243, 0.31165162, 0.65730054),),
            _mask(6, range(6)), 8),
        'cosine8': BenchmarkDef(
            'cosine8', _box([-1] * 8, [1] * 8), _cosine_mixture, _cosine_mixture_grad,
            -0.063012202176250 * 8, ((COSINE_MINIMIZER,) * 8, (-COSINE_MINIMIZER,) * 8),
            _mask(8, [0, 1]), 8),
    }


def list_benchmarks() -> List[str]:
    return sorted(_definitions())


@lru_cache(maxsize=None)
def load_benchmark(name: str) -> BenchmarkDef:
    """Looks up a benchmark by name and audits its gradient and stored minimum once."""
    definitions = _definitions()
    if name not in definitions:
        raise ContractViolationError(f"Unknown benchmark {name!r}; available: {', '.join(sorted(definitions))}")
    bench = definitions[name]
    audit_benchmark(bench)
    logging.debug(f"Benchmark {name} passed the gradient and minimum audit")
    return bench


def audit_benchmark(bench: BenchmarkDef, seed: int = 0):
    """Central finite differences at random points and function values at the stored minimizers."""
    rng = np.random.default_rng(seed)
    lower, upper = bench.bounds[:, 0], bench.bounds[:, 1]
    for x in rng.uniform(lower, upper, size=(AUDIT_POINTS, bench.dim)):
        grad = bench.gradient_fn(x)
        for i in range(bench.dim):
            step = np.zeros(bench.dim)
            step[i] = AUDIT_STEP
            fd = (bench.value_fn(x + step) - bench.value_fn(x - step)) / (2 * AUDIT_STEP)
            if abs(fd - grad[i]) > AUDIT_TOLERANCE * max(1.0, abs(grad[i])):
                raise ContractViolationError(
                    f"{bench.name}: partial {i} at {x.tolist()} is {grad[i]!r}, finite difference {fd!r}")
    for minimizer in bench.minimizers:
        value = bench.value_fn(np.asarray(minimizer))
        if abs(value - bench.f_min) > MINIMUM_TOLERANCE:
            raise ContractViolationError(
                f"{bench.name}: value {value!r} at stored minimizer differs from f* = {bench.f_min!r}")


def evaluate(bench: BenchmarkDef, x: np.ndarray, noise: NoiseSpec, mask: Optional[Sequence[bool]] = None,
             seed=0, direction: Optional[np.ndarray] = None) -> ObservationRecord:
    """Noisy value plus masked partials, or plus one directional derivative when a direction is given."""
    x = np.asarray(x, dtype=float)
    if x.shape != (bench.dim,) or not bench.contains(x):
        raise ContractViolationError(f"{bench.name}: point {x.tolist()} is outside the domain")
    rng = np.random.default_rng(seed)
    value = bench.value_fn(x) + noise.value_sigma * rng.standard_normal()
    grad = bench.gradient_fn(x)
    if direction is not None:
        directional = float(np.dot(direction, grad)) + noise.gradient_sigma * rng.standard_normal()
        return ObservationRecord(location=tuple(x), value=value, direction=tuple(direction), directional=directional)

    mask = tuple(bench.default_mask if mask is None else mask)
    if len(mask) != bench.dim:
        raise ContractViolationError(f"{bench.name}: mask must have {bench.dim} entries")
    if not any(mask):
        return ObservationRecord(location=tuple(x), value=value)
    noisy = grad + noise.gradient_sigma * rng.standard_normal(bench.dim)
    partials = np.where(mask, noisy, 0.0)
    return ObservationRecord(location=tuple(x), value=value, partials=tuple(partials), partials_mask=mask)


def immediate_regret(bench: BenchmarkDef, x: np.ndarray) -> Tuple[float, float]:
    """Noise-free f(x) - f*, with its log10 after clipping at 1e-12."""
    x = np.asarray(x, dtype=float)
    if not bench.contains(x):
        raise ContractViolationError(f"{bench.name}: point {x.tolist()} is outside the domain")
    regret = max(bench.value_fn(x) - bench.f_min, 0.0)
    return regret, float(np.log10(max(regret, REGRET_FLOOR)))


@dataclass
class Figure1Data:
    """Named tables of the one-dimensional illustration: header row plus data rows."""
    tables: Dict[str, Tuple[List[str], List[List[float]]]] = field(default_factory=dict)
    selections: Dict[str, float] = field(default_factory=dict)
    posterior: Optional[GpPosterior] = None
    settings: Optional[AcquisitionSettings] = None


METHODS = ('kg', 'dkg', 'ei', 'dei')


def figure1_scenario(seed=FIGURE_SEED, grid_size: int = 201, num_history: int = 3, num_fantasies: int = 256,
                     length_scale: float = 0.15) -> Figure1Data:
    """Posterior, acquisition curves and one-step-ahead posteriors on a sampled 1-d path."""

    if grid_size < 2 or num_history < 1:
        raise ContractViolationError("figure1_scenario needs grid_size >= 2 and num_history >= 1")
    path_rng, history_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    kernel = KernelSpec(1.0, (length_scale,), (1e-6, 1e-6))
    grid = np.linspace(0.0, 1.0, grid_size)[:, None]
    path = draw_prior_path(kernel, 0.0, grid, path_rng)

    chosen = np.sort(history_rng.choice(grid_size, size=num_history, replace=False))
    history = [ObservationRecord(location=tuple(grid[i]), value=path[i, 0], partials=(path[i, 1],))
               for i in chosen]
    with_gradient = build_posterior(0.0, kernel, history)
    value_only = with_gradient.without_derivatives()

    data = Figure1Data(posterior=with_gradient)
    data.tables['posterior'] = (
        ['x', 'truth', 'mean_gradient', 'std_gradient', 'mean_value', 'std_value'],
        [[x[0], truth, m1, s1, m0, s0] for x, truth, m1, s1, m0, s0 in zip(
            grid, path[:, 0], with_gradient.f_mean(grid), np.sqrt(with_gradient.f_variance(grid)),
            value_only.f_mean(grid), np.sqrt(value_only.f_variance(grid)))])

    settings = AcquisitionSettings.unit_cube(1, mode=FantasyMode.FULL, finite_domain=grid)
    data.settings = settings
    curves = {method: [] for method in METHODS}
    errors = {method: [] for method in METHODS}
    for x in grid:
        batch = CandidateBatch(points=x[None, :])
        for method, estimate in (('kg', kg_value(value_only, batch, num_fantasies, seed, settings)),
                                 ('dkg', dkg_value(with_gradient, batch, num_fantasies, seed, settings))):
            curves[method].append(estimate.value)
            errors[method].append(estimate.std_error)
        # single-point EI is closed form, with or without the gradient observations
        curves['ei'].append(ei_value(value_only, x))
        curves['dei'].append(ei_value(with_gradient, x))
        errors['ei'].append(0.0)
        errors['dei'].append(0.0)

    header = ['x']
    for method in METHODS:
        header += [method, f'{method}_std_error']
    data.tables['acquisition'] = (
        header, [[grid[i, 0]] + [v for method in METHODS for v in (curves[method][i], errors[method][i])]
                 for i in range(grid_size)])

    selection_rows, post_columns = [], []
    for method in METHODS:
        best = int(np.argmax(curves[method]))
        x_best = grid[best]
        data.selections[method] = float(x_best[0])
        selection_rows.append([method, float(x_best[0]), curves[method][best], errors[method][best]])
        if method in ('kg', 'ei'):
            record = ObservationRecord(location=tuple(x_best), value=path[best, 0])
            after = value_only.condition_on([record])
        else:
            record = ObservationRecord(location=tuple(x_best), value=path[best, 0], partials=(path[best, 1],))
            after = with_gradient.condition_on([record])
        post_columns.append((after.f_mean(grid), np.sqrt(after.f_variance(grid))))
    data.tables['selection'] = (['method', 'x', 'acquisition_value', 'std_error'], selection_rows)

    post_header = ['x'] + [f'{method}_{stat}' for method in METHODS for stat in ('mean', 'std')]
    data.tables['post_sample'] = (
        post_header, [[grid[i, 0]] + [float(col[i]) for mean, std in post_columns for col in (mean, std)]
                      for i in range(grid_size)])
    logging.info(f"Figure scenario: selections {data.selections}")
    return data
