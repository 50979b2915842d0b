#!/usr/bin/env python3
"""
Tests for the optimization loop: bookkeeping, observation channels, determinism and failures.
"""

from unittest.mock import patch

import numpy as np
import pytest

from bo_models import (
    ContractViolationError,
    FantasyMode,
    HyperSample,
    KernelSpec,
    ObjectiveEvaluationError,
    ObservationRecord,
)
from driver import (
    ModelMaps,
    ProblemSpec,
    fit_maps,
    minimize_posterior_mean,
    run,
    start,
    step,
)
from acquisition import AcquisitionSettings
from gp_model import build_posterior, draw_prior_path


SMALL_BUDGETS = {'restarts': 1, 'sga_steps': 2, 'rerank_fantasies': 8, 'inner_steps': 3,
                 'inner_starts': 2, 'raw_samples': 16}


class QuadraticObjective:
    """sum (x - center)^2 with exact gradients; optionally fails on the first calls."""

    def __init__(self, center, failures=0):
        self.center = np.asarray(center, dtype=float)
        self.failures = failures
        self.calls = 0

    def evaluate(self, x, mask, direction, rng):
        self.calls += 1
        if self.calls <= self.failures:
            raise ObjectiveEvaluationError(f"simulated failure {self.calls}")
        x = np.asarray(x, dtype=float)
        value = self.true_value(x)
        grad = 2 * (x - self.center)
        if direction is not None:
            return ObservationRecord(location=tuple(x), value=value, direction=tuple(direction),
                                     directional=float(grad @ direction))
        if mask is None or not any(mask):
            return ObservationRecord(location=tuple(x), value=value)
        return ObservationRecord(location=tuple(x), value=value, partials=tuple(grad), partials_mask=tuple(mask))

    def true_value(self, x):
        return float(np.sum((np.asarray(x) - self.center) ** 2))


def make_problem(d=2, q=2, budget=3, **kwargs):
    defaults = dict(bounds=np.tile([0.0, 1.0], (d, 1)), q=q, budget=budget,
                    kernel=KernelSpec(1.0, (0.5,) * d, (1e-4,) * (d + 1)), budgets=dict(SMALL_BUDGETS))
    defaults.update(kwargs)
    return ProblemSpec(**defaults)


class TestProblemSpec:

    def test_defaults(self):
        problem = ProblemSpec(bounds=np.tile([0.0, 1.0], (3, 1)), q=2, budget=5)
        assert problem.n_initial == 8
        assert problem.mask == (True, True, True)
        assert problem.mode == FantasyMode.DIRECTIONAL

    def test_value_mode_observes_no_partials(self):
        problem = ProblemSpec(bounds=np.tile([0.0, 1.0], (2, 1)), q=1, budget=1, mode=FantasyMode.VALUE)
        assert problem.observed_mask == (False, False)

    @pytest.mark.parametrize("kwargs", [
        {'q': 0},
        {'budget': 0},
        {'acquisition': 'pi'},
        {'mask': (True,)},
    ])
    def test_invalid_problem_raises(self, kwargs):
        with pytest.raises(ContractViolationError):
            make_problem(**kwargs)


class TestModelMaps:

    def setup_method(self):
        self.maps = ModelMaps(lower=np.array([-5.0, 0.0]), width=np.array([20.0, 15.0]),
                              value_shift=3.0, value_scale=2.0)

    def test_points_round_trip_through_unit_cube(self):
        x = np.array([2.5, 7.5])
        np.testing.assert_allclose(self.maps.to_unit(x), [0.375, 0.5])
        np.testing.assert_allclose(self.maps.from_unit(self.maps.to_unit(x)), x)

    def test_records_follow_chain_rule(self):
        gradient = np.array([1.5, -0.5])
        direction = np.array([0.6, 0.8])
        record = ObservationRecord(location=(2.5, 7.5), value=7.0, partials=tuple(gradient),
                                   direction=tuple(direction), directional=float(gradient @ direction))
        model = self.maps.to_model(record)
        model_gradient = gradient * self.maps.width / self.maps.value_scale
        assert model.value == pytest.approx(2.0)
        np.testing.assert_allclose(model.partials, model_gradient)
        assert model.directional == pytest.approx(np.asarray(model.direction) @ model_gradient)

    def test_fixed_kernel_keeps_original_coordinates(self):
        problem = make_problem(bounds=np.array([[-5.0, 15.0], [0.0, 15.0]]))
        maps = fit_maps(problem, [ObservationRecord(location=(0.0, 0.0), value=10.0)])
        np.testing.assert_array_equal(maps.width, [1.0, 1.0])
        assert maps.value_scale == 1.0

    def test_sampled_hyperparameters_standardize_values(self):
        problem = make_problem(kernel=None)
        history = [ObservationRecord(location=(0.1, 0.1), value=v) for v in (1.0, 3.0, 5.0)]
        maps = fit_maps(problem, history)
        assert maps.value_shift == pytest.approx(3.0)
        assert maps.value_scale == pytest.approx(np.std([1.0, 3.0, 5.0]))


class TestRun:

    def test_trace_bookkeeping(self):
        objective = QuadraticObjective([0.3, 0.7])
        trace = run(make_problem(), objective, seed=1)
        assert trace.complete
        assert len(trace.initial_design) == 6
        assert [record.eval_count for record in trace.iterations] == [2, 4, 6]
        assert objective.calls == 6 + 6
        for record in trace.iterations:
            assert record.batch.shape == (2, 2)
            assert np.all((record.recommendation >= 0) & (record.recommendation <= 1))
            assert record.recommendation_value == pytest.approx(objective.true_value(record.recommendation))

    @pytest.mark.parametrize("mode,mask,channels", [
        (FantasyMode.VALUE, None, 1),
        (FantasyMode.FULL, None, 3),
        (FantasyMode.DIRECTIONAL, None, 2),
        (FantasyMode.MASKED, (False, True), 2),
    ])
    def test_observed_channels_follow_mode(self, mode, mask, channels):
        problem = make_problem(mode=mode, mask=mask, budget=1)
        trace = run(problem, QuadraticObjective([0.3, 0.7]), seed=0)
        observations = trace.iterations[0].observations
        assert all(record.num_channels == channels for record in observations)
        if mode == FantasyMode.DIRECTIONAL:
            assert observations[0].direction == observations[1].direction

    @pytest.mark.parametrize("acquisition", ['kg', 'ei', 'dei', 'ucbpe'])
    def test_baselines_complete(self, acquisition):
        mode = FantasyMode.VALUE if acquisition in ('kg', 'ei') else FantasyMode.FULL
        problem = make_problem(acquisition=acquisition, mode=mode, budget=2, num_fantasies=64)
        trace = run(problem, QuadraticObjective([0.3, 0.7]), seed=2)
        assert trace.complete
        assert trace.eval_count == 4

    def test_same_seed_same_trace(self):
        first = run(make_problem(), QuadraticObjective([0.3, 0.7]), seed=5)
        second = run(make_problem(), QuadraticObjective([0.3, 0.7]), seed=5)
        for a, b in zip(first.iterations, second.iterations):
            np.testing.assert_array_equal(a.batch, b.batch)
            np.testing.assert_array_equal(a.recommendation, b.recommendation)
            assert a.acquisition_value == b.acquisition_value

    def test_different_seeds_differ(self):
        first = run(make_problem(budget=1), QuadraticObjective([0.3, 0.7]), seed=5)
        second = run(make_problem(budget=1), QuadraticObjective([0.3, 0.7]), seed=6)
        assert not np.array_equal(first.iterations[0].batch, second.iterations[0].batch)

    def test_step_after_budget_raises(self):
        problem = make_problem(budget=1)
        state = step(start(problem, QuadraticObjective([0.3, 0.7]), seed=0))
        with pytest.raises(ContractViolationError):
            step(state)

    def test_finite_domain_recommends_true_minimizer(self):
        domain = np.linspace(0, 1, 5)[:, None]
        problem = ProblemSpec(bounds=np.array([[0.0, 1.0]]), q=1, budget=8, mode=FantasyMode.FULL,
                              kernel=KernelSpec(1.0, (0.3,), (1e-6, 1e-6)), finite_domain=domain,
                              budgets={'rerank_fantasies': 16})
        trace = run(problem, QuadraticObjective([0.3]), seed=0)
        assert trace.complete
        assert all(any(np.allclose(x, p) for p in domain) for record in trace.iterations for x in record.batch)
        assert trace.iterations[-1].recommendation[0] == pytest.approx(0.25)


class TestFailures:

    def test_single_failure_is_retried(self):
        objective = QuadraticObjective([0.3, 0.7], failures=1)
        trace = run(make_problem(budget=1), objective, seed=0)
        assert trace.complete
        assert trace.failure is None
        assert len(trace.initial_design) == 6

    def test_repeated_failure_aborts_run(self):
        objective = QuadraticObjective([0.3, 0.7], failures=100)
        trace = run(make_problem(budget=2), objective, seed=0)
        assert not trace.complete
        assert trace.failure == "simulated failure 2"
        assert trace.iterations == []


class TestHyperparameterSchedule:

    def test_resampling_schedule(self):
        samples = [HyperSample(KernelSpec(1.0, (0.3,), (1e-3, 1e-3)), 0.0, -1.0)]
        problem = ProblemSpec(bounds=np.array([[0.0, 1.0]]), q=1, budget=7, acquisition='ei',
                              mode=FantasyMode.VALUE, budgets=dict(SMALL_BUDGETS))
        with patch('driver.sample_hyperparameters', return_value=samples) as sampler:
            trace = run(problem, QuadraticObjective([0.3]), seed=0)
        assert trace.complete
        # every iteration of the warm-up, then every fifth
        assert sampler.call_count == 5

    def test_short_sampled_run(self):
        problem = ProblemSpec(bounds=np.array([[0.0, 1.0]]), q=1, budget=2, acquisition='ei',
                              mode=FantasyMode.VALUE, hyper_samples=2, walkers=10, burn_in=5,
                              budgets=dict(SMALL_BUDGETS))
        trace = run(problem, QuadraticObjective([0.3]), seed=0)
        assert trace.complete
        assert all(len(record.hyper_digest) == 12 for record in trace.iterations)


class TestRecommendation:

    def test_minimizes_posterior_mean(self):
        kernel = KernelSpec(1.0, (0.3,), (1e-6, 1e-6))
        objective = QuadraticObjective([0.42])
        history = [objective.evaluate(np.array([x]), (True,), None, None) for x in (0.0, 0.3, 0.6, 1.0)]
        posterior = build_posterior(0.0, kernel, history)
        x = minimize_posterior_mean([posterior], AcquisitionSettings.unit_cube(1), seed=0)
        grid = np.linspace(0, 1, 2001)[:, None]
        assert posterior.f_mean(x[None, :])[0] <= np.min(posterior.f_mean(grid)) + 1e-9
        assert x[0] == pytest.approx(0.42, abs=1e-2)


class GridPathObjective:
    """Noise-free lookup of a sampled (f, f') path on a 1-d grid."""

    def __init__(self, grid, path):
        self.grid = grid
        self.path = path

    def _index(self, x):
        return int(np.argmin(np.abs(self.grid[:, 0] - np.asarray(x)[0])))

    def evaluate(self, x, mask, direction, rng):
        row = self.path[self._index(x)]
        return ObservationRecord(location=tuple(np.asarray(x, dtype=float)), value=float(row[0]),
                                 partials=(float(row[1]),))

    def true_value(self, x):
        return float(self.path[self._index(x), 0])


def noise_free_grid_problem(budget):
    kernel = KernelSpec(1.0, (0.15,), (0.0, 0.0))
    grid = np.linspace(0, 1, 20)[:, None]
    problem = ProblemSpec(bounds=np.array([[0.0, 1.0]]), q=1, budget=budget, mode=FantasyMode.FULL,
                          kernel=kernel, finite_domain=grid, budgets={'rerank_fantasies': 64})
    return problem, kernel, grid


class TestNoiseFreeFiniteDomain:

    def test_reobserving_grid_points_does_not_abort(self):
        problem, kernel, grid = noise_free_grid_problem(budget=20)
        path = draw_prior_path(kernel, 0.0, grid, np.random.default_rng(1))
        trace = run(problem, GridPathObjective(grid, path), seed=1)
        assert trace.complete
        assert trace.failure is None
        assert len(trace.iterations) == 20

    @pytest.mark.slow
    def test_recommendation_converges_to_grid_minimum(self):
        problem, kernel, grid = noise_free_grid_problem(budget=20)
        hits = 0
        for seed in range(50):
            path = draw_prior_path(kernel, 0.0, grid, np.random.default_rng(1000 + seed))
            trace = run(problem, GridPathObjective(grid, path), seed=seed)
            assert trace.complete
            best = grid[int(np.argmin(path[:, 0]))]
            hits += bool(np.allclose(trace.iterations[-1].recommendation, best))
        assert hits >= 48
