#!/usr/bin/env python3
"""
Tests for the marginal likelihood and the ensemble hyperparameter sampler.
"""

from unittest.mock import patch

import numpy as np
import pytest

from bo_models import (
    ContractViolationError,
    FantasyMode,
    HyperSample,
    KernelSpec,
    ObservationRecord,
    SamplerInitializationError,
    SingularModelError,
)
from bench import NoiseSpec, evaluate, load_benchmark
from driver import ProblemSpec, fit_maps
from hyper import (
    EnsembleResult,
    HyperPrior,
    hyper_digest,
    log_marginal_likelihood,
    log_marginal_likelihood_gradient,
    log_posterior,
    run_ensemble,
    sample_hyperparameters,
)


def gradient_history(seed=0, n=5, d=2):
    rng = np.random.default_rng(seed)
    history = []
    for x in rng.uniform(0, 1, size=(n, d)):
        history.append(ObservationRecord(location=tuple(x), value=float(np.sum(x ** 2)),
                                         partials=tuple(2 * x), partials_mask=(True,) + (False,) * (d - 1)))
    return history


class TestMarginalLikelihood:

    def test_single_value_matches_scalar_formula(self):
        kernel = KernelSpec(2.0, (0.5,), (0.3, 0.1))
        history = [ObservationRecord(location=(0.4,), value=1.7)]
        variance = 2.0 + 0.3
        expected = -0.5 * (1.7 - 0.2) ** 2 / variance - 0.5 * np.log(variance) - 0.5 * np.log(2 * np.pi)
        assert log_marginal_likelihood(kernel, 0.2, history) == pytest.approx(expected, rel=1e-12)

    def test_invariant_to_record_order(self):
        kernel = KernelSpec(1.0, (0.4, 0.6), (0.01, 0.02, 0.02))
        history = gradient_history()
        assert log_marginal_likelihood(kernel, 0.1, history) == pytest.approx(
            log_marginal_likelihood(kernel, 0.1, history[::-1]), rel=1e-10)

    def test_gradient_matches_finite_differences(self):
        kernel = KernelSpec(1.3, (0.4, 0.6), (0.01, 0.02, 0.02))
        history = gradient_history(seed=1)
        grad = log_marginal_likelihood_gradient(kernel, 0.0, history)
        logs = np.log(np.concatenate(([kernel.signal_variance], kernel.length_scales)))
        h = 1e-6
        for k in range(logs.size):
            up, down = logs.copy(), logs.copy()
            up[k] += h
            down[k] -= h
            plus = KernelSpec(np.exp(up[0]), tuple(np.exp(up[1:])), kernel.noise_variances)
            minus = KernelSpec(np.exp(down[0]), tuple(np.exp(down[1:])), kernel.noise_variances)
            fd = (log_marginal_likelihood(plus, 0.0, history) - log_marginal_likelihood(minus, 0.0, history)) / (2 * h)
            assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-6)

    def test_singular_gram_gives_minus_infinity(self):
        kernel = KernelSpec(1.0, (0.5,), (0.1, 0.1))
        with patch('hyper.build_posterior', side_effect=SingularModelError("not positive definite")):
            assert log_marginal_likelihood(kernel, 0.0, [ObservationRecord(location=(0.1,), value=1.0)]) == -np.inf


class TestHyperPrior:

    def setup_method(self):
        self.prior = HyperPrior(dim=2, derivative_scales=(2.0, 4.0))

    def test_unpack_ties_derivative_noise(self):
        params = np.log([1.5, 0.2, 0.3, 0.01, 0.04])
        kernel, prior_mean = self.prior.unpack(np.append(params, 0.7))
        assert kernel.signal_variance == pytest.approx(1.5)
        assert kernel.length_scales == pytest.approx((0.2, 0.3))
        assert kernel.noise_variances == pytest.approx((0.01, 0.16, 0.64))
        assert prior_mean == 0.7

    def test_prior_peaks_at_medians(self):
        at_median = np.append(self.prior.medians, 5.0)
        assert self.prior.log_prior(at_median) == 0.0
        assert self.prior.log_prior(at_median + 0.5) < 0.0

    def test_extreme_parameters_are_rejected(self):
        history = gradient_history()
        params = np.append(self.prior.medians, 0.0)
        params[1] = 60.0
        assert log_posterior(params, self.prior, history) == -np.inf
        assert log_posterior(np.full(6, np.nan), self.prior, history) == -np.inf

    def test_wrong_number_of_scales_raises(self):
        with pytest.raises(ContractViolationError):
            HyperPrior(dim=3, derivative_scales=(1.0,))


class TestEnsemble:

    def test_recovers_gaussian_moments(self):
        mean = np.array([1.0, -2.0])
        cov = np.array([[1.0, 0.5], [0.5, 2.0]])
        precision = np.linalg.inv(cov)

        def log_density(x):
            delta = x - mean
            return -0.5 * delta @ precision @ delta

        initial = mean + 0.1 * np.random.default_rng(0).standard_normal((32, 2))
        result = run_ensemble(log_density, initial, burn_in=500, steps=5000, seed=1)
        assert result.chain.shape == (32 * 5000, 2)
        np.testing.assert_allclose(result.chain.mean(axis=0), mean, rtol=0.05)
        np.testing.assert_allclose(result.chain.std(axis=0), np.sqrt(np.diag(cov)), rtol=0.1)
        assert 0.1 < result.acceptance_fraction < 0.9

    def test_same_seed_gives_same_chain(self):
        log_density = lambda x: -0.5 * x @ x
        initial = 0.1 * np.random.default_rng(0).standard_normal((8, 2))
        first = run_ensemble(log_density, initial, burn_in=10, steps=20, seed=3)
        second = run_ensemble(log_density, initial, burn_in=10, steps=20, seed=3)
        np.testing.assert_array_equal(first.chain, second.chain)

    def test_too_few_walkers_raise(self):
        with pytest.raises(ContractViolationError):
            run_ensemble(lambda x: 0.0, np.zeros((3, 2)), burn_in=1, steps=1)

    def test_all_infinite_starts_raise(self):
        with pytest.raises(SamplerInitializationError):
            run_ensemble(lambda x: -np.inf, np.random.default_rng(0).standard_normal((6, 2)), burn_in=1, steps=1)


class TestSampleHyperparameters:

    def setup_method(self):
        self.history = gradient_history(n=4, d=1)
        self.prior = HyperPrior(dim=1)
        rng = np.random.default_rng(5)
        self.chain = np.column_stack([rng.normal(self.prior.medians[i], 0.1, size=20) for i in range(4)]
                                     + [rng.normal(size=20)])
        self.log_prob = -np.arange(20.0)
        self.log_prob[13] = 3.0

    def _fake_ensemble(self):
        return EnsembleResult(chain=self.chain, log_prob=self.log_prob, acceptance_fraction=0.4)

    def test_single_sample_takes_highest_log_posterior(self):
        with patch('hyper.run_ensemble', return_value=self._fake_ensemble()):
            samples = sample_hyperparameters(self.history, m=1, prior=self.prior)
        assert len(samples) == 1
        assert samples[0].log_posterior == 3.0
        assert samples[0].prior_mean == self.chain[13, -1]

    def test_samples_are_evenly_thinned(self):
        with patch('hyper.run_ensemble', return_value=self._fake_ensemble()):
            samples = sample_hyperparameters(self.history, m=3, prior=self.prior)
        assert [s.prior_mean for s in samples] == [self.chain[i, -1] for i in (0, 10, 19)]

    def test_short_real_run(self):
        samples = sample_hyperparameters(self.history, m=2, walkers=10, burn_in=5, steps=5, seed=2)
        assert len(samples) == 2
        assert all(s.kernel.dim == 1 and np.isfinite(s.log_posterior) for s in samples)

    def test_empty_history_raises(self):
        with pytest.raises(ContractViolationError):
            sample_hyperparameters([])


class TestHyperDigest:

    def test_digest_identifies_samples(self):
        a = HyperSample(KernelSpec(1.0, (0.5,), (0.1, 0.1)), 0.0, -1.0)
        b = HyperSample(KernelSpec(1.0, (0.6,), (0.1, 0.1)), 0.0, -1.0)
        assert len(hyper_digest([a])) == 12
        assert hyper_digest([a, b]) == hyper_digest([a, b])
        assert hyper_digest([a]) != hyper_digest([b])


@pytest.mark.slow
class TestBenchmarkHistorySampling:

    def test_ten_samples_from_branin_history(self):
        bench = load_benchmark('branin2')
        problem = ProblemSpec(bounds=bench.bounds, q=1, budget=1, mode=FantasyMode.FULL)
        rng = np.random.default_rng(4)
        points = rng.uniform(bench.bounds[:, 0], bench.bounds[:, 1], size=(10, 2))
        history = [evaluate(bench, x, NoiseSpec(), mask=(True, True)) for x in points]
        maps = fit_maps(problem, history)
        model_history = [maps.to_model(record) for record in history]
        prior = HyperPrior(dim=2, derivative_scales=tuple(maps.width))
        samples = sample_hyperparameters(model_history, m=10, prior=prior, seed=3)
        assert len(samples) == 10
        assert all(s.kernel.dim == 2 and np.isfinite(s.log_posterior) for s in samples)
        assert len({hyper_digest([s]) for s in samples}) > 1
