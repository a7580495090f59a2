import numpy as np
import pytest

from _helpers import prior_a, prior_b, random_dataset
from crossed_mfvb.engine import (
    ProductRestriction,
    elbo,
    fit,
    init_state,
    shape_cancellation_coefficients,
    update_effects,
    update_variances,
)
from crossed_mfvb.data import build_views
from crossed_mfvb.errors import UnsupportedPriorError
from crossed_mfvb.oracle import dense_mfvb_update

PR1, PR2, PR3 = ProductRestriction.PR1, ProductRestriction.PR2, ProductRestriction.PR3


class TestCancellations:
    def test_expected_log_coefficients_vanish(self):
        ds = random_dataset(5, 3, 4, p=2, q=2, qp=2, seed=31)
        priors = prior_b(2, 2, 2)
        state = init_state(ds, priors, PR3)
        coeffs = shape_cancellation_coefficients(
            priors, state, ds.n_total, ds.m, ds.mprime, ds.q, ds.qprime
        )
        assert set(coeffs) == {
            "log_sigma2",
            "log_a_sigma2",
            "logdet_Sigma",
            "logdet_A_Sigma",
            "logdet_Sigma_prime",
            "logdet_A_Sigma_prime",
        }
        for name, value in coeffs.items():
            assert value == pytest.approx(0.0, abs=1e-12), name

    def test_family_a_unsupported(self):
        ds = random_dataset(3, 2, 2, seed=32)
        priors = prior_a(1, 1, 1)
        state = init_state(ds, priors, PR1)
        with pytest.raises(UnsupportedPriorError):
            elbo(ds, priors, PR1, state)
        with pytest.raises(UnsupportedPriorError):
            shape_cancellation_coefficients(priors, state, ds.n_total, 3, 2, 1, 1)


class TestStreamlinedLogDet:
    @pytest.mark.parametrize("restriction", [PR1, PR2, PR3])
    def test_matches_dense_covariance_logdet(self, restriction):
        ds = random_dataset(4, 2, 3, p=2, q=2, qp=1, seed=33)
        priors = prior_b(2, 2, 1)
        views = build_views(ds)
        state = init_state(ds, priors, restriction)
        state = update_effects(views, priors, state)
        state = update_variances(ds, priors, restriction, state)
        streamlined = update_effects(views, priors, state)
        dense = dense_mfvb_update(ds, priors, restriction, state)
        np.testing.assert_allclose(
            streamlined.logdet_joint_cov, dense.logdet_joint_cov, rtol=1e-8
        )


class TestMonotonicity:
    def test_pr3_first_fifty_iterations_increase(self):
        ds = random_dataset(4, 2, 4, p=2, q=2, qp=2, seed=34)
        priors = prior_b(2, 2, 2)
        result = fit(ds, priors, PR3, max_iter=50, tol=0.0)
        trace = np.asarray(result.elbo_trace)
        assert trace.size == 50
        drops = np.diff(trace)
        assert np.all(drops >= -1e-8 * np.abs(trace[1:]))

    @pytest.mark.parametrize("restriction", [PR1, PR2, PR3])
    def test_all_restrictions_monotone(self, restriction):
        ds = random_dataset(5, 2, 3, seed=35)
        priors = prior_b(1, 1, 1)
        result = fit(ds, priors, restriction, max_iter=80, tol=0.0)
        trace = np.asarray(result.elbo_trace)
        drops = np.diff(trace)
        assert np.all(drops >= -1e-8 * np.abs(trace[1:]))

    def test_converged_bound_ordering_matches_flexibility(self):
        # A strictly larger approximating family can only raise the
        # optimised bound: PR3 >= PR2 >= PR1.
        ds = random_dataset(4, 3, 4, p=2, q=2, qp=2, seed=36)
        priors = prior_b(2, 2, 2)
        finals = {
            r: fit(ds, priors, r, max_iter=300, tol=1e-12).elbo_trace[-1]
            for r in (PR1, PR2, PR3)
        }
        assert finals[PR3] >= finals[PR2] - 1e-9 * abs(finals[PR2])
        assert finals[PR2] >= finals[PR1] - 1e-9 * abs(finals[PR1])

    def test_trace_is_non_decreasing_in_fit_result(self):
        ds = random_dataset(3, 2, 3, seed=37)
        priors = prior_b(1, 1, 1)
        result = fit(ds, priors, PR2, max_iter=120, tol=1e-10)
        trace = np.asarray(result.elbo_trace)
        assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[1:]))
        assert result.converged
