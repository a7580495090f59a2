import numpy as np
import pytest

from _helpers import prior_a, prior_b, random_dataset
from crossed_mfvb.data import Cell, CrossedDataset, build_views
from crossed_mfvb.engine import (
    ProductRestriction,
    _pr2_system,
    _pr3_system,
    fit,
    init_state,
    update_effects_pr1,
    update_effects_pr2,
    update_effects_pr3,
    update_variances,
)
from crossed_mfvb.oracle import dense_mfvb_update

PR1, PR2, PR3 = ProductRestriction.PR1, ProductRestriction.PR2, ProductRestriction.PR3


def zero_response_dataset(m=2, mp=2, n=3, p=1, q=1, qp=1, seed=0):
    rng = np.random.default_rng(seed)
    cells = {}
    for i in range(m):
        for ip in range(mp):
            cells[(i, ip)] = Cell(
                np.zeros(n),
                rng.normal(size=(n, p)),
                rng.normal(size=(n, q)),
                rng.normal(size=(n, qp)),
            )
    return CrossedDataset(m=m, mprime=mp, p=p, q=q, qprime=qp, cells=cells)


def assert_states_close(a, b, restriction, rtol=1e-8, atol=1e-10):
    np.testing.assert_allclose(a.mu_beta, b.mu_beta, rtol=rtol, atol=atol)
    np.testing.assert_allclose(a.Sigma_beta, b.Sigma_beta, rtol=rtol, atol=atol)
    np.testing.assert_allclose(a.mu_u, b.mu_u, rtol=rtol, atol=atol)
    np.testing.assert_allclose(a.Sigma_u, b.Sigma_u, rtol=rtol, atol=atol)
    np.testing.assert_allclose(a.mu_up, b.mu_up, rtol=rtol, atol=atol)
    np.testing.assert_allclose(a.Sigma_up, b.Sigma_up, rtol=rtol, atol=atol)
    if restriction >= PR2:
        np.testing.assert_allclose(a.cross_beta_u, b.cross_beta_u, rtol=rtol, atol=atol)
    if restriction == PR3:
        np.testing.assert_allclose(a.cross_beta_up, b.cross_beta_up, rtol=rtol, atol=atol)
        np.testing.assert_allclose(a.cross_u_up, b.cross_u_up, rtol=rtol, atol=atol)


class TestRestrictionOne:
    def test_zero_responses_give_zero_means(self):
        ds = zero_response_dataset()
        priors = prior_b(1, 1, 1)
        state = update_effects_pr1(build_views(ds), priors, init_state(ds, priors, PR1))
        np.testing.assert_allclose(state.mu_beta, 0.0, atol=1e-12)
        np.testing.assert_allclose(state.mu_u, 0.0, atol=1e-12)
        np.testing.assert_allclose(state.mu_up, 0.0, atol=1e-12)

    def test_scalar_ridge_closed_form(self):
        ds = random_dataset(1, 1, 5, seed=2)
        priors = prior_b(1, 1, 1, sigma_beta=7.0)
        views = build_views(ds)
        state0 = init_state(ds, priors, PR1)
        state = update_effects_pr1(views, priors, state0)
        cell = ds.cells[(0, 0)]
        x = cell.X[:, 0]
        # at initialisation mu_u = mu_up = 0 and mu_q(1/sigma^2) = 1
        prec = x @ x + 1.0 / 7.0
        np.testing.assert_allclose(state.mu_beta[0], (x @ cell.y) / prec, rtol=1e-12)
        np.testing.assert_allclose(state.Sigma_beta[0, 0], 1.0 / prec, rtol=1e-12)

    def test_full_cycle_matches_dense_oracle(self):
        ds = random_dataset(4, 2, 3, seed=5)
        priors = prior_b(1, 1, 1)
        views = build_views(ds)
        state = init_state(ds, priors, PR1)
        # make moments non-trivial before comparing
        state = update_effects_pr1(views, priors, state)
        state = update_variances(ds, priors, PR1, state)
        got = update_effects_pr1(views, priors, state)
        want = dense_mfvb_update(ds, priors, PR1, state)
        assert_states_close(got, want, PR1)
        np.testing.assert_allclose(
            got.logdet_joint_cov, want.logdet_joint_cov, rtol=1e-8
        )


class TestRestrictionTwo:
    def test_matches_dense_oracle(self):
        ds = random_dataset(5, 2, 3, p=2, q=2, qp=2, seed=7)
        priors = prior_b(2, 2, 2)
        views = build_views(ds)
        state = init_state(ds, priors, PR2)
        state = update_effects_pr2(views, priors, state)
        state = update_variances(ds, priors, PR2, state)
        got = update_effects_pr2(views, priors, state)
        want = dense_mfvb_update(ds, priors, PR2, state)
        assert_states_close(got, want, PR2)

    def test_prior_rows_telescope(self):
        ds = random_dataset(4, 2, 3, p=2, q=1, qp=1, seed=8)
        priors = prior_b(2, 1, 1, sigma_beta=3.0)
        views = build_views(ds)
        state = init_state(ds, priors, PR2)
        _, B = _pr2_system(views, priors, state).assemble()
        gram = B.T @ B
        mu = state.mu_recip_sigma2
        expected = mu * (views.X.T @ views.X) + np.eye(2) / 3.0
        np.testing.assert_allclose(gram[:2, :2], expected, rtol=1e-12)

    def test_fixed_moment_fixed_point_matches_joint_solve(self):
        # With the variance moments frozen, alternating the restriction-II
        # updates to convergence is block Gauss-Seidel on the same normal
        # equations that restriction III solves jointly.
        ds = random_dataset(3, 2, 6, seed=9)
        priors = prior_b(1, 1, 1)
        views = build_views(ds)
        state2 = init_state(ds, priors, PR2)
        for _ in range(400):
            state2 = update_effects_pr2(views, priors, state2)
        state3 = update_effects_pr3(views, priors, init_state(ds, priors, PR3))
        np.testing.assert_allclose(state2.mu_beta, state3.mu_beta, atol=1e-10)
        np.testing.assert_allclose(state2.mu_u, state3.mu_u, atol=1e-10)
        np.testing.assert_allclose(state2.mu_up, state3.mu_up, atol=1e-10)


class TestRestrictionThree:
    def test_matches_dense_oracle_scalar(self):
        ds = random_dataset(4, 2, 3, seed=11)
        priors = prior_b(1, 1, 1)
        views = build_views(ds)
        state = init_state(ds, priors, PR3)
        state = update_effects_pr3(views, priors, state)
        state = update_variances(ds, priors, PR3, state)
        got = update_effects_pr3(views, priors, state)
        want = dense_mfvb_update(ds, priors, PR3, state)
        assert_states_close(got, want, PR3)
        np.testing.assert_allclose(
            got.logdet_joint_cov, want.logdet_joint_cov, rtol=1e-8
        )

    def test_matches_dense_oracle_vector(self):
        ds = random_dataset(4, 3, 4, p=2, q=2, qp=2, seed=12)
        priors = prior_b(2, 2, 2)
        views = build_views(ds)
        state = init_state(ds, priors, PR3)
        state = update_effects_pr3(views, priors, state)
        state = update_variances(ds, priors, PR3, state)
        got = update_effects_pr3(views, priors, state)
        want = dense_mfvb_update(ds, priors, PR3, state)
        assert_states_close(got, want, PR3)

    def test_unit_penalty_limit_is_plain_ridge(self):
        # With a flat fixed-effects prior and unit inverse moments, the
        # joint update is ridge regression with unit penalties on the
        # random effect columns only.
        ds = random_dataset(3, 2, 4, seed=13)
        priors = prior_b(1, 1, 1, sigma_beta=1e12)
        views = build_views(ds)
        state = update_effects_pr3(views, priors, init_state(ds, priors, PR3))

        from crossed_mfvb.oracle import dense_design

        y, X, Zu, Zup = dense_design(ds)
        C = np.hstack([X, Zu, Zup])
        pen = np.eye(C.shape[1])
        pen[0, 0] = 1e-12
        ridge = np.linalg.solve(C.T @ C + pen, C.T @ y)
        np.testing.assert_allclose(state.mu_beta[0], ridge[0], rtol=1e-6)
        np.testing.assert_allclose(state.mu_u[:, 0], ridge[1:4], rtol=1e-6)
        np.testing.assert_allclose(state.mu_up[:, 0], ridge[4:], rtol=1e-6)

    def test_block_shapes(self):
        ds = random_dataset(2, 2, 1, seed=14)
        priors = prior_b(1, 1, 1)
        sys = _pr3_system(build_views(ds), priors, init_state(ds, priors, PR3))
        assert all(blk.b.shape[0] == 2 + 1 + 2 + 1 for blk in sys.blocks)
        _, B = sys.assemble()
        assert B.shape == (12, 5)

    def test_output_surface_is_exactly_the_required_blocks(self):
        ds = random_dataset(3, 2, 2, seed=15)
        priors = prior_b(1, 1, 1)
        state = update_effects_pr3(
            build_views(ds), priors, init_state(ds, priors, PR3)
        )
        assert state.cross_beta_u.shape == (3, 1, 1)
        assert state.cross_beta_up.shape == (2, 1, 1)
        assert state.cross_u_up.shape == (3, 1, 2)


class TestStructuralNesting:
    def test_absent_blocks_are_not_allocated(self):
        ds = random_dataset(3, 2, 2, seed=16)
        priors = prior_b(1, 1, 1)
        s1 = init_state(ds, priors, PR1)
        assert s1.cross_beta_u is None and s1.cross_beta_up is None and s1.cross_u_up is None
        s2 = init_state(ds, priors, PR2)
        assert s2.cross_beta_u is not None
        assert s2.cross_beta_up is None and s2.cross_u_up is None
        s3 = init_state(ds, priors, PR3)
        assert all(
            blk is not None
            for blk in (s3.cross_beta_u, s3.cross_beta_up, s3.cross_u_up)
        )


class TestVariances:
    def test_shape_parameters_are_iteration_constants(self):
        ds = random_dataset(100, 20, 10, p=2, q=2, qp=2, seed=17, noise=0.5)
        priors = prior_b(2, 2, 2)
        state = init_state(ds, priors, PR2)
        assert state.xi_sigma2 == 1 + 20000 == 20001
        assert state.xi_Sigma == 2 + 2 * 2 - 2 + 100
        assert state.xi_Sigma_prime == 2 + 2 * 2 - 2 + 20
        assert state.xi_a_sigma2 == 2
        assert state.xi_A_Sigma == 4 and state.xi_A_Sigma_prime == 4

    def test_perfect_fit_keeps_prior_base(self):
        ds = zero_response_dataset(seed=18)
        priors = prior_a(1, 1, 1)
        state = init_state(ds, priors, PR1)
        # zero means and zero covariance caches give a zero residual sum
        state.Sigma_beta = np.zeros((1, 1))
        state.Sigma_u = np.zeros_like(state.Sigma_u)
        state.Sigma_up = np.zeros_like(state.Sigma_up)
        out = update_variances(ds, priors, PR1, state)
        assert out.lambda_sigma2 == pytest.approx(priors.lambda_sigma2)

    def test_single_cell_matches_moment_expansion(self):
        ds = random_dataset(1, 1, 6, seed=19)
        priors = prior_b(1, 1, 1)
        views = build_views(ds)
        state = update_effects_pr3(views, priors, init_state(ds, priors, PR3))
        out = update_variances(ds, priors, PR3, state)
        cell = ds.cells[(0, 0)]
        x, z, zp = cell.X[:, 0], cell.Z[:, 0], cell.Zp[:, 0]
        mu_b, mu_u, mu_up = state.mu_beta[0], state.mu_u[0, 0], state.mu_up[0, 0]
        # brute-force E||y - x b - z u - z' u'||^2 from first and second moments
        r = cell.y - x * mu_b - z * mu_u - zp * mu_up
        expected = (
            r @ r
            + (x @ x) * state.Sigma_beta[0, 0]
            + (z @ z) * state.Sigma_u[0, 0, 0]
            + (zp @ zp) * state.Sigma_up[0, 0, 0]
            + 2 * (x @ z) * state.cross_beta_u[0, 0, 0]
            + 2 * (x @ zp) * state.cross_beta_up[0, 0, 0]
            + 2 * (z @ zp) * state.cross_u_up[0, 0, 0]
        )
        assert out.lambda_sigma2 == pytest.approx(
            state.mu_recip_a_sigma2 + expected, rel=1e-12
        )

    def test_moment_consistency_after_cycles(self):
        ds = random_dataset(4, 2, 3, p=2, q=2, qp=2, seed=20)
        priors = prior_b(2, 2, 2)
        result = fit(ds, priors, PR3, max_iter=5, tol=0.0)
        s = result.state
        assert s.mu_recip_sigma2 == pytest.approx(s.xi_sigma2 / s.lambda_sigma2)
        np.testing.assert_allclose(
            s.M_Sigma_inv,
            (s.xi_Sigma - 2 + 1) * np.linalg.inv(s.Lambda_Sigma),
            rtol=1e-10,
        )
        np.testing.assert_allclose(
            s.M_Sigma_prime_inv,
            (s.xi_Sigma_prime - 2 + 1) * np.linalg.inv(s.Lambda_Sigma_prime),
            rtol=1e-10,
        )
        assert s.mu_recip_a_sigma2 == pytest.approx(s.xi_a_sigma2 / s.lambda_a_sigma2)


class TestFit:
    def test_max_iter_zero_returns_initialisation(self):
        ds = random_dataset(3, 2, 2, seed=21)
        priors = prior_b(1, 1, 1)
        result = fit(ds, priors, PR3, max_iter=0)
        init = init_state(ds, priors, PR3)
        assert result.iterations == 0 and not result.converged
        np.testing.assert_array_equal(result.state.mu_beta, init.mu_beta)
        np.testing.assert_array_equal(result.state.Sigma_beta, init.Sigma_beta)
        assert result.state.mu_recip_sigma2 == 1.0

    @pytest.mark.parametrize("restriction", [PR1, PR2, PR3])
    def test_fixed_point_stability(self, restriction):
        # Converge on the parameter-change criterion, then run a few extra
        # cycles: the coordinate ascent contracts near its fixed point, so
        # the total drift stays within a small multiple of the tolerance.
        ds = random_dataset(4, 2, 3, seed=22)
        priors = prior_b(1, 1, 1)
        tol = 1e-10
        result = fit(ds, priors, restriction, max_iter=2000, tol=tol, monitor=False)
        assert result.converged
        again = fit(
            ds, priors, restriction, max_iter=result.iterations + 3, tol=0.0, monitor=False
        )
        s, t = result.state, again.state
        for got, want in [
            (s.mu_beta, t.mu_beta),
            (s.mu_u, t.mu_u),
            (np.atleast_1d(s.lambda_sigma2), np.atleast_1d(t.lambda_sigma2)),
        ]:
            rel = np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-300)
            assert rel < 10 * tol

    def test_prior_a_runs_and_converges(self):
        ds = random_dataset(4, 2, 3, seed=23)
        priors = prior_a(1, 1, 1)
        result = fit(ds, priors, PR2, max_iter=500, tol=1e-8)
        assert result.converged
        assert result.elbo_trace == []

    def test_dense_and_streamlined_fixed_points_agree(self):
        ds = random_dataset(3, 2, 3, seed=24)
        priors = prior_b(1, 1, 1)
        result = fit(ds, priors, PR3, max_iter=400, tol=1e-12)
        state = init_state(ds, priors, PR3)
        for _ in range(result.iterations):
            state = dense_mfvb_update(ds, priors, PR3, state)
            state = update_variances(ds, priors, PR3, state)
        np.testing.assert_allclose(state.mu_beta, result.state.mu_beta, atol=1e-6)
        np.testing.assert_allclose(state.mu_u, result.state.mu_u, atol=1e-6)
        np.testing.assert_allclose(
            state.lambda_sigma2, result.state.lambda_sigma2, rtol=1e-6
        )

    def test_permuted_labels_leave_posterior_unchanged(self):
        ds = random_dataset(3, 2, 2, p=2, q=1, qp=1, seed=25)
        perm_i = [2, 0, 1]
        perm_ip = [1, 0]
        cells = {
            (perm_i[i], perm_ip[ip]): cell for (i, ip), cell in ds.cells.items()
        }
        ds_perm = CrossedDataset(m=3, mprime=2, p=2, q=1, qprime=1, cells=cells)
        priors = prior_b(2, 1, 1)
        res_a = fit(ds, priors, PR3, max_iter=50, tol=0.0)
        res_b = fit(ds_perm, priors, PR3, max_iter=50, tol=0.0)
        np.testing.assert_allclose(res_a.state.mu_beta, res_b.state.mu_beta, atol=1e-10)

    def test_simulation_scale_runs_all_restrictions(self):
        # 100 x 20 grouping levels, ten observations per cell, flat prior;
        # a fixed 500-cycle run must stay numerically healthy.
        from crossed_mfvb.priors import default_prior_b
        from crossed_mfvb.simulate import TrueParams, simulate

        tp = TrueParams.paper_defaults()
        ds = simulate(tp, seed=123)
        priors = default_prior_b(2, 2, 2)
        for restriction in (PR2, PR3):
            result = fit(ds, priors, restriction, max_iter=500, tol=0.0, monitor=False)
            assert result.iterations == 500
            s = result.state
            assert np.all(np.isfinite(s.mu_beta))
            assert np.all(np.isfinite(s.Lambda_Sigma))
            assert s.lambda_sigma2 > 0
