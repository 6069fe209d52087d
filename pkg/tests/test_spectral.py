import math

import pytest
import src.openstrip.spectral as spectral
import src.openstrip.environment as environment
from src.openstrip.utils import RegimeError, StructuralError
import numpy as np


def two_point(p1, p2, seed=42):
    return environment.EnvironmentSpec(
        1, support=[(environment.MatrixTriple.scalar(p1, 1 - p1), 0.5),
                    (environment.MatrixTriple.scalar(p2, 1 - p2), 0.5)], seed=seed)


def constant(p, q, r=0., seed=0):
    return environment.EnvironmentSpec(1, support=[(environment.MatrixTriple.scalar(p, q, r), 1.)],
                                       seed=seed)


class TestZeta:

    def setup_method(self, method):
        self.spec = environment.EnvironmentSpec(
            3, generator={'kind': 'dirichlet', 'concentration': 1., 'floor': 0.03}, seed=11)
        self.env = environment.sample_environment(self.spec, (-500, 500))

    def teardown_method(self, method):
        pass

    def test_scalar_zeta_is_one(self):
        env = environment.sample_environment(two_point(0.7, 0.4), (0, 50))
        zeta = spectral.compute_zeta(env, (0, 50))
        np.testing.assert_array_equal(zeta.zeta, 1.)

    def test_zeta_is_stochastic(self):
        zeta = spectral.compute_zeta(self.env, (0, 200))
        assert zeta.zeta.shape == (202, 3, 3)
        np.testing.assert_allclose(zeta.zeta.sum(axis=2), 1., atol=1e-10)
        assert zeta.eps_min > 0

    def test_zeta_residual_and_seeds(self):
        zeta = spectral.compute_zeta(self.env, (0, 200), tol=1e-10)
        assert zeta.residual(self.env) < 1e-8
        assert zeta.discrepancy < 1e-8

    def test_zeta_window_independent(self):
        a = spectral.compute_zeta(self.env, (0, 100))
        b = spectral.compute_zeta(self.env, (50, 150))
        np.testing.assert_allclose(a[75], b[75], atol=1e-9)

    def test_constant_environment(self):
        t = environment.MatrixTriple([[0.3, 0.1], [0.1, 0.2]], [[0.1, 0.1], [0.2, 0.1]],
                                     [[0.2, 0.2], [0.2, 0.2]])
        spec = environment.EnvironmentSpec(2, support=[(t, 1.)])
        env = environment.sample_environment(spec, (0, 10))
        zeta = spectral.compute_zeta(env, (0, 10))
        np.testing.assert_allclose(zeta[5], environment.constant_fixed_point(t), atol=1e-9)

    def test_hitting_law(self):
        y = spectral.hitting_law(self.env, 10)
        np.testing.assert_allclose(y.sum(), 1.)
        props = spectral.propagators(self.env, (10, 20))
        np.testing.assert_allclose(props.y_at(11), y @ props.zeta[10], atol=1e-9)

    @pytest.mark.parametrize('m', [1, 2, 3])
    @pytest.mark.parametrize('seed', range(7))
    def test_zeta_on_random_environments(self, m, seed):
        spec = environment.EnvironmentSpec(
            m, generator={'kind': 'dirichlet', 'concentration': 1., 'floor': 0.05/m}, seed=seed)
        env = environment.sample_environment(spec, (-500, 500))
        zeta = spectral.compute_zeta(env, (0, 100), tol=1e-10)
        if m == 1:
            np.testing.assert_array_equal(zeta.zeta, 1.)
        np.testing.assert_allclose(zeta.zeta.sum(axis=2), 1., atol=1e-10)
        assert zeta.residual(env) < 1e-8
        assert zeta.discrepancy < 1e-8
        shifted = spectral.compute_zeta(env, (40, 140), tol=1e-10)
        np.testing.assert_allclose(zeta[70], shifted[70], atol=1e-8)


class TestPropagators:

    def setup_method(self, method):
        self.env = environment.sample_environment(constant(0.75, 0.25), (0, 100))

    def teardown_method(self, method):
        pass

    def test_scalar_values(self):
        props = spectral.propagators(self.env, (0, 100))
        np.testing.assert_allclose(props.A, 1/3)
        np.testing.assert_allclose(props.U, 4/3)
        np.testing.assert_allclose(props.H(50, 3), [[1/27]])
        np.testing.assert_array_equal(props.H(50, 0), np.eye(1))

    def test_window(self):
        props = spectral.propagators(self.env, (10, 20))
        with pytest.raises(StructuralError):
            props.A_at(21)


class TestLyapunov:

    def setup_method(self, method):
        self.spec = two_point(0.7, 0.4)

    def teardown_method(self, method):
        pass

    def test_exact_lyapunov(self):
        np.testing.assert_allclose(spectral.exact_lyapunov(self.spec), -0.2209, atol=1e-4)

    def test_top_lyapunov_constant(self):
        env = environment.sample_environment(constant(0.75, 0.25), (0, 999))
        lam, se = spectral.top_lyapunov(env, 1000)
        np.testing.assert_allclose(lam, math.log(1/3))
        assert se == pytest.approx(0., abs=1e-12)

    def test_top_lyapunov_sample(self):
        env = environment.sample_environment(self.spec, (0, 10**5 - 1))
        lam, se = spectral.top_lyapunov(env, 10**5)
        assert abs(lam - spectral.exact_lyapunov(self.spec)) < 4*se + 1e-3

    def test_moment_at_zero(self):
        r, ci = spectral.moment_lyapunov(self.spec, 0.)
        assert r == 1.
        r, ci = spectral.moment_lyapunov(self.spec, 0., method='mc', replicas=10)
        assert r == 1.

    def test_moment_exact(self):
        r, _ = spectral.moment_lyapunov(self.spec, 1.)
        np.testing.assert_allclose(r, 0.5*(3/7 + 1.5))

    def test_moment_derivative(self):
        h = 1e-4
        rp, _ = spectral.moment_lyapunov(self.spec, h)
        rm, _ = spectral.moment_lyapunov(self.spec, -h)
        np.testing.assert_allclose((rp - rm)/(2*h), spectral.exact_lyapunov(self.spec), atol=1e-2)

    def test_moment_monte_carlo(self):
        r, ci = spectral.moment_lyapunov(self.spec, 0.5, N=10, replicas=4000, method='mc', seed=5)
        np.testing.assert_allclose(r, spectral.exact_moment(self.spec, 0.5), rtol=1e-2)
        assert ci[0] <= r <= ci[1]

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            spectral.moment_lyapunov(self.spec, 20.)

    def test_replicas_do_not_depend_on_jobs(self):
        spec = environment.EnvironmentSpec(
            2, generator={'kind': 'dirichlet', 'concentration': 1., 'floor': 0.05}, seed=3)
        a = spectral.replica_log_norms(spec, 20, 70, seed=9, jobs=1)
        b = spectral.replica_log_norms(spec, 20, 70, seed=9, jobs=2)
        np.testing.assert_array_equal(a, b)


class TestCriticalExponent:

    def setup_method(self, method):
        pass

    def teardown_method(self, method):
        pass

    def test_two_point(self):
        s = spectral.solve_critical_exponent(two_point(0.7, 0.4))
        np.testing.assert_allclose(s, 1.232, atol=1e-2)

    def test_diffusive(self):
        s = spectral.solve_critical_exponent(two_point(0.8, 0.45))
        np.testing.assert_allclose(s, 3.4325, atol=1e-2)

    def test_zero_speed(self):
        s = spectral.solve_critical_exponent(two_point(0.75, 0.3))
        np.testing.assert_allclose(s, 0.27, atol=1e-2)

    def test_infinite(self):
        assert math.isinf(spectral.solve_critical_exponent(two_point(0.85, 0.6)))

    def test_not_transient_right(self):
        with pytest.raises(RegimeError):
            spectral.solve_critical_exponent(constant(0.5, 0.5))
        with pytest.raises(RegimeError):
            spectral.solve_critical_exponent(two_point(0.3, 0.6))

    def test_root_property(self):
        spec = two_point(0.7, 0.4)
        s = spectral.solve_critical_exponent(spec)
        np.testing.assert_allclose(spectral.exact_moment(spec, s), 1., atol=1e-8)

    @pytest.mark.slow
    def test_monte_carlo_matches_closed_form(self):
        spec = two_point(0.8, 0.45)
        s = spectral.solve_critical_exponent(spec, method='mc', N=5, replicas=20000, seed=1)
        np.testing.assert_allclose(s, 3.45, atol=0.3)


class TestRegime:

    def setup_method(self, method):
        pass

    def teardown_method(self, method):
        pass

    def test_classify(self):
        assert spectral.classify_regime(-0.2, 0.01) == spectral.TRANSIENT_RIGHT
        assert spectral.classify_regime(0.2, 0.01) == spectral.TRANSIENT_LEFT
        assert spectral.classify_regime(0.02, 0.01) == spectral.RECURRENT
        assert spectral.classify_regime(0., 0., exact=True) == spectral.RECURRENT

    def test_describe_two_point(self):
        summary = spectral.describe_spec(two_point(0.7, 0.4))
        assert summary.regime == spectral.TRANSIENT_RIGHT
        np.testing.assert_allclose(summary.s_hat, 1.232, atol=1e-2)
        assert summary.r_curve[0][:2] == (0., 1.)
        assert summary.to_row()['regime'] == 'TransientRight'

    def test_describe_symmetric(self):
        summary = spectral.describe_spec(constant(0.5, 0.5))
        assert summary.regime == spectral.RECURRENT
        assert summary.bp_flag
        assert math.isnan(summary.s_hat)

    def test_describe_infinite(self):
        summary = spectral.describe_spec(two_point(0.85, 0.6))
        assert summary.s_infinite
        assert summary.to_row()['s'] == 'inf'

    def test_bounded_products_fail_for_sinai(self):
        env = environment.sample_environment(two_point(0.6, 0.4), (0, 10**4))
        flag, K = spectral.check_bounded_products(env, 10**4)
        assert not flag
        assert K > 100

    def test_arithmetic_diagnostic(self):
        d = spectral.arithmetic_diagnostic(two_point(0.7, 0.4))
        assert len(d['log_lambdas']) == 2
        assert d['min_gap'] > 0
