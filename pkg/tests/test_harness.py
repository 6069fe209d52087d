import math
import os
from types import SimpleNamespace

import pytest
import yaml
import src.openstrip.harness as harness
import src.openstrip.environment as environment
import src.openstrip.spectral as spectral
from src.openstrip.utils import ConfigError, RegimeError, read_csv
import numpy as np


def constant(p, q, r=0., seed=0):
    return environment.EnvironmentSpec(1, support=[(environment.MatrixTriple.scalar(p, q, r), 1.)],
                                       seed=seed)


def two_point(p1, p2, seed=42):
    return environment.EnvironmentSpec(
        1, support=[(environment.MatrixTriple.scalar(p1, 1 - p1), 0.5),
                    (environment.MatrixTriple.scalar(p2, 1 - p2), 0.5)], seed=seed)


class TestConstants:

    def setup_method(self, method):
        self.lazy = constant(0.6, 0.1, 0.3)

    def teardown_method(self, method):
        pass

    def test_annealed_speed_closed_form(self):
        a, se, exact = harness.annealed_speed(self.lazy)
        np.testing.assert_allclose(a, 2.)
        assert se == 0.
        assert exact

    def test_annealed_speed_two_point(self):
        a, _, _ = harness.annealed_speed(two_point(0.7, 0.4))
        lam = 0.5*(3/7 + 1.5)
        np.testing.assert_allclose(a, 0.5*(1/0.7 + 1/0.4)/(1 - lam))

    def test_zero_speed(self):
        with pytest.raises(RegimeError):
            harness.annealed_speed(two_point(0.75, 0.3))

    def test_limit_constants(self):
        c = harness.LimitConstants(2., Dbar=math.sqrt(3.6), Dhat=0.)
        assert c.v == 0.5
        np.testing.assert_allclose(c.D, math.sqrt(3.6)*0.5**1.5)
        np.testing.assert_allclose(c.Dbold, c.D)
        assert set(c.to_dict()) == {'a', 'v', 'Dbar', 'D', 'Dbold', 'Dhat', 'a_stderr', 'Dbar_stderr',
                                    'Dhat_stderr'}
        with pytest.raises(ValueError):
            harness.LimitConstants(0.)

    def test_estimate_below_two(self):
        c = harness.estimate_constants(two_point(0.7, 0.4))
        assert c.a == pytest.approx(harness.annealed_speed(two_point(0.7, 0.4))[0])
        assert math.isnan(c.Dbar)
        assert math.isnan(c.Dbold)

    def test_estimate_not_ballistic(self):
        with pytest.raises(RegimeError):
            harness.estimate_constants(two_point(0.75, 0.3), s=0.27)

    def test_estimate_dbar(self):
        env = environment.sample_environment(self.lazy, (-1024, 1023))
        Dbar, se, per_env = harness.estimate_dbar(self.lazy, env, n=200, replicas=2000, seed=1)
        np.testing.assert_allclose(Dbar, math.sqrt(3.6), rtol=0.05)
        assert per_env.shape == (5,)
        assert se >= 0.


class TestReports:

    def setup_method(self, method):
        self.report = harness.CheckReport('drift', 'abc', 1, 10, 0, 0.01, 0.02, True)

    def teardown_method(self, method):
        pass

    def test_outcomes(self):
        assert self.report.outcome == 'PASS'
        self.report.passed = False
        assert self.report.outcome == 'FAIL'
        assert not self.report.ok
        self.report.expected_fail = True
        assert self.report.outcome == 'expected-FAIL'
        assert self.report.ok
        self.report.passed = True
        assert self.report.outcome == 'unexpected-PASS'

    def test_row(self):
        row = self.report.to_row()
        assert list(row) == harness.LEDGER_COLUMNS
        assert row['pass'] == 'true'

    def test_plain_details(self):
        self.report.details = {'x': np.arange(3), 'y': np.float64(0.5)}
        d = self.report.to_dict()
        assert d['details'] == {'x': [0, 1, 2], 'y': 0.5}
        assert yaml.safe_load(yaml.safe_dump(d))['outcome'] == 'PASS'

    def test_ledger_writer(self, tmp_path):
        writer = harness.LedgerWriter(str(tmp_path))
        name = writer.write(self.report)
        writer.write(self.report)
        rows = read_csv(os.path.join(str(tmp_path), 'ledger.csv'))
        assert len(rows) == 2
        assert list(rows[0]) == harness.LEDGER_COLUMNS
        assert name == '001_drift.yaml'
        assert os.path.exists(os.path.join(str(tmp_path), 'details', '002_drift.yaml'))


class TestFunctionals:

    def setup_method(self, method):
        self.lazy = constant(0.6, 0.1, 0.3)
        self.env = environment.sample_environment(self.lazy, (-100, 100))

    def teardown_method(self, method):
        pass

    def test_constant(self):
        phi = harness.EvfpFunctional.constant()
        np.testing.assert_array_equal(phi.evaluate(self.env, [0, 5, -3], [1, 1, 1]), 1.)
        assert phi.evaluate(self.env, [], []).size == 0

    def test_w_vectors(self):
        t = environment.MatrixTriple([[0.4, 0.2], [0.2, 0.3]], [[0.1, 0.05], [0.1, 0.1]],
                                     [[0.1, 0.15], [0.2, 0.1]])
        np.testing.assert_array_equal(harness.EvfpFunctional.rung_indicator(2).w_vector(t), [0., 1.])
        np.testing.assert_allclose(harness.EvfpFunctional.step_up_probability().w_vector(t), [0.6, 0.5])

    def test_bound(self):
        phi = harness.EvfpFunctional(lambda P, Q, R, rung: np.full(rung.size, 2.), bound=1.)
        with pytest.raises(ValueError):
            phi.evaluate(self.env, [0], [1])
        with pytest.raises(ValueError):
            harness.EvfpFunctional(phi.func, M=-1)

    def test_q_formula(self):
        Q, se, visits = harness._q_formula(self.lazy, harness.EvfpFunctional.step_up_probability(), 3,
                                           layers=400)
        np.testing.assert_allclose(Q, 0.6, rtol=1e-10)
        np.testing.assert_allclose(visits, 2., rtol=1e-8)

    def test_evfp_constant(self):
        report = harness.check_evfp(self.env, harness.EvfpFunctional.constant(), N_schedule=(20, 40),
                                    replicas=200, seed=1, q_layers=400)
        assert report.passed
        assert report.statistic == 0.
        assert report.details['Q'] == 1.

    def test_evfp_annealed(self):
        report = harness.check_evfp(self.lazy, harness.EvfpFunctional.constant(), N_schedule=(20,),
                                    replicas=30, seed=2, mode='annealed', q_layers=400)
        assert report.check_id == 'evfp_annealed'
        assert report.passed

    def test_evfp_regime(self):
        env = environment.sample_environment(two_point(0.7, 0.4), (-100, 100))
        with pytest.raises(RegimeError):
            harness.check_evfp(env, harness.EvfpFunctional.constant())
        with pytest.raises(NotImplementedError):
            harness.check_evfp(self.env, harness.EvfpFunctional.constant(), mode='mixed')


class TestChecks:

    def setup_method(self, method):
        self.lazy = constant(0.6, 0.1, 0.3)
        self.env = environment.sample_environment(self.lazy, (-1024, 1023))

    def teardown_method(self, method):
        pass

    def test_drift(self):
        report = harness.check_drift(self.env, n=1000)
        assert report.passed
        assert report.statistic < 1e-6
        assert report.details['b_n'] == 500

    def test_quenched_clt(self):
        report = harness.check_quenched_clt(self.env, n=200, replicas=4000, seed=3, threshold=0.05)
        assert report.passed
        np.testing.assert_allclose(report.details['E_T'], 400., rtol=1e-8)
        np.testing.assert_allclose(report.details['Dbar'], math.sqrt(3.6), rtol=0.1)
        np.testing.assert_allclose(report.details['Dbar_sample'], math.sqrt(3.6), rtol=0.1)

    def test_quenched_clt_wrong_dbar(self):
        report = harness.check_quenched_clt(self.env, n=200, replicas=4000, seed=3, threshold=0.05,
                                            dbar=2*math.sqrt(3.6))
        assert not report.passed
        assert report.statistic > 0.1

    def test_quenched_clt_negative_control(self):
        report = harness.check_quenched_clt(self.env, n=200, replicas=4000, seed=3, threshold=0.05,
                                            variance_scale=4., negative_control=True, s=1.5)
        assert not report.passed
        assert report.outcome == 'expected-FAIL'

    def test_quenched_clt_regime(self):
        with pytest.raises(RegimeError):
            harness.check_quenched_clt(self.env, n=10, replicas=10, s=1.5)

    def test_hitting_llt_replicas(self):
        with pytest.raises(ValueError):
            harness.check_hitting_llt(self.env, n=100, replicas=10)

    @pytest.mark.slow
    def test_hitting_llt(self):
        report = harness.check_hitting_llt(self.env, n=100, replicas=10**5, seed=4)
        assert report.details['span'] == 1
        assert report.passed
        np.testing.assert_allclose(report.details['Dbar'], math.sqrt(3.6), rtol=0.05)

    @pytest.mark.slow
    def test_position_llt_quenched(self):
        report = harness.check_position_llt(self.env, n=400, replicas=2*10**5, seed=7, R_window=1.)
        assert report.details['b_n'] == 200
        assert report.details['window'] == [180, 220]
        assert report.passed

    @pytest.mark.slow
    def test_position_llt_annealed(self):
        report = harness.check_position_llt(self.lazy, n=400, mode='annealed', seed=8, R_window=1.,
                                            n_envs=50, walkers_per_env=2000)
        np.testing.assert_allclose(report.details['center'], 200.)
        np.testing.assert_allclose(report.details['constants']['Dhat'], 0., atol=1e-12)
        assert report.passed

    @pytest.mark.slow
    def test_annealed_stable(self):
        report = harness.check_annealed_stable(two_point(0.7, 0.4), N=500, replicas=3000, seed=9,
                                               threshold=0.2, reference_samples=10**4)
        assert report.details['B'] > 0
        assert 1.2 < report.details['s'] < 1.25
        assert report.passed

    def test_position_llt_needs_c3(self):
        env = environment.sample_environment(constant(0.75, 0.25), (-100, 100))
        with pytest.raises(RegimeError):
            harness.check_position_llt(env, n=10)

    def test_position_llt_mode(self):
        with pytest.raises(NotImplementedError):
            harness.check_position_llt(self.env, n=10, mode='mixed')

    def test_fluctuation_lemma(self):
        report = harness.check_fluctuation_lemma(self.env, n_grid=(100, 400))
        assert max(report.details['statistics']) < 1e-6
        assert report.passed

    def test_fluctuation_trend(self):
        grid = [100, 400, 1600, 6400]
        assert harness._decreasing_trend(grid, [0.5, 0.6, 0.3, 0.2])[0]
        # last below first, but not decreasing along the grid
        passed, slope = harness._decreasing_trend(grid, [0.5, 0.55, 0.6, 0.49])
        assert not passed
        assert slope > 0
        assert not harness._decreasing_trend(grid, [0.5, 0.3, 0.45, 0.6])[0]
        with pytest.raises(ConfigError):
            harness._decreasing_trend([100], [0.5])

    def test_backtracking(self):
        env = environment.sample_environment(constant(0.75, 0.25), (-100, 100))
        report = harness.check_backtracking(env, depths=range(0, 5), replicas=20000, seed=5, sigmas=4.)
        assert report.passed
        np.testing.assert_allclose(report.details['oracle'], (1/3)**np.arange(5))

    def test_sinai_needs_recurrence(self):
        with pytest.raises(RegimeError):
            harness.check_sinai_recurrent(self.lazy, N_schedule=(10, 20), replicas=10)

    def test_sinai_bp_branch(self):
        spec = constant(0.4, 0.4, 0.2)
        report = harness.check_sinai_recurrent(spec, N_schedule=(100, 400), replicas=2000, seed=6,
                                               clt_threshold=0.1, bp_N=1000)
        assert report.details['bp_flag']
        assert report.details['branch'] == 'clt'
        assert report.passed

    def test_stable_needs_heavy_tail(self):
        with pytest.raises(RegimeError):
            harness.check_annealed_stable(self.lazy, N=10, replicas=10)

    def test_validate(self):
        report = harness.validate_spec(self.lazy)
        assert report.passed
        assert report.statistic == 0.
        bad = constant(0.005, 0.995)
        report = harness.validate_spec(bad)
        assert not report.passed
        assert report.details['failures'] == {0: ['c2_entries']}


class TestRegistry:

    def setup_method(self, method):
        self.lazy = constant(0.6, 0.1, 0.3)

    def teardown_method(self, method):
        pass

    def test_unknown_check(self):
        with pytest.raises(ConfigError):
            harness.run_check('levy', self.lazy)

    def test_bad_parameter(self):
        with pytest.raises(ConfigError):
            harness.run_check('drift', self.lazy, {'horizon': 10})

    def test_bad_parameter_value(self):
        with pytest.raises(ConfigError):
            harness.run_check('hitting_llt', self.lazy, {'n': 400, 'replicas': 10})
        with pytest.raises(ConfigError):
            harness.run_check('fluctuation_lemma', self.lazy, {'n_grid': [100]})

    def test_regime_error_is_kept(self):
        with pytest.raises(RegimeError) as info:
            harness.run_check('quenched_clt', self.lazy, {'n': 10, 'replicas': 10}, s=1.5)
        assert not isinstance(info.value, ConfigError)

    def test_unknown_functional(self):
        with pytest.raises(ConfigError):
            harness.run_check('evfp', self.lazy, {'phi': 'energy'})

    def test_label_and_control(self):
        report = harness.run_check('validate', self.lazy, seed=3, label='support', negative_control=True)
        assert report.check_id == 'support'
        assert report.seed == 3
        assert report.outcome == 'unexpected-PASS'

    def test_requirements(self):
        transient = SimpleNamespace(s_hat=1.5, regime=spectral.TRANSIENT_RIGHT)
        assert harness.check_requirement('drift', transient) is None
        assert 'requires s > 2' in harness.check_requirement('quenched_clt', transient)
        assert harness.check_requirement('annealed_stable', transient) is None
        assert harness.check_requirement('sinai_recurrent', transient) is not None
        recurrent = SimpleNamespace(s_hat=math.nan, regime=spectral.RECURRENT)
        assert harness.check_requirement('sinai_recurrent', recurrent) is None
        assert harness.check_requirement('backtracking', recurrent) is not None
        assert harness.check_requirement('validate', recurrent) is None
