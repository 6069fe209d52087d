import json
import os

import pytest
import numpy as np
import yaml
import src.openstrip.environment as environment
import src.openstrip.cli as cli
from src.openstrip.utils import ConfigError, read_csv

LAZY = ('schema_version: 1\nwidth: 1\nseed: 3\n'
        'support:\n  - {weight: 1.0, P: [[0.6]], Q: [[0.1]], R: [[0.3]]}\n')

TWO_POINT = ('schema_version: 1\nwidth: 1\nseed: 42\n'
             'support:\n  - {weight: 0.5, P: [[0.7]], Q: [[0.3]], R: [[0.0]]}\n'
             '  - {weight: 0.5, P: [[0.4]], Q: [[0.6]], R: [[0.0]]}\n')


def write_config(directory, checks, spec=LAZY, **extra):
    (directory / 'env.yaml').write_text(spec)
    config = {'schema_version': 1, 'spec': 'env.yaml', 'seed': 11,
              'output': str(directory / 'results'), 'checks': checks}
    config.update(extra)
    path = directory / 'experiment.yaml'
    path.write_text(yaml.safe_dump(config))
    return str(path)


class TestConfig:

    def setup_method(self, method):
        pass

    def teardown_method(self, method):
        pass

    def test_load(self, tmp_path):
        path = write_config(tmp_path, ['validate', {'id': 'drift', 'label': 'drift_1k', 'n': 1000}])
        config = cli.load_config(path)
        assert config.spec.name == 'env'
        assert config.seed == 11
        assert config.checks[0] == {'id': 'validate', 'label': 'validate', 'negative_control': False,
                                    'params': {}}
        assert config.checks[1]['params'] == {'n': 1000}

    def test_inline_spec(self, tmp_path):
        path = tmp_path / 'inline.yaml'
        path.write_text('schema_version: 1\nspec:\n  width: 1\n  support:\n'
                        '    - {weight: 1.0, P: [[0.6]], Q: [[0.1]], R: [[0.3]]}\n'
                        'checks: [validate]\n')
        assert cli.load_config(str(path)).spec.m == 1

    def test_unknown_key(self, tmp_path):
        path = write_config(tmp_path, ['validate'], colour='blue')
        with pytest.raises(ConfigError):
            cli.load_config(path)

    def test_unknown_check(self, tmp_path):
        path = write_config(tmp_path, ['levy_flight'])
        with pytest.raises(ConfigError):
            cli.load_config(path)

    def test_shipped_configs(self):
        base = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')
        for name in ('diffusive_suite.yaml', 'stable_suite.yaml', 'sinai_suite.yaml'):
            config = cli.load_config(os.path.join(base, name))
            assert config.checks[0]['id'] == 'validate'
            assert all(r.passed for r in config.spec.validate())

    def test_sinai_config(self):
        base = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'configs')
        spec = cli.load_config(os.path.join(base, 'sinai_suite.yaml')).spec
        lambdas = np.sort(environment.support_lambdas(spec))
        np.testing.assert_allclose(lambdas, [3/7, 7/3])
        np.testing.assert_allclose(spec.weights, [0.5, 0.5])

    def test_seed_type(self, tmp_path):
        path = write_config(tmp_path, ['validate'], seed='eleven')
        with pytest.raises(ConfigError):
            cli.load_config(path)


class TestCommands:

    def setup_method(self, method):
        pass

    def teardown_method(self, method):
        pass

    def test_validate(self, tmp_path, capsys):
        (tmp_path / 'lazy.yaml').write_text(LAZY)
        assert cli.main(['validate', str(tmp_path / 'lazy.yaml'), '--json']) == cli.EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out['valid']
        assert out['c2_star'] == [True]

    def test_validate_failure(self, tmp_path, capsys):
        (tmp_path / 'bad.yaml').write_text(LAZY.replace('[[0.6]]', '[[0.005]]').replace('[[0.1]]', '[[0.695]]'))
        assert cli.main(['validate', str(tmp_path / 'bad.yaml'), '--json']) == cli.EXIT_FAIL
        out = json.loads(capsys.readouterr().out)
        assert not out['valid']

    def test_missing_spec(self):
        assert cli.main(['validate']) == cli.EXIT_CONFIG

    def test_describe(self, tmp_path, capsys):
        (tmp_path / 'two_point.yaml').write_text(TWO_POINT)
        assert cli.main(['describe', str(tmp_path / 'two_point.yaml'), '--json']) == cli.EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out['regime'] == 'TransientRight'
        assert abs(float(out['s']) - 1.232) < 1e-2
        assert out['r_curve'][0]['r'] == 1.

    def test_simulate(self, tmp_path, capsys):
        (tmp_path / 'lazy.yaml').write_text(LAZY)
        out_dir = str(tmp_path / 'walks')
        code = cli.main(['simulate', str(tmp_path / 'lazy.yaml'), '--n', '20', '--replicas', '50',
                         '--out', out_dir, '--json'])
        assert code == cli.EXIT_OK
        assert len(read_csv(os.path.join(out_dir, 'walks.csv'))) == 50
        assert os.path.exists(os.path.join(out_dir, 'occupation.csv'))
        out = json.loads(capsys.readouterr().out)
        assert out['capped'] == 0
        assert out['mean_T'] >= 20


class TestRun:

    def setup_method(self, method):
        pass

    def teardown_method(self, method):
        pass

    def test_validate_only(self, tmp_path):
        path = write_config(tmp_path, ['validate'])
        assert cli.main(['check', '--config', path]) == cli.EXIT_OK
        rows = read_csv(str(tmp_path / 'results' / 'ledger.csv'))
        assert len(rows) == 1
        assert rows[0]['check_id'] == 'validate'
        assert rows[0]['pass'] == 'true'
        summary = yaml.safe_load((tmp_path / 'results' / 'summary.yaml').read_text())
        assert summary['passed']
        assert not (tmp_path / 'results' / 'spectral.yaml').exists()

    def test_deterministic_ledger(self, tmp_path):
        checks = ['validate', {'id': 'drift', 'n': 1000},
                  {'id': 'backtracking', 'depths': [0, 1, 2], 'replicas': 2000}]
        path = write_config(tmp_path, checks)
        ledgers = []
        for name in ('first', 'second'):
            out = str(tmp_path / name)
            assert cli.main(['check', '--config', path, '--out', out]) == cli.EXIT_OK
            assert os.path.exists(os.path.join(out, 'spectral.yaml'))
            assert len(os.listdir(os.path.join(out, 'details'))) == 3
            rows = read_csv(os.path.join(out, 'ledger.csv'))
            ledgers.append([{k: v for k, v in r.items() if k != 'wall_time_s'} for r in rows])
        assert ledgers[0] == ledgers[1]
        assert [r['check_id'] for r in ledgers[0]] == ['validate', 'drift', 'backtracking']

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path, ['validate'])
        out = str(tmp_path / 'override')
        assert cli.main(['check', '--config', path, '--out', out, '--seed', '5']) == cli.EXIT_OK
        summary = yaml.safe_load(open(os.path.join(out, 'summary.yaml')).read())
        assert summary['seed'] == 5

    def test_prerequisite(self, tmp_path):
        path = write_config(tmp_path, [{'id': 'quenched_clt', 'n': 100}], spec=TWO_POINT)
        assert cli.main(['check', '--config', path]) == cli.EXIT_CONFIG

    def test_recurrent_check_on_transient_spec(self, tmp_path):
        path = write_config(tmp_path, ['sinai_recurrent'])
        assert cli.main(['check', '--config', path]) == cli.EXIT_CONFIG

    def test_bad_parameters(self, tmp_path):
        path = write_config(tmp_path, [{'id': 'drift', 'horizon': 10}])
        assert cli.main(['check', '--config', path]) == cli.EXIT_CONFIG

    def test_bad_parameter_value(self, tmp_path):
        path = write_config(tmp_path, ['validate', {'id': 'hitting_llt', 'n': 400, 'replicas': 10}])
        assert cli.main(['check', '--config', path]) == cli.EXIT_CONFIG
        summary = yaml.safe_load((tmp_path / 'results' / 'summary.yaml').read_text())
        assert not summary['complete']
        assert not summary['passed']

    @pytest.mark.slow
    def test_heavy_tail_negative_control(self, tmp_path):
        checks = [{'id': 'quenched_clt', 'label': 'quenched_clt_heavy_tail', 'negative_control': True,
                   'n': 100, 'replicas': 1000}]
        path = write_config(tmp_path, checks, spec=TWO_POINT)
        assert cli.main(['check', '--config', path]) == cli.EXIT_OK
        rows = read_csv(str(tmp_path / 'results' / 'ledger.csv'))
        assert rows[0]['check_id'] == 'quenched_clt_heavy_tail'
        assert rows[0]['pass'] == 'false'
        summary = yaml.safe_load((tmp_path / 'results' / 'summary.yaml').read_text())
        assert summary['checks'] == [{'check_id': 'quenched_clt_heavy_tail', 'outcome': 'expected-FAIL'}]
        assert summary['passed']
