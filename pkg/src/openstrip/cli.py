'''
MODULE: cli.py
@Authors:
    A. Procacci [1]
    [1]: Université Libre de Bruxelles, Aero-Thermo-Mechanics Laboratory, Bruxelles, Belgium
@Contacts:
    alberto.procacci@ulb.be
@Additional notes:
    This code is distributed in the hope that it will be useful, but WITHOUT ANY WARRANTY;
    Please report any bug to: alberto.procacci@ulb.be
'''

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .environment import EnvironmentSpec, load_spec, sample_environment
from .harness import CHECKS, CheckReport, LedgerWriter, check_requirement, run_check
from .spectral import describe_spec
from .utils import (ConfigError, StripError, StructuralError, check_keys, derive_seed, dump_yaml,
                    load_yaml)
from .walker import SiteState, run_to_layer, write_occupation_csv, write_walk_csv

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CONFIG_KEYS = ('schema_version', 'spec', 'seed', 'output', 'jobs', 'checks', 'describe')
CHECK_KEYS = ('id', 'label', 'negative_control')


@dataclass
class ExperimentConfig:
    '''
    Parsed experiment configuration.

    Attributes
    ----------
    spec : EnvironmentSpec
        The environment law.

    checks : list
        Mappings with the check id, label, negative_control flag and the
        keyword parameters of the check.

    seed : int
        Master seed of the check streams.

    output : str
        Output directory.

    jobs : int
        Number of worker processes.

    describe : dict
        Keyword parameters of describe_spec.

    '''
    spec: EnvironmentSpec
    checks: list
    seed: int = 0
    output: str = 'results'
    jobs: int = 1
    describe: dict = field(default_factory=dict)


def _resolve_spec(value, base):
    if isinstance(value, str):
        return load_spec(os.path.join(base, value))
    if isinstance(value, dict):
        try:
            return EnvironmentSpec.from_dict(value, where='spec')
        except StructuralError as err:
            raise ConfigError(f'spec: {err}') from err
    raise ConfigError('spec must be a path or a mapping')


def load_config(path):
    '''
    Reads an experiment configuration.

    Parameters
    ----------
    path : str
        Path of the yaml file.

    Returns
    -------
    config : ExperimentConfig
        The configuration, with the spec loaded.

    '''
    data = load_yaml(path)
    check_keys(data, CONFIG_KEYS, path, required=('spec', 'checks'))
    spec = _resolve_spec(data['spec'], os.path.dirname(os.path.abspath(path)))

    checks = []
    for j, entry in enumerate(data['checks'] or []):
        where = f'{path}:checks[{j}]'
        if isinstance(entry, str):
            entry = {'id': entry}
        if not isinstance(entry, dict) or 'id' not in entry:
            raise ConfigError(f'{where}: a check needs an id')
        if entry['id'] not in CHECKS:
            raise ConfigError(f'{where}: unknown check {entry["id"]!r}; choose among {sorted(CHECKS)}')
        params = {k: v for k, v in entry.items() if k not in CHECK_KEYS}
        checks.append({'id': entry['id'], 'label': entry.get('label', entry['id']),
                       'negative_control': bool(entry.get('negative_control', False)),
                       'params': params})

    for key in ('seed', 'jobs'):
        if key in data and type(data[key]) is not int:
            raise ConfigError(f'{path}: {key} must be an integer')
    describe = data.get('describe', {})
    check_keys(describe, ('N', 'r_N', 'replicas', 'bp_N', 'bp_K', 'alpha_grid'), f'{path}:describe')
    return ExperimentConfig(spec, checks, data.get('seed', 0), data.get('output', 'results'),
                            data.get('jobs', 1), describe)


def _run_one(job):
    check, spec, params, seed, label, negative_control, s = job
    try:
        return run_check(check, spec, params, seed, label, negative_control, s)
    except ConfigError:
        raise
    except StripError as err:
        logger.error('%s: %s', label, err)
        return CheckReport(label, spec.spec_id(), seed, int(params.get('n', 0)), 0, math.nan,
                           math.nan, False, negative_control, details={'error': str(err)})


def run(config, out=None, seed=None, jobs=None):
    '''
    Run the checks of an experiment: validation, spectral description,
    then the requested checks, written in configuration order.

    Returns
    -------
    code : int
        0 if every check that is not a negative control passed, 1 otherwise.

    '''
    out = config.output if out is None else out
    seed = config.seed if seed is None else seed
    jobs = config.jobs if jobs is None else jobs
    spec = config.spec
    writer = LedgerWriter(out)

    failures = [r for r in spec.validate() if not r.passed]
    if failures:
        raise ConfigError(f'{spec.name}: invalid support ({[r.failures() for r in failures]})')

    summary = None
    if any(c['id'] != 'validate' for c in config.checks):
        summary = describe_spec(spec, seed=seed, jobs=jobs, **config.describe)
        dump_yaml(summary.to_dict(), os.path.join(out, 'spectral.yaml'))
        logger.info('spectral summary: %s', summary.to_row())
        for c in config.checks:
            reason = check_requirement(c['id'], summary)
            if reason is not None and not c['negative_control']:
                raise ConfigError(f'{c["label"]}: {reason}')

    s = None if summary is None or math.isnan(summary.s_hat) else summary.s_hat
    jobs_list = [(c['id'], spec, c['params'], derive_seed(seed, 20, j), c['label'],
                  c['negative_control'], s) for j, c in enumerate(config.checks)]

    reports = []
    try:
        if jobs > 1 and len(jobs_list) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for report in pool.map(_run_one, jobs_list):
                    writer.write(report)
                    reports.append(report)
        else:
            for job in jobs_list:
                report = _run_one(job)
                writer.write(report)
                reports.append(report)
    finally:
        outcome = {'spec': spec.name, 'spec_id': spec.spec_id(), 'seed': seed,
                   'checks': [{'check_id': r.check_id, 'outcome': r.outcome} for r in reports],
                   'complete': len(reports) == len(jobs_list),
                   'passed': len(reports) == len(jobs_list) and all(r.ok for r in reports)}
        dump_yaml(outcome, os.path.join(out, 'summary.yaml'))

    for r in reports:
        logger.info('%-24s %s', r.check_id, r.outcome)
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def _emit(data, as_json):
    if as_json:
        print(json.dumps(data, sort_keys=True, default=str))
    else:
        for key, value in data.items():
            print(f'{key}: {value}')


def _spec_from_args(args):
    if args.spec is not None:
        return load_spec(args.spec)
    if args.config is not None:
        return load_config(args.config).spec
    raise ConfigError('give a spec file or --config')


def _cmd_validate(args):
    spec = _spec_from_args(args)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    reports = spec.validate()
    if not spec.is_finite:
        sample_environment(spec, (0, 1023))
    failures = {j: r.failures() for j, r in enumerate(reports) if not r.passed}
    _emit({'spec': spec.name, 'spec_id': spec.spec_id(), 'valid': not failures,
           'c2_star': [r.c2_star for r in reports], 'failures': failures}, args.json)
    return EXIT_OK if not failures else EXIT_FAIL


def _cmd_describe(args):
    spec = _spec_from_args(args)
    summary = describe_spec(spec, seed=args.seed, jobs=args.jobs, verbose=not args.json)
    if args.json:
        print(json.dumps(summary.to_dict(), sort_keys=True, default=str))
    else:
        row = summary.to_row()
        print(f'lambda: {row["lambda"]} +- {row["stderr"]}')
        for alpha, r, ci in summary.r_curve:
            print(f'r({alpha:g}) = {r:.6g}  [{ci[0]:.6g}, {ci[1]:.6g}]')
        print(f's: {row["s"]}')
        print(f'regime: {row["regime"]}')
        print(f'bp: {row["bp"]} (K = {row["K"]})')
    return EXIT_OK


def _cmd_simulate(args):
    spec = _spec_from_args(args)
    seed = spec.seed if args.seed is None else args.seed
    env = sample_environment(spec, (-1024, args.n + 1))
    start = 'y0' if args.start == 'y0' else SiteState(0, int(args.start))
    summary = run_to_layer(env, start, args.n, cap=args.cap, rng=derive_seed(seed, 30),
                           replicas=args.replicas, layers=[args.n])
    os.makedirs(args.out, exist_ok=True)
    write_walk_csv(summary, os.path.join(args.out, 'walks.csv'))
    write_occupation_csv(summary, os.path.join(args.out, 'occupation.csv'))
    T = summary.T(args.n)
    T = T[T >= 0]
    _emit({'spec_id': spec.spec_id(), 'n': args.n, 'replicas': summary.replicas,
           'mean_T': float(T.mean()) if T.size else math.nan,
           'capped': int(summary.capped.sum()),
           'max_backtrack': int(np.max(summary.max_backtrack))}, args.json)
    return EXIT_OK


def _cmd_check(args):
    if args.config is None:
        raise ConfigError('check needs --config')
    config = load_config(args.config)
    return run(config, args.out, args.seed, args.jobs)


def build_parser():
    parser = argparse.ArgumentParser(prog='openstrip',
                                     description='Random walks on a strip in a random environment')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='experiment configuration (yaml)')
    common.add_argument('--seed', type=int, default=None, help='master seed override')
    common.add_argument('--out', type=str, default=None, help='output directory override')
    common.add_argument('--jobs', type=int, default=None, help='worker processes')
    common.add_argument('--json', action='store_true', help='machine-readable output on stdout')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    sub = parser.add_subparsers(dest='command', required=True)
    for name, helptext in (('validate', 'validate an environment spec'),
                           ('describe', 'print the spectral summary of a spec')):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument('spec', nargs='?', default=None, help='environment spec (yaml)')

    p = sub.add_parser('simulate', parents=[common], help='simulate walkers until a layer')
    p.add_argument('spec', nargs='?', default=None, help='environment spec (yaml)')
    p.add_argument('--n', type=int, default=200, help='target layer')
    p.add_argument('--replicas', type=int, default=1000, help='number of walkers')
    p.add_argument('--cap', type=int, default=10**9, help='step budget per walker')
    p.add_argument('--start', type=str, default='1', help="start rung on layer 0, or 'y0'")

    sub.add_parser('check', parents=[common], help='run the checks of a configuration')
    return parser


COMMANDS = {'validate': _cmd_validate, 'describe': _cmd_describe, 'simulate': _cmd_simulate,
            'check': _cmd_check}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    if args.command == 'simulate' and args.out is None:
        args.out = 'results'
    if args.jobs is None:
        args.jobs = 1 if args.command != 'check' else None
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, StructuralError) as err:
        logger.error('%s', err)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
