'''
MODULE: utils.py
@Authors:
    A. Procacci [1]
    [1]: Université Libre de Bruxelles, Aero-Thermo-Mechanics Laboratory, Bruxelles, Belgium
@Contacts:
    alberto.procacci@ulb.be
@Additional notes:
    This code is distributed in the hope that it will be useful, but WITHOUT ANY WARRANTY;
    Please report any bug to: alberto.procacci@ulb.be
'''

import csv
import logging
import os

import numpy as np
import yaml
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StripError(Exception):
    '''Root of the errors raised by openstrip.'''


class StructuralError(StripError, ValueError):
    '''Malformed matrices, specs or windows.'''


class ConvergenceError(StripError, RuntimeError):
    '''
    Raised when a recursion does not settle or a product degenerates.

    Attributes
    ----------
    layer : int or None
        Layer index at which the failure was detected.

    '''

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class RegimeError(StripError, ValueError):
    '''An estimator or check was requested outside the regime it needs.'''


class ConfigError(StripError, ValueError):
    '''Invalid configuration file.'''


def zigzag(n):
    '''
    Maps an integer (possibly negative) to a non-negative integer:
    0, -1, 1, -2, 2, ... -> 0, 1, 2, 3, 4, ...
    '''
    n = int(n)
    return 2*n if n >= 0 else -2*n - 1


def make_rng(seed, *key):
    '''
    Return a numpy Generator for the stream named by key.

    The stream only depends on (seed, key), so the same key gives the same
    draws regardless of the order in which the streams are created or of
    the process that creates them.

    Parameters
    ----------
    seed : int
        Master seed (non-negative, up to 64 bits).

    key : int
        Non-negative integers naming the stream (purpose, block, replica...).

    Returns
    -------
    rng : numpy.random.Generator
        Independent generator.

    '''
    if int(seed) < 0:
        raise ValueError('The master seed must be non-negative.')
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def as_rng(rng):
    '''Accepts a Generator, an integer seed or None.'''
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def derive_seed(seed, *key):
    '''Return a 63-bit integer seed for the stream (seed, key).'''
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def row_sum_norm(M):
    '''
    Max-row-sum (operator l-infinity) norm. Works on stacks of matrices,
    the norm being taken over the last two axes.
    '''
    return np.max(np.sum(np.abs(M), axis=-1), axis=-1)


def log_mean_exp(x, axis=None):
    '''Numerically stable log(mean(exp(x))).'''
    x = np.asarray(x, dtype=float)
    n = x.size if axis is None else x.shape[axis]
    return logsumexp(x, axis=axis) - np.log(n)


def batch_stderr(increments, n_batches=None):
    '''
    Standard error of the mean of a correlated sequence by batch means.

    Parameters
    ----------
    increments : numpy array
        The sequence, size (N,).

    n_batches : int, optional
        Number of batches. The default is floor(sqrt(N)).

    Returns
    -------
    stderr : float
        Standard error of the mean of increments.

    '''
    x = np.asarray(increments, dtype=float)
    N = x.size
    if n_batches is None:
        n_batches = int(np.sqrt(N))
    if n_batches < 2:
        return np.nan
    size = N // n_batches
    means = x[:size*n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(means, ddof=1)/np.sqrt(n_batches))


def bootstrap_ci(values, statistic, rng, n_boot=200, level=0.95):
    '''
    Percentile bootstrap confidence interval.

    Parameters
    ----------
    values : numpy array
        The replicas, size (n,).

    statistic : callable
        Function mapping an array of replicas to a float.

    rng : numpy.random.Generator
        Generator used for the resampling.

    n_boot : int, optional
        Number of bootstrap resamples. The default is 200.

    level : float, optional
        Confidence level. The default is 0.95.

    Returns
    -------
    ci : tuple
        Lower and upper bounds.

    '''
    values = np.asarray(values)
    n = values.shape[0]
    stats = np.empty(n_boot)
    for b in range(n_boot):
        stats[b] = statistic(values[rng.integers(0, n, size=n)])
    tail = 50*(1 - level)
    lo, hi = np.percentile(stats, [tail, 100 - tail])
    return float(lo), float(hi)


def check_keys(d, allowed, where, required=()):
    '''
    Rejects unknown keys and missing required keys of a config mapping.
    '''
    if not isinstance(d, dict):
        raise ConfigError(f'{where}: expected a mapping, got {type(d).__name__}')
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f'{where}: unknown key(s) {unknown}')
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f'{where}: missing key(s) {missing}')


def load_yaml(path):
    '''
    Reads a UTF-8 yaml file and checks its schema version.
    '''
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except OSError as err:
        raise ConfigError(f'cannot read {path}: {err}') from err
    except yaml.YAMLError as err:
        raise ConfigError(f'{path}: invalid yaml ({err})') from err

    if not isinstance(data, dict):
        raise ConfigError(f'{path}: the top level must be a mapping')
    version = data.get('schema_version')
    if version != SCHEMA_VERSION:
        raise ConfigError(f'{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}')
    return data


def dump_yaml(data, path):
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(data, f, sort_keys=True)


def write_csv(path, columns, rows, append=False):
    '''
    Writes rows (mappings) with a fixed column order. The header is only
    written when the file is new or empty.
    '''
    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, 'a' if append else 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction='raise')
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path):
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))
