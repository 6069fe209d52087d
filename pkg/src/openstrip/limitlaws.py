'''
MODULE: limitlaws.py
@Authors:
    A. Procacci [1]
    [1]: Université Libre de Bruxelles, Aero-Thermo-Mechanics Laboratory, Bruxelles, Belgium
@Contacts:
    alberto.procacci@ulb.be
@Additional notes:
    This code is distributed in the hope that it will be useful, but WITHOUT ANY WARRANTY;
    Please report any bug to: alberto.procacci@ulb.be
'''

import logging
import math

import numpy as np
from scipy.special import ndtr
from scipy.stats import kstest, ks_2samp

from .utils import as_rng, write_csv

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 10000
CHUNK_POINTS = 5*10**6


class StableSpec():
    '''
    Poisson representation t = sum_n Theta_n (Gamma_n - eps_s) of a
    stable law of index s, the Theta_n being the points of a Poisson
    process of intensity s theta^{-s-1} and the Gamma_n standard exponentials.
    Only the points above theta_min are sampled.

    Attributes
    ----------
    s : float
        Index in (0,2) without 1.

    theta_min : float
        Truncation of the intensity.

    n_points : int
        Expected number of points above theta_min.

    eps_s : int
        0 if s < 1, 1 if s > 1.

    '''

    def __init__(self, s, theta_min=None, n_points=DEFAULT_POINTS):
        s = float(s)
        if not 0 < s < 2 or s == 1:
            raise ValueError(f'The index s must lie in (0,2) without 1, got {s}')
        if theta_min is None:
            theta_min = n_points**(-1/s)
        if theta_min <= 0:
            raise ValueError('theta_min must be positive.')
        self.s = s
        self.theta_min = float(theta_min)
        self.n_points = n_points
        self.eps_s = 0 if s < 1 else 1

    @property
    def expected_count(self):
        '''Mean number of points above theta_min, theta_min^{-s}.'''
        return self.theta_min**(-self.s)

    @property
    def small_jump_bias(self):
        '''Upper bound of the mean of the dropped points (s < 1).'''
        if self.s > 1:
            return 0.
        return self.s*self.theta_min**(1 - self.s)/(1 - self.s)

    @property
    def small_jump_variance(self):
        '''Variance of the compensated points below theta_min (s > 1).'''
        if self.s < 1:
            return 0.
        return self.s*self.theta_min**(2 - self.s)/(2 - self.s)

    def __repr__(self):
        return f'StableSpec(s={self.s}, theta_min={self.theta_min:.3g})'


def sample_stable_t(spec, rng=None, size=None):
    '''
    Samples of t. For s < 1 the points below theta_min are dropped; for
    s > 1 they are replaced by a centered Gaussian with their variance.

    Parameters
    ----------
    spec : StableSpec
        The law.

    rng : numpy.random.Generator or int, optional
        Random generator or seed.

    size : int, optional
        Number of samples. The default is a single float.

    Returns
    -------
    t : float or numpy array
        The samples.

    '''
    rng = as_rng(rng)
    n = 1 if size is None else int(size)
    lam = spec.expected_count
    out = np.empty(n)
    per = max(1, int(CHUNK_POINTS // max(lam, 1.)))
    for lo in range(0, n, per):
        counts = rng.poisson(lam, size=min(per, n - lo))
        total = int(counts.sum())
        theta = spec.theta_min*(1. - rng.random(total))**(-1/spec.s)
        gamma = rng.standard_exponential(total)
        owner = np.repeat(np.arange(counts.size), counts)
        out[lo:lo + counts.size] = np.bincount(owner, weights=theta*(gamma - spec.eps_s),
                                               minlength=counts.size)
    if spec.s > 1:
        out += rng.normal(0., math.sqrt(spec.small_jump_variance), size=n)
    return float(out[0]) if size is None else out


class EmpiricalCdf():
    '''
    Empirical distribution function of a sample.

    Methods
    ----------
    __call__(t)
        Fraction of the samples <= t.

    ks_distance(other)
        Kolmogorov-Smirnov distance to another EmpiricalCdf or to a CDF.

    dkw_band(alpha)
        Half-width of the Dvoretzky-Kiefer-Wolfowitz band.

    '''

    def __init__(self, samples):
        samples = np.sort(np.asarray(samples, dtype=float).ravel())
        if samples.size == 0:
            raise ValueError('An empirical CDF needs at least one sample.')
        self.samples = samples
        self.n = samples.size

    def __call__(self, t):
        return np.searchsorted(self.samples, t, side='right')/self.n

    def quantile(self, q):
        return np.quantile(self.samples, q)

    @property
    def median(self):
        return float(np.median(self.samples))

    @property
    def iqr(self):
        q1, q3 = np.quantile(self.samples, [0.25, 0.75])
        return float(q3 - q1)

    def ks_distance(self, other):
        if isinstance(other, EmpiricalCdf):
            return float(ks_2samp(self.samples, other.samples).statistic)
        if callable(other):
            return float(kstest(self.samples, other).statistic)
        raise TypeError('other must be an EmpiricalCdf or a callable CDF.')

    def dkw_band(self, alpha=0.01):
        return math.sqrt(math.log(2/alpha)/(2*self.n))


def empirical_Ls(spec, M, rng=None):
    '''Empirical CDF of M >= 10**4 independent samples of t.'''
    if M < 10**4:
        raise ValueError(f'At least 10**4 samples are needed, got {M}')
    return EmpiricalCdf(sample_stable_t(spec, rng, M))


def normal_cdf(t):
    '''Standard normal CDF.'''
    out = ndtr(t)
    return float(out) if np.ndim(out) == 0 else out


def kesten_sinai_density(t, terms=200, return_error=False):
    '''
    Density (2/pi) sum_k (-1)^k/(2k+1) exp(-(2k+1)^2 pi^2 |t| / 8).

    Parameters
    ----------
    t : float or numpy array
        Evaluation points.

    terms : int, optional
        Number of terms of the alternating series. The default is 200.

    return_error : bool, optional
        Also return the first omitted term, which bounds the truncation
        error for t != 0.

    Returns
    -------
    density : float or numpy array
        The partial sum (the limit 1/2 at t = 0).

    error : float or numpy array
        Truncation bound, only if return_error.

    '''
    if terms < 1:
        raise ValueError('terms must be at least 1.')
    x = np.abs(np.asarray(t, dtype=float))
    c = 2*np.arange(terms) + 1
    signs = np.where(np.arange(terms) % 2 == 0, 1., -1.)
    series = (signs/c*np.exp(-np.multiply.outer(x, c**2)*np.pi**2/8)).sum(axis=-1)
    density = np.where(x == 0, 0.5, 2/np.pi*series)
    error = np.where(x == 0, 0., 2/np.pi/(2*terms + 1)*np.exp(-(2*terms + 1)**2*np.pi**2*x/8))
    if density.ndim == 0:
        density, error = float(density), float(error)
    return (density, error) if return_error else density


def kesten_sinai_cdf(t, terms=50):
    '''
    CDF of the density above:
    1 - (16/pi^3) sum_k (-1)^k (2k+1)^{-3} exp(-(2k+1)^2 pi^2 t / 8) for t >= 0,
    extended by symmetry.
    '''
    t = np.asarray(t, dtype=float)
    x = np.abs(t)
    c = 2*np.arange(terms) + 1
    signs = np.where(np.arange(terms) % 2 == 0, 1., -1.)
    tail = 16/np.pi**3*(signs/c**3*np.exp(-np.multiply.outer(x, c**2)*np.pi**2/8)).sum(axis=-1)
    out = np.where(t >= 0, 1 - tail, tail)
    return float(out) if out.ndim == 0 else out


def conditional_ftheta(theta_points, s, M, rng=None, chunk=10000):
    '''
    Empirical CDF of sum_n Theta_n (Gamma_n - eps_s) with the points Theta
    fixed and the Gamma_n i.i.d. standard exponentials.

    Parameters
    ----------
    theta_points : sequence
        The frozen points.

    s : float
        Index in (0,2) without 1 (fixes eps_s).

    M : int
        Number of samples.

    Returns
    -------
    cdf : EmpiricalCdf
        The conditional CDF; a point mass at 0 when there are no points.

    '''
    eps = StableSpec(s).eps_s
    rng = as_rng(rng)
    theta = np.asarray(theta_points, dtype=float).ravel()
    if theta.size == 0:
        return EmpiricalCdf(np.zeros(M))
    out = np.empty(M)
    for lo in range(0, M, chunk):
        size = min(chunk, M - lo)
        gamma = rng.standard_exponential((size, theta.size))
        out[lo:lo + size] = (gamma - eps) @ theta
    return EmpiricalCdf(out)


def write_cdf_csv(cdf, grid, path):
    '''Two-column CSV (t, F) of a CDF (callable or EmpiricalCdf) on a grid.'''
    values = cdf(np.asarray(grid, dtype=float))
    rows = ({'t': repr(float(t)), 'F': repr(float(F))} for t, F in zip(grid, np.atleast_1d(values)))
    write_csv(path, ['t', 'F'], rows)
