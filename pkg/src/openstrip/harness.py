'''
MODULE: harness.py
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
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.stats import ks_2samp, linregress

from .environment import Environment, sample_environment, support_lambdas
from .limitlaws import (EmpiricalCdf, StableSpec, empirical_Ls, kesten_sinai_cdf, normal_cdf)
from .spectral import (RECURRENT, arithmetic_diagnostic, check_bounded_products, classify_spec,
                       moment_lyapunov, propagators, solve_critical_exponent)
from .utils import (ConfigError, RegimeError, StripError, StructuralError, derive_seed, dump_yaml,
                    make_rng, write_csv)
from .walker import (SiteState, backtrack_tail, drift_index, expected_hitting_vector,
                     expected_occupation_row, occupation_rows, run_for_steps, run_to_layer, _cap)

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = ['check_id', 'spec_id', 'seed', 'n', 'replicas', 'statistic', 'threshold', 'pass',
                  'wall_time_s']

DEFAULT_THRESHOLDS = {
    'quenched_clt': 0.02,
    'hitting_llt': 0.1,
    'position_llt_quenched': 0.1,
    'position_llt_annealed': 0.15,
    'annealed_stable': 0.05,
    'evfp_sigmas': 3.,
    'sinai_slope_tol': 0.3,
    'sinai_shape': 0.1,
    'bp_clt': 0.05,
    'bp_K': 100.,
    'drift': 0.02,
    'backtracking_sigmas': 3.,
}


@dataclass
class LimitConstants:
    '''
    Constants of the limit theorems.

    Attributes
    ----------
    a : float
        Expected crossing time E(E_w tau_0).

    v : float
        Speed, stored as 1/a.

    Dbar : float
        Quenched hitting-time diffusion constant.

    D : float
        Position constant Dbar v^{3/2}.

    Dbold : float
        Annealed constant, Dbold^2 = D^2 + Dhat^2.

    Dhat : float
        Limiting standard deviation of b_n/sqrt(n).

    '''
    a: float
    Dbar: float = math.nan
    Dhat: float = math.nan
    a_stderr: float = 0.
    Dbar_stderr: float = math.nan
    Dhat_stderr: float = math.nan
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f'a must be positive, got {self.a}')
        self.v = 1/self.a
        self.D = self.Dbar*self.v**1.5
        self.Dbold = math.sqrt(self.D**2 + self.Dhat**2)

    def to_dict(self):
        keys = ('a', 'v', 'Dbar', 'D', 'Dbold', 'Dhat', 'a_stderr', 'Dbar_stderr', 'Dhat_stderr')
        return {k: float(getattr(self, k)) for k in keys}


@dataclass
class CheckReport:
    '''
    Verdict of one check.

    Attributes
    ----------
    check_id : str
        Name (or configured label) of the check.

    statistic, threshold : float
        KS distance or sup-error, and the value it is compared to.

    passed : bool
        Raw verdict of the check.

    expected_fail : bool
        Negative control: a failure is the expected outcome.

    degraded : bool
        Too many trajectories hit the step budget.

    '''
    check_id: str
    spec_id: str
    seed: int
    n: int
    replicas: int
    statistic: float
    threshold: float
    passed: bool
    expected_fail: bool = False
    degraded: bool = False
    details: dict = field(default_factory=dict)
    wall_time_s: float = 0.

    @property
    def outcome(self):
        if self.expected_fail:
            return 'expected-FAIL' if not self.passed else 'unexpected-PASS'
        return 'PASS' if self.passed else 'FAIL'

    @property
    def ok(self):
        '''Whether the suite counts this report as a success.'''
        return self.expected_fail or self.passed

    def to_row(self):
        return {'check_id': self.check_id, 'spec_id': self.spec_id, 'seed': self.seed, 'n': self.n,
                'replicas': self.replicas, 'statistic': repr(float(self.statistic)),
                'threshold': repr(float(self.threshold)), 'pass': str(bool(self.passed)).lower(),
                'wall_time_s': f'{self.wall_time_s:.3f}'}

    def to_dict(self):
        d = self.to_row()
        d.update({'outcome': self.outcome, 'expected_fail': self.expected_fail,
                  'degraded': self.degraded, 'details': _plain(self.details)})
        return d


def _plain(obj):
    '''Convert numpy scalars and arrays to plain python for yaml.'''
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class EvfpFunctional():
    '''
    Bounded local functional Phi(w, Y) of the environment viewed from the
    particle: it depends on the layers n with |n| <= M and on the rung Y.

    Parameters
    ----------
    func : callable
        func(P, Q, R, rung) with P, Q, R of size (n, 2M+1, m, m) (layers
        -M..M around the particle) and rung of size (n,) (1..m); returns (n,)
        values.

    M : int, optional
        Dependence radius. The default is 0.

    bound : float, optional
        Bound of |Phi|. The default is 1.

    '''

    def __init__(self, func, M=0, bound=1., name='phi'):
        if type(M) is not int or M < 0:
            raise ValueError('M must be a non-negative integer.')
        self.func = func
        self.M = M
        self.bound = float(bound)
        self.name = name

    @classmethod
    def constant(cls, c=1.):
        return cls(lambda P, Q, R, rung: np.full(rung.size, float(c)), 0, abs(c), f'constant({c})')

    @classmethod
    def rung_indicator(cls, y):
        return cls(lambda P, Q, R, rung: (rung == y).astype(float), 0, 1., f'rung=={y}')

    @classmethod
    def step_up_probability(cls):
        '''Probability to step to the layer above from the current site (p_0 for m=1).'''
        def func(P, Q, R, rung):
            rows = P[np.arange(rung.size), 0, rung - 1]
            return rows.sum(axis=1)
        return cls(func, 0, 1., 'step_up')

    def w_vector(self, triple):
        '''w(k) = Phi(w_0 = triple, k) for M = 0.'''
        if self.M != 0:
            raise StructuralError('w-vectors are only defined for M = 0.')
        m = triple.m
        stack = lambda A: np.broadcast_to(A, (m, 1, m, m))
        return self.func(stack(triple.P), stack(triple.Q), stack(triple.R), np.arange(1, m + 1))

    def evaluate(self, env, layers, rungs):
        '''Phi at the given sites of one environment.'''
        layers = np.asarray(layers, dtype=np.int64)
        rungs = np.asarray(rungs, dtype=np.int64)
        if layers.size == 0:
            return np.zeros(0)
        lo, hi = int(layers.min()) - self.M, int(layers.max()) + self.M
        P, Q, R = env.covering(lo, hi).materialize(lo, hi)
        idx = (layers - lo)[:, None] + np.arange(-self.M, self.M + 1) + self.M
        values = np.asarray(self.func(P[idx], Q[idx], R[idx], rungs), dtype=float)
        if not np.isfinite(values).all() or (np.abs(values) > self.bound*(1 + 1e-12)).any():
            raise ValueError(f'{self.name} exceeds its bound {self.bound}')
        return values


def _analytic(env, lo, hi, right=0):
    '''Propagators covering the series left of lo, up to hi + right.'''
    depth = _cap(hi - lo + 1) + 2
    return propagators(env.covering(lo - depth, hi + right + 1), (lo - depth, hi + right + 1))


def _default_env(spec, window=(-1024, 1023)):
    return sample_environment(spec, window)


def _report(check_id, env_or_spec, seed, n, replicas, statistic, threshold, passed, t0, **kw):
    spec = env_or_spec.spec if isinstance(env_or_spec, Environment) else env_or_spec
    return CheckReport(check_id, spec.spec_id(), int(seed), int(n), int(replicas), float(statistic),
                       float(threshold), bool(passed), wall_time_s=time.perf_counter() - t0, **kw)


def annealed_speed(spec, n_envs=5, length=4096, seed=None):
    '''
    a = E(E_w tau_0) and its standard error. Closed form E(1/p)/(1 - E(q/p))
    for m=1 finite supports, else the average of the analytic a_j over
    n_envs windows of fresh environments.

    Returns
    -------
    a, stderr : float
        Estimate and standard error (0 for the closed form).

    exact : bool
        Whether the closed form was used.

    '''
    if spec.m == 1 and spec.is_finite:
        w = spec.weights
        P = np.array([t.P[0, 0] for t, _ in spec.support])
        ratio = support_lambdas(spec)
        mean_ratio = float(np.dot(w, ratio))
        if mean_ratio >= 1:
            raise RegimeError('a is finite only when s > 1')
        return float(np.dot(w, 1/P))/(1 - mean_ratio), 0., True

    seed = spec.seed if seed is None else seed
    means = []
    for j in range(n_envs):
        env = sample_environment(spec.with_seed(derive_seed(seed, 6, j)), (0, length))
        props = _analytic(env, 0, length)
        hitting = expected_hitting_vector(env, props, 0, length)
        means.append(hitting.a_seq.mean())
    means = np.array(means)
    stderr = float(means.std(ddof=1)/math.sqrt(n_envs)) if n_envs > 1 else math.nan
    return float(means.mean()), stderr, False


def _critical_exponent(spec, s):
    return solve_critical_exponent(spec) if s is None else s


def _hitting_horizon(env, start, n, a, right=0):
    '''Expected hitting times from start over enough layers to cover time n.'''
    K = int(math.ceil(1.5*n/a)) + 64
    props = _analytic(env, 0, K, right)
    return expected_hitting_vector(env, props, 0, K, start=start), props


def estimate_dbar(spec, env=None, n=2000, replicas=2000, n_envs=5, seed=None, start=None):
    '''
    Dbar as the square root of the average of Var_w(T_n)/n over at least
    five environments, the walkers drawn from their own stream.

    Parameters
    ----------
    env : Environment, optional
        An environment included among the averaged ones.

    Returns
    -------
    Dbar : float
        The estimate.

    Dbar_se : float
        Its standard error from the spread over the environments.

    per_env : numpy array
        sqrt(Var_w(T_n)/n) for each environment.

    '''
    seed = spec.seed if seed is None else seed
    start = SiteState(0, 1) if start is None else start
    rng = make_rng(seed, 8)
    envs = [] if env is None else [env]
    j = 0
    while len(envs) < max(n_envs, 5):
        envs.append(_default_env(spec.with_seed(derive_seed(seed, 7, j))))
        j += 1
    ratios = []
    for e in envs:
        T = run_to_layer(e, start, n, rng=rng, replicas=replicas, layers=[n], occupation=False).T(n)
        ratios.append(T[T >= 0].var(ddof=1)/n)
    ratios = np.array(ratios)
    Dbar = math.sqrt(ratios.mean())
    Dbar_se = float(ratios.std(ddof=1)/math.sqrt(len(ratios))/(2*Dbar))
    return Dbar, Dbar_se, np.sqrt(ratios)


def estimate_constants(spec, env=None, n=2000, replicas=2000, n_envs=5, dhat_envs=20, seed=None,
                       s=None, start=None, verbose=False):
    '''
    Estimate a, v, Dbar, D, Dbold and Dhat.

    Parameters
    ----------
    spec : EnvironmentSpec
        The law of the environment.

    env : Environment, optional
        An environment included among the ones used for Dbar.

    n : int, optional
        Horizon: layer for the hitting-time variance and time for b_n.

    replicas : int, optional
        Walkers per environment for Var_w(T_n).

    n_envs : int, optional
        Environments averaged for Dbar (at least 5).

    dhat_envs : int, optional
        Environments for the standard deviation of b_n.

    s : float, optional
        Critical exponent, solved from the spec when not given.

    Returns
    -------
    constants : LimitConstants
        The constants; the diffusive ones are nan when s <= 2.

    '''
    log = logger.info if verbose else logger.debug
    seed = spec.seed if seed is None else seed
    s = _critical_exponent(spec, s)
    if s <= 1:
        raise RegimeError(f'estimate_constants requires s > 1 (got s = {s:.4g})')
    start = SiteState(0, 1) if start is None else start
    a, a_se, exact = annealed_speed(spec, seed=seed)
    log('a = %.6g +- %.2g (exact: %s)', a, a_se, exact)
    if s <= 2:
        logger.warning('s = %.4g <= 2: only a and v are defined', s)
        return LimitConstants(a, a_stderr=a_se, details={'s': s})

    Dbar, Dbar_se, per_env = estimate_dbar(spec, env, n, replicas, n_envs, seed, start)
    log('Dbar = %.6g (per-environment spread %.3g)', Dbar, float(per_env.std(ddof=1)))

    bn = []
    for j in range(dhat_envs):
        e = _default_env(spec.with_seed(derive_seed(seed, 10, j)))
        hitting, _ = _hitting_horizon(e, start, n, a)
        bn.append(drift_index(e, hitting, n))
    bn = np.array(bn, dtype=float)
    Dhat = float(bn.std(ddof=1)/math.sqrt(n)) if dhat_envs > 1 else 0.
    Dhat_se = Dhat/math.sqrt(2*(dhat_envs - 1)) if dhat_envs > 1 else math.nan
    details = {'s': s, 'Dbar_per_env': per_env.tolist(), 'b_n_mean_over_n': float(bn.mean()/n)}
    return LimitConstants(a, Dbar, Dhat, a_se, Dbar_se, Dhat_se, details)


def check_drift(env, n=10**6, threshold=DEFAULT_THRESHOLDS['drift'], seed=None, a=None):
    '''|b_n/n - v|/v for one environment, b_n from the expected hitting times.'''
    t0 = time.perf_counter()
    seed = env.spec.seed if seed is None else seed
    a = annealed_speed(env.spec, seed=seed)[0] if a is None else a
    hitting, _ = _hitting_horizon(env, None, n, a)
    bn = drift_index(env, hitting, n)
    stat = abs(bn/n*a - 1)
    return _report('drift', env, seed, n, 0, stat, threshold, stat < threshold, t0,
                   details={'b_n': bn, 'v': 1/a})


def _dbar(env, n, replicas, seed, start):
    return estimate_dbar(env.spec, env, n, min(replicas, 2000), seed=seed, start=start)[0]


def _ks_normal(z):
    return EmpiricalCdf(z).ks_distance(normal_cdf)


def check_quenched_clt(env, n=2000, replicas=10**4, seed=None, threshold=DEFAULT_THRESHOLDS['quenched_clt'],
                       dbar=None, variance_scale=1., start=None, s=None, negative_control=False,
                       cap=10**9):
    '''
    KS distance between (T_n - E_w T_n)/(sqrt(n) Dbar) over quenched
    replicas and the standard normal law; E_w T_n from the expected
    hitting-time series.

    Parameters
    ----------
    env : Environment
        The fixed environment.

    dbar : float, optional
        Dbar. The default is estimate_dbar over this environment and four
        others, with its own walkers.

    variance_scale : float, optional
        Factor applied to the variance of the reference (sanity controls).

    s : float, optional
        Critical exponent; when given, s <= 2 requires negative_control.

    Returns
    -------
    report : CheckReport
        Pass if the KS distance is below threshold.

    '''
    t0 = time.perf_counter()
    seed = env.spec.seed if seed is None else seed
    if s is not None and s <= 2 and not negative_control:
        raise RegimeError(f'the quenched CLT requires s > 2 (got s = {s:.4g})')
    start = SiteState(0, 1) if start is None else start
    props = _analytic(env, start.layer, n)
    ET = expected_hitting_vector(env, props, start.layer, n, start=start).expected_T[-1]
    summary = run_to_layer(env, start, n, cap=cap, rng=make_rng(seed, 11), replicas=replicas,
                           layers=[n], occupation=False)
    T = summary.T(n)
    T = T[T >= 0].astype(float)
    Dbar_sample = T.std(ddof=1)/math.sqrt(n)
    Dbar = _dbar(env, n, replicas, seed, start) if dbar is None else dbar
    ks = _ks_normal((T - ET)/(math.sqrt(n*variance_scale)*Dbar))
    return _report('quenched_clt', env, seed, n, replicas, ks, threshold, ks < threshold, t0,
                   expected_fail=negative_control, degraded=summary.capped_fraction > 1e-3,
                   details={'E_T': ET, 'mean_T': T.mean(), 'Dbar': Dbar, 'Dbar_sample': Dbar_sample,
                            'variance_scale': variance_scale, 'capped': int(summary.capped.sum())})


def check_hitting_llt(env, n=400, replicas=10**6, seed=None, threshold=DEFAULT_THRESHOLDS['hitting_llt'],
                      dbar=None, start=None):
    '''
    Sup over k within 4 Dbar sqrt(n) of E_w T_n of
    |Dbar sqrt(2 pi n) P(T_n = k) - exp(-(k - E_w T_n)^2/(2 Dbar^2 n))|.
    When T_n lives on a sublattice of span d the point masses are multiplied
    by d and compared on the sublattice.

    Parameters
    ----------
    dbar : float, optional
        Dbar. The default is estimate_dbar as in check_quenched_clt.

    Returns
    -------
    report : CheckReport
        Pass if the sup is below threshold plus three bin standard errors.

    '''
    t0 = time.perf_counter()
    seed = env.spec.seed if seed is None else seed
    needed = int(math.ceil(100*math.sqrt(n)/threshold**2))
    if replicas < needed:
        raise ConfigError(f'{replicas} replicas are too few for per-integer bins; use at least {needed}')
    start = SiteState(0, 1) if start is None else start
    props = _analytic(env, start.layer, n)
    ET = expected_hitting_vector(env, props, start.layer, n, start=start).expected_T[-1]
    summary = run_to_layer(env, start, n, rng=make_rng(seed, 12), replicas=replicas, layers=[n],
                           occupation=False)
    T = summary.T(n)
    T = T[T >= 0]
    R = T.size
    Dbar_sample = T.std(ddof=1)/math.sqrt(n)
    Dbar = _dbar(env, n, replicas, seed, start) if dbar is None else dbar

    t_min = int(T.min())
    span = int(np.gcd.reduce(T - t_min)) or 1
    counts = np.bincount(T - t_min)
    half = 4*Dbar*math.sqrt(n)
    ks = np.arange(max(t_min, int(math.ceil(ET - half))), int(math.floor(ET + half)) + 1)
    ks = ks[(ks - t_min) % span == 0]
    p_hat = np.zeros(ks.size)
    inside = ks - t_min < counts.size
    p_hat[inside] = counts[ks[inside] - t_min]/R

    scale = Dbar*math.sqrt(2*math.pi*n)
    kernel = np.exp(-(ks - ET)**2/(2*Dbar**2*n))
    diff = scale*span*p_hat - kernel
    se = scale*span*np.sqrt(p_hat*(1 - p_hat)/R)
    stat = float(np.abs(diff).max())
    allowance = 3*float(se.max())
    return _report('hitting_llt', env, seed, n, R, stat, threshold, stat < threshold + allowance, t0,
                   details={'E_T': ET, 'Dbar': Dbar, 'Dbar_sample': Dbar_sample, 'span': span,
                            'allowance': allowance, 'mass': float(p_hat.sum()), 'kernel_mass': float(span*kernel.sum()/scale),
                            'odd_fraction': float((T % 2).mean())})


def _require_c3(env_or_spec, lo=-64, hi=64):
    if isinstance(env_or_spec, Environment):
        _, _, Rm = env_or_spec.covering(lo, hi).materialize(lo, hi)
        diag = np.diagonal(Rm, axis1=1, axis2=2).min()
    elif env_or_spec.is_finite:
        diag = min(np.diag(t.R).min() for t, _ in env_or_spec.support)
    else:
        _, _, Rm = sample_environment(env_or_spec, (lo, hi)).materialize(lo, hi)
        diag = np.diagonal(Rm, axis1=1, axis2=2).min()
    if not diag > 0:
        raise RegimeError('the position LLT requires condition C3 (positive diagonal of R)')


def _require_r2(spec, r2):
    r2 = moment_lyapunov(spec, 2.)[0] if r2 is None else r2
    if not r2 < 1:
        raise RegimeError(f'the position LLT requires r(2) < 1 (got {r2:.4g})')
    return r2


def _site_counts(layers, rungs, ks, m):
    '''Number of walkers on each site (k, i) for k in the consecutive layers ks.'''
    inside = (layers >= ks[0]) & (layers <= ks[-1])
    flat = (layers[inside] - ks[0])*m + rungs[inside] - 1
    return np.bincount(flat, minlength=ks.size*m).reshape(ks.size, m)


def _window(center, R_window, n):
    if R_window == 0:
        return np.array([int(math.floor(center))])
    half = R_window*math.sqrt(n)
    return np.arange(int(math.ceil(center - half)), int(math.floor(center + half)) + 1)


def check_position_llt(env, n=400, mode='quenched', replicas=10**6, seed=None, R_window=2.,
                       threshold=None, constants=None, spec=None, n_envs=1000, walkers_per_env=1000,
                       start=None, r2=None):
    '''
    Local limit theorem for the position.

    quenched : sqrt(2 pi n) D a / rho_{(k,i)} exp((k - b_n)^2/(2 D^2 n)) P_w(xi_n = (k,i))
        compared to 1 for |k - b_n| <= R sqrt(n).
    annealed : sqrt(2 pi n) Dbold exp((k - n v)^2/(2 Dbold^2 n)) P(X_n = k)
        compared to 1 for |k - n v| <= R sqrt(n), P averaged over environments.

    Parameters
    ----------
    env : Environment or EnvironmentSpec
        The fixed environment (quenched) or the law (annealed; an
        Environment is accepted and its spec used).

    R_window : float, optional
        Window half-width in units of sqrt(n); 0 keeps the center only.

    constants : LimitConstants, optional
        a, D and Dbold. Estimated when not given.

    Returns
    -------
    report : CheckReport
        Pass if the sup of |ratio - 1| is below threshold plus three
        standard errors.

    '''
    t0 = time.perf_counter()
    spec = spec if spec is not None else (env.spec if isinstance(env, Environment) else env)
    seed = spec.seed if seed is None else seed
    start = SiteState(0, 1) if start is None else start
    _require_c3(env)
    r2 = _require_r2(spec, r2)
    rng = make_rng(seed, 15)

    if mode == 'quenched':
        if not isinstance(env, Environment):
            raise TypeError('The quenched mode needs an Environment.')
        threshold = DEFAULT_THRESHOLDS['position_llt_quenched'] if threshold is None else threshold
        if constants is None:
            a = annealed_speed(spec, seed=seed)[0]
            constants = LimitConstants(a, _dbar(env, n, replicas, seed, start))
        a, D = constants.a, constants.D
        hitting, props = _hitting_horizon(env, start, n, a, right=_cap(n))
        bn = drift_index(env, hitting, n)
        ks = _window(bn, R_window, n)
        sample = run_for_steps(env, start, n, rng=rng, replicas=replicas)
        m = env.m
        R = sample.replicas
        counts = _site_counts(sample.layers, sample.rungs, ks, m)
        ratios, ses = [], []
        for j, k in enumerate(ks):
            rho = expected_occupation_row(env, props, int(k), start=start).values
            for i in range(m):
                p_hat = counts[j, i]/R
                factor = math.sqrt(2*math.pi*n)*D*a/rho[i]*math.exp((k - bn)**2/(2*D**2*n))
                ratios.append(factor*p_hat - 1)
                ses.append(factor*math.sqrt(p_hat*(1 - p_hat)/R))
        center = bn
    elif mode == 'annealed':
        threshold = DEFAULT_THRESHOLDS['position_llt_annealed'] if threshold is None else threshold
        if constants is None:
            constants = estimate_constants(spec, n=n, replicas=min(replicas, 2000), seed=seed)
        v, Db = constants.v, constants.Dbold
        envs = [sample_environment(spec.with_seed(derive_seed(seed, 9, j)), (-n, n + 1))
                for j in range(n_envs)]
        sample = run_for_steps(envs, start, n, rng=rng, walkers_per_env=walkers_per_env)
        R = sample.replicas
        center = n*v
        ks = _window(center, R_window, n)
        counts = _site_counts(sample.layers, np.ones_like(sample.layers), ks, 1)[:, 0]
        ratios, ses = [], []
        for j, k in enumerate(ks):
            p_hat = counts[j]/R
            factor = math.sqrt(2*math.pi*n)*Db*math.exp((k - center)**2/(2*Db**2*n))
            ratios.append(factor*p_hat - 1)
            ses.append(factor*math.sqrt(p_hat*(1 - p_hat)/R))
        bn = None
    else:
        raise NotImplementedError(f'The mode {mode!r} is not implemented.')

    ratios, ses = np.array(ratios), np.array(ses)
    stat = float(np.abs(ratios).max())
    allowance = 3*float(ses.max())
    return _report(f'position_llt_{mode}', spec, seed, n, R, stat, threshold,
                   stat < threshold + allowance, t0,
                   details={'center': center, 'b_n': bn, 'window': [int(ks[0]), int(ks[-1])],
                            'allowance': allowance, 'r2': r2, 'constants': constants.to_dict(),
                            'ratios': ratios})


def check_annealed_stable(spec, N=10**4, replicas=10**4, seed=None,
                          threshold=DEFAULT_THRESHOLDS['annealed_stable'], reference_samples=10**5,
                          s=None, match='median', theta_min=None, start=None):
    '''
    Shape of the annealed hitting time in the stable regimes: T_N/(B N^{1/s})
    for s < 1 and (T_N - N/v)/(B N^{1/s}) for 1 < s < 2, against the
    Poisson-representation reference, B being fitted by matching medians
    (or interquartile ranges).

    Returns
    -------
    report : CheckReport
        Pass if the two-sample KS distance is below threshold.

    '''
    t0 = time.perf_counter()
    seed = spec.seed if seed is None else seed
    s = _critical_exponent(spec, s)
    if not s < 2 or s == 1:
        raise RegimeError(f'the stable limit requires s in (0,1) or (1,2) (got s = {s})')
    start = SiteState(0, 1) if start is None else start

    envs = [sample_environment(spec.with_seed(derive_seed(seed, 13, r)), (-64, N + 1))
            for r in range(replicas)]
    summary = run_to_layer(envs, start, N, rng=make_rng(seed, 13), layers=[N], occupation=False)
    T = summary.T(N)
    T = T[T >= 0].astype(float)
    if s > 1:
        v = 1/annealed_speed(spec, seed=seed)[0]
        x = (T - N/v)/N**(1/s)
    else:
        v = math.nan
        x = T/N**(1/s)

    ref = empirical_Ls(StableSpec(s, theta_min), reference_samples, make_rng(seed, 14))
    sample = EmpiricalCdf(x)
    if match == 'median':
        B = sample.median/ref.median
    elif match == 'iqr':
        B = sample.iqr/ref.iqr
    else:
        raise NotImplementedError(f'The matching {match!r} is not implemented.')
    ks = float(ks_2samp(x/B, ref.samples).statistic)
    n1, n2 = x.size, ref.n
    return _report('annealed_stable', spec, seed, N, x.size, ks, threshold, ks < threshold, t0,
                   degraded=summary.capped_fraction > 1e-3,
                   details={'s': s, 'B': B, 'v': v, 'median': sample.median,
                            'critical_95': 1.36*math.sqrt((n1 + n2)/(n1*n2)),
                            'all_positive': bool((x > 0).all()),
                            'diagnostic': arithmetic_diagnostic(spec)})


def _q_formula(spec, phi, seed, layers=10**4, tail_tol=1e-12):
    '''Q(Phi) = E sum_y Phi(w, y) rho_{(0,y)} / E sum_y rho_{(0,y)} over a long fresh environment.'''
    env = sample_environment(spec.with_seed(derive_seed(seed, 17)), (0, layers))
    extra = 512
    while True:
        props = _analytic(env, 0, layers, right=extra)
        rows, tail = occupation_rows(props, 0, layers - 1, tail_tol)
        if tail < tail_tol or extra > 2**16:
            break
        extra *= 2
    m = env.m
    ls = np.repeat(np.arange(layers), m)
    ys = np.tile(np.arange(1, m + 1), layers)
    values = phi.evaluate(env, ls, ys).reshape(layers, m)
    num = (values*rows).sum(axis=1)
    den = rows.sum(axis=1)
    Q = float(num.mean()/den.mean())
    nb = int(math.sqrt(layers))
    size = layers//nb
    batch = num[:nb*size].reshape(nb, size).mean(axis=1)/den[:nb*size].reshape(nb, size).mean(axis=1)
    se = float(batch.std(ddof=1)/math.sqrt(nb))
    return Q, se, float(den.mean())


def check_evfp(env, phi, N_schedule=(10**3, 10**4), replicas=10**4, seed=None, mode='quenched',
               sigmas=DEFAULT_THRESHOLDS['evfp_sigmas'], q_layers=10**4, s=None, start=None):
    '''
    Environment viewed from the particle: E Phi(w^(N), Y_N) by simulation at
    each N of the schedule against Q(Phi) from the expected occupations.

    Parameters
    ----------
    env : Environment or EnvironmentSpec
        The fixed environment (quenched mode) or the law (annealed mode).

    phi : EvfpFunctional
        Bounded local functional.

    mode : str, optional
        'quenched' (s > 2) or 'annealed' (s > 1, fresh environment per walker).

    Returns
    -------
    report : CheckReport
        Pass if |E - Q| <= sigmas combined standard errors at the largest N
        and the gap at the largest N is not above the first gap (or the noise).

    '''
    t0 = time.perf_counter()
    spec = env.spec if isinstance(env, Environment) else env
    seed = spec.seed if seed is None else seed
    if not math.isfinite(phi.bound):
        raise ValueError('unbounded functional')
    start = SiteState(0, 1) if start is None else start
    s = _critical_exponent(spec, s)
    if mode == 'quenched':
        if s <= 2:
            raise RegimeError(f'the quenched EVFP limit requires s > 2 (got s = {s:.4g})')
        if not isinstance(env, Environment):
            raise TypeError('The quenched mode needs an Environment.')
    elif mode == 'annealed':
        if s <= 1:
            raise RegimeError(f'the annealed EVFP limit requires s > 1 (got s = {s:.4g})')
    else:
        raise NotImplementedError(f'The mode {mode!r} is not implemented.')

    Q, Q_se, mean_visits = _q_formula(spec, phi, seed, q_layers)
    rng = make_rng(seed, 18)
    schedule = sorted(N_schedule)
    estimates, gaps, ses = [], [], []
    for N in schedule:
        if mode == 'quenched':
            sample = run_for_steps(env, start, N, rng=rng, replicas=replicas)
            values = phi.evaluate(env, sample.layers, sample.rungs)
        else:
            envs = [sample_environment(spec.with_seed(derive_seed(seed, 19, N, r)), (-64, N + 64))
                    for r in range(replicas)]
            sample = run_for_steps(envs, start, N, rng=rng)
            values = np.concatenate([phi.evaluate(envs[e], sample.layers[sample.env_index == e],
                                                  sample.rungs[sample.env_index == e])
                                     for e in range(len(envs))])
        E = float(values.mean())
        se = float(values.std(ddof=1)/math.sqrt(values.size))
        estimates.append(E)
        ses.append(se)
        gaps.append(abs(E - Q))

    combined = math.sqrt(ses[-1]**2 + Q_se**2)
    consistent = gaps[-1] <= sigmas*combined
    trend = gaps[-1] <= max(gaps[0], sigmas*combined)
    stat = gaps[-1]/combined if combined > 0 else (0. if gaps[-1] == 0 else math.inf)
    return _report(f'evfp_{mode}', spec, seed, schedule[-1], replicas, stat, sigmas,
                   consistent and trend, t0,
                   details={'Q': Q, 'Q_stderr': Q_se, 'a_from_occupation': mean_visits,
                            'schedule': schedule, 'estimates': estimates, 'stderr': ses,
                            'gaps': gaps, 'trend_ok': trend, 'phi': phi.name})


def _kesten_sinai_quartile():
    return brentq(lambda t: kesten_sinai_cdf(t) - 0.75, 0., 10.)


def check_sinai_recurrent(spec, N_schedule=(10**3, 10**4, 10**5, 10**6), replicas=1000, seed=None,
                          slope_tol=DEFAULT_THRESHOLDS['sinai_slope_tol'],
                          shape_threshold=DEFAULT_THRESHOLDS['sinai_shape'],
                          clt_threshold=DEFAULT_THRESHOLDS['bp_clt'], bp_N=10**4,
                          bp_K=DEFAULT_THRESHOLDS['bp_K'], start=None):
    '''
    Recurrent regimes. Without (BP): the slope of log E|X_N| against
    log ln N must be 2 +- slope_tol, and the shape of X_N scaled by its
    interquartile range is compared to the Kesten-Sinai law. With (BP):
    X_N/sqrt(N) is compared to a centered Gaussian with fitted scale.

    Returns
    -------
    report : CheckReport
        Verdict of the branch selected by the (BP) flag.

    '''
    t0 = time.perf_counter()
    seed = spec.seed if seed is None else seed
    regime = classify_spec(spec)
    if regime != RECURRENT:
        raise RegimeError(f'the Sinai check requires a recurrent spec (got {regime})')
    start = SiteState(0, 1) if start is None else start
    bp, K = check_bounded_products(_default_env(spec.with_seed(derive_seed(seed, 20))), bp_N, bp_K)

    schedule = sorted(N_schedule)
    envs = [sample_environment(spec.with_seed(derive_seed(seed, 21, r)), (-64, 64))
            for r in range(replicas)]
    sample = run_for_steps(envs, start, schedule[-1], rng=make_rng(seed, 22), checkpoints=schedule)
    X = {N: sample.history[N] - start.layer for N in schedule}

    details = {'bp_flag': bp, 'K_observed': K, 'schedule': schedule,
               'mean_abs': [float(np.abs(X[N]).mean()) for N in schedule]}
    N = schedule[-1]
    if bp:
        x = X[N]/math.sqrt(N)
        scale = x.std(ddof=1)
        stat = _ks_normal(x/scale)
        details.update({'branch': 'clt', 'scale': scale})
        return _report('sinai_recurrent', spec, seed, N, replicas, stat, clt_threshold,
                       stat < clt_threshold, t0, details=details)

    reg = linregress(np.log(np.log(schedule)), np.log(details['mean_abs']))
    stat = abs(reg.slope - 2)
    x = EmpiricalCdf(X[N].astype(float))
    scale = x.iqr/(2*_kesten_sinai_quartile())
    shape = EmpiricalCdf(x.samples/scale).ks_distance(kesten_sinai_cdf)
    details.update({'branch': 'sinai', 'slope': reg.slope, 'shape_ks': shape,
                    'shape_pass': shape < shape_threshold, 'scale': scale})
    return _report('sinai_recurrent', spec, seed, N, replicas, stat, slope_tol, stat <= slope_tol, t0,
                   details=details)


def _decreasing_trend(grid, stats):
    '''Least-squares slope of log(stats) against log(n); the trend holds if it is negative.'''
    if len(grid) < 2:
        raise ConfigError('the fluctuation check needs at least two values of n')
    logs = np.log(np.maximum(stats, 1e-300))
    slope = float(linregress(np.log(grid), logs).slope)
    return slope < 0 and stats[-1] < stats[0], slope


def check_fluctuation_lemma(env, n_grid=(10**3, 4*10**3, 16*10**3, 10**5), a=None, seed=None):
    '''
    max over |l| <= floor(sqrt(n)) of |E_w(T_{n+l} - T_n) - l a|/sqrt(n)
    on a grid of n, from the expected hitting times.

    Returns
    -------
    report : CheckReport
        Pass if the statistic decreases along the grid: negative log-log
        slope and a last value below the first (or everything vanishes).

    '''
    t0 = time.perf_counter()
    seed = env.spec.seed if seed is None else seed
    grid = sorted(n_grid)
    a = annealed_speed(env.spec, seed=seed)[0] if a is None else a
    L = grid[-1] + int(math.sqrt(grid[-1])) + 1
    props = _analytic(env, 0, L)
    S = expected_hitting_vector(env, props, 0, L).expected_T
    stats = []
    for n in grid:
        h = int(math.sqrt(n))
        l = np.arange(-h, h + 1)
        stats.append(float(np.abs(S[n + l] - S[n] - l*a).max()/math.sqrt(n)))
    homogeneous = max(stats) < 1e-9
    trend, slope = _decreasing_trend(grid, stats)
    passed = homogeneous or trend
    return _report('fluctuation_lemma', env, seed, grid[-1], 0, stats[-1], stats[0], passed, t0,
                   details={'grid': grid, 'statistics': stats, 'a': a, 'slope': slope})


def check_backtracking(env, depths=range(0, 7), replicas=10**5, seed=None,
                       sigmas=DEFAULT_THRESHOLDS['backtracking_sigmas']):
    '''
    Backtracking tails. For a constant m=1 environment the tail at depth d
    is compared to (q/p)^d; otherwise the fitted ln theta must be negative.
    '''
    t0 = time.perf_counter()
    seed = env.spec.seed if seed is None else seed
    bt = backtrack_tail(env, replicas, depths, rng=make_rng(seed, 23))
    details = {'depths': bt.depths, 'tail': bt.tail, 'stderr': bt.stderr, 'theta': bt.theta,
               'C': bt.C}
    spec = env.spec
    if spec.m == 1 and spec.is_finite and len(spec.support) == 1:
        oracle = support_lambdas(spec)[0]**bt.depths
        z = np.abs(bt.tail - oracle)/np.maximum(bt.stderr, 1e-300)
        z[bt.depths == 0] = 0.
        stat = float(z.max())
        details['oracle'] = oracle
        return _report('backtracking', env, seed, int(bt.depths.max()), bt.replicas, stat, sigmas,
                       stat <= sigmas, t0, details=details)
    stat = math.log(bt.theta) if bt.theta > 0 else -math.inf
    return _report('backtracking', env, seed, int(bt.depths.max()), bt.replicas, stat, 0., stat < 0, t0,
                   details=details)


def validate_spec(spec, window=(0, 1023), seed=None):
    '''Validation of the support triples (or of generated layers) as a report.'''
    t0 = time.perf_counter()
    seed = spec.seed if seed is None else seed
    failures = {}
    if spec.is_finite:
        for j, report in enumerate(spec.validate()):
            if not report.passed:
                failures[j] = report.failures()
    else:
        try:
            sample_environment(spec, window).materialize(*window)
        except StructuralError as err:
            failures['generator'] = str(err)
    return _report('validate', spec, seed, len(spec.support) or window[1] - window[0] + 1, 0,
                   len(failures), 0, not failures, t0, details={'failures': failures})


def _env_check(func):
    def run(spec, seed, **params):
        return func(_default_env(spec), seed=seed, **params)
    return run


def _spec_check(func):
    def run(spec, seed, **params):
        return func(spec, seed=seed, **params)
    return run


def _position_llt(spec, seed, mode='quenched', **params):
    target = _default_env(spec) if mode == 'quenched' else spec
    return check_position_llt(target, mode=mode, seed=seed, spec=spec, **params)


def _evfp(spec, seed, phi='constant', mode='quenched', phi_args=(), **params):
    factories = {'constant': EvfpFunctional.constant, 'rung_indicator': EvfpFunctional.rung_indicator,
                 'step_up': EvfpFunctional.step_up_probability}
    if phi not in factories:
        raise ConfigError(f'unknown functional {phi!r}; choose among {sorted(factories)}')
    target = _default_env(spec) if mode == 'quenched' else spec
    return check_evfp(target, factories[phi](*phi_args), mode=mode, seed=seed, **params)


CHECKS = {
    'validate': _spec_check(validate_spec),
    'drift': _env_check(check_drift),
    'quenched_clt': _env_check(check_quenched_clt),
    'hitting_llt': _env_check(check_hitting_llt),
    'position_llt': _position_llt,
    'annealed_stable': _spec_check(check_annealed_stable),
    'evfp': _evfp,
    'sinai_recurrent': _spec_check(check_sinai_recurrent),
    'fluctuation_lemma': _env_check(check_fluctuation_lemma),
    'backtracking': _env_check(check_backtracking),
}

# regime needed by each check: s above the bound, or a recurrent walk
REQUIREMENTS = {
    'drift': ('s', 1.),
    'quenched_clt': ('s', 2.),
    'hitting_llt': ('s', 2.),
    'position_llt': ('s', 2.),
    'annealed_stable': ('s_below', 2.),
    'fluctuation_lemma': ('s', 2.),
    'backtracking': ('transient', None),
    'sinai_recurrent': ('recurrent', None),
}


def check_requirement(check, summary):
    '''Reason why the SpectralSummary rules the check out, or None.'''
    kind, bound = REQUIREMENTS.get(check, (None, None))
    s = summary.s_hat
    if kind == 's' and not (s > bound):
        return f'{check} requires s > {bound:g} (s = {s})'
    if kind == 's_below' and not (s < bound and s != 1):
        return f'{check} requires s < {bound:g} and s != 1 (s = {s})'
    if kind == 'transient' and summary.regime == RECURRENT:
        return f'{check} requires a transient walk'
    if kind == 'recurrent' and summary.regime != RECURRENT:
        return f'{check} requires a recurrent walk (regime {summary.regime})'
    return None


def run_check(check, spec, params=None, seed=0, label=None, negative_control=False, s=None):
    '''
    Run a registered check.

    Parameters
    ----------
    check : str
        Key of CHECKS.

    spec : EnvironmentSpec
        The environment law; quenched checks use the environment of spec.seed.

    params : dict, optional
        Keyword parameters of the check.

    seed : int, optional
        Seed of the Monte Carlo streams of the check.

    label : str, optional
        check_id written in the ledger. The default is the check name.

    negative_control : bool, optional
        Marks a failure as the expected outcome.

    s : float, optional
        Critical exponent forwarded to the checks that accept it.

    Returns
    -------
    report : CheckReport
        The report.

    '''
    if check not in CHECKS:
        raise ConfigError(f'unknown check {check!r}; choose among {sorted(CHECKS)}')
    params = dict(params or {})
    if check in ('annealed_stable', 'evfp') and s is not None:
        params.setdefault('s', s)
    if check == 'quenched_clt':
        params.setdefault('negative_control', negative_control)
        if s is not None:
            params.setdefault('s', s)
    t0 = time.perf_counter()
    try:
        report = CHECKS[check](spec, seed, **params)
    except StripError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f'{check}: invalid parameters ({err})') from err
    report.check_id = label or report.check_id
    report.expected_fail = negative_control
    report.wall_time_s = time.perf_counter() - t0
    logger.info('%s: statistic %.4g (threshold %.4g) %s', report.check_id, report.statistic,
                report.threshold, report.outcome)
    return report


class LedgerWriter():
    '''
    Single writer of the CSV ledger and of the yaml detail files.

    Parameters
    ----------
    out_dir : str
        Output directory, created when missing.

    '''

    def __init__(self, out_dir):
        self.out_dir = out_dir
        os.makedirs(os.path.join(out_dir, 'details'), exist_ok=True)
        self.path = os.path.join(out_dir, 'ledger.csv')
        write_csv(self.path, LEDGER_COLUMNS, [])
        self.count = 0

    def write(self, report):
        write_csv(self.path, LEDGER_COLUMNS, [report.to_row()], append=True)
        self.count += 1
        name = f'{self.count:03d}_{report.check_id}.yaml'
        dump_yaml(report.to_dict(), os.path.join(self.out_dir, 'details', name))
        return name
