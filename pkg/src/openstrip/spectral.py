'''
MODULE: spectral.py
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
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .environment import sample_environment, support_lambdas
from .utils import (ConvergenceError, RegimeError, StructuralError, batch_stderr, bootstrap_ci,
                    derive_seed, log_mean_exp, make_rng, row_sum_norm)

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
BURN_IN = 64
MAX_BURN_IN = 2**16
MOLLIFIER = 1e-3
ALPHA_RANGE = (-1., 16.)
PROBE_ALPHAS = (1., 2., 4., 8.)
R_GRID = (0., 0.5, 1., 2., 4.)
CHUNK = 64

RECURRENT = 'Recurrent'
TRANSIENT_RIGHT = 'TransientRight'
TRANSIENT_LEFT = 'TransientLeft'


class ZetaSequence():
    '''
    The stochastic matrices zeta_n on a window [n0, n1], stored from n0-1 on
    (the propagators of layer n0 need zeta_{n0-1}).

    Attributes
    ----------
    window : tuple
        The window (n0, n1).

    zeta : numpy array
        Matrices of size (n1-n0+2, m, m), zeta[j] being zeta_{n0-1+j}.

    burn_in : int
        Number of layers consumed left of n0.

    tol : float
        Convergence tolerance.

    discrepancy : float
        Largest entrywise difference between the two seeds on the window.

    eps_min : float
        Smallest entry of the zeta_n.

    '''

    def __init__(self, window, zeta, burn_in, tol, discrepancy):
        self.window = window
        self.lo = window[0] - 1
        self.zeta = zeta
        self.m = zeta.shape[1]
        self.burn_in = burn_in
        self.tol = tol
        self.discrepancy = discrepancy
        self.eps_min = float(zeta.min())

    def __getitem__(self, n):
        if not self.lo <= n <= self.window[1]:
            raise StructuralError(f'zeta_{n} is outside [{self.lo}, {self.window[1]}]')
        return self.zeta[n - self.lo]

    def __len__(self):
        return self.zeta.shape[0]

    def residual(self, env):
        '''Largest defining-equation residual over the window.'''
        n0, n1 = self.window
        P, Q, R = env.covering(n0, n1).materialize(n0, n1)
        M = np.eye(self.m) - Q @ self.zeta[:-1] - R
        return float(np.max(np.abs(self.zeta[1:] - np.linalg.solve(M, P))))


def _seed_matrices(m):
    uniform = np.full((m, m), 1/m)
    identity = (1 - MOLLIFIER)*np.eye(m) + MOLLIFIER/m
    return np.stack([uniform, identity])


def compute_zeta(env, window, tol=DEFAULT_TOL, burn_in=BURN_IN, max_burn_in=MAX_BURN_IN):
    '''
    Compute zeta_n on the window by iterating the psi recursion from two
    extreme seeds placed burn_in layers to the left; the burn-in is doubled
    until the two sequences agree within tol.

    Parameters
    ----------
    env : Environment
        The environment. It is extended to the left when needed.

    window : tuple
        The window (n0, n1).

    tol : float, optional
        Entrywise tolerance. The default is 1e-10.

    burn_in : int, optional
        Initial burn-in. The default is 64.

    max_burn_in : int, optional
        Largest burn-in tried. The default is 2**16.

    Returns
    -------
    zeta : ZetaSequence
        The sequence on [n0-1, n1].

    '''
    n0, n1 = int(window[0]), int(window[1])
    if n0 > n1:
        raise StructuralError(f'Empty window [{n0}, {n1}]')
    m = env.m
    if m == 1:
        return ZetaSequence((n0, n1), np.ones((n1 - n0 + 2, 1, 1)), 0, tol, 0.)

    I = np.eye(m)
    B = burn_in
    while True:
        start = n0 - 1 - B
        P, Q, R = env.covering(start + 1, n1).materialize(start + 1, n1)
        psi = _seed_matrices(m)
        out = np.empty((n1 - n0 + 2, 2, m, m))
        for j in range(P.shape[0]):
            try:
                psi = np.linalg.solve(I - R[j] - Q[j] @ psi, np.broadcast_to(P[j], psi.shape))
            except np.linalg.LinAlgError as err:
                raise ConvergenceError(f'I - Q zeta - R is singular at layer {start + 1 + j}',
                                       layer=start + 1 + j) from err
            if j >= B - 1:
                out[j - B + 1] = psi

        gap = np.max(np.abs(out[:, 0] - out[:, 1]), axis=(1, 2))
        logger.debug('zeta burn-in %d: discrepancy %.3e', B, gap.max())
        if gap.max() < tol:
            break
        if 2*B > max_burn_in:
            layer = n0 - 1 + int(np.argmax(gap))
            raise ConvergenceError(f'zeta did not converge within a burn-in of {B} layers '
                                   f'(worst layer {layer}); the environment may violate C2*',
                                   layer=layer)
        B *= 2

    return ZetaSequence((n0, n1), out[:, 0].copy(), B, tol, float(gap.max()))


def _walk_matrices(env, zeta):
    '''A_n and U_n on the window of zeta, by one batched solve.'''
    n0, n1 = zeta.window
    P, Q, R = env.covering(n0, n1).materialize(n0, n1)
    m = zeta.m
    M = np.eye(m) - Q @ zeta.zeta[:-1] - R
    try:
        X = np.linalg.solve(M, np.concatenate([Q, np.broadcast_to(np.eye(m), Q.shape)], axis=2))
    except np.linalg.LinAlgError as err:
        raise ConvergenceError('I - Q zeta - R is singular on the window') from err
    return X[..., :m], X[..., m:]


def hitting_law(env, n, tol=DEFAULT_TOL, burn_in=BURN_IN, max_burn_in=MAX_BURN_IN):
    '''
    Law y_n of the rung at which a walk started at minus infinity first
    hits layer n, obtained from y_{k+1} = y_k zeta_k.
    '''
    m = env.m
    if m == 1:
        return np.ones(1)
    B = burn_in
    while True:
        zeta = compute_zeta(env, (n - B, n - 1), tol)
        y = np.stack([np.full(m, 1/m), np.eye(m)[0]])
        for k in range(n - B, n):
            y = y @ zeta[k]
        gap = float(np.max(np.abs(y[0] - y[1])))
        if gap < tol:
            return y[0]/y[0].sum()
        if 2*B > max_burn_in:
            raise ConvergenceError(f'The hitting law of layer {n} did not converge', layer=n)
        B *= 2


class PropagatorSet():
    '''
    Propagators on the window [n0, n1]:
    U_n = (I - Q_n zeta_{n-1} - R_n)^{-1}, A_n = U_n Q_n and the hitting law y_n.

    Attributes
    ----------
    window : tuple
        The window (n0, n1).

    A, U : numpy array
        Arrays of size (n1-n0+1, m, m).

    y : numpy array
        Hitting laws, size (n1-n0+1, m).

    zeta : ZetaSequence
        The zeta sequence the propagators were built from.

    Methods
    ----------
    H(j, i)
        The product A_j ... A_{j-i+1}.

    '''

    def __init__(self, window, A, U, y, zeta):
        self.window = window
        self.lo = window[0]
        self.A, self.U, self.y = A, U, y
        self.zeta = zeta
        self.m = A.shape[1]

    def _index(self, n):
        if not self.window[0] <= n <= self.window[1]:
            raise StructuralError(f'Layer {n} outside the propagator window {list(self.window)}')
        return n - self.lo

    def A_at(self, n):
        return self.A[self._index(n)]

    def U_at(self, n):
        return self.U[self._index(n)]

    def y_at(self, n):
        return self.y[self._index(n)]

    def H(self, j, i):
        if i == 0:
            return np.eye(self.m)
        self._index(j - i + 1)
        out = self.A_at(j)
        for k in range(j - 1, j - i, -1):
            out = out @ self.A_at(k)
        return out

    def __len__(self):
        return self.A.shape[0]


def compute_propagators(env, zeta, tol=None):
    '''
    Compute A_n, U_n and y_n on the window of zeta.

    Parameters
    ----------
    env : Environment
        The environment.

    zeta : ZetaSequence
        The zeta sequence (covering the window plus one layer left).

    tol : float, optional
        Tolerance of the hitting law burn-in. The default is zeta.tol.

    Returns
    -------
    props : PropagatorSet
        The propagators.

    '''
    tol = zeta.tol if tol is None else tol
    n0, n1 = zeta.window
    A, U = _walk_matrices(env, zeta)
    if (A < 0).any() or (U < -1e-14).any():
        raise ConvergenceError('Negative propagator entries: the environment violates C2*')

    y = np.empty((n1 - n0 + 1, zeta.m))
    y[0] = hitting_law(env, n0, tol)
    for n in range(n0, n1):
        y[n - n0 + 1] = y[n - n0] @ zeta[n]
    return PropagatorSet((n0, n1), A, U, y, zeta)


def propagators(env, window, tol=DEFAULT_TOL):
    '''Shortcut for compute_propagators(env, compute_zeta(env, window)).'''
    return compute_propagators(env, compute_zeta(env, window, tol), tol)


def log_norm_increments(A):
    '''
    Increments g_n of ln||A_n ... A_0||, accumulated with the running product
    renormalized at each step.

    Parameters
    ----------
    A : numpy array
        Matrices of size (N, m, m) in the order A_0, ..., A_{N-1}.

    Returns
    -------
    g : numpy array
        Size (N,); the cumulative sum is ln||A_n ... A_0||.

    '''
    N, m, _ = A.shape
    if m == 1:
        a = A[:, 0, 0]
        if (a <= 0).any():
            raise ConvergenceError('Zero matrix product', layer=int(np.argmax(a <= 0)))
        return np.log(a)

    g = np.empty(N)
    M = np.eye(m)
    for n in range(N):
        M = A[n] @ M
        s = row_sum_norm(M)
        if not s > 0 or not np.isfinite(s):
            raise ConvergenceError('Zero matrix product', layer=n)
        g[n] = math.log(s)
        M = M/s
    return g


def top_lyapunov(env, N, tol=DEFAULT_TOL):
    '''
    Estimate the top Lyapunov exponent as (1/N) ln||A_{N-1} ... A_0||.

    Returns
    -------
    lambda_hat : float
        The estimate.

    stderr : float
        Standard error by batch means over floor(sqrt(N)) blocks.

    '''
    if N < 1:
        raise ValueError('N must be positive.')
    zeta = compute_zeta(env, (0, N - 1), tol)
    A, _ = _walk_matrices(env, zeta)
    g = log_norm_increments(A)
    stderr = batch_stderr(g) if N >= 4 else np.nan
    return float(g.sum()/N), float(stderr)


def check_bounded_products(env, N, K=100., tol=DEFAULT_TOL):
    '''
    Heuristic check of condition (BP): the products A_n ... A_0 stay within
    [1/K, K] for every n <= N and for every n <= N/2.

    Returns
    -------
    bp_flag : bool
        Whether the observed range stays within K at N/2 and N.

    K_observed : float
        exp(max_n |ln||A_n ... A_0|||) over n <= N.

    '''
    zeta = compute_zeta(env, (0, N), tol)
    A, _ = _walk_matrices(env, zeta)
    ell = np.cumsum(log_norm_increments(A))
    spread = np.maximum.accumulate(np.abs(ell))
    log_K = math.log(K)
    flag = bool(spread[-1] <= log_K and spread[len(spread)//2] <= log_K)
    with np.errstate(over='ignore'):
        K_observed = float(np.exp(spread[-1]))
    return flag, K_observed


def _scalar_support(spec):
    '''(ratios q/p, weights) for m=1 finite-support specs, else None.'''
    if spec.m != 1 or not spec.is_finite:
        return None
    return support_lambdas(spec), spec.weights


def exact_lyapunov(spec):
    ratios, w = _scalar_support(spec)
    return float(np.dot(w, np.log(ratios)))


def exact_moment(spec, alpha):
    ratios, w = _scalar_support(spec)
    return float(np.dot(w, ratios**alpha))


def _log_norm_chunk(spec, N, seed, indices, tol):
    out = np.empty(len(indices))
    for j, r in enumerate(indices):
        env = sample_environment(spec.with_seed(derive_seed(seed, 2, r)), (1, N))
        zeta = compute_zeta(env, (1, N), tol)
        A, _ = _walk_matrices(env, zeta)
        out[j] = log_norm_increments(A).sum()
    return out


def replica_log_norms(spec, N, replicas, seed=None, jobs=1, tol=DEFAULT_TOL):
    '''
    ln||A_N ... A_1|| over independent environment replicas. Replica r uses
    the stream (seed, 2, r), so the result does not depend on jobs.

    Returns
    -------
    L : numpy array
        Size (replicas,).

    '''
    if N < 1 or replicas < 1:
        raise ValueError('N and replicas must be positive.')
    seed = spec.seed if seed is None else seed
    chunks = [range(k, min(k + CHUNK, replicas)) for k in range(0, replicas, CHUNK)]
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_log_norm_chunk, *zip(*[(spec, N, seed, c, tol) for c in chunks])))
    else:
        parts = [_log_norm_chunk(spec, N, seed, c, tol) for c in chunks]
    return np.concatenate(parts)


def _moment_from_log_norms(L, alpha, N, rng, n_boot, level):
    stat = lambda x: math.exp(log_mean_exp(alpha*x)/N)
    return stat(L), bootstrap_ci(L, stat, rng, n_boot=n_boot, level=level)


def _check_alpha(alpha, alpha_range):
    if not alpha_range[0] <= alpha <= alpha_range[1]:
        raise ValueError(f'alpha = {alpha} outside the configured range {list(alpha_range)}')


def moment_lyapunov(spec, alpha, N=100, replicas=1000, seed=None, method='auto', n_boot=200,
                    level=0.95, alpha_range=ALPHA_RANGE, jobs=1):
    '''
    Estimate r(alpha) = (E||A_N ... A_1||^alpha)^{1/N}.

    Parameters
    ----------
    spec : EnvironmentSpec
        Law of the environment.

    alpha : float
        The moment order, within alpha_range.

    N : int, optional
        Length of the products. The default is 100.

    replicas : int, optional
        Number of independent environments. The default is 1000.

    seed : int, optional
        Master seed. The default is spec.seed.

    method : str, optional
        'auto' (closed form for m=1 finite supports, else 'mc'), 'exact' or
        'mc'. The default is 'auto'.

    Returns
    -------
    r_hat : float
        The estimate. r_hat(0) is exactly 1.

    ci : tuple
        Bootstrap confidence interval (degenerate for the closed form).

    '''
    _check_alpha(alpha, alpha_range)
    if alpha == 0:
        return 1., (1., 1.)
    if method == 'auto':
        method = 'exact' if _scalar_support(spec) is not None else 'mc'

    if method == 'exact':
        if _scalar_support(spec) is None:
            raise StructuralError('The closed form needs an m=1 finite-support spec.')
        r = exact_moment(spec, alpha)
        return r, (r, r)
    elif method == 'mc':
        seed = spec.seed if seed is None else seed
        L = replica_log_norms(spec, N, replicas, seed, jobs)
        return _moment_from_log_norms(L, alpha, N, make_rng(seed, 3), n_boot, level)
    else:
        raise NotImplementedError(f'The method {method!r} is not implemented.')


def classify_regime(lambda_hat, stderr, exact=False):
    '''
    TransientRight if lambda_hat < -3 stderr, TransientLeft if
    lambda_hat > 3 stderr, Recurrent otherwise. With exact=True (or a zero
    stderr) the sign of lambda_hat decides.
    '''
    if exact or stderr == 0:
        if abs(lambda_hat) < 1e-12:
            return RECURRENT
        return TRANSIENT_RIGHT if lambda_hat < 0 else TRANSIENT_LEFT
    if lambda_hat < -3*stderr:
        return TRANSIENT_RIGHT
    if lambda_hat > 3*stderr:
        return TRANSIENT_LEFT
    return RECURRENT


def spec_lyapunov(spec, N=10**5, method='auto'):
    '''(lambda_hat, stderr, exact) for a spec: closed form or one long environment.'''
    if method == 'auto':
        method = 'exact' if _scalar_support(spec) is not None else 'mc'
    if method == 'exact':
        if _scalar_support(spec) is None:
            raise StructuralError('The closed form needs an m=1 finite-support spec.')
        return exact_lyapunov(spec), 0., True
    lam, se = top_lyapunov(sample_environment(spec, (0, N - 1)), N)
    return lam, se, False


def classify_spec(spec, N=10**5, method='auto'):
    lam, se, exact = spec_lyapunov(spec, N, method)
    return classify_regime(lam, se, exact)


def _root(f, alpha_max):
    '''Positive root of a convex f with f(0)=0, f'(0)<0; None if f < 0 up to alpha_max.'''
    hi = 1.
    while f(hi) <= 0:
        hi *= 2
        if hi > alpha_max:
            return None
    lo = hi/2
    while f(lo) > 0:
        lo /= 2
    return brentq(f, lo, hi, xtol=1e-12)


def solve_critical_exponent(spec, method='auto', tol=1e-3, N=100, replicas=2000, seed=None,
                            alpha_range=ALPHA_RANGE, jobs=1, lyapunov_N=10**5):
    '''
    Critical exponent s: the positive root of r(s) = 1.

    Parameters
    ----------
    spec : EnvironmentSpec
        Law of a walk transient to the right.

    method : str, optional
        'auto', 'exact' or 'mc'. The default is 'auto'.

    tol : float, optional
        Tolerance on |ln r_hat(s)| for the Monte Carlo path. The default is 1e-3.

    Returns
    -------
    s : float
        The exponent, math.inf when r stays below 1.

    '''
    if method == 'auto':
        method = 'exact' if _scalar_support(spec) is not None else 'mc'
    lam, se, exact = spec_lyapunov(spec, lyapunov_N, 'exact' if method == 'exact' else 'mc')
    if classify_regime(lam, se, exact) != TRANSIENT_RIGHT:
        raise RegimeError(f'walk not transient right (lambda = {lam:.4g} +- {se:.2g})')

    if spec.is_finite and (support_lambdas(spec) < 1).all():
        return math.inf

    if method == 'exact':
        ratios, w = _scalar_support(spec)
        log_r = lambda a: math.log(np.dot(w, ratios**a))
        s = _root(log_r, alpha_range[1])
        return math.inf if s is None else float(s)
    elif method != 'mc':
        raise NotImplementedError(f'The method {method!r} is not implemented.')

    seed = spec.seed if seed is None else seed
    L = replica_log_norms(spec, N, replicas, seed, jobs)
    rng = make_rng(seed, 3)
    probes = [_moment_from_log_norms(L, a, N, rng, 200, 0.95) for a in PROBE_ALPHAS]
    values = [r for r, _ in probes]
    if all(np.diff(values) < 0) and all(ci[1] < 1 for _, ci in probes):
        return math.inf

    log_r = lambda a: log_mean_exp(a*L)/N
    s = _root(log_r, alpha_range[1])
    if s is None:
        logger.warning('r_hat stays below 1 up to alpha = %g; reporting s = inf', alpha_range[1])
        return math.inf
    if abs(log_r(s)) >= tol:
        logger.warning('|ln r_hat(s)| = %.2e above tolerance %.0e', abs(log_r(s)), tol)
    return float(s)


def arithmetic_diagnostic(spec):
    '''
    Distinct values of ln lambda(P,Q,R) over a finite support, with their
    pairwise ratios and smallest gap, for manual inspection of arithmetic
    degeneracy.
    '''
    if not spec.is_finite:
        return {'continuous': True, 'log_lambdas': [], 'ratios': [], 'min_gap': None}
    logs = np.unique(np.round(np.log(support_lambdas(spec)), 12))
    ratios = [float(a/b) for i, a in enumerate(logs) for b in logs[i + 1:] if b != 0]
    gap = float(np.diff(logs).min()) if logs.size > 1 else None
    return {'continuous': False, 'log_lambdas': logs.tolist(), 'ratios': ratios, 'min_gap': gap}


@dataclass
class SpectralSummary:
    '''
    Spectral description of an environment law.

    Attributes
    ----------
    lambda_hat, stderr : float
        Top Lyapunov exponent and its standard error (0 for closed forms).

    r_curve : list
        (alpha, r_hat, (ci_lo, ci_hi)) triples, alpha=0 included.

    s_hat : float
        Critical exponent (math.inf for the infinite flag, nan when the walk
        is not transient right).

    regime : str
        Recurrent, TransientRight or TransientLeft.

    bp_flag, K_observed : bool, float
        Condition (BP) heuristic and observed range.

    '''
    lambda_hat: float
    stderr: float
    r_curve: list
    s_hat: float
    regime: str
    bp_flag: bool
    K_observed: float
    exact: bool = False
    diagnostic: dict = field(default_factory=dict)

    @property
    def s_infinite(self):
        return math.isinf(self.s_hat)

    def to_row(self):
        s = 'inf' if self.s_infinite else repr(float(self.s_hat))
        return {'lambda': repr(float(self.lambda_hat)), 'stderr': repr(float(self.stderr)), 's': s,
                'regime': self.regime, 'bp': str(self.bp_flag).lower(),
                'K': repr(float(self.K_observed))}

    def to_dict(self):
        d = self.to_row()
        d['r_curve'] = [{'alpha': float(a), 'r': float(r), 'ci': [float(c) for c in ci]}
                        for a, r, ci in self.r_curve]
        d['exact'] = self.exact
        d['diagnostic'] = self.diagnostic
        return d


def describe_spec(spec, N=10**5, r_N=100, replicas=2000, seed=None, bp_N=10**4, bp_K=100.,
                  alpha_grid=R_GRID, jobs=1, verbose=False):
    '''
    Bundle the spectral quantities of a spec.

    Returns
    -------
    summary : SpectralSummary
        Exponent, r-curve, critical exponent, regime and (BP) flag.

    '''
    log = logger.info if verbose else logger.debug
    seed = spec.seed if seed is None else seed
    lam, se, exact = spec_lyapunov(spec, N)
    regime = classify_regime(lam, se, exact)
    log('lambda = %.6g +- %.2g (%s)', lam, se, regime)

    if exact:
        r_curve = [(a, exact_moment(spec, a), (exact_moment(spec, a),)*2) for a in alpha_grid]
    else:
        L = replica_log_norms(spec, r_N, replicas, seed, jobs)
        rng = make_rng(seed, 3)
        r_curve = []
        for a in alpha_grid:
            _check_alpha(a, ALPHA_RANGE)
            r, ci = (1., (1., 1.)) if a == 0 else _moment_from_log_norms(L, a, r_N, rng, 200, 0.95)
            r_curve.append((a, r, ci))
    if 0. not in [a for a, _, _ in r_curve]:
        r_curve.insert(0, (0., 1., (1., 1.)))
    log('r curve: %s', [(a, round(r, 6)) for a, r, _ in r_curve])

    s = math.nan
    if regime == TRANSIENT_RIGHT:
        s = solve_critical_exponent(spec, N=r_N, replicas=replicas, seed=seed, jobs=jobs,
                                    lyapunov_N=N)
        log('s = %s', s)

    bp, K = check_bounded_products(sample_environment(spec, (0, bp_N)), bp_N, bp_K)
    return SpectralSummary(lam, se, r_curve, s, regime, bp, K, exact, arithmetic_diagnostic(spec))
