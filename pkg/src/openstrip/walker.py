'''
MODULE: walker.py
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
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import linregress

from .environment import Environment, EnvironmentSpec, sample_environment
from .spectral import hitting_law, log_norm_increments
from .utils import StructuralError, as_rng, derive_seed, row_sum_norm, write_csv

logger = logging.getLogger(__name__)

BATCH = 100000
TABLE_BYTES = 2**28
DEFAULT_CAP = 10**9
TAIL_TOL = 1e-12
MARGIN = 64
FLUSH = 10**7


@dataclass(frozen=True)
class SiteState:
    '''Position (layer, rung) of the walk; rungs are numbered 1..m.'''
    layer: int
    rung: int = 1

    def __post_init__(self):
        if self.rung < 1:
            raise StructuralError(f'Rungs are numbered from 1, got {self.rung}')


def _check_state(state, m):
    if not isinstance(state, SiteState):
        raise TypeError('The state must be a SiteState.')
    if state.rung > m:
        raise StructuralError(f'Rung {state.rung} on a strip of width {m}')


class _KernelTable():
    '''
    Cumulative kernel rows [P | R | Q] of one or several environments on a
    layer range that grows on demand. Environments sharing a finite support
    are stored as support indices.
    '''

    def __init__(self, envs, lo, hi):
        self.envs = list(envs)
        self.m = self.envs[0].m
        first = self.envs[0].support_array
        self.indexed = first is not None and all(
            env.support_array is first or
            (env.support_array is not None and np.array_equal(env.support_array, first))
            for env in self.envs)
        if self.indexed:
            kernels = np.concatenate([first[:, 0], first[:, 2], first[:, 1]], axis=2)
            self.support_cdf = np.cumsum(kernels, axis=2)
            self.support_cdf[..., -1] = 1.
        self._build(lo, hi)

    def _build(self, lo, hi):
        if self.indexed:
            self.idx = np.stack([env.covering(lo, hi).support_index(lo, hi) for env in self.envs])
        else:
            cdf = np.empty((len(self.envs), hi - lo + 1, self.m, 3*self.m))
            for e, env in enumerate(self.envs):
                P, Q, R = env.covering(lo, hi).materialize(lo, hi)
                cdf[e] = np.cumsum(np.concatenate([P, R, Q], axis=2), axis=2)
            cdf[..., -1] = 1.
            self.cdf = cdf
        self.lo, self.hi = lo, hi

    def ensure(self, kmin, kmax):
        if kmin >= self.lo and kmax <= self.hi:
            return
        span = self.hi - self.lo + 1
        lo = min(self.lo, kmin - span//2)
        hi = max(self.hi, kmax + span//2)
        logger.debug('kernel table grows to [%d, %d]', lo, hi)
        self._build(lo, hi)

    def rows(self, e, k, i):
        if self.indexed:
            return self.support_cdf[self.idx[e, k - self.lo], i]
        return self.cdf[e, k - self.lo, i]

    def step(self, e, k, i, rng):
        '''One uniform draw per walker; returns the new layers and 0-based rungs.'''
        u = 1. - rng.random(k.size)
        o = (self.rows(e, k, i) < u[:, None]).sum(axis=1)
        m = self.m
        dk = (o < m).astype(np.int64) - (o >= 2*m).astype(np.int64)
        return k + dk, o % m


class _Occupation():
    '''Visit counts per (layer, rung), buffered and reduced with bincount.'''

    def __init__(self, lo, hi, m):
        self.lo, self.hi, self.m = lo, hi, m
        self.counts = np.zeros((hi - lo + 1)*m, dtype=np.int64)
        self._buffer, self._size = [], 0

    def add(self, k, i):
        if k.size == 0:
            return
        kmin, kmax = int(k.min()), int(k.max())
        if kmin < self.lo or kmax > self.hi:
            self.flush()
            lo, hi = min(self.lo, kmin - MARGIN), max(self.hi, kmax)
            new = np.zeros((hi - lo + 1)*self.m, dtype=np.int64)
            start = (self.lo - lo)*self.m
            new[start:start + self.counts.size] = self.counts
            self.counts, self.lo, self.hi = new, lo, hi
        self._buffer.append((k - self.lo)*self.m + i)
        self._size += k.size
        if self._size > FLUSH:
            self.flush()

    def flush(self):
        if self._buffer:
            idx = np.concatenate(self._buffer)
            self.counts += np.bincount(idx, minlength=self.counts.size)
            self._buffer, self._size = [], 0

    def table(self):
        self.flush()
        return self.counts.reshape(-1, self.m)


@dataclass
class WalkSummary:
    '''
    Summary of replicas run until a target layer.

    Attributes
    ----------
    start : SiteState or str
        Start state, 'y0' for the hitting-law start.

    target : int
        Target layer.

    layers : numpy array
        Layers whose hitting times are recorded.

    hitting_times : numpy array
        Size (replicas, len(layers)); -1 where the layer was not reached.

    hitting_rungs : numpy array
        Rung (1..m) of first arrival at each recorded layer, 0 if not reached.

    steps, max_backtrack : numpy array
        Steps performed and deepest revisit below the running maximum layer.

    capped : numpy array
        Whether the step budget ran out before the target.

    occupation : numpy array or None
        Visit counts summed over replicas, size (L, m), first row is layer
        occupation_lo.

    '''
    start: object
    target: int
    layers: np.ndarray
    hitting_times: np.ndarray
    hitting_rungs: np.ndarray
    steps: np.ndarray
    max_backtrack: np.ndarray
    capped: np.ndarray
    occupation: np.ndarray = None
    occupation_lo: int = 0
    watch_counts: np.ndarray = None
    watch_last: np.ndarray = None
    seed: object = None

    @property
    def replicas(self):
        return self.steps.size

    @property
    def capped_fraction(self):
        return float(self.capped.mean())

    def T(self, n):
        '''Hitting times of layer n over the replicas.'''
        col = np.flatnonzero(self.layers == n)
        if col.size == 0:
            raise StructuralError(f'The hitting time of layer {n} was not recorded.')
        return self.hitting_times[:, col[0]]

    def occupation_map(self):
        '''Sparse map (layer, rung) -> visit count.'''
        if self.occupation is None:
            return {}
        ks, rs = np.nonzero(self.occupation)
        return {(int(k) + self.occupation_lo, int(r) + 1): int(self.occupation[k, r])
                for k, r in zip(ks, rs)}

    def merge(self, other):
        '''Concatenate the replicas of two summaries of the same experiment.'''
        if other.target != self.target or not np.array_equal(other.layers, self.layers):
            raise StructuralError('Only summaries with the same target and layers can be merged.')
        occ, lo = self.occupation, self.occupation_lo
        if occ is not None and other.occupation is not None:
            lo = min(self.occupation_lo, other.occupation_lo)
            hi = max(self.occupation_lo + occ.shape[0], other.occupation_lo + other.occupation.shape[0])
            merged = np.zeros((hi - lo, occ.shape[1]), dtype=np.int64)
            for o, olo in ((occ, self.occupation_lo), (other.occupation, other.occupation_lo)):
                merged[olo - lo:olo - lo + o.shape[0]] += o
            occ = merged
        cat = lambda a, b: None if a is None or b is None else np.concatenate([a, b])
        return WalkSummary(self.start, self.target, self.layers,
                           np.concatenate([self.hitting_times, other.hitting_times]),
                           np.concatenate([self.hitting_rungs, other.hitting_rungs]),
                           np.concatenate([self.steps, other.steps]),
                           np.concatenate([self.max_backtrack, other.max_backtrack]),
                           np.concatenate([self.capped, other.capped]),
                           occ, lo, cat(self.watch_counts, other.watch_counts),
                           cat(self.watch_last, other.watch_last), self.seed)


@dataclass
class PositionSample:
    '''Positions after a fixed number of steps.'''
    n_steps: int
    layers: np.ndarray
    rungs: np.ndarray
    env_index: np.ndarray
    history: dict = field(default_factory=dict)

    @property
    def replicas(self):
        return self.layers.size


def _start_rungs(envs, e, start, rng):
    '''Start layer and 0-based rungs of the walkers.'''
    m = envs[0].m
    if isinstance(start, SiteState):
        _check_state(start, m)
        return start.layer, np.full(e.size, start.rung - 1, dtype=np.int64)
    if isinstance(start, str) and start == 'y0':
        laws = np.stack([hitting_law(env, 0) for env in envs])
        layer = 0
    else:
        law = np.asarray(start, dtype=float)
        if law.shape != (m,) or (law < 0).any() or abs(law.sum() - 1) > 1e-10:
            raise StructuralError('A start law must be a probability vector over the rungs.')
        laws = law[None]
        e = np.zeros_like(e)
        layer = 0
    cum = np.cumsum(laws, axis=1)
    cum[:, -1] = 1.
    u = rng.random(e.size)
    return layer, (cum[e] < u[:, None]).sum(axis=1).astype(np.int64)


def _plan(env, replicas, walkers_per_env, span):
    '''Batches of (environments, environment index per walker).'''
    if isinstance(env, Environment):
        for lo in range(0, replicas, BATCH):
            yield [env], np.zeros(min(BATCH, replicas - lo), dtype=np.intp)
        return
    envs = list(env)
    if not envs:
        raise StructuralError('No environment given.')
    m = envs[0].m
    W = walkers_per_env
    row_bytes = 1 if envs[0].spec.is_finite else 24*m*m
    per = max(1, min(max(1, BATCH // W), TABLE_BYTES // max(1, span*row_bytes)))
    for lo in range(0, len(envs), per):
        group = envs[lo:lo + per]
        yield group, np.repeat(np.arange(len(group), dtype=np.intp), W)


def step_walk(env, state, rng):
    '''
    Draw the next state from the kernel row [P_k | R_k | Q_k] of the
    current rung, with a single uniform draw.

    Parameters
    ----------
    env : Environment
        The environment (extended when the layer is outside its window).

    state : SiteState
        Current state.

    rng : numpy.random.Generator
        Random generator.

    Returns
    -------
    state : SiteState
        Next state.

    '''
    _check_state(state, env.m)
    rng = as_rng(rng)
    k = state.layer
    t = env.covering(k, k).layer(k)
    cdf = np.cumsum(t.kernel()[state.rung - 1])
    cdf[-1] = 1.
    o = int((cdf < 1. - rng.random()).sum())
    m = env.m
    dk = 1 if o < m else (0 if o < 2*m else -1)
    return SiteState(k + dk, o % m + 1)


def _run_batch(envs, e, start, n, cap, rng, layers, occupation, watch):
    R = e.size
    m = envs[0].m
    s, i = _start_rungs(envs, e, start, rng)
    if n <= s:
        raise ValueError(f'The target layer {n} must lie above the start layer {s}.')

    table = _KernelTable(envs, s - MARGIN, n + 1)
    col = np.full(n - s, -1, dtype=np.int64)
    col[layers - s - 1] = np.arange(layers.size)
    k = np.full(R, s, dtype=np.int64)
    t = np.zeros(R, dtype=np.int64)
    maxk = k.copy()
    back = np.zeros(R, dtype=np.int64)
    T = np.full((R, layers.size), -1, dtype=np.int64)
    Y = np.zeros((R, layers.size), dtype=np.int16)
    occ = _Occupation(s - MARGIN, n, m) if occupation else None
    if occ is not None:
        occ.add(k, i)
    wc = wl = None
    if watch is not None:
        wc = np.zeros((R, m), dtype=np.int64)
        wl = np.full(R, -1, dtype=np.int64)
        if s == watch:
            wc[np.arange(R), i] += 1
            wl[:] = 0

    active = np.arange(R)
    while active.size:
        ka = k[active]
        table.ensure(int(ka.min()) - 1, n)
        kn, inn = table.step(e[active], ka, i[active], rng)
        k[active], i[active] = kn, inn
        ta = t[active] + 1
        t[active] = ta

        up = kn > maxk[active]
        if up.any():
            w, ku = active[up], kn[up]
            maxk[w] = ku
            c = col[ku - s - 1]
            ok = c >= 0
            T[w[ok], c[ok]] = ta[up][ok]
            Y[w[ok], c[ok]] = inn[up][ok] + 1
        back[active] = np.maximum(back[active], maxk[active] - kn)
        if occ is not None:
            occ.add(kn, inn)
        if watch is not None:
            hit = kn == watch
            wh = active[hit]
            wc[wh, inn[hit]] += 1
            wl[wh] = ta[hit]
        active = active[(kn < n) & (ta < cap)]

    occupation_table = occ.table() if occ is not None else None
    occupation_lo = occ.lo if occ is not None else 0
    return WalkSummary(start, n, layers, T, Y, t, back, k < n, occupation_table, occupation_lo, wc, wl)


def run_to_layer(env, start, n, cap=DEFAULT_CAP, rng=None, replicas=1, layers=None,
                 walkers_per_env=1, occupation=True, watch=None, verbose=False):
    '''
    Simulate replicas until they first reach layer n (or the step budget).

    Parameters
    ----------
    env : Environment or list of Environment
        A single environment (quenched replicas) or a list of environments,
        each carrying walkers_per_env walkers (annealed replicas).

    start : SiteState, str or numpy array
        Start state, 'y0' for the hitting law of layer 0 or a law over the
        rungs of layer 0.

    n : int
        Target layer.

    cap : int, optional
        Step budget per trajectory. The default is 10**9.

    rng : numpy.random.Generator or int, optional
        Random generator or seed.

    replicas : int, optional
        Number of walkers for a single environment. The default is 1.

    layers : list, optional
        Layers whose hitting times are recorded. The default is every layer
        between the start and n.

    occupation : bool, optional
        Whether to count the visits of each site. The default is True.

    watch : int, optional
        Layer whose visits are counted per walker (counts and last visit).

    Returns
    -------
    summary : WalkSummary
        Hitting times, occupation, backtracking and capped flags.

    '''
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = as_rng(rng)
    first = env if isinstance(env, Environment) else env[0]
    s0 = start.layer if isinstance(start, SiteState) else 0
    if n <= s0:
        raise ValueError(f'The target layer {n} must lie above the start layer {s0}.')
    if layers is None:
        layers = np.arange(s0 + 1, n + 1)
    layers = np.unique(np.asarray(layers, dtype=np.int64))
    if layers.size and (layers[0] <= s0 or layers[-1] > n):
        raise StructuralError(f'Recorded layers must lie in [{s0 + 1}, {n}].')

    summary = None
    for b, (envs, e) in enumerate(_plan(env, replicas, walkers_per_env, n - s0 + 2*MARGIN)):
        part = _run_batch(envs, e, start, n, cap, rng, layers, occupation, watch)
        summary = part if summary is None else summary.merge(part)
        (logger.info if verbose else logger.debug)(
            'batch %d: %d walkers, %d capped', b, e.size, int(part.capped.sum()))
    summary.seed = seed
    if summary.capped.any():
        logger.warning('%d of %d trajectories hit the step budget %d',
                       int(summary.capped.sum()), summary.replicas, cap)
    logger.debug('run_to_layer on %r done', first)
    return summary


def run_for_steps(env, start, n_steps, rng=None, replicas=1, walkers_per_env=1, checkpoints=None,
                  verbose=False):
    '''
    Positions after n_steps steps.

    Parameters
    ----------
    env : Environment or list of Environment
        Quenched environment or annealed environments (see run_to_layer).

    start : SiteState, str or numpy array
        Start state.

    n_steps : int
        Number of steps.

    checkpoints : list, optional
        Intermediate step counts at which the layers are also recorded.

    Returns
    -------
    sample : PositionSample
        Layers, rungs (1..m) and environment index of every walker, and the
        layers at the checkpoints in sample.history.

    '''
    rng = as_rng(rng)
    if n_steps < 0:
        raise ValueError('n_steps must be non-negative.')
    checkpoints = sorted(set(int(c) for c in (checkpoints or ()) if 0 <= c <= n_steps))
    span = int(4*math.sqrt(n_steps + 1)) + 2*MARGIN
    out_k, out_i, out_e = [], [], []
    history = {c: [] for c in checkpoints}
    offset = 0
    for b, (envs, e) in enumerate(_plan(env, replicas, walkers_per_env, span)):
        s, i = _start_rungs(envs, e, start, rng)
        k = np.full(e.size, s, dtype=np.int64)
        table = _KernelTable(envs, s - 2*MARGIN, s + 2*MARGIN)
        for t in range(n_steps + 1):
            if t in history:
                history[t].append(k.copy())
            if t == n_steps:
                break
            table.ensure(int(k.min()) - 1, int(k.max()) + 1)
            k, i = table.step(e, k, i, rng)
        out_k.append(k)
        out_i.append(i + 1)
        out_e.append(e + offset)
        offset += len(envs)
        (logger.info if verbose else logger.debug)('batch %d: %d walkers, %d steps', b, e.size, n_steps)
    return PositionSample(n_steps, np.concatenate(out_k), np.concatenate(out_i), np.concatenate(out_e),
                          {c: np.concatenate(v) for c, v in history.items()})


@dataclass
class HittingExpectation:
    '''
    Expected hitting times between layers k and n.

    Attributes
    ----------
    k, n : int
        Start and target layers.

    e : dict
        Layer j -> m-vector e_{j,n} (expected time to reach n from (j, i)),
        for k <= j < n.

    b : numpy array
        Expected crossing-time vectors b_j = sum_i H_j^i U_{j-i} 1, size (n-k, m).

    a_seq : numpy array
        a_j = y_j b_j for k <= j < n.

    expected_T : numpy array
        Expected hitting times of layers k..n from the start law on layer k.

    depth : int
        Truncation depth of the series.

    tail_bound : float
        Norm of the running product at the truncation depth.

    '''
    k: int
    n: int
    e: dict
    b: np.ndarray
    a_seq: np.ndarray
    expected_T: np.ndarray
    depth: int
    tail_bound: float
    start_law: np.ndarray = None

    def e_vector(self, j=None):
        return self.e[self.k if j is None else j]


def _cap(n):
    return int(math.ceil(40*math.log(max(n, 3))))


def _truncation_depth(props, k, tail_tol, cap):
    '''Smallest d with ||H_k^d|| < tail_tol (at most cap).'''
    G = np.eye(props.m)
    d = 0
    while row_sum_norm(G) >= tail_tol and d < cap:
        if k - d - 1 < props.lo:
            raise StructuralError(f'The series at layer {k} needs propagators below layer '
                                  f'{props.lo}; extend the window to the left')
        G = G @ props.A_at(k - d)
        d += 1
    return d, float(row_sum_norm(G))


def crossing_vectors(props, lo, hi, tail_tol=TAIL_TOL, cap=None):
    '''
    b_j for lo <= j <= hi by the recursion b_j = U_j 1 + A_j b_{j-1},
    started at the truncation depth of layer lo.

    Returns
    -------
    b : numpy array
        Size (hi-lo+1, m).

    depth : int
        Truncation depth.

    tail_bound : float
        Norm of the product at the truncation depth.

    '''
    cap = _cap(hi - lo + 1) if cap is None else cap
    depth, tail = _truncation_depth(props, lo, tail_tol, cap)
    if hi > props.window[1]:
        raise StructuralError(f'Layer {hi} outside the propagator window {list(props.window)}')
    ones = np.ones(props.m)
    j0 = lo - depth
    b = props.U_at(j0) @ ones
    for j in range(j0 + 1, lo):
        b = props.U_at(j) @ ones + props.A_at(j) @ b
    out = np.empty((hi - lo + 1, props.m))
    for j in range(max(j0, lo), hi + 1):
        if j > j0:
            b = props.U_at(j) @ ones + props.A_at(j) @ b
        out[j - lo] = b
    return out, depth, tail


def expected_hitting_vector(env, props, k, n, tail_tol=TAIL_TOL, start=None):
    '''
    Expected hitting times of layer n from layer k,
    e_{k,n} = sum_{j=k}^{n-1} zeta_k ... zeta_{j-1} b_j.

    Parameters
    ----------
    env : Environment
        The environment of props.

    props : PropagatorSet
        Propagators covering the truncation depth left of k up to n-1.

    k, n : int
        Start and target layers, k < n.

    tail_tol : float, optional
        The series is truncated when ||H|| < tail_tol. The default is 1e-12.

    start : SiteState or numpy array, optional
        Start law on layer k for expected_T. The default is y_k.

    Returns
    -------
    hitting : HittingExpectation
        The expectations.

    '''
    if n <= k:
        raise ValueError('The target layer must lie above the start layer.')
    if props.m != env.m:
        raise StructuralError('The propagators do not belong to this environment.')
    b, depth, tail = crossing_vectors(props, k, n - 1, tail_tol, _cap(n - k))

    zeta = props.zeta
    e = {}
    vec = np.zeros(props.m)
    for j in range(n - 1, k - 1, -1):
        vec = b[j - k] + (zeta[j] @ vec if j < n - 1 else 0.)
        e[j] = vec

    y = props.y[k - props.lo:n - props.lo]
    a_seq = np.einsum('ji,ji->j', y, b)

    if start is None:
        law = props.y_at(k)
    elif isinstance(start, SiteState):
        _check_state(start, props.m)
        if start.layer != k:
            raise StructuralError(f'The start state must lie on layer {k}.')
        law = np.eye(props.m)[start.rung - 1]
    else:
        law = np.asarray(start, dtype=float)
    ET = np.zeros(n - k + 1)
    mu = law
    for j in range(k, n):
        ET[j - k + 1] = ET[j - k] + mu @ b[j - k]
        mu = mu @ zeta[j]
    return HittingExpectation(k, n, e, b, a_seq, ET, depth, tail, law)


def drift_index(env, hitting, n):
    '''
    b_n = min(k : E_w T_k >= n), from the cumulative expected hitting times
    (comparisons carry the truncation tolerance of the series).
    '''
    ET = hitting.expected_T
    threshold = n*(1 - 1e-9)
    if ET[-1] < threshold:
        raise StructuralError(f'n = {n} beyond the computed horizon (E T = {ET[-1]:.6g} at layer {hitting.n})')
    return hitting.k + int(np.searchsorted(ET, threshold, side='left'))


@dataclass
class OccupationProfile:
    '''
    Expected occupation of the sites (n, i).

    Attributes
    ----------
    layer : int
        The layer n.

    values, stderr : numpy array
        rho_{(n,i)} for i = 1..m and its standard error (0 for the series).

    method : str
        'analytic-series' or 'monte-carlo'.

    depth : int
        Series truncation depth, or the layer horizon of the Monte Carlo count.

    tail_bound : float
        Truncation bound (series) or the bias of the finite horizon (Monte Carlo).

    replicas : int
        Number of walkers (Monte Carlo).

    '''
    layer: int
    values: np.ndarray
    stderr: np.ndarray
    method: str
    depth: int
    tail_bound: float = 0.
    replicas: int = 0

    @property
    def rho(self):
        return {(self.layer, i + 1): float(v) for i, v in enumerate(self.values)}

    def total(self):
        return float(self.values.sum())


def _start_law(props, start):
    '''(start layer, law) of a start state; (None, None) for a walk from minus infinity.'''
    if start is None:
        return None, None
    if isinstance(start, SiteState):
        _check_state(start, props.m)
        return start.layer, np.eye(props.m)[start.rung - 1]
    if isinstance(start, str) and start == 'y0':
        return 0, props.y_at(0)
    return 0, np.asarray(start, dtype=float)


def _occupation_series(props, n, start, tail_tol, cap, j_max=None):
    '''c_n = sum_{j >= max(n,s)} mu_j H_j^{j-n}; returns (c, depth, tail).'''
    s, mu = _start_law(props, start)
    hi = props.window[1]
    if s is None:
        j0 = n
        law = lambda j, _: props.y_at(j)
    else:
        j0 = max(n, s)
        for j in range(s, j0):
            mu = mu @ props.zeta[j]
        law = lambda j, mu: mu
    if j0 > hi:
        raise StructuralError(f'The truncation window right of layer {n} is unavailable.')
    G = props.H(j0, j0 - n) if j0 > n else np.eye(props.m)
    c = law(j0, mu) @ G
    j = j0
    while row_sum_norm(G) >= tail_tol and j - n < cap:
        if j_max is not None and j >= j_max:
            break
        if j + 1 > hi:
            raise StructuralError(f'The truncation window right of layer {n} is unavailable '
                                  f'(needs layers beyond {hi}).')
        if s is not None:
            mu = mu @ props.zeta[j]
        j += 1
        G = props.A_at(j) @ G
        c = c + law(j, mu) @ G
    return c, j - n, float(row_sum_norm(G))


def expected_occupation_row(env, props, n, truncation=None, tail_tol=TAIL_TOL, method='analytic',
                            start=None, replicas=10000, rng=None, horizon=None, cap=DEFAULT_CAP):
    '''
    Expected number of visits rho_{(n,i)} to the sites of layer n.

    Parameters
    ----------
    env : Environment
        The environment.

    props : PropagatorSet
        Propagators right of n up to the truncation depth.

    n : int
        The layer.

    truncation : int, optional
        Hard cap on the series depth. The default is ceil(40 ln n).

    tail_tol : float, optional
        The series stops when the product norm is below tail_tol.

    method : str, optional
        'analytic' (series) or 'monte-carlo'. The default is 'analytic'.

    start : SiteState, str or numpy array, optional
        Start of the walk. The default is a walk from minus infinity,
        whose hitting law is y.

    replicas, rng, horizon, cap : optional
        Monte Carlo parameters: the walkers stop at layer n + horizon,
        horizon defaulting to ceil(ln^2 max(n - s, 10)).

    Returns
    -------
    profile : OccupationProfile
        The row rho_{(n,.)}.

    '''
    cap_depth = _cap(n) if truncation is None else truncation
    if method == 'analytic':
        c, depth, tail = _occupation_series(props, n, start, tail_tol, cap_depth)
        rho = c @ props.U_at(n)
        return OccupationProfile(n, rho, np.zeros(props.m), 'analytic-series', depth, tail)

    elif method == 'monte-carlo':
        if start is None:
            raise StructuralError('Monte Carlo occupation needs a start state.')
        s = start.layer if isinstance(start, SiteState) else 0
        if horizon is None:
            horizon = int(math.ceil(math.log(max(n - s, 10))**2))
        target = max(n, s) + horizon
        summary = run_to_layer(env, start, target, cap=cap, rng=rng, replicas=replicas,
                               layers=[target], occupation=False, watch=n)
        counts = summary.watch_counts
        values = counts.mean(axis=0)
        stderr = counts.std(axis=0, ddof=1)/math.sqrt(counts.shape[0])
        bias = 0.
        try:
            full, _, _ = _occupation_series(props, n, start, tail_tol, cap_depth)
            part, _, _ = _occupation_series(props, n, start, tail_tol, cap_depth, j_max=target - 1)
            bias = float(row_sum_norm(((full - part) @ props.U_at(n))[None]))
        except StructuralError:
            logger.debug('finite-horizon bias not available outside the propagator window')
        return OccupationProfile(n, values, stderr, 'monte-carlo', horizon, bias, counts.shape[0])
    else:
        raise NotImplementedError(f'The method {method!r} is not implemented.')


def occupation_rows(props, lo, hi, tail_tol=TAIL_TOL):
    '''
    Rows rho_{(j,.)} for lo <= j <= hi for a walk from minus infinity, by the
    backward recursion c_j = y_j + c_{j+1} A_{j+1} started at the right end
    of the propagator window.

    Returns
    -------
    rho : numpy array
        Size (hi-lo+1, m).

    tail_bound : float
        Norm of A_top ... A_{hi+1}.

    '''
    top = props.window[1]
    if lo < props.lo or hi >= top:
        raise StructuralError(f'Rows [{lo}, {hi}] need propagators on [{lo}, {hi + 1}] and beyond.')
    tail = float(np.exp(log_norm_increments(props.A[hi + 1 - props.lo:]).sum()))
    if tail >= tail_tol:
        logger.warning('occupation rows truncated with tail %.2e above %.0e', tail, tail_tol)
    c = props.y_at(top)
    rows = np.empty((hi - lo + 1, props.m))
    for j in range(top - 1, lo - 1, -1):
        c = props.y_at(j) + c @ props.A_at(j + 1)
        if j <= hi:
            rows[j - lo] = c @ props.U_at(j)
    return rows, tail


@dataclass
class BacktrackTail:
    '''
    Monte Carlo estimate of the probability to revisit the start layer after
    reaching the layer depth above it.
    '''
    depths: np.ndarray
    tail: np.ndarray
    stderr: np.ndarray
    theta: float
    C: float
    replicas: int
    details: dict = field(default_factory=dict)


def backtrack_tail(env, replicas, depths, rng=None, start=None, extra=20, cap=DEFAULT_CAP,
                   walkers_per_env=1):
    '''
    Estimate P(the walk visits layer k after reaching layer k+d) for each
    depth d, k being the start layer, and fit ln tail = ln C + d ln theta.

    Parameters
    ----------
    env : Environment or EnvironmentSpec
        A fixed environment (quenched) or a law; with a law every group of
        walkers_per_env walkers has its own environment.

    replicas : int
        Number of walkers.

    depths : list
        Depths d >= 0; the depth 0 has tail 1.

    extra : int, optional
        The walkers run until layer k + max(depths) + extra. The default is 20.

    Returns
    -------
    tail : BacktrackTail
        Estimates, standard errors and the fitted theta and C.

    '''
    rng = as_rng(rng)
    depths = np.asarray(sorted(set(int(d) for d in depths)))
    if depths[0] < 0:
        raise ValueError('Depths must be non-negative.')
    start = SiteState(0, 1) if start is None else start
    k0 = start.layer if isinstance(start, SiteState) else 0
    D = int(depths.max())
    target = k0 + D + extra
    if isinstance(env, EnvironmentSpec):
        seed = int(rng.integers(2**62))
        n_envs = -(-replicas // walkers_per_env)
        env = [sample_environment(env.with_seed(derive_seed(seed, 5, r)), (k0 - MARGIN, target + 1))
               for r in range(n_envs)]
        replicas = n_envs*walkers_per_env
    positive = depths[depths > 0]
    summary = run_to_layer(env, start, target, cap=cap, rng=rng, replicas=replicas,
                           layers=k0 + positive if positive.size else [target],
                           walkers_per_env=walkers_per_env, occupation=False, watch=k0)

    tail = np.ones(depths.size)
    stderr = np.zeros(depths.size)
    R = summary.replicas
    for j, d in enumerate(depths):
        if d == 0:
            continue
        T = summary.T(k0 + d)
        returned = (T >= 0) & (summary.watch_last > T)
        tail[j] = returned.mean()
        stderr[j] = math.sqrt(max(tail[j]*(1 - tail[j]), 1/R)/R)

    fit = (depths > 0) & (tail > 0)
    theta, C = math.nan, math.nan
    if fit.sum() >= 2:
        reg = linregress(depths[fit], np.log(tail[fit]))
        theta, C = math.exp(reg.slope), math.exp(reg.intercept)
    return BacktrackTail(depths, tail, stderr, theta, C, R,
                         {'capped': int(summary.capped.sum()), 'horizon': target})


def write_walk_csv(summary, path):
    '''One row per replica: seed, hitting times, steps, max_backtrack, capped.'''
    columns = ['replica', 'seed', 'T', 'steps', 'max_backtrack', 'capped']
    rows = ({'replica': r, 'seed': '' if summary.seed is None else summary.seed,
             'T': ';'.join(str(int(x)) for x in summary.hitting_times[r]),
             'steps': int(summary.steps[r]), 'max_backtrack': int(summary.max_backtrack[r]),
             'capped': str(bool(summary.capped[r])).lower()}
            for r in range(summary.replicas))
    write_csv(path, columns, rows)


def write_occupation_csv(profiles, path):
    '''
    Sparse occupation CSV (k, i, value, stderr) from OccupationProfile
    objects or from a WalkSummary (raw counts, empty stderr).
    '''
    columns = ['k', 'i', 'value', 'stderr']
    if isinstance(profiles, WalkSummary):
        rows = [{'k': k, 'i': i, 'value': v, 'stderr': ''}
                for (k, i), v in sorted(profiles.occupation_map().items())]
    else:
        if isinstance(profiles, OccupationProfile):
            profiles = [profiles]
        rows = [{'k': p.layer, 'i': i + 1, 'value': repr(float(p.values[i])),
                 'stderr': repr(float(p.stderr[i]))}
                for p in profiles for i in range(p.values.size)]
    write_csv(path, columns, rows)
