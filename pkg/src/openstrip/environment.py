'''
MODULE: environment.py
@Authors:
    A. Procacci [1]
    [1]: Université Libre de Bruxelles, Aero-Thermo-Mechanics Laboratory, Bruxelles, Belgium
@Contacts:
    alberto.procacci@ulb.be
@Additional notes:
    This code is distributed in the hope that it will be useful, but WITHOUT ANY WARRANTY;
    Please report any bug to: alberto.procacci@ulb.be
'''

import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .utils import (StructuralError, ConfigError, ConvergenceError, check_keys, load_yaml, make_rng,
                    zigzag, row_sum_norm)

logger = logging.getLogger(__name__)

STOCH_TOL = 1e-12
SINGULAR_COND = 1e12
BLOCK = 1024
GENERATORS = ('dirichlet', 'uniform')


class MatrixTriple():
    '''
    One layer of the strip: the matrices (P, Q, R) of transition probabilities
    to the layer above, the layer below and within the layer.

    Attributes
    ----------
    P, Q, R : numpy array
        Nonnegative matrices of size (m,m). P+Q+R is row-stochastic.

    m : int
        Width of the strip.

    '''

    def __init__(self, P, Q, R):
        P = np.array(P, dtype=float, ndmin=2)
        Q = np.array(Q, dtype=float, ndmin=2)
        R = np.array(R, dtype=float, ndmin=2)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise StructuralError(f'P must be a square matrix, got shape {P.shape}')
        if Q.shape != P.shape or R.shape != P.shape:
            raise StructuralError(f'P, Q, R must share the same shape, got {P.shape}, {Q.shape}, {R.shape}')

        for M in (P, Q, R):
            M.setflags(write=False)
        self.P, self.Q, self.R = P, Q, R
        self.m = P.shape[0]

    @classmethod
    def scalar(cls, p, q, r=0.):
        '''Triple of the m=1 walk with p + q + r = 1.'''
        return cls([[p]], [[q]], [[r]])

    def kernel(self):
        '''Return the (m, 3m) kernel rows [P | R | Q].'''
        return np.concatenate([self.P, self.R, self.Q], axis=1)

    def to_dict(self):
        return {'P': self.P.tolist(), 'Q': self.Q.tolist(), 'R': self.R.tolist()}

    def __eq__(self, other):
        if not isinstance(other, MatrixTriple):
            return NotImplemented
        return (np.array_equal(self.P, other.P) and np.array_equal(self.Q, other.Q)
                and np.array_equal(self.R, other.R))

    def __hash__(self):
        return hash((self.P.tobytes(), self.Q.tobytes(), self.R.tobytes()))

    def __repr__(self):
        return f'MatrixTriple(P={self.P.tolist()}, Q={self.Q.tolist()}, R={self.R.tolist()})'


@dataclass(frozen=True)
class EllipticityParams:
    '''The constants eps (condition C2*) and kappa (condition C3).'''
    eps: float = 0.01
    kappa: float = 0.

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError(f'eps must lie in (0,1), got {self.eps}')
        if not 0 <= self.kappa < 1:
            raise ValueError(f'kappa must lie in [0,1), got {self.kappa}')


@dataclass
class ValidationReport:
    '''
    Pass/fail per condition for one triple (or a stack of layers, in which
    case each flag is the conjunction over the layers).
    '''
    nonnegative: bool
    stochastic: bool
    norm_R: bool
    c2_entries: bool
    c3: bool
    details: dict = field(default_factory=dict)

    @property
    def c2_star(self):
        return self.norm_R and self.c2_entries

    @property
    def passed(self):
        return self.nonnegative and self.stochastic and self.c2_star and self.c3

    def failures(self):
        names = ('nonnegative', 'stochastic', 'norm_R', 'c2_entries', 'c3')
        return [name for name in names if not getattr(self, name)]


def _validate_stack(P, Q, R, e):
    '''
    Vectorized checks over stacks of shape (L, m, m). Returns one boolean
    array of size (L,) per condition.
    '''
    L, m, _ = P.shape
    nonneg = (P >= 0).all(axis=(1, 2)) & (Q >= 0).all(axis=(1, 2)) & (R >= 0).all(axis=(1, 2))
    rows = (P + Q + R).sum(axis=2)
    stoch = (np.abs(rows - 1) <= STOCH_TOL).all(axis=1)
    norm = row_sum_norm(R) < 1 - e.eps

    I_R = np.eye(m) - R
    entries = np.zeros(L, dtype=bool)
    with np.errstate(all='ignore'):
        cond = np.linalg.cond(I_R)
    regular = np.isfinite(cond) & (cond < SINGULAR_COND)
    if regular.any():
        X = np.linalg.solve(I_R[regular], np.concatenate([P[regular], Q[regular]], axis=2))
        entries[regular] = (X > e.eps).all(axis=(1, 2))

    c3 = (np.diagonal(R, axis1=1, axis2=2) >= e.kappa).all(axis=1)
    return nonneg, stoch, norm, entries, c3


def validate_triple(t, e):
    '''
    Checks a triple against stochasticity and the ellipticity conditions.

    Parameters
    ----------
    t : MatrixTriple
        Triple to be checked. It is not modified.

    e : EllipticityParams
        The constants eps and kappa.

    Returns
    -------
    report : ValidationReport
        Pass/fail per condition. A singular (I-R) is reported as a failure of
        C2*, never raised.

    '''
    if not isinstance(t, MatrixTriple):
        raise TypeError('t must be a MatrixTriple.')
    flags = _validate_stack(t.P[None], t.Q[None], t.R[None], e)
    report = ValidationReport(*(bool(f[0]) for f in flags))
    report.details = {'norm_R': float(row_sum_norm(t.R)), 'min_diag_R': float(np.diag(t.R).min())}
    return report


class EnvironmentSpec():
    '''
    Law of an i.i.d. environment: either a finite support of weighted triples
    or a parametric generator.

    Attributes
    ----------
    m : int
        Width of the strip.

    support : list
        List of (MatrixTriple, weight) pairs, empty for generator specs.

    generator : dict or None
        Parametric generator description (kind 'dirichlet' or 'uniform').

    seed : int
        Master seed of the environment.

    ellipticity : EllipticityParams
        Constants used when validating the layers.

    name : str
        Label used in reports.

    Methods
    ----------
    from_dict(d)
        Build a spec from a config mapping.

    to_dict()
        Canonical mapping of the spec.

    spec_id()
        Short digest identifying the spec.

    with_seed(seed)
        Same law, different master seed.

    '''

    def __init__(self, m, support=None, generator=None, seed=0, ellipticity=None, name='spec'):
        if type(m) is not int or m < 1:
            raise StructuralError('The width m must be a positive integer.')
        if (support is None) == (generator is None):
            raise StructuralError('Exactly one of support and generator must be given.')

        self.m = m
        self.seed = int(seed)
        self.ellipticity = ellipticity if ellipticity is not None else EllipticityParams()
        self.name = name
        self.support = []
        self.generator = None

        if support is not None:
            if len(support) == 0:
                raise StructuralError('The support is empty.')
            for t, w in support:
                if not isinstance(t, MatrixTriple):
                    raise TypeError('Support entries must be (MatrixTriple, weight) pairs.')
                if t.m != m:
                    raise StructuralError(f'Support triple of width {t.m} in a spec of width {m}')
                if w < 0:
                    raise StructuralError('Negative support weight.')
                self.support.append((t, float(w)))
            total = sum(w for _, w in self.support)
            if abs(total - 1) > STOCH_TOL:
                raise StructuralError(f'Support weights sum to {total!r}, not 1.')
        else:
            self.generator = _check_generator(generator, m)

    @property
    def is_finite(self):
        return self.generator is None

    @property
    def weights(self):
        return np.array([w for _, w in self.support])

    def with_seed(self, seed):
        return EnvironmentSpec(self.m, support=self.support or None, generator=self.generator,
                               seed=seed, ellipticity=self.ellipticity, name=self.name)

    def validate(self):
        '''
        Validates every support triple. Generator specs are validated layer
        by layer when the environment is materialized.

        Returns
        -------
        reports : list
            One ValidationReport per support triple.

        '''
        return [validate_triple(t, self.ellipticity) for t, _ in self.support]

    def to_dict(self):
        d = {'name': self.name, 'width': self.m, 'seed': self.seed,
             'ellipticity': {'eps': self.ellipticity.eps, 'kappa': self.ellipticity.kappa}}
        if self.is_finite:
            d['support'] = [dict(t.to_dict(), weight=w) for t, w in self.support]
        else:
            d['generator'] = dict(self.generator)
        return d

    def spec_id(self):
        '''Hex digest of the canonical spec mapping (first 12 characters).'''
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(blob.encode('utf-8')).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d, where='spec'):
        check_keys(d, ('schema_version', 'name', 'width', 'seed', 'ellipticity', 'support', 'generator'),
                   where, required=('width',))
        m = d['width']
        if type(m) is not int:
            raise ConfigError(f'{where}.width must be an integer')
        ell = d.get('ellipticity', {})
        check_keys(ell, ('eps', 'kappa'), f'{where}.ellipticity')
        try:
            ellipticity = EllipticityParams(**ell)
        except ValueError as err:
            raise ConfigError(f'{where}.ellipticity: {err}') from err

        support = None
        if 'support' in d:
            support = []
            for j, entry in enumerate(d['support']):
                check_keys(entry, ('weight', 'P', 'Q', 'R'), f'{where}.support[{j}]',
                           required=('weight', 'P', 'Q', 'R'))
                support.append((MatrixTriple(entry['P'], entry['Q'], entry['R']), entry['weight']))
        return cls(m, support=support, generator=d.get('generator'), seed=d.get('seed', 0),
                   ellipticity=ellipticity, name=d.get('name', 'spec'))

    def __repr__(self):
        kind = f'{len(self.support)} support points' if self.is_finite else self.generator['kind']
        return f'EnvironmentSpec(name={self.name!r}, m={self.m}, {kind}, seed={self.seed})'


def _check_generator(g, m):
    if not isinstance(g, dict) or 'kind' not in g:
        raise StructuralError('A generator must be a mapping with a kind.')
    kind = g['kind']
    if kind == 'dirichlet':
        check_keys(g, ('kind', 'concentration', 'floor'), 'generator')
        g = {'kind': kind, 'concentration': float(g.get('concentration', 1.)),
             'floor': float(g.get('floor', 0.02))}
        if g['concentration'] <= 0:
            raise StructuralError('The Dirichlet concentration must be positive.')
        if not 0 < g['floor'] < 1/(3*m):
            raise StructuralError(f'The floor must lie in (0, 1/(3m)) = (0, {1/(3*m)})')
    elif kind == 'uniform':
        check_keys(g, ('kind', 'low', 'high', 'r'), 'generator', required=('low', 'high'))
        if m != 1:
            raise StructuralError('The uniform generator is only defined for m=1.')
        g = {'kind': kind, 'low': float(g['low']), 'high': float(g['high']), 'r': float(g.get('r', 0.))}
        if not 0 < g['low'] <= g['high'] <= 1 - g['r'] or g['r'] < 0:
            raise StructuralError('The uniform generator needs 0 < low <= high <= 1-r.')
    else:
        raise NotImplementedError(f'The generator kind {kind!r} is not implemented.')
    return g


def load_spec(path):
    '''Reads an environment spec from a yaml file.'''
    data = load_yaml(path)
    name = data.get('name', os.path.splitext(os.path.basename(path))[0])
    try:
        return EnvironmentSpec.from_dict(dict(data, name=name), where=path)
    except StructuralError as err:
        raise ConfigError(f'{path}: {err}') from err


class Environment():
    '''
    Realization of an i.i.d. environment. Layers are generated lazily by
    blocks of 1024 from (master seed, block index), so that any layer can be
    regenerated bit-for-bit and the window can grow without changing the
    layers already generated.

    Attributes
    ----------
    spec : EnvironmentSpec
        Law of the environment.

    window : tuple
        Integer interval (lo, hi) that can be accessed.

    Methods
    ----------
    layer(n)
        Triple of layer n.

    materialize(lo, hi)
        Stacked matrices on [lo, hi].

    extend(window)
        Environment with a larger window sharing the same layers.

    fingerprint(lo, hi)
        Digest of the layers in [lo, hi].

    '''

    def __init__(self, spec, window, validate=True, _cache=None):
        if not isinstance(spec, EnvironmentSpec):
            raise TypeError('spec must be an EnvironmentSpec.')
        lo, hi = (int(w) for w in window)
        if lo > hi:
            raise StructuralError(f'Empty window [{lo}, {hi}]')
        self.spec = spec
        self.m = spec.m
        self.window = (lo, hi)
        self.validate = validate
        self._blocks = {} if _cache is None else _cache
        if spec.is_finite:
            self._support = np.stack([np.stack([t.P, t.Q, t.R]) for t, _ in spec.support])
            self._cum = np.cumsum(spec.weights)
            self._cum[-1] = 1.

    def _block(self, b):
        '''Support indices (finite specs) or stacked matrices of block b.'''
        blk = self._blocks.get(b)
        if blk is not None:
            return blk

        rng = make_rng(self.spec.seed, 0, zigzag(b))
        if self.spec.is_finite:
            idx = np.searchsorted(self._cum, rng.random(BLOCK), side='right')
            blk = idx.astype(np.min_scalar_type(len(self.spec.support)))
        else:
            blk = self._generate(rng)
            if self.validate:
                flags = _validate_stack(blk[:, 0], blk[:, 1], blk[:, 2], self.spec.ellipticity)
                bad = ~np.logical_and.reduce(flags[:4])
                if bad.any():
                    layer = b*BLOCK + int(np.argmax(bad))
                    raise StructuralError(f'Generated layer {layer} violates C2*.')
        blk.setflags(write=False)
        # concurrent first touches generate identical blocks
        return self._blocks.setdefault(b, blk)

    def _generate(self, rng):
        g, m = self.spec.generator, self.m
        out = np.empty((BLOCK, 3, m, m))
        if g['kind'] == 'dirichlet':
            d = rng.dirichlet(np.full(3*m, g['concentration']), size=(BLOCK, m))
            rows = g['floor'] + (1 - 3*m*g['floor'])*d
            out[:, 0], out[:, 2], out[:, 1] = rows[..., :m], rows[..., m:2*m], rows[..., 2*m:]
        elif g['kind'] == 'uniform':
            p = rng.uniform(g['low'], g['high'], size=BLOCK)
            out[:, 0, 0, 0] = p
            out[:, 1, 0, 0] = 1 - g['r'] - p
            out[:, 2, 0, 0] = g['r']
        else:
            raise NotImplementedError(f'The generator kind {g["kind"]!r} is not implemented.')
        return out

    def _check(self, lo, hi):
        if lo < self.window[0] or hi > self.window[1]:
            raise StructuralError(f'Layers [{lo}, {hi}] outside the window {list(self.window)}; '
                                  'use extend() first')

    def _span(self, lo, hi):
        lo, hi = int(lo), int(hi)
        self._check(lo, hi)
        b0, b1 = lo // BLOCK, hi // BLOCK
        data = np.concatenate([self._block(b) for b in range(b0, b1 + 1)])
        return data[lo - b0*BLOCK:hi - b0*BLOCK + 1]

    def materialize(self, lo, hi):
        '''
        Return the stacked matrices of the layers lo..hi (both included).

        Returns
        -------
        P, Q, R : numpy array
            Arrays of size (hi-lo+1, m, m).

        '''
        data = self._span(lo, hi)
        if self.spec.is_finite:
            data = self._support[data]
        return data[:, 0], data[:, 1], data[:, 2]

    def layer(self, n):
        P, Q, R = self.materialize(n, n)
        return MatrixTriple(P[0], Q[0], R[0])

    def extend(self, window):
        '''Environment on the union of the current window and window.'''
        lo = min(self.window[0], int(window[0]))
        hi = max(self.window[1], int(window[1]))
        if (lo, hi) == self.window:
            return self
        return Environment(self.spec, (lo, hi), validate=self.validate, _cache=self._blocks)

    def covering(self, lo, hi):
        '''Same as extend, for the interval [lo, hi].'''
        return self.extend((lo, hi))

    def fingerprint(self, lo=None, hi=None):
        lo = self.window[0] if lo is None else lo
        hi = self.window[1] if hi is None else hi
        P, Q, R = self.materialize(lo, hi)
        h = hashlib.sha256()
        for M in (P, Q, R):
            h.update(np.ascontiguousarray(M).tobytes())
        return h.hexdigest()

    def support_index(self, lo, hi):
        '''Index of the support point of each layer in [lo, hi] (finite specs).'''
        if not self.spec.is_finite:
            raise StructuralError('Support indices only exist for finite-support specs.')
        return self._span(lo, hi)

    @property
    def support_array(self):
        '''Support matrices stacked as (K, 3, m, m) in the order P, Q, R.'''
        return self._support if self.spec.is_finite else None

    def __len__(self):
        return self.window[1] - self.window[0] + 1

    def __repr__(self):
        return f'Environment({self.spec!r}, window={list(self.window)})'


def sample_environment(spec, window, validate=True):
    '''
    Sample an environment with law spec on the window.

    Parameters
    ----------
    spec : EnvironmentSpec
        Law of the layers and master seed.

    window : tuple
        Integer interval (lo, hi).

    validate : bool, optional
        Whether to validate the support (finite specs) or the generated
        layers (generator specs). The default is True.

    Returns
    -------
    env : Environment
        The environment.

    '''
    if validate:
        for j, report in enumerate(spec.validate()):
            if not report.passed:
                raise StructuralError(f'Support triple {j} of {spec.name!r} fails {report.failures()}')
    env = Environment(spec, window, validate=validate)
    logger.debug('sampled %r', env)
    return env


def constant_fixed_point(t, tol=1e-14, max_iter=100000):
    '''
    Fixed point of zeta <- (I - R - Q zeta)^{-1} P for a constant environment,
    started from the uniform stochastic matrix.
    '''
    m = t.m
    zeta = np.full((m, m), 1/m)
    I = np.eye(m)
    for _ in range(max_iter):
        new = np.linalg.solve(I - t.R - t.Q @ zeta, t.P)
        if np.max(np.abs(new - zeta)) < tol:
            return new
        zeta = new
    raise ConvergenceError(f'No fixed point within {max_iter} iterations.')


def support_lambdas(spec):
    '''
    Leading eigenvalue of A = (I - R - Q zeta)^{-1} Q for every support
    triple, zeta being the fixed point of the constant environment.
    For m=1 this is q/p.

    Returns
    -------
    lambdas : numpy array
        Size (K,), in the order of spec.support.

    '''
    if not spec.is_finite:
        raise StructuralError('support_lambdas needs a finite-support spec.')
    out = np.empty(len(spec.support))
    for j, (t, _) in enumerate(spec.support):
        if t.m == 1:
            out[j] = t.Q[0, 0]/t.P[0, 0]
            continue
        zeta = constant_fixed_point(t)
        A = np.linalg.solve(np.eye(t.m) - t.R - t.Q @ zeta, t.Q)
        out[j] = np.max(np.abs(np.linalg.eigvals(A)))
    return out


def encode_site(x, m):
    '''Site x of Z -> (layer, rung) with rungs numbered 1..m.'''
    return x // m, x % m + 1


def decode_site(layer, rung, m):
    return layer*m + rung - 1


@dataclass(frozen=True)
class JumpLaw:
    '''
    Law of the jump distributions of an RWRE on Z with bounded jumps.

    Every site draws independently one probability vector from support
    (vectors over the jumps -radius..radius) with the given weights.
    '''
    radius: int
    support: tuple

    def __post_init__(self):
        vectors = []
        for vec, w in self.support:
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (2*self.radius + 1,):
                raise StructuralError(f'Jump vectors must have {2*self.radius + 1} entries.')
            if (vec < 0).any() or abs(vec.sum() - 1) > STOCH_TOL:
                raise StructuralError('Jump vectors must be probability vectors.')
            vectors.append((tuple(vec), float(w)))
        object.__setattr__(self, 'support', tuple(vectors))

    def max_jump(self):
        '''Largest |d| with positive probability under some support vector.'''
        d = np.arange(-self.radius, self.radius + 1)
        charged = np.any([np.asarray(v) > 0 for v, _ in self.support], axis=0)
        return int(np.abs(d[charged]).max())


def jump_triple(site_vectors, m):
    '''
    Triple of one layer of the blocked walk.

    Parameters
    ----------
    site_vectors : sequence
        The m jump vectors of the sites n*m, ..., n*m+m-1 (rung order).
        Entry j of a vector is the probability of the jump j - radius.

    m : int
        Width of the strip, at least the largest jump.

    Returns
    -------
    t : MatrixTriple
        Triple encoding the jump law of the layer.

    '''
    P, Q, R = np.zeros((m, m)), np.zeros((m, m)), np.zeros((m, m))
    blocks = {1: P, 0: R, -1: Q}
    for rung, vec in enumerate(site_vectors):
        vec = np.asarray(vec, dtype=float)
        radius = (vec.size - 1)//2
        for j, prob in enumerate(vec):
            if prob == 0:
                continue
            d = j - radius
            if abs(d) > m:
                raise StructuralError(f'Jump {d} exceeds the strip width {m}.')
            offset, target = divmod(rung + d, m)
            blocks[offset][rung, target] += prob
    return MatrixTriple(P, Q, R)


def reduce_bounded_jump(jump_law, m=None, seed=0, ellipticity=None, name='bounded_jump'):
    '''
    Strip environment of an RWRE on Z with jumps bounded by m.

    Site x is mapped to (x // m, x % m + 1), so a jump of size at most m
    lands in the layer below, the same layer or the layer above.
    A layer holds m sites with independent jump vectors, hence the support
    of the returned spec is the product of m copies of the jump support.

    Parameters
    ----------
    jump_law : JumpLaw
        Law of the per-site jump vectors.

    m : int, optional
        Width of the strip. The default is the radius of the jump law.

    Returns
    -------
    spec : EnvironmentSpec
        Spec whose triples encode the jump law exactly.

    '''
    if not isinstance(jump_law, JumpLaw):
        raise TypeError('jump_law must be a JumpLaw.')
    m = jump_law.radius if m is None else m
    if m < 1:
        raise StructuralError('The strip width must be positive.')
    largest = jump_law.max_jump()
    if largest > m:
        raise StructuralError(f'The jump law charges jumps of size {largest} > m = {m}.')

    support = {}
    for combo in itertools.product(jump_law.support, repeat=m):
        t = jump_triple([v for v, _ in combo], m)
        w = float(np.prod([w for _, w in combo]))
        support[t] = support.get(t, 0.) + w
    return EnvironmentSpec(m, support=list(support.items()), seed=seed,
                           ellipticity=ellipticity, name=name)
