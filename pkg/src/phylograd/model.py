"""CTMC substitution models, rate-category mixtures and transition matrices.

All generators are normalised to one expected substitution per unit branch
length at stationarity.  Transition matrices for a whole tree are produced in
a single batch and stored padded and column-major, the layout the block
kernels read from (see :class:`TransitionMatrixSet`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations, product

import numpy as np
import scipy.linalg
from scipy import special, stats

from .errors import ParameterDomainError, ValidationError
from .genetic_code import genetic_code, is_transition

log = logging.getLogger(__name__)

NUCLEOTIDE_PAIRS = tuple(combinations(range(4), 2))  # AC AG AT CG CT GT
EIGEN_RESIDUAL_LIMIT = 1e-7
PAD_MULTIPLE = 16


def padded_size(state_count: int) -> int:
    """Smallest multiple of 16 >= ``state_count`` for S > 4, else S itself."""
    if state_count <= 4:
        return state_count
    return -(-state_count // PAD_MULTIPLE) * PAD_MULTIPLE


@dataclass(frozen=True, eq=False)
class RateMatrix:
    matrix: np.ndarray
    stationary: np.ndarray

    @property
    def state_count(self) -> int:
        return self.matrix.shape[0]

    @property
    def expected_rate(self) -> float:
        return float(-np.dot(self.stationary, np.diag(self.matrix)))

    def is_reversible(self, tol: float = 1e-10) -> bool:
        flux = self.stationary[:, None] * self.matrix
        return bool(np.max(np.abs(flux - flux.T)) <= tol)


def from_generator(matrix, stationary=None, normalize=True) -> RateMatrix:
    """Wrap a user-supplied generator (any state count) as a RateMatrix.

    Diagonals are recomputed from the off-diagonal entries.  When no
    stationary distribution is given it is solved for from ``pi Q = 0``.
    """
    q = np.array(matrix, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 2:
        raise ValidationError(f"generator must be square with S >= 2, got {q.shape}")
    np.fill_diagonal(q, 0.0)
    if np.any(q < 0):
        raise ParameterDomainError("generator off-diagonal entries must be >= 0")
    np.fill_diagonal(q, -q.sum(axis=1))
    if stationary is None:
        pi = _solve_stationary(q)
    else:
        pi = np.asarray(stationary, dtype=float)
        if pi.shape != (q.shape[0],):
            raise ValidationError("stationary distribution length does not match S")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ValidationError("stationary distribution must be a probability vector")
        pi = pi / pi.sum()
    if normalize:
        rate = -np.dot(pi, np.diag(q))
        if rate <= 0:
            raise ParameterDomainError("generator has zero expected rate")
        q = q / rate
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
    q.flags.writeable = False
    pi.flags.writeable = False
    return RateMatrix(q, pi)


def _solve_stationary(q):
    s = q.shape[0]
    a = np.vstack([q.T, np.ones(s)])
    b = np.zeros(s + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _check_frequencies(freqs, size):
    f = np.asarray(freqs, dtype=float)
    if f.shape != (size,):
        raise ValidationError(f"expected {size} frequencies, got shape {f.shape}")
    if np.any(f < 0):
        raise ParameterDomainError("frequencies must be non-negative")
    if abs(f.sum() - 1.0) > 1e-9:
        raise ValidationError(f"frequencies sum to {f.sum():.12g}, not 1")
    return f / f.sum()


def build_gtr(exchangeabilities, frequencies) -> RateMatrix:
    """General time-reversible nucleotide generator.

    ``exchangeabilities`` are ordered AC, AG, AT, CG, CT, GT.
    """
    ex = np.asarray(exchangeabilities, dtype=float)
    if ex.shape != (6,):
        raise ValidationError("GTR needs exactly 6 exchangeabilities")
    if np.any(ex <= 0):
        raise ParameterDomainError("GTR exchangeabilities must be > 0")
    pi = _check_frequencies(frequencies, 4)
    q = np.zeros((4, 4))
    for rho, (a, b) in zip(ex, NUCLEOTIDE_PAIRS):
        q[a, b] = rho * pi[b]
        q[b, a] = rho * pi[a]
    return from_generator(q, pi)


def jukes_cantor() -> RateMatrix:
    return build_gtr(np.ones(6), np.full(4, 0.25))


@dataclass(frozen=True)
class CodonModelParams:
    kappa: float
    omega: float
    codon_frequencies: tuple = None
    genetic_code: str = "universal"

    def __post_init__(self):
        if self.kappa <= 0 or self.omega <= 0:
            raise ParameterDomainError("kappa and omega must be > 0")


def build_codon_m0(params: CodonModelParams) -> RateMatrix:
    """Goldman-Yang style M0 codon generator.

    Single-nucleotide changes between sense codons ``i -> j`` get rate
    ``pi_j * (kappa if transition) * (omega if nonsynonymous)``; codon
    pairs differing at two or three positions get zero.
    """
    code = genetic_code(params.genetic_code)
    s = code.state_count
    freqs = params.codon_frequencies
    if freqs is None:
        pi = np.full(s, 1.0 / s)
    else:
        f = np.asarray(freqs, dtype=float)
        if f.shape == (64,):
            # 64-entry vectors are in ACGT codon order including stops.
            all_codons = ["".join(c) for c in product("ACGT", repeat=3)]
            stop_mass = sum(f[k] for k, c in enumerate(all_codons) if code.is_stop(c))
            if stop_mass != 0:
                raise ValidationError(
                    f"stop codons carry frequency mass {stop_mass:g} under the "
                    f"{code.name} code"
                )
            f = np.array([f[k] for k, c in enumerate(all_codons) if not code.is_stop(c)])
        pi = _check_frequencies(f, s)
    q = np.zeros((s, s))
    for i, ci in enumerate(code.codons):
        for j, cj in enumerate(code.codons):
            diffs = [k for k in range(3) if ci[k] != cj[k]]
            if len(diffs) != 1:
                continue
            k = diffs[0]
            rate = pi[j]
            if is_transition(ci[k], cj[k]):
                rate *= params.kappa
            if code.amino_acids[i] != code.amino_acids[j]:
                rate *= params.omega
            q[i, j] = rate
    return from_generator(q, pi)


@dataclass(frozen=True, eq=False)
class RateCategories:
    rates: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if rates.shape != weights.shape or rates.ndim != 1 or rates.size == 0:
            raise ValidationError("rates and weights must be equal-length 1-D arrays")
        if np.any(rates <= 0):
            raise ParameterDomainError("category rates must be > 0")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError("category weights must be a probability vector")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.rates.size

    @classmethod
    def single(cls):
        return cls(np.ones(1), np.ones(1))


def discrete_gamma(alpha: float, count: int) -> RateCategories:
    """Equal-weight discretised gamma, mean of each quantile bin as its rate.

    The gamma has shape ``alpha`` and mean one; the bin means use the
    identity ``E[X; a < X < b] = I(alpha+1, alpha*b) - I(alpha+1, alpha*a)``
    and the result is rescaled to mean exactly one.
    """
    if not alpha > 0:
        raise ParameterDomainError(f"gamma shape must be > 0, got {alpha}")
    if int(count) != count or count < 1:
        raise ParameterDomainError(f"category count must be a positive integer, got {count}")
    count = int(count)
    if count == 1:
        return RateCategories.single()
    cuts = stats.gamma.ppf(np.arange(1, count) / count, a=alpha, scale=1.0 / alpha)
    cdf = np.concatenate([[0.0], special.gammainc(alpha + 1.0, alpha * cuts), [1.0]])
    rates = count * np.diff(cdf)
    rates /= rates.mean()
    return RateCategories(rates, np.full(count, 1.0 / count))


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    inverse_right_vectors: np.ndarray
    generator: np.ndarray
    use_expm: bool = False

    @property
    def state_count(self) -> int:
        return self.generator.shape[0]

    def reconstruct(self):
        return (self.right_vectors * self.eigenvalues) @ self.inverse_right_vectors


def decompose(rate_matrix: RateMatrix) -> EigenSystem:
    """Eigendecompose ``Q``, symmetrising through ``diag(pi)^(1/2)`` when
    the generator is reversible with strictly positive ``pi``.

    Falls back to Pade scaling-and-squaring (``use_expm``) when the
    reconstruction residual is above 1e-7 or the generator is not reversible.
    """
    q = rate_matrix.matrix
    pi = rate_matrix.stationary
    if np.all(pi > 0) and rate_matrix.is_reversible():
        root = np.sqrt(pi)
        sym = root[:, None] * q / root[None, :]
        sym = 0.5 * (sym + sym.T)
        lam, u = np.linalg.eigh(sym)
        right = u / root[:, None]
        inverse = u.T * root[None, :]
        eig = EigenSystem(lam, right, inverse, q)
        residual = np.max(np.abs(eig.reconstruct() - q))
        if residual <= EIGEN_RESIDUAL_LIMIT:
            return eig
        log.warning("eigen reconstruction residual %.3g; using scaling-and-squaring", residual)
    else:
        lam, right = np.linalg.eig(q)
        if np.all(np.abs(lam.imag) == 0):
            try:
                inverse = np.linalg.inv(right.real)
                eig = EigenSystem(lam.real, right.real, inverse, q)
                if np.max(np.abs(eig.reconstruct() - q)) <= EIGEN_RESIDUAL_LIMIT:
                    return eig
            except np.linalg.LinAlgError:
                pass
    s = q.shape[0]
    return EigenSystem(np.zeros(s), np.eye(s), np.eye(s), q, use_expm=True)


def _check_length(length):
    if np.any(np.asarray(length) < 0):
        raise ParameterDomainError("branch lengths must be >= 0")


def transition_matrix(eig: EigenSystem, rate: float, length: float) -> np.ndarray:
    """``exp(rate * length * Q)`` as a dense S x S row-stochastic matrix."""
    _check_length(length)
    t = rate * length
    if t == 0:
        return np.eye(eig.state_count)
    if eig.use_expm:
        return scipy.linalg.expm(t * eig.generator)
    # I + V (e^{lt} - 1) V^-1 keeps small off-diagonal entries relatively accurate
    return np.eye(eig.state_count) + (eig.right_vectors * np.expm1(t * eig.eigenvalues)) @ eig.inverse_right_vectors


def transition_derivative(eig: EigenSystem, rate: float, length: float) -> np.ndarray:
    """d/d(length) of :func:`transition_matrix`: ``rate * Q * exp(rate*length*Q)``."""
    _check_length(length)
    t = rate * length
    if eig.use_expm:
        return rate * eig.generator @ scipy.linalg.expm(t * eig.generator)
    scale = rate * eig.eigenvalues * np.exp(t * eig.eigenvalues)
    return (eig.right_vectors * scale) @ eig.inverse_right_vectors


@dataclass(frozen=True, eq=False)
class TransitionMatrixSet:
    """Per-branch, per-rate transition matrices.

    ``data[b, r, t, s] == P^(r)(b)[s, t]``: each matrix is flattened
    column-major so column ``t`` of ``P`` is contiguous.  Entries with
    ``s >= S`` or ``t >= S`` are exactly zero.
    """

    data: np.ndarray
    state_count: int

    @property
    def padded_count(self) -> int:
        return self.data.shape[-1]

    @property
    def branch_count(self) -> int:
        return self.data.shape[0]

    @property
    def rate_count(self) -> int:
        return self.data.shape[1]

    def matrix(self, branch: int, rate: int) -> np.ndarray:
        s = self.state_count
        return self.data[branch, rate, :s, :s].T.copy()


def transition_matrix_set(
    eig: EigenSystem, categories: RateCategories, lengths, pad: bool = True
) -> TransitionMatrixSet:
    lengths = np.asarray(lengths, dtype=float)
    _check_length(lengths)
    s = eig.state_count
    s_pad = padded_size(s) if pad else s
    t = lengths[:, None] * categories.rates[None, :]
    out = np.zeros((lengths.size, categories.count, s_pad, s_pad))
    if eig.use_expm:
        p = scipy.linalg.expm(t[..., None, None] * eig.generator)
    else:
        scaled = eig.right_vectors[None, None] * np.expm1(t[..., None] * eig.eigenvalues)[:, :, None, :]
        p = scaled @ eig.inverse_right_vectors + np.eye(s)
    p[t == 0] = np.eye(s)  # exact identity, not V V^-1
    out[:, :, :s, :s] = np.swapaxes(p, -1, -2)
    out.flags.writeable = False
    return TransitionMatrixSet(out, s)


@dataclass(frozen=True, eq=False)
class SubstitutionModel:
    """A rate matrix, its eigensystem, a rate mixture and a root distribution."""

    rate_matrix: RateMatrix
    categories: RateCategories = field(default_factory=RateCategories.single)
    root_frequencies: np.ndarray = None
    eigen: EigenSystem = None

    def __post_init__(self):
        if self.eigen is None:
            object.__setattr__(self, "eigen", decompose(self.rate_matrix))
        if self.root_frequencies is None:
            object.__setattr__(self, "root_frequencies", self.rate_matrix.stationary)
        else:
            pi = _check_frequencies(self.root_frequencies, self.state_count)
            object.__setattr__(self, "root_frequencies", pi)

    @property
    def state_count(self) -> int:
        return self.rate_matrix.state_count

    def transition_matrices(self, lengths, pad: bool = True) -> TransitionMatrixSet:
        return transition_matrix_set(self.eigen, self.categories, lengths, pad=pad)

    def rate_generators(self, pad: bool = True) -> np.ndarray:
        """``gamma_r * Q`` for every category, row-major, zero padded.

        Row-major ``Q`` is the column-major flattening of ``Q'``, which is
        the operand the gradient kernel applies to pre-order partials.
        """
        s = self.state_count
        s_pad = padded_size(s) if pad else s
        out = np.zeros((self.categories.count, s_pad, s_pad))
        out[:, :s, :s] = self.categories.rates[:, None, None] * self.rate_matrix.matrix
        return out
