"""Likelihood, pre-order partials and branch-length gradients.

Node numbering: tips ``0..N-1``, internal nodes in post-order ``N..2N-2``
with the root last.  Branch ``i`` is the edge above node ``i``, so there are
``2N-2`` branches and ascending node order is a valid post-order schedule.

Post-order partials ``p`` hold the probability of the data below a node
given its state; pre-order partials ``q`` hold the joint probability of the
node state and all data not below it.  For every node ``i`` and pattern
``c`` the site likelihood is ``sum_r w_r p_irc . q_irc``, and the derivative
with respect to the effective length of branch ``i`` is

    sum_r w_r gamma_r p_irc . (Q' q_irc)  /  sum_r w_r p_irc . q_irc

so one post-order and one pre-order pass give the whole gradient.

Partials are rescaled per node and pattern (max entry over rates and
states set to 1) and the log factors are kept in separate post- and
pre-order accumulators.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .alignment import PatternizedAlignment, RawAlignment, compress_patterns
from .backend import Backend, KernelTimings
from .errors import ImpossiblePatternError, SequencingError, ValidationError
from .model import SubstitutionModel, TransitionMatrixSet, padded_size
from .tree import Phylogeny

log = logging.getLogger(__name__)


@dataclass(eq=False)
class PartialBuffers:
    tip_count: int
    rate_count: int
    pattern_count: int
    state_count: int
    padded_count: int
    codes: np.ndarray  # (N, C) int32 tip codes
    masks: np.ndarray  # (M, S_pad) float
    post: np.ndarray  # (N-1, R, C, S_pad), internal nodes only
    pre: np.ndarray  # (2N-1, R, C, S_pad)
    post_scale: np.ndarray  # (2N-1, C) log factor of the whole subtree below a node
    pre_scale: np.ndarray  # (2N-1, C)
    site_log_likelihoods: np.ndarray = None
    post_complete: bool = False
    pre_complete: bool = False

    @classmethod
    def allocate(cls, tree: Phylogeny, alignment: PatternizedAlignment, rate_count: int,
                 padded_count: int) -> "PartialBuffers":
        n = tree.tip_count
        c = alignment.pattern_count
        return cls(
            n, rate_count, c, alignment.state_count, padded_count,
            np.ascontiguousarray(alignment.patterns, dtype=np.int32),
            alignment.mask_table(padded_count),
            np.zeros((n - 1, rate_count, c, padded_count)),
            np.zeros((2 * n - 1, rate_count, c, padded_count)),
            np.zeros((2 * n - 1, c)),
            np.zeros((2 * n - 1, c)),
        )

    def tip_partials(self, node: int) -> np.ndarray:
        """Expanded ``(C, S_pad)`` indicator rows for tip ``node``."""
        codes = self.codes[node]
        out = np.zeros((codes.size, self.padded_count))
        known = codes >= 0
        out[np.flatnonzero(known), codes[known]] = 1.0
        out[~known] = self.masks[-codes[~known] - 1]
        return out

    def post_partials(self, node: int) -> np.ndarray:
        """``(R, C, S_pad)`` post-order partials; tips are expanded on demand."""
        if node < self.tip_count:
            return np.broadcast_to(self.tip_partials(node), self.pre.shape[1:])
        return self.post[node - self.tip_count]

    def invalidate(self):
        self.post_complete = False
        self.pre_complete = False
        self.site_log_likelihoods = None


def _padded(vec, size):
    out = np.zeros(size)
    out[: len(vec)] = vec
    return out


def _launch_rescale(backend, slab, name_states, patterns):
    plan = backend.plan("rescalePartials", states=name_states, patterns=patterns)
    logs = np.zeros(patterns)
    backend.run_plan(plan, backend.kernels.rescale, plan.cbs, slab, logs, scratch=False)
    return logs


def postorder_traverse(tree: Phylogeny, model: SubstitutionModel, matrices: TransitionMatrixSet,
                       buffers: PartialBuffers, backend: Backend, rescale: bool = True) -> np.ndarray:
    """Fill post-order partials bottom-up; returns per-pattern root log likelihoods."""
    if matrices is None:
        raise SequencingError("transition matrices have not been computed")
    if matrices.data.shape[:2] != (tree.branch_count, buffers.rate_count) or \
            matrices.padded_count != buffers.padded_count:
        raise SequencingError("transition matrices do not match the partial buffers")
    buffers.invalidate()
    n = tree.tip_count
    s_pad = buffers.padded_count
    c = buffers.pattern_count
    plan = backend.plan("postOrderPartials", states=s_pad, patterns=c, rates=buffers.rate_count)
    kern = backend.kernels.postorder
    mats = matrices.data
    for node in tree.postorder_internal():
        a, b = (int(x) for x in tree.children[node])
        backend.run_plan(plan, kern, plan.cbs, plan.pbs, node, a, b, n, mats, buffers.post,
                         buffers.codes, buffers.masks)
        scale = buffers.post_scale[a] + buffers.post_scale[b]
        if rescale:
            scale = scale + _launch_rescale(backend, buffers.post[node - n], s_pad, c)
        buffers.post_scale[node] = scale
    buffers.post_complete = True
    pi = _padded(model.root_frequencies, s_pad)
    root = buffers.post[tree.root - n]
    with np.errstate(divide="ignore"):
        site = np.log(_mix(model.categories.weights, root * pi)) + buffers.post_scale[tree.root]
    buffers.site_log_likelihoods = site
    return site


def _mix(rate_weights, products):
    """``sum_r w_r sum_s products[r, c, s]`` with a fixed summation order."""
    per_rate = products.sum(axis=-1)
    return (rate_weights[:, None] * per_rate).sum(axis=0)


def impossible_patterns(buffers: PartialBuffers) -> list[int]:
    if buffers.site_log_likelihoods is None:
        raise SequencingError("post-order traversal has not run")
    return np.flatnonzero(~np.isfinite(buffers.site_log_likelihoods)).tolist()


def log_likelihood(buffers: PartialBuffers, weights) -> float:
    """``sum_c weight_c log L_c``; -inf (with a logged diagnostic) for impossible data."""
    if not buffers.post_complete or buffers.site_log_likelihoods is None:
        raise SequencingError("post-order traversal has not run")
    bad = impossible_patterns(buffers)
    if bad:
        log.info("zero likelihood for site pattern(s) %s", bad[:10])
        return float("-inf")
    return float(np.dot(np.asarray(weights, dtype=float), buffers.site_log_likelihoods))


def preorder_traverse(tree: Phylogeny, model: SubstitutionModel, matrices: TransitionMatrixSet,
                      transposed: TransitionMatrixSet | None, buffers: PartialBuffers,
                      backend: Backend, rescale: bool = True, schedule=None) -> PartialBuffers:
    """Fill pre-order partials top-down, root first.

    Each node is computed in two phases: the parent's ``q`` times the
    sibling's propagated post-order partial, then multiplication by the
    transpose of the node's own transition matrix.  For S > 4 the
    transposes must come from :meth:`Backend.transpose_all`; smaller
    matrices are transposed while staged.
    """
    if not buffers.post_complete:
        raise SequencingError("pre-order traversal needs a completed post-order traversal")
    n = tree.tip_count
    s_pad = buffers.padded_count
    c = buffers.pattern_count
    pretransposed = s_pad > 4
    if pretransposed and transposed is None:
        raise SequencingError("transposed matrices are required for more than 4 states")
    mats = matrices.data
    mats_node = transposed.data if pretransposed else mats
    buffers.pre[tree.root] = _padded(model.root_frequencies, s_pad)
    buffers.pre_scale[tree.root] = 0.0
    done = np.zeros(tree.node_count, dtype=bool)
    done[tree.root] = True
    plan = backend.plan("preOrderPartials", states=s_pad, patterns=c, rates=buffers.rate_count)
    kern = backend.kernels.preorder
    order = tree.preorder_nonroot() if schedule is None else schedule
    for node in order:
        node = int(node)
        parent = int(tree.parent[node])
        if node == tree.root or done[node]:
            raise SequencingError(f"node {node + 1} scheduled twice or is the root")
        if not done[parent]:
            raise SequencingError(f"node {node + 1} scheduled before its parent {parent + 1}")
        sib = int(tree.sibling(node))
        backend.run_plan(plan, kern, plan.cbs, plan.pbs, node, parent, sib, n, mats, mats_node,
                         pretransposed, buffers.post, buffers.pre, buffers.codes, buffers.masks)
        scale = buffers.pre_scale[parent] + buffers.post_scale[sib]
        if rescale:
            scale = scale + _launch_rescale(backend, buffers.pre[node], s_pad, c)
        buffers.pre_scale[node] = scale
        done[node] = True
    if not done.all():
        missing = (np.flatnonzero(~done) + 1).tolist()
        raise SequencingError(f"pre-order schedule skipped nodes {missing[:10]}")
    buffers.pre_complete = True
    return buffers


def node_log_likelihoods(buffers: PartialBuffers, model: SubstitutionModel, node: int) -> np.ndarray:
    """Per-pattern log likelihood evaluated at ``node`` from ``p`` and ``q``."""
    if not buffers.pre_complete:
        raise SequencingError("node likelihoods need both traversals")
    p = buffers.post_partials(node)
    q = buffers.pre[node]
    with np.errstate(divide="ignore"):
        return (np.log(_mix(model.categories.weights, p * q))
                + buffers.post_scale[node] + buffers.pre_scale[node])


def node_likelihood(buffers: PartialBuffers, model: SubstitutionModel, node: int,
                    pattern: int) -> float:
    return float(np.exp(node_log_likelihoods(buffers, model, node)[pattern]))


def gradient_columns(tree: Phylogeny, model: SubstitutionModel, buffers: PartialBuffers,
                     backend: Backend, generators=None) -> np.ndarray:
    """``(2N-2, C)`` per-pattern derivatives of log L_c wrt each effective branch length."""
    if not buffers.pre_complete:
        raise SequencingError("gradient needs both traversals")
    if generators is None:
        generators = model.rate_generators(pad=buffers.padded_count != buffers.state_count)
    generators = np.ascontiguousarray(generators)
    s_pad = buffers.padded_count
    plan = backend.plan("gradient", states=s_pad, patterns=buffers.pattern_count,
                        rates=buffers.rate_count, branches=tree.branch_count)
    columns = np.empty((tree.branch_count, buffers.pattern_count))
    rate_block = min(buffers.rate_count, s_pad * plan.cbs)
    backend.run_plan(plan, backend.kernels.gradient, plan.cbs, plan.pbs, rate_block,
                     tree.tip_count, generators, np.ascontiguousarray(model.categories.weights),
                     buffers.post, buffers.pre, buffers.codes, buffers.masks, columns)
    bad = ~np.isfinite(columns)
    if bad.any():
        patterns = np.flatnonzero(bad.any(axis=0)).tolist()
        raise ImpossiblePatternError(patterns)
    return columns


def reduce_columns(columns: np.ndarray, weights, backend: Backend) -> np.ndarray:
    """Weighted per-branch sums over patterns using fixed 128-wide reduction trees."""
    return backend.reduce_rows(columns, np.asarray(weights, dtype=float))


@dataclass(eq=False)
class GradientReport:
    per_branch: np.ndarray  # d logL / d(effective length), per branch
    log_likelihood: float
    branch_lengths: np.ndarray
    rate_scalars: np.ndarray
    timings: KernelTimings = field(default_factory=KernelTimings)
    per_column: np.ndarray = None
    site_log_likelihoods: np.ndarray = None

    @property
    def wrt_lengths(self) -> np.ndarray:
        return self.per_branch * self.rate_scalars

    @property
    def wrt_rate_scalars(self) -> np.ndarray:
        return self.per_branch * self.branch_lengths

    def branch_set(self, branches) -> float:
        """Gradient for one parameter shared additively by ``branches`` (0-based)."""
        idx = np.asarray(list(branches), dtype=int)
        if idx.size == 0:
            raise ValidationError("branch set is empty")
        if idx.min() < 0 or idx.max() >= self.per_branch.size:
            raise ValidationError("branch index out of range")
        return float(self.per_branch[idx].sum())

    def to_dict(self, include_columns: bool = False):
        out = {
            "logLikelihood": self.log_likelihood,
            "gradient": self.per_branch.tolist(),
            "gradientWrtLengths": self.wrt_lengths.tolist(),
            "gradientWrtRateScalars": self.wrt_rate_scalars.tolist(),
            "kernelTimings": self.timings.rows(),
        }
        if include_columns and self.per_column is not None:
            out["perColumn"] = self.per_column.tolist()
        return out


def as_patterns(alignment) -> PatternizedAlignment:
    if isinstance(alignment, RawAlignment):
        return compress_patterns(alignment)
    if isinstance(alignment, PatternizedAlignment):
        return alignment
    raise ValidationError(f"expected an alignment, got {type(alignment).__name__}")


class LikelihoodEngine:
    """Reusable buffers and schedule for one topology, model and data set."""

    def __init__(self, tree: Phylogeny, model: SubstitutionModel, alignment,
                 backend: Backend | None = None, *, rescale: bool = True, pad: bool = True):
        data = as_patterns(alignment).for_tree(tree)
        if data.state_count != model.state_count:
            raise ValidationError(
                f"alignment has {data.state_count} states but the model has {model.state_count}"
            )
        self.tree = tree
        self.model = model
        self.data = data
        self.backend = backend or Backend()
        self.rescale = rescale
        self.pad = pad
        self.padded_count = padded_size(model.state_count) if pad else model.state_count
        self.weights = data.weights.astype(float)
        self.buffers = PartialBuffers.allocate(tree, data, model.categories.count, self.padded_count)
        self.generators = model.rate_generators(pad=pad)
        self.matrices = None
        self.transposed = None

    def set_tree(self, tree: Phylogeny):
        if tree.names != self.tree.names or not np.array_equal(tree.parent, self.tree.parent):
            raise ValidationError("engine trees must share the topology and tip order")
        self.tree = tree
        self.matrices = None
        self.transposed = None
        self.buffers.invalidate()

    def set_effective_lengths(self, lengths):
        self.set_tree(self.tree.with_effective_lengths(lengths))

    def update_matrices(self):
        with self.backend.timed("transitionMatrices"):
            self.matrices = self.model.transition_matrices(self.tree.effective_lengths, pad=self.pad)
        self.transposed = None

    def log_likelihood(self) -> float:
        if self.matrices is None:
            self.update_matrices()
        postorder_traverse(self.tree, self.model, self.matrices, self.buffers, self.backend,
                           self.rescale)
        return log_likelihood(self.buffers, self.weights)

    def gradient(self, keep_columns: bool = False) -> GradientReport:
        before = self.backend.timings.snapshot()
        loglik = self.log_likelihood()
        if not np.isfinite(loglik):
            raise ImpossiblePatternError(impossible_patterns(self.buffers))
        if self.padded_count > 4 and self.transposed is None:
            self.transposed = self.backend.transpose_all(self.matrices)
        preorder_traverse(self.tree, self.model, self.matrices, self.transposed, self.buffers,
                          self.backend, self.rescale)
        columns = gradient_columns(self.tree, self.model, self.buffers, self.backend,
                                   self.generators)
        per_branch = reduce_columns(columns, self.weights, self.backend)
        return GradientReport(
            per_branch, loglik, np.array(self.tree.branch_lengths),
            np.array(self.tree.rate_scalars), self.backend.timings.since(before),
            columns if keep_columns else None, self.buffers.site_log_likelihoods.copy(),
        )

    def node_log_likelihoods(self, node: int) -> np.ndarray:
        return node_log_likelihoods(self.buffers, self.model, node)


def compute_log_likelihood(tree, model, alignment, backend=None, **kw) -> float:
    return LikelihoodEngine(tree, model, alignment, backend, **kw).log_likelihood()


def full_gradient(tree, model, alignment, backend=None, *, keep_columns=False, rescale=True,
                  pad=True) -> GradientReport:
    """Log likelihood and its gradient wrt every effective branch length."""
    engine = LikelihoodEngine(tree, model, alignment, backend, rescale=rescale, pad=pad)
    return engine.gradient(keep_columns=keep_columns)


# oracles ------------------------------------------------------------------


def _tip_matrix(data: PatternizedAlignment, tip: int) -> np.ndarray:
    codes = data.patterns[tip]
    s = data.state_count
    out = np.zeros((codes.size, s))
    for c, code in enumerate(codes):
        if code >= 0:
            out[c, code] = 1.0
        else:
            out[c] = data.masks[-code - 1]
    return out


def _prune(tree, mats, tips, pi, rate_weights):
    """Plain pruning with row-major ``mats[b, r]``; signed entries allowed.

    Returns ``(site values, log scale)`` such that L_c = value_c * exp(scale_c).
    """
    n = tree.tip_count
    parts = {}
    scales = {}
    for k in range(n):
        parts[k] = tips[k][None]
        scales[k] = 0.0
    for k in tree.postorder_internal():
        a, b = tree.children[k]
        va = np.matmul(parts[a], np.swapaxes(mats[a], -1, -2))
        vb = np.matmul(parts[b], np.swapaxes(mats[b], -1, -2))
        v = va * vb
        m = np.abs(v).max(axis=(0, 2))
        m[m == 0] = 1.0
        parts[k] = v / m[None, :, None]
        scales[k] = scales[a] + scales[b] + np.log(m)
    root = parts[tree.root]
    return np.einsum("r,rcs,s->c", rate_weights, root, pi), scales[tree.root]


def oracle_gradient_quadratic(tree: Phylogeny, model: SubstitutionModel, alignment) -> np.ndarray:
    """Gradient by rerunning pruning once per branch with that branch's ``P`` replaced by ``dP/db``.

    Independent of the engine: unpadded, matrices from scaling-and-squaring,
    and one full traversal per branch, so the cost is quadratic in the tip count.
    """
    data = as_patterns(alignment).for_tree(tree)
    q = model.rate_matrix.matrix
    rates = model.categories.rates
    lengths = tree.effective_lengths
    s = model.state_count
    mats = np.empty((tree.branch_count, rates.size, s, s))
    derivs = np.empty_like(mats)
    for i, b in enumerate(lengths):
        for r, g in enumerate(rates):
            mats[i, r] = scipy.linalg.expm(g * b * q)
            derivs[i, r] = g * q @ mats[i, r]
    tips = [_tip_matrix(data, k) for k in range(tree.tip_count)]
    pi = model.root_frequencies
    w = model.categories.weights
    base, base_scale = _prune(tree, mats, tips, pi, w)
    if np.any(base <= 0):
        raise ImpossiblePatternError(np.flatnonzero(base <= 0).tolist())
    out = np.empty(tree.branch_count)
    weights = data.weights.astype(float)
    for i in range(tree.branch_count):
        swapped = mats.copy()
        swapped[i] = derivs[i]
        val, scale = _prune(tree, swapped, tips, pi, w)
        out[i] = np.sum(weights * val / base * np.exp(scale - base_scale))
    return out


FD_STENCILS = {
    # (offsets, weights) with derivative = sum(w * f(b + k h)) / h
    (2, "central"): ((-1, 1), (-0.5, 0.5)),
    (2, "forward"): ((0, 1, 2), (-1.5, 2.0, -0.5)),
    (4, "central"): ((-2, -1, 1, 2), (1 / 12, -8 / 12, 8 / 12, -1 / 12)),
    (4, "forward"): ((0, 1, 2, 3, 4), (-25 / 12, 48 / 12, -36 / 12, 16 / 12, -3 / 12)),
}


def finite_difference_gradient(tree: Phylogeny, model: SubstitutionModel, alignment,
                               h: float = 1e-5, backend: Backend | None = None,
                               order: int = 4) -> np.ndarray:
    """Finite differences of the log likelihood per effective branch length.

    Central stencils with step ``h`` (``order`` 2 or 4); branches too short
    for the central stencil to stay non-negative use the one-sided stencil
    of the same order.
    """
    if not h > 0:
        raise ValidationError("finite-difference step must be > 0")
    if order not in (2, 4):
        raise ValidationError("finite-difference order must be 2 or 4")
    engine = LikelihoodEngine(tree, model, alignment, backend)
    base = tree.effective_lengths.copy()
    reach = order // 2
    cache = {}

    def f(i, k):
        if k == 0:
            i = -1
        if (i, k) not in cache:
            lengths = base.copy()
            if i >= 0:
                lengths[i] += k * h
            engine.set_effective_lengths(lengths)
            cache[(i, k)] = engine.log_likelihood()
        return cache[(i, k)]

    out = np.empty(base.size)
    for i in range(base.size):
        kind = "central" if base[i] >= reach * h else "forward"
        offsets, weights = FD_STENCILS[(order, kind)]
        out[i] = sum(w * f(i, k) for k, w in zip(offsets, weights)) / h
    return out


ZERO_GRADIENT = 1e-9


def gradient_scale(model: SubstitutionModel, weights) -> float:
    """Natural magnitude of a gradient: total weight x fastest rate x ``2 max|Q_ii|``.

    Not a bound (column terms grow like ``1/b`` on short branches that carry
    a change), only the size against which a vanishing gradient is judged.
    """
    q = model.rate_matrix.matrix
    return float(np.sum(weights) * model.categories.rates.max() * 2.0 * np.max(np.abs(np.diag(q))))


def relative_deviation(value, reference, scale: float | None = None) -> float:
    """``max|value - reference| / max|reference|``.

    With ``scale`` given (see :func:`gradient_scale`), a reference that
    vanishes up to finite-difference rounding (``max|reference| <= 1e-9 *
    scale``) is compared relative to ``scale`` instead, since an exactly
    zero gradient has no relative error.  Without ``scale`` a zero reference
    gives the absolute deviation.
    """
    value = np.asarray(value, dtype=float)
    reference = np.asarray(reference, dtype=float)
    norm = np.max(np.abs(reference)) if reference.size else 0.0
    diff = np.max(np.abs(value - reference)) if reference.size else 0.0
    if scale is not None and norm <= ZERO_GRADIENT * scale:
        norm = scale
    return float(diff / norm) if norm > 0 else float(diff)
