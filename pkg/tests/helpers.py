"""Independent oracles and seeded instance builders shared by the tests."""

import itertools
import math

import numpy as np
import scipy.linalg

from phylograd import alignment as A
from phylograd import model as M
from phylograd.simulate import simulate_alignment
from phylograd.tree import random_tree


def jc_p(t):
    """Closed-form Jukes-Cantor transition probabilities (same, different)."""
    e = math.exp(-4.0 * t / 3.0)
    return 0.25 + 0.75 * e, 0.25 - 0.25 * e


def jc_dp(t):
    e = math.exp(-4.0 * t / 3.0)
    return -e, e / 3.0


def two_taxon_jc_loglik(b1, b2, same=True):
    """log sum_t 1/4 P_{t a}(b1) P_{t b}(b2) via the closed form: P(b1 + b2)."""
    ps, pd = jc_p(b1 + b2)
    return math.log(0.25 * (ps if same else pd))


def two_taxon_jc_derivative(b1, b2, same=True):
    ps, pd = jc_p(b1 + b2)
    dps, dpd = jc_dp(b1 + b2)
    return dps / ps if same else dpd / pd


def tip_sets(raw_or_patterns):
    """Per tip, per column: list of admissible states."""
    codes = raw_or_patterns.codes if hasattr(raw_or_patterns, "codes") else raw_or_patterns.patterns
    masks = raw_or_patterns.masks
    out = []
    for row in codes:
        out.append([[int(c)] if c >= 0 else np.flatnonzero(masks[-c - 1]).tolist() for c in row])
    return out


def brute_force_site_likelihoods(tree, model, data):
    """Sum over every assignment of states to the internal nodes (and tips' ambiguity sets)."""
    s = model.state_count
    rates = model.categories.rates
    weights = model.categories.weights
    pi = model.root_frequencies
    q = model.rate_matrix.matrix
    lengths = tree.effective_lengths
    mats = [[scipy.linalg.expm(g * b * q) for g in rates] for b in lengths]
    n = tree.tip_count
    internal = list(range(n, tree.node_count))
    sets = tip_sets(data)
    ncol = len(sets[0])
    out = np.zeros(ncol)
    for c in range(ncol):
        total = 0.0
        for r in range(len(rates)):
            for assign in itertools.product(range(s), repeat=len(internal)):
                state = dict(zip(internal, assign))
                prob = pi[state[tree.root]]
                for node in internal:
                    if node == tree.root:
                        continue
                    prob *= mats[node][r][state[tree.parent[node]], state[node]]
                for tip in range(n):
                    ps = state[tree.parent[tip]]
                    prob *= sum(mats[tip][r][ps, x] for x in sets[tip][c])
                total += weights[r] * prob
        out[c] = total
    return out


def random_gtr(rng):
    return M.build_gtr(rng.uniform(0.3, 3.0, 6), rng.dirichlet(np.full(4, 4.0)))


def random_codon(rng):
    freqs = rng.dirichlet(np.full(61, 20.0))
    return M.build_codon_m0(M.CodonModelParams(rng.uniform(1.0, 4.0), rng.uniform(0.1, 1.0), freqs))


def random_instance(seed, tips, states, rates, columns, ambiguity=False, zero_root_branch=False,
                    mean_length=0.1):
    """Seeded ``(tree, model, patterns)`` with data simulated under the model."""
    rng = np.random.default_rng(seed)
    rm = random_gtr(rng) if states == 4 else random_codon(rng)
    cats = M.discrete_gamma(rng.uniform(0.3, 2.0), rates) if rates > 1 else M.RateCategories.single()
    model = M.SubstitutionModel(rm, cats)
    tree = random_tree(tips, rng, mean_length=mean_length)
    if zero_root_branch:
        lengths = np.array(tree.branch_lengths)
        lengths[tree.children[tree.root][0]] = 0.0
        tree = tree.with_branch_lengths(lengths)
    raw = simulate_alignment(tree, model, columns, rng)
    if ambiguity:
        raw = add_ambiguity(raw, rng)
    return tree, model, A.compress_patterns(raw)


def add_ambiguity(raw, rng, fraction=0.1):
    """Replace a fraction of entries by full or two-state ambiguity masks."""
    s = raw.state_count
    codes = raw.codes.copy()
    full = np.ones(s, dtype=bool)
    pair = np.zeros(s, dtype=bool)
    pair[[0, 1]] = True
    masks = np.array([full, pair])
    hit = rng.random(codes.shape) < fraction
    codes[hit] = -rng.integers(1, 3, size=hit.sum())
    return A.RawAlignment(raw.names, codes.astype(np.int32), masks, s, raw.alphabet)


def serial_sum(values, weights):
    total = 0.0
    for v, w in zip(values, weights):
        total += v * w
    return total
