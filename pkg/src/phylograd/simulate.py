"""Seeded fixtures: random trees and alignments simulated under a model."""

from __future__ import annotations

import numpy as np

from .alignment import RawAlignment, compress_patterns
from .model import SubstitutionModel, transition_matrix
from .tree import Phylogeny, random_tree


def simulate_alignment(tree: Phylogeny, model: SubstitutionModel, sites: int,
                       rng: np.random.Generator, alphabet: str = None,
                       genetic_code: str = "universal") -> RawAlignment:
    """Draw ``sites`` columns down ``tree`` (root from the root distribution)."""
    s = model.state_count
    if alphabet is None:
        alphabet = "nuc" if s == 4 else "codon"
    cats = model.categories
    category = rng.choice(cats.count, size=sites, p=cats.weights)
    states = np.empty((tree.node_count, sites), dtype=np.int64)
    cum_root = np.cumsum(model.root_frequencies)
    states[tree.root] = np.minimum(np.searchsorted(cum_root, rng.random(sites) * cum_root[-1],
                                                   side="right"), s - 1)
    lengths = tree.effective_lengths
    for node in tree.preorder_nonroot():
        parent_states = states[tree.parent[node]]
        u = rng.random(sites)
        out = np.empty(sites, dtype=np.int64)
        for r in range(cats.count):
            sel = category == r
            if not sel.any():
                continue
            cum = np.cumsum(transition_matrix(model.eigen, cats.rates[r], lengths[node]), axis=1)
            rows = cum[parent_states[sel]]
            drawn = (rows < (u[sel] * rows[:, -1])[:, None]).sum(axis=1)
            out[sel] = np.minimum(drawn, s - 1)
        states[node] = out
    codes = states[: tree.tip_count].astype(np.int32)
    return RawAlignment(tree.names, codes, np.zeros((0, s), dtype=bool), s, alphabet, genetic_code)


def make_fixture(tips: int, sites: int, model: SubstitutionModel, seed: int,
                 mean_length: float = 0.1, alphabet: str = None):
    """``(tree, raw alignment)`` from a single seed."""
    rng = np.random.default_rng(seed)
    tree = random_tree(tips, rng, mean_length=mean_length)
    return tree, simulate_alignment(tree, model, sites, rng, alphabet)


def fixture_with_patterns(tips: int, patterns: int, model: SubstitutionModel, seed: int,
                          mean_length: float = 0.1, max_sites: int = 1_000_000):
    """Fixture with exactly ``patterns`` unique columns.

    Sites are simulated in growing batches until enough distinct columns
    exist; the first ``patterns`` distinct ones (each with weight one) are
    kept, which mirrors truncating a long alignment.
    """
    rng = np.random.default_rng(seed)
    tree = random_tree(tips, rng, mean_length=mean_length)
    batch = max(2 * patterns, 16)
    chunks = []
    seen = 0
    while True:
        raw = simulate_alignment(tree, model, batch, rng)
        chunks.append(raw.codes)
        codes = np.concatenate(chunks, axis=1)
        uniq = compress_patterns(RawAlignment(tree.names, codes, raw.masks, raw.state_count,
                                              raw.alphabet))
        if uniq.pattern_count >= patterns or codes.shape[1] >= max_sites:
            break
        if uniq.pattern_count == seen:
            batch *= 2
        seen = uniq.pattern_count
    keep = np.ascontiguousarray(uniq.patterns[:, :patterns])
    raw = RawAlignment(tree.names, keep, raw.masks, raw.state_count, raw.alphabet)
    return tree, raw
