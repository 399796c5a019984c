import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phylograd import alignment as A
from phylograd import model as M
from phylograd.backend import Backend, make_backend
from phylograd.core import (
    LikelihoodEngine, PartialBuffers, compute_log_likelihood, finite_difference_gradient,
    full_gradient, gradient_columns, gradient_scale, node_likelihood, oracle_gradient_quadratic,
    postorder_traverse, preorder_traverse, reduce_columns, relative_deviation,
)
from phylograd.errors import ImpossiblePatternError, SequencingError, ValidationError
from phylograd.tree import parse_newick, random_tree

from helpers import (
    brute_force_site_likelihoods, jc_p, random_instance, serial_sum, two_taxon_jc_derivative,
    two_taxon_jc_loglik,
)

JC = M.SubstitutionModel(M.jukes_cantor())


def nuc(text):
    return A.compress_patterns(A.parse_fasta(text))


def traversed(tree, model, data, rescale=True):
    engine = LikelihoodEngine(tree, model, data)
    engine.gradient()
    return engine


def test_two_taxon_root_partial():
    tree = parse_newick("(A:0.1,B:0.2);")
    engine = LikelihoodEngine(tree, JC, nuc(">A\nA\n>B\nA\n"), rescale=False)
    engine.log_likelihood()
    root = engine.buffers.post[0, 0, 0, :4]
    s1, d1 = jc_p(0.1)
    s2, d2 = jc_p(0.2)
    assert np.allclose(root, [s1 * s2, d1 * d2, d1 * d2, d1 * d2], rtol=1e-14)


def test_zero_lengths_give_indicator_products():
    tree = parse_newick("((A:0,B:0):0,C:0);")
    data = nuc(">A\nAC\n>B\nAC\n>C\nAG\n")
    engine = LikelihoodEngine(tree, JC, data)
    engine.log_likelihood()
    sites = engine.buffers.site_log_likelihoods
    assert sites[0] == pytest.approx(math.log(0.25), rel=1e-15)
    assert sites[1] == -math.inf


def test_log_likelihood_examples(caplog):
    tree = parse_newick("(A:0,B:0);")
    assert compute_log_likelihood(tree, JC, nuc(">A\nA\n>B\nA\n")) == pytest.approx(math.log(0.25))
    with caplog.at_level("INFO"):
        assert compute_log_likelihood(tree, JC, nuc(">A\nA\n>B\nC\n")) == -math.inf
    assert "pattern" in caplog.text
    with pytest.raises(ImpossiblePatternError) as err:
        full_gradient(tree, JC, nuc(">A\nAA\n>B\nAC\n"))
    assert err.value.patterns == [1]


@pytest.mark.parametrize("same", [True, False])
def test_two_taxon_closed_forms(same):
    tree = parse_newick("(A:0.1,B:0.2);")
    data = nuc(">A\nA\n>B\n%s\n" % ("A" if same else "G"))
    report = full_gradient(tree, JC, data)
    assert report.log_likelihood == pytest.approx(two_taxon_jc_loglik(0.1, 0.2, same), rel=1e-13)
    expected = two_taxon_jc_derivative(0.1, 0.2, same)
    assert np.allclose(report.per_branch, [expected, expected], rtol=1e-12)
    assert np.allclose(oracle_gradient_quadratic(tree, JC, data), expected, rtol=1e-12)


def test_two_taxon_preorder_formula():
    rng = np.random.default_rng(5)
    model = M.SubstitutionModel(M.build_gtr(rng.uniform(0.5, 2, 6), rng.dirichlet(np.ones(4) * 3)),
                                M.discrete_gamma(0.7, 2))
    tree = parse_newick("(A:0.3,B:0.2);")
    data = nuc(">A\nAG\n>B\nCG\n")
    engine = traversed(tree, model, data)
    bufs = engine.buffers
    pi = model.root_frequencies
    for r, g in enumerate(model.categories.rates):
        p1 = M.transition_matrix(M.decompose(model.rate_matrix), g, 0.3)
        p2 = M.transition_matrix(M.decompose(model.rate_matrix), g, 0.2)
        for c in range(2):
            tip2 = bufs.tip_partials(1)[c, :4]
            expected = p1.T @ (pi * (p2 @ tip2))
            got = bufs.pre[0, r, c, :4] * np.exp(bufs.pre_scale[0, c])
            assert np.allclose(got, expected, rtol=1e-13)
    assert np.array_equal(bufs.pre[tree.root, :, :, :4], np.broadcast_to(pi, (2, 2, 4)))


def test_single_category_column_formula():
    tree, model, data = random_instance(8, 5, 4, 1, 20)
    engine = LikelihoodEngine(tree, model, data)
    report = engine.gradient(keep_columns=True)
    b = engine.buffers
    q = model.rate_matrix.matrix
    for i in (0, 3, 6):
        p = b.post_partials(i)[0, :, :4]
        qq = b.pre[i, 0, :, :4]
        expected = np.einsum("cs,cs->c", p, qq @ q) / np.einsum("cs,cs->c", p, qq)
        assert np.allclose(report.per_column[i], expected, rtol=1e-12)


def test_buffer_invariants():
    tree, model, data = random_instance(2, 6, 61, 2, 30)
    engine = traversed(tree, model, data)
    b = engine.buffers
    assert np.all(b.post >= 0) and np.all(b.pre >= 0)
    assert np.all(np.isfinite(b.post)) and np.all(np.isfinite(b.pre))
    assert not b.post[..., 61:].any() and not b.pre[..., 61:].any()
    tips = b.tip_partials(0)
    known = b.codes[0] >= 0
    assert np.array_equal(tips[known].argmax(axis=1), b.codes[0][known])
    assert np.all(tips[known].sum(axis=1) == 1)


@pytest.mark.parametrize("seed", range(4))
def test_brute_force_six_taxa(seed):
    tree, model, data = random_instance(100 + seed, 6, 4, 2 if seed % 2 else 1, 6,
                                        ambiguity=seed == 3)
    engine = LikelihoodEngine(tree, model, data)
    engine.log_likelihood()
    brute = brute_force_site_likelihoods(tree, model, data)
    assert np.allclose(engine.buffers.site_log_likelihoods, np.log(brute), rtol=1e-10, atol=0)
    total = float(np.dot(data.weights, np.log(brute)))
    assert engine.log_likelihood() == pytest.approx(total, rel=1e-10)


@pytest.mark.parametrize("states, rates", [(4, 4), (61, 1), (61, 2)])
def test_node_invariance(states, rates):
    tree, model, data = random_instance(31, 8, states, rates, 40, ambiguity=True)
    engine = traversed(tree, model, data)
    ref = engine.node_log_likelihoods(tree.root)
    for node in range(tree.node_count):
        assert np.allclose(engine.node_log_likelihoods(node), ref, rtol=0, atol=1e-10)
    lik = node_likelihood(engine.buffers, model, 0, 0)
    assert lik == pytest.approx(math.exp(ref[0]), rel=1e-10)


def test_quadratic_oracle_codon_eight_taxa():
    tree, model, data = random_instance(17, 8, 61, 1, 25)
    got = full_gradient(tree, model, data).per_branch
    assert relative_deviation(got, oracle_gradient_quadratic(tree, model, data)) <= 1e-8


def test_finite_difference_five_taxa_jc():
    rng = np.random.default_rng(4)
    tree = random_tree(5, rng, mean_length=0.2)
    from phylograd.simulate import simulate_alignment
    data = A.compress_patterns(simulate_alignment(tree, JC, 100, rng))
    got = full_gradient(tree, JC, data).per_branch
    assert relative_deviation(got, finite_difference_gradient(tree, JC, data, h=1e-5)) <= 1e-6


def test_zero_root_branch_gradient_finite():
    tree, model, data = random_instance(9, 6, 4, 2, 50, zero_root_branch=True)
    zero = int(np.flatnonzero(tree.branch_lengths == 0)[0])
    got = full_gradient(tree, model, data).per_branch
    assert np.all(np.isfinite(got))
    assert relative_deviation(got, oracle_gradient_quadratic(tree, model, data)) <= 1e-8
    fd = finite_difference_gradient(tree, model, data)
    assert relative_deviation(got, fd) <= 1e-6
    assert got[zero] == pytest.approx(fd[zero], rel=1e-5)


def test_branch_set_matches_shared_scalar_fd():
    tree, model, data = random_instance(12, 7, 4, 1, 60)
    report = full_gradient(tree, model, data)
    branches = [0, 3, 7, 9]
    h = 1e-5

    def shifted(k):
        lengths = tree.effective_lengths.copy()
        lengths[branches] += k * h
        return compute_log_likelihood(tree.with_effective_lengths(lengths), model, data)

    fd = (shifted(-2) - 8 * shifted(-1) + 8 * shifted(1) - shifted(2)) / (12 * h)
    assert report.branch_set(branches) == pytest.approx(fd, rel=1e-6)
    with pytest.raises(ValidationError):
        report.branch_set([])
    with pytest.raises(ValidationError):
        report.branch_set([99])


def test_rate_scalar_chain_rule():
    tree, model, data = random_instance(13, 5, 4, 1, 40)
    tree = tree.with_rate_scalars(np.linspace(0.5, 2.0, tree.branch_count))
    report = full_gradient(tree, model, data)
    assert np.allclose(report.wrt_lengths, report.per_branch * tree.rate_scalars)
    assert np.allclose(report.wrt_rate_scalars, report.per_branch * tree.branch_lengths)


def test_reduce_columns_examples():
    backend = Backend()
    col = np.array([[2.0], [-1.5]])
    assert reduce_columns(col, [3.0], backend).tolist() == [6.0, -4.5]
    two = np.array([[1.0, 2.0]])
    assert reduce_columns(two, [1, 1], backend).tolist() == [3.0]
    rng = np.random.default_rng(1)
    cols = rng.normal(size=(5, 999))
    w = rng.integers(1, 9, 999)
    got = reduce_columns(cols, w, backend)
    ref = np.array([serial_sum(row, w) for row in cols])
    assert np.allclose(got, ref, rtol=1e-12, atol=0)


def test_per_column_sums_to_per_branch():
    tree, model, data = random_instance(14, 6, 4, 2, 80)
    report = full_gradient(tree, model, data, keep_columns=True)
    assert report.per_column.shape == (tree.branch_count, data.pattern_count)
    assert np.allclose(report.per_column @ data.weights, report.per_branch, rtol=1e-10)
    assert full_gradient(tree, model, data).per_column is None


def test_scaling_invariance():
    tree, model, data = random_instance(15, 10, 61, 2, 30)
    a = full_gradient(tree, model, data, rescale=True)
    b = full_gradient(tree, model, data, rescale=False)
    assert a.log_likelihood == pytest.approx(b.log_likelihood, rel=1e-9)
    assert relative_deviation(a.per_branch, b.per_branch) <= 1e-9


def test_rescaling_prevents_underflow():
    rng = np.random.default_rng(2)
    tree = random_tree(600, rng, mean_length=1.0)
    from phylograd.simulate import simulate_alignment
    data = A.compress_patterns(simulate_alignment(tree, JC, 3, rng))
    assert compute_log_likelihood(tree, JC, data, rescale=False) == -math.inf
    value = compute_log_likelihood(tree, JC, data)
    assert np.isfinite(value) and value < -700
    assert np.all(np.isfinite(full_gradient(tree, JC, data).per_branch))


def test_compression_invariance():
    tree, model, data = random_instance(16, 6, 4, 1, 300)
    raw = A.PatternizedAlignment(data.names, data.decompress(), np.ones(300, dtype=np.int64),
                                 data.masks, data.state_count)
    assert data.pattern_count < 300
    a = full_gradient(tree, model, data)
    b = full_gradient(tree, model, raw)
    assert relative_deviation(a.per_branch, b.per_branch) <= 1e-10
    assert a.log_likelihood == pytest.approx(b.log_likelihood, rel=1e-10)


def test_padding_invariance():
    tree, model, data = random_instance(18, 6, 61, 2, 40, ambiguity=True)
    a = full_gradient(tree, model, data, pad=True)
    b = full_gradient(tree, model, data, pad=False, backend=Backend())
    assert relative_deviation(a.per_branch, b.per_branch) <= 1e-12
    assert a.log_likelihood == pytest.approx(b.log_likelihood, rel=1e-12)


def test_many_rate_categories_chunked():
    tree, model, data = random_instance(19, 4, 4, 1, 5)
    model = M.SubstitutionModel(model.rate_matrix, M.discrete_gamma(0.9, 70))
    got = full_gradient(tree, model, data).per_branch
    assert relative_deviation(got, oracle_gradient_quadratic(tree, model, data)) <= 1e-8


def test_sequencing_errors():
    tree, model, data = random_instance(20, 5, 61, 1, 10)
    backend = Backend()
    bufs = PartialBuffers.allocate(tree, data, 1, 64)
    with pytest.raises(SequencingError):
        postorder_traverse(tree, model, None, bufs, backend)
    mats = model.transition_matrices(tree.effective_lengths)
    with pytest.raises(SequencingError):
        preorder_traverse(tree, model, mats, backend.transpose_all(mats), bufs, backend)
    postorder_traverse(tree, model, mats, bufs, backend)
    with pytest.raises(SequencingError, match="transposed"):
        preorder_traverse(tree, model, mats, None, bufs, backend)
    with pytest.raises(SequencingError):
        gradient_columns(tree, model, bufs, backend)
    child = tree.children[tree.root - 1][0]
    bad = [int(child)] + [k for k in tree.preorder_nonroot() if k != child]
    with pytest.raises(SequencingError, match="before its parent"):
        preorder_traverse(tree, model, mats, backend.transpose_all(mats), bufs, backend, schedule=bad)
    short = list(tree.preorder_nonroot())[:-1]
    with pytest.raises(SequencingError, match="skipped"):
        preorder_traverse(tree, model, mats, backend.transpose_all(mats), bufs, backend,
                          schedule=short)
    wrong = JC.transition_matrices(tree.effective_lengths)
    with pytest.raises(SequencingError):
        postorder_traverse(tree, model, wrong, bufs, backend)


def test_engine_rejects_mismatches():
    tree, model, data = random_instance(21, 4, 4, 1, 10)
    with pytest.raises(ValidationError):
        LikelihoodEngine(tree, M.SubstitutionModel(M.build_codon_m0(M.CodonModelParams(2, 0.5, np.full(61, 1 / 61)))), data)
    engine = LikelihoodEngine(tree, model, data)
    with pytest.raises(ValidationError):
        engine.set_tree(parse_newick("((t1:1,t2:1):1,(t3:1,t4:1):1);"))


def test_finite_difference_arguments():
    tree, model, data = random_instance(22, 3, 4, 1, 5)
    with pytest.raises(ValidationError):
        finite_difference_gradient(tree, model, data, h=0)
    with pytest.raises(ValidationError):
        finite_difference_gradient(tree, model, data, order=3)


def test_timings_populated():
    tree, model, data = random_instance(23, 6, 61, 1, 20)
    report = full_gradient(tree, model, data)
    names = {row["name"] for row in report.timings.rows()}
    assert {"preOrderPartials", "gradient", "postOrderPartials", "matrixTranspose",
            "nodeSiteReduction"} <= names
    tree4, model4, data4 = random_instance(23, 6, 4, 1, 20)
    names4 = {row["name"] for row in full_gradient(tree4, model4, data4).timings.rows()}
    assert "matrixTranspose" not in names4


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 9), st.sampled_from([1, 3]), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_property_gradient_matches_oracle(tips, rates, cols, seed):
    tree, model, data = random_instance(seed, tips, 4, rates, cols, ambiguity=seed % 2 == 0)
    with make_backend("parallel", workers=2) as backend:
        got = full_gradient(tree, model, data, backend).per_branch
    assert relative_deviation(got, oracle_gradient_quadratic(tree, model, data)) <= 1e-8


def test_relative_deviation_zero_reference():
    assert relative_deviation([1.0, 3.0], [2.0, 4.0]) == 0.25
    assert relative_deviation([1e-16], [0.0]) == 1e-16
    assert relative_deviation([1e-16], [1e-17], scale=10.0) == pytest.approx(9e-18)
    assert relative_deviation([2.0], [1.0], scale=10.0) == 1.0


def test_zero_gradient_instance():
    # one fully ambiguous tip on a two-taxon tree: the likelihood is constant
    tree = parse_newick("(A:0.3,B:0.2);")
    data = nuc(">A\nN\n>B\nC\n")
    model = M.SubstitutionModel(M.jukes_cantor(), M.discrete_gamma(0.5, 4))
    got = full_gradient(tree, model, data).per_branch
    scale = gradient_scale(model, data.weights)
    assert np.max(np.abs(got)) <= 1e-14 * scale
    assert relative_deviation(got, oracle_gradient_quadratic(tree, model, data), scale) <= 1e-12
