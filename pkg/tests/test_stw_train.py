import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_simplex_doc
from stw.errors import DegenerateLabels, DimensionMismatch, EmptyBatch
from stw.data_io import synthetic_instruments
from stw.measures import Document, LabeledCorpus, Split, Vocabulary, normalize_counts
from stw.stw_train import (AdamState, PairBatch, SoftTreeModel, TrainConfig,
                           adam_step, column_softmax, contrastive_loss, harden,
                           load_checkpoint, loss_gradient, make_pair_batch,
                           save_checkpoint, select_margin, smooth_abs,
                           smooth_abs_grad, soft_tree_wasserstein, train)
from stw.tree import perfect_kary_internal, tree_wasserstein, validate_tree


def display_form_abs(x, alpha):
    """The direct exponential form of the smooth absolute value; safe only
    for moderate alpha*x, used to cross-check the stable implementation."""
    e_p = np.exp(alpha * x)
    e_m = np.exp(-alpha * x)
    return x * (e_p - e_m) / (2.0 + e_p + e_m)


def random_model(rng, kary=2, depth=2, n_leaf=8, alpha=2.0):
    d1 = perfect_kary_internal(kary, depth)
    theta = rng.standard_normal((d1.shape[0], n_leaf))
    return SoftTreeModel.from_theta(d1, theta, alpha)


def soft_tw_dense_oracle(model, a, b):
    """Soft distance evaluated from the dense inverse of the assembled
    relaxed adjacency, using the direct exponential absolute value."""
    n_in, n_leaf = model.n_internal, model.n_leaf
    n = n_in + n_leaf
    d_par = np.zeros((n, n))
    d_par[:n_in, :n_in] = model.d1.toarray()
    d_par[:n_in, n_in:] = model.d2
    p_sub = np.linalg.inv(np.eye(n) - d_par)
    delta_leaf = a.dense() - b.dense()
    total = 0.0
    for v in range(n):
        inner = float(p_sub[v, n_in:] @ delta_leaf)
        total += model.edge_lengths[v] * display_form_abs(inner, model.alpha)
    return total


class TestSmoothAbs:
    def test_zero(self):
        assert smooth_abs(0.0, 3.0) == 0.0

    def test_unit_point_sharp(self):
        assert abs(smooth_abs(1.0, 50.0) - 1.0) <= 1e-10

    def test_negative_two_alpha_one(self):
        assert abs(smooth_abs(-2.0, 1.0) - 1.5232) <= 1e-4

    def test_matches_display_form_at_small_arguments(self, rng):
        x = rng.uniform(-5, 5, size=200)
        for alpha in (0.5, 1.0, 2.0, 10.0):
            np.testing.assert_allclose(smooth_abs(x, alpha),
                                       display_form_abs(x, alpha), atol=1e-12)

    def test_even_function_bitwise(self, rng):
        x = rng.standard_normal(100)
        assert np.array_equal(smooth_abs(x, 3.0), smooth_abs(-x, 3.0))

    def test_overflow_safe(self):
        assert smooth_abs(1e6, 1.0) == 1e6
        assert np.isfinite(smooth_abs_grad(1e6, 1.0))

    def test_converges_to_abs(self, rng):
        x = rng.uniform(-3, 3, size=50)
        gaps = [np.max(np.abs(smooth_abs(x, alpha) - np.abs(x)))
                for alpha in (1.0, 10.0, 100.0, 1e4)]
        assert all(g1 >= g2 for g1, g2 in zip(gaps, gaps[1:]))
        assert gaps[-1] <= 1e-3

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.uniform(-2, 2, size=100)
        h = 1e-7
        fd = (smooth_abs(x + h, 4.0) - smooth_abs(x - h, 4.0)) / (2 * h)
        np.testing.assert_allclose(smooth_abs_grad(x, 4.0), fd, atol=1e-6)


class TestSoftTreeModel:
    def test_d2_columns_sum_to_one(self, rng):
        model = random_model(rng)
        np.testing.assert_allclose(model.d2.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(model.d2 > 0) and np.all(model.d2 < 1)

    def test_relaxed_adjacency_satisfies_column_conditions(self, rng):
        model = random_model(rng)
        n_in = model.n_internal
        n = n_in + model.n_leaf
        d_par = np.zeros((n, n))
        d_par[:n_in, :n_in] = model.d1.toarray()
        d_par[:n_in, n_in:] = model.d2
        colsums = d_par.sum(axis=0)
        expected = np.ones(n)
        expected[0] = 0.0
        np.testing.assert_allclose(colsums, expected, atol=1e-12)
        assert np.all(np.tril(d_par) == 0)

    def test_cached_inverse_is_exact(self, rng):
        model = random_model(rng)
        n_in = model.n_internal
        prod = model.inv_d1 @ (np.eye(n_in) - model.d1.toarray())
        np.testing.assert_allclose(prod, np.eye(n_in), atol=1e-12)


class TestSoftTreeWasserstein:
    def test_identical_documents(self, rng):
        model = random_model(rng)
        doc = random_simplex_doc(rng, model.n_leaf)
        assert soft_tree_wasserstein(model, doc, doc) == 0.0

    def test_symmetry_bitwise(self, rng):
        model = random_model(rng)
        for _ in range(20):
            a = random_simplex_doc(rng, model.n_leaf)
            b = random_simplex_doc(rng, model.n_leaf)
            assert soft_tree_wasserstein(model, a, b) == soft_tree_wasserstein(model, b, a)

    def test_matches_dense_oracle(self, rng):
        for _ in range(10):
            model = random_model(rng, kary=2, depth=2, n_leaf=int(rng.integers(2, 11)))
            a = random_simplex_doc(rng, model.n_leaf)
            b = random_simplex_doc(rng, model.n_leaf)
            got = soft_tree_wasserstein(model, a, b)
            np.testing.assert_allclose(got, soft_tw_dense_oracle(model, a, b),
                                       rtol=0, atol=1e-12)

    def test_hardened_model_approaches_hard_distance(self, rng):
        # one-hot-dominant attachments at high sharpness
        d1 = perfect_kary_internal(2, 2)
        n_in = d1.shape[0]
        n_leaf = 6
        rows = rng.integers(0, n_in, size=n_leaf)
        theta = np.full((n_in, n_leaf), -40.0)
        theta[rows, np.arange(n_leaf)] = 40.0
        model = SoftTreeModel.from_theta(d1, theta, alpha=1e4)
        tree = harden(model)
        for _ in range(10):
            a = random_simplex_doc(rng, n_leaf)
            b = random_simplex_doc(rng, n_leaf)
            hard = tree_wasserstein(tree, a, b)
            soft = soft_tree_wasserstein(model, a, b)
            assert abs(soft - hard) <= 1e-3 * max(hard, 1e-30)

    def test_triangle_inequality_can_fail(self):
        # at small alpha the surrogate is superadditive near zero, so a
        # two-hop route can undercut the direct one: not a metric
        d1 = sp.csr_matrix((1, 1))
        theta = np.zeros((1, 2))
        model = SoftTreeModel.from_theta(d1, theta, alpha=0.5)
        a = Document(2, [0], [1.0])
        b = Document(2, [0, 1], [0.5, 0.5])
        c = Document(2, [1], [1.0])
        d_ac = soft_tree_wasserstein(model, a, c)
        d_ab = soft_tree_wasserstein(model, a, b)
        d_bc = soft_tree_wasserstein(model, b, c)
        assert d_ac > d_ab + d_bc + 1e-9

    def test_dimension_mismatch(self, rng):
        model = random_model(rng)
        doc = random_simplex_doc(rng, model.n_leaf + 1)
        with pytest.raises(DimensionMismatch):
            soft_tree_wasserstein(model, doc, doc)


def tiny_corpus(rng, n_docs=6, n_leaf=6, n_labels=2):
    vocab = Vocabulary(tuple(f"w{i}" for i in range(n_leaf)))
    docs = tuple(random_simplex_doc(rng, n_leaf, label=int(i % n_labels))
                 for i in range(n_docs))
    return LabeledCorpus(vocab, docs, Split(train=tuple(range(n_docs))))


class TestContrastiveLoss:
    def test_identical_positive_pair_no_negatives(self, rng):
        vocab = Vocabulary(("a", "b"))
        doc = normalize_counts({"a": 1, "b": 1}, vocab, label=0)
        corpus = LabeledCorpus(vocab, (doc, doc))
        model = random_model(rng, n_leaf=2)
        batch = PairBatch(((0, 1),), ())
        with pytest.warns(UserWarning):
            assert contrastive_loss(model, batch, corpus, TrainConfig()) == 0.0

    def test_clamped_negative_only(self, rng):
        corpus = tiny_corpus(rng)
        model = random_model(rng, n_leaf=6)
        batch = PairBatch((), ((0, 1),))
        cfg = TrainConfig(margin=1e-6)  # any distance exceeds this margin
        with pytest.warns(UserWarning):
            loss = contrastive_loss(model, batch, corpus, cfg)
        assert loss == -cfg.margin

    def test_composes_from_pairwise_distances(self, rng):
        corpus = tiny_corpus(rng, n_docs=3)
        model = random_model(rng, n_leaf=6)
        cfg = TrainConfig(margin=2.0)
        batch = make_pair_batch(corpus, [0, 1, 2])
        scaled_docs = [Document(6, d.positions, d.masses * cfg.mass_scale, d.label)
                       for d in corpus.documents]

        def dist(i, j):
            return soft_tree_wasserstein(model, scaled_docs[i], scaled_docs[j])

        pos = np.mean([dist(i, j) for i, j in batch.positive_pairs])
        neg = np.mean([min(dist(i, j), cfg.margin) for i, j in batch.negative_pairs])
        got = contrastive_loss(model, batch, corpus, cfg)
        np.testing.assert_allclose(got, pos - neg, atol=1e-12)

    def test_empty_batch_raises(self, rng):
        corpus = tiny_corpus(rng)
        model = random_model(rng, n_leaf=6)
        with pytest.raises(EmptyBatch):
            contrastive_loss(model, PairBatch((), ()), corpus, TrainConfig())

    def test_mislabeled_pair_rejected(self, rng):
        corpus = tiny_corpus(rng)
        model = random_model(rng, n_leaf=6)
        with pytest.raises(ValueError):
            contrastive_loss(model, PairBatch(((0, 1),), ()), corpus, TrainConfig())


class TestLossGradient:
    def test_fully_clamped_identical_positives_zero_gradient(self, rng):
        vocab = Vocabulary(tuple(f"w{i}" for i in range(4)))
        doc_a = normalize_counts({"w0": 1, "w1": 1}, vocab, label=0)
        doc_b = normalize_counts({"w2": 1, "w3": 1}, vocab, label=1)
        corpus = LabeledCorpus(vocab, (doc_a, doc_a, doc_b))
        model = random_model(rng, n_leaf=4)
        batch = PairBatch(((0, 1),), ((0, 2),))
        grad = loss_gradient(model, batch, corpus, TrainConfig(margin=1e-6))
        np.testing.assert_allclose(grad, 0.0, atol=1e-15)

    def test_matches_central_finite_differences(self, rng):
        # spot check at one size; the 20-instance sweep runs in acceptance
        corpus = tiny_corpus(rng, n_docs=5, n_leaf=7)
        cfg = TrainConfig(margin=3.0, alpha=5.0)
        model = random_model(rng, n_leaf=7, alpha=cfg.alpha)
        batch = make_pair_batch(corpus, [0, 1, 2, 3, 4])
        grad = loss_gradient(model, batch, corpus, cfg)
        fd = finite_difference_gradient(model, batch, corpus, cfg)
        rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-10)
        assert np.all((rel < 1e-5) | (np.abs(grad - fd) < 1e-10))

    def test_columns_orthogonal_to_ones(self, rng):
        corpus = tiny_corpus(rng, n_docs=5, n_leaf=7)
        cfg = TrainConfig(margin=3.0, alpha=5.0)
        model = random_model(rng, n_leaf=7, alpha=cfg.alpha)
        batch = make_pair_batch(corpus, [0, 1, 2, 3, 4])
        grad = loss_gradient(model, batch, corpus, cfg)
        np.testing.assert_allclose(grad.sum(axis=0), 0.0, atol=1e-12)


def finite_difference_gradient(model, batch, corpus, cfg, h=1e-6):
    theta = model.theta
    fd = np.zeros_like(theta)
    for r in range(theta.shape[0]):
        for c in range(theta.shape[1]):
            bump = np.zeros_like(theta)
            bump[r, c] = h
            up = contrastive_loss(model.with_theta(theta + bump), batch, corpus, cfg)
            down = contrastive_loss(model.with_theta(theta - bump), batch, corpus, cfg)
            fd[r, c] = (up - down) / (2 * h)
    return fd


class TestSoftmaxShiftInvariance:
    def test_shifted_column_leaves_everything_unchanged(self, rng):
        corpus = tiny_corpus(rng, n_docs=4, n_leaf=6)
        cfg = TrainConfig(margin=2.0, alpha=4.0)
        model = random_model(rng, n_leaf=6, alpha=cfg.alpha)
        batch = make_pair_batch(corpus, [0, 1, 2, 3])
        shifted_theta = model.theta.copy()
        shifted_theta[:, 2] += 7.3
        shifted = model.with_theta(shifted_theta)
        np.testing.assert_allclose(shifted.d2, model.d2, atol=1e-12)
        base_loss = contrastive_loss(model, batch, corpus, cfg)
        np.testing.assert_allclose(contrastive_loss(shifted, batch, corpus, cfg),
                                   base_loss, atol=1e-12)
        assert np.array_equal(harden(shifted).d2.toarray(), harden(model).d2.toarray())


class TestAdam:
    def test_zero_gradient_leaves_theta(self):
        theta = np.ones((2, 3))
        new_theta, _ = adam_step(theta, np.zeros_like(theta),
                                 AdamState.zeros(theta.shape), lr=0.1)
        assert np.array_equal(new_theta, theta)
        # existing moments decay by their betas under a zero gradient
        state = AdamState(np.full((2, 3), 0.5), np.full((2, 3), 0.25), 1)
        _, new_state = adam_step(theta, np.zeros_like(theta), state, lr=0.1)
        np.testing.assert_allclose(new_state.m, 0.45, atol=1e-15)
        np.testing.assert_allclose(new_state.v, 0.25 * 0.999, atol=1e-15)

    def test_first_step_closed_form(self, rng):
        theta = rng.standard_normal((3, 4))
        grad = rng.standard_normal((3, 4))
        lr = 0.05
        new_theta, state = adam_step(theta, grad, AdamState.zeros(theta.shape), lr)
        expected = theta - lr * grad / (np.abs(grad) + 1e-8)
        np.testing.assert_allclose(new_theta, expected, atol=1e-12)
        assert state.step == 1

    def test_constant_gradient_step_size_approaches_lr(self, rng):
        theta = np.zeros((2, 2))
        grad = np.full((2, 2), 0.37)
        state = AdamState.zeros(theta.shape)
        lr = 0.01
        for _ in range(200):
            prev = theta
            theta, state = adam_step(theta, grad, state, lr)
        step = np.abs(theta - prev)
        np.testing.assert_allclose(step, lr, rtol=1e-3)


class TestHarden:
    def test_argmax_selection(self):
        d1 = perfect_kary_internal(2, 1)
        theta = np.log(np.array([[0.2], [0.5], [0.3]]))
        model = SoftTreeModel.from_theta(d1, theta, alpha=10.0)
        tree = harden(model)
        assert tree.d2.toarray()[:, 0].tolist() == [0.0, 1.0, 0.0]

    def test_tie_breaks_to_lowest_row(self):
        d1 = perfect_kary_internal(1, 1)
        theta = np.zeros((2, 1))  # exact tie
        model = SoftTreeModel.from_theta(d1, theta, alpha=10.0)
        assert harden(model).d2.toarray()[:, 0].tolist() == [1.0, 0.0]

    def test_hardened_tree_is_valid(self, rng):
        for _ in range(10):
            model = random_model(rng, n_leaf=int(rng.integers(2, 9)))
            tree = harden(model)
            assert validate_tree(tree.assembled()) == []
            assert np.all(tree.edge_lengths == 1.0)


class TestTrain:
    def test_synthetic_reaches_zero_error(self):
        from stw.evaluation import HardTreeProvider, knn_classify
        corpus = synthetic_instruments(100, 100, seed=0)
        cfg = TrainConfig(kary=5, depth=1, seed=0)
        result = train(corpus, cfg)
        provider = HardTreeProvider(harden(result.model), "stw")
        preds = knn_classify(provider, corpus, k=1)
        truth = np.array([corpus.documents[i].label for i in corpus.split.test])
        assert np.mean(preds != truth) == 0.0

    def test_bit_reproducible(self):
        corpus = synthetic_instruments(40, 10, seed=3)
        cfg = TrainConfig(kary=5, depth=1, seed=3, epochs=5)
        r1 = train(corpus, cfg)
        r2 = train(corpus, cfg)
        assert np.array_equal(r1.model.theta, r2.model.theta)
        for rec1, rec2 in zip(r1.log, r2.log):  # identical up to wall time
            assert (rec1.epoch, rec1.train_loss, rec1.valid_loss) == \
                   (rec2.epoch, rec2.train_loss, rec2.valid_loss)

    def test_snapshot_is_validation_argmin(self):
        corpus = synthetic_instruments(60, 10, seed=1)
        cfg = TrainConfig(kary=5, depth=1, seed=1, epochs=10)
        result = train(corpus, cfg)
        val_losses = [r.valid_loss for r in result.log]
        assert min(val_losses) == val_losses[result.best_epoch - 1]
        assert val_losses[result.best_epoch - 1] <= val_losses[-1]

    def test_degenerate_labels_rejected(self, rng):
        vocab = Vocabulary(("a", "b"))
        docs = tuple(normalize_counts({"a": 1, "b": 1}, vocab, label=0)
                     for _ in range(10))
        corpus = LabeledCorpus(vocab, docs, Split(train=tuple(range(10))))
        with pytest.raises(DegenerateLabels):
            train(corpus, TrainConfig(kary=2, depth=1))

    def test_uses_explicit_valid_split_when_present(self):
        corpus = synthetic_instruments(50, 10, seed=2)
        split = Split(train=tuple(range(40)), valid=tuple(range(40, 50)),
                      test=corpus.split.test)
        corpus = LabeledCorpus(corpus.vocabulary, corpus.documents, split)
        result = train(corpus, TrainConfig(kary=5, depth=1, seed=2, epochs=3))
        assert len(result.log) == 3


class TestSelectMargin:
    def test_single_candidate(self):
        corpus = synthetic_instruments(30, 5, seed=4)
        cfg = TrainConfig(kary=5, depth=1, seed=4, epochs=3, margin_grid=(0.7,))
        assert select_margin(corpus, cfg) == 0.7

    def test_empty_grid_rejected(self):
        corpus = synthetic_instruments(30, 5, seed=4)
        cfg = TrainConfig(kary=5, depth=1, margin_grid=())
        with pytest.raises(ValueError):
            select_margin(corpus, cfg)

    def test_tie_goes_to_smaller_margin(self):
        corpus = synthetic_instruments(100, 10, seed=5)
        cfg = TrainConfig(kary=5, depth=1, seed=5,
                          margin_grid=(0.1, 1.0))
        chosen = select_margin(corpus, cfg)
        # both candidates reach zero validation error on this instance,
        # so the tie rule picks the smaller margin
        assert chosen == 0.1


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        corpus = synthetic_instruments(30, 5, seed=6)
        cfg = TrainConfig(kary=5, depth=1, seed=6, epochs=2)
        result = train(corpus, cfg)
        path = tmp_path / "model.json"
        save_checkpoint(path, result, corpus.vocabulary)
        model, payload = load_checkpoint(path, corpus.vocabulary)
        assert np.array_equal(model.theta, result.model.theta)
        assert model.alpha == result.model.alpha
        assert payload["best_epoch"] == result.best_epoch
        assert len(payload["log"]) == 2

    def test_vocab_mismatch_rejected(self, tmp_path):
        from stw.errors import VocabularyMismatch
        corpus = synthetic_instruments(30, 5, seed=6)
        cfg = TrainConfig(kary=5, depth=1, seed=6, epochs=2)
        result = train(corpus, cfg)
        path = tmp_path / "model.json"
        save_checkpoint(path, result, corpus.vocabulary)
        other = Vocabulary(tuple(f"w{i}" for i in range(10)))
        with pytest.raises(VocabularyMismatch):
            load_checkpoint(path, other)
