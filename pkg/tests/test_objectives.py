import itertools

import numpy as np
import pytest

from micpq.encoder import EncoderParams, forward_batch
from micpq.errors import (
    RowNotNormalizedError,
    TooLargeToEnumerateError,
    ZeroNormError,
)
from micpq.objectives import (
    BatchViews,
    LossConfig,
    contrastive_loss,
    cosine_sim,
    expected_loss_oracle,
    loss_and_gradients,
    mi_term,
    sample_hard_losses,
    sample_soft_losses,
    total_loss,
)
from micpq.quantizer import CodebookSet, assign_probs


class TestCosine:
    def test_identical_vectors(self):
        v = np.array([0.3, -2.0, 1.0])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_orthogonal_vectors(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)

    def test_hand_value(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(
            0.70711, abs=1e-5
        )

    def test_zero_norm_rejected(self):
        with pytest.raises(ZeroNormError):
            cosine_sim(np.zeros(3), np.ones(3))


class TestContrastiveLoss:
    def test_singleton_batch_is_zero(self):
        views = BatchViews(np.array([[1.0, 2.0]]), np.array([[2.0, 4.0]]))
        assert contrastive_loss(views, 0.3) == pytest.approx(0.0, abs=1e-12)

    def test_two_identical_docs(self):
        # all four representations equal: every term log(1/3), loss 2*log(3)
        h = np.array([[1.0, 1.0], [1.0, 1.0]])
        views = BatchViews(h, h)
        assert contrastive_loss(views, 0.3) == pytest.approx(2 * np.log(3.0), rel=1e-12)
        assert contrastive_loss(views, 0.3) == pytest.approx(2.19722, abs=1e-5)

    def test_invariant_to_rescaling_any_representation(self):
        rng = np.random.default_rng(0)
        v1 = rng.normal(size=(3, 4))
        v2 = rng.normal(size=(3, 4))
        base = contrastive_loss(BatchViews(v1, v2), 0.3)
        v1_scaled = v1.copy()
        v1_scaled[1] *= 17.0
        assert contrastive_loss(BatchViews(v1_scaled, v2), 0.3) == pytest.approx(base, rel=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            views = BatchViews(rng.normal(size=(4, 5)), rng.normal(size=(4, 5)))
            assert contrastive_loss(views, 0.5) >= 0.0

    def test_zero_vector_rejected(self):
        views = BatchViews(np.zeros((2, 3)), np.ones((2, 3)))
        with pytest.raises(ZeroNormError):
            contrastive_loss(views, 0.3)


class TestMITerm:
    def test_uniform_rows_closed_form(self):
        k, alpha = 8, 0.1
        probs = np.full((5, k), 1.0 / k)
        stats = mi_term(probs, alpha)
        assert stats.h_marginal == pytest.approx(np.log(k), abs=1e-9)
        assert stats.h_conditional == pytest.approx(np.log(k), abs=1e-9)
        assert stats.mi == pytest.approx((1 - alpha) * np.log(k), abs=1e-9)

    def test_balanced_one_hot_rows_closed_form(self):
        k = 4
        probs = np.tile(np.eye(k), (3, 1))
        stats = mi_term(probs, alpha=0.1)
        assert stats.h_marginal == pytest.approx(np.log(k), abs=1e-9)
        assert stats.h_conditional == pytest.approx(0.0, abs=1e-9)
        assert stats.mi == pytest.approx(np.log(k), abs=1e-9)

    def test_worked_example(self):
        stats = mi_term(np.array([[0.9, 0.1], [0.1, 0.9]]), alpha=0.1)
        np.testing.assert_allclose(stats.marginal, [0.5, 0.5])
        assert stats.h_marginal == pytest.approx(0.69315, abs=1e-5)
        assert stats.h_conditional == pytest.approx(0.32508, abs=1e-5)
        assert stats.mi == pytest.approx(0.66064, abs=1e-4)

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(2)
        probs = rng.dirichlet(np.ones(5), size=12)
        base = mi_term(probs, 0.3)
        perm = rng.permutation(5)
        permuted = mi_term(probs[:, perm], 0.3)
        assert permuted.h_marginal == pytest.approx(base.h_marginal, rel=1e-12)
        assert permuted.h_conditional == pytest.approx(base.h_conditional, rel=1e-12)
        assert permuted.mi == pytest.approx(base.mi, rel=1e-12)

    def test_nonnegative_at_alpha_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            probs = rng.dirichlet(rng.uniform(0.2, 3.0, size=6), size=rng.integers(1, 20))
            assert mi_term(probs, alpha=1.0).mi >= -1e-6

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(RowNotNormalizedError):
            mi_term(np.array([[0.5, 0.6]]), 0.1)


class TestTotalLoss:
    def _setup(self):
        rng = np.random.default_rng(4)
        views = BatchViews(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
        probs = [rng.dirichlet(np.ones(4), size=6) for _ in range(2)]
        return views, probs

    def test_zero_weight_equals_contrastive(self):
        views, probs = self._setup()
        cfg = LossConfig(mi_weight=0.0)
        assert total_loss(views, probs, cfg) == contrastive_loss(views, cfg.tau_cl)

    def test_linear_in_mi(self):
        views, probs = self._setup()
        cfg = LossConfig(mi_weight=0.25)
        cl = contrastive_loss(views, cfg.tau_cl)
        mi_sum = sum(mi_term(p, cfg.alpha).mi for p in probs)
        assert total_loss(views, probs, cfg) == pytest.approx(cl - 0.25 * mi_sum, rel=1e-12)

    def test_worked_arithmetic(self):
        # contrastive 2*log(3) with both per-book MI at the worked-example value
        h = np.ones((2, 2))
        views = BatchViews(h, h)
        probs = [np.array([[0.9, 0.1], [0.1, 0.9]])] * 2
        cfg = LossConfig(tau_cl=0.3, alpha=0.1, mi_weight=0.1)
        assert total_loss(views, probs, cfg) == pytest.approx(2.06509, abs=1e-4)


class TestExpectedLossOracle:
    def test_identical_codewords_reduce_to_deterministic_loss(self):
        # with every codeword equal, all K^slots outcomes give the same h
        rng = np.random.default_rng(5)
        word = rng.normal(size=3)
        books = CodebookSet(np.tile(word, (1, 2, 1)))
        refined1 = rng.uniform(0.1, 1.0, size=(2, 3))
        refined2 = rng.uniform(0.1, 1.0, size=(2, 3))
        h = np.tile(word, (2, 1))
        deterministic = contrastive_loss(BatchViews(h, h), 0.3)
        oracle = expected_loss_oracle(refined1, refined2, books, 0.3)
        assert oracle == pytest.approx(deterministic, rel=1e-12)

    def test_uniform_probabilities_average_all_outcomes(self):
        """Segments on the perpendicular bisector of the two codewords make
        every slot probability exactly 0.5, so the expectation is the plain
        mean over all 16 joint outcomes, recomputed here by brute force."""
        books = CodebookSet(np.array([[[1.0, 0.0], [-1.0, 0.0]]]))
        refined1 = np.array([[0.0, 1.0], [0.0, 2.0]])
        refined2 = np.array([[0.0, 3.0], [0.0, 0.5]])
        for view in (refined1, refined2):
            for row in view:
                np.testing.assert_allclose(
                    assign_probs(row, books.books[0]), [0.5, 0.5]
                )
        words = books.books[0]
        losses = []
        for key in itertools.product(range(2), repeat=4):
            h1 = np.stack([words[key[0]], words[key[1]]])
            h2 = np.stack([words[key[2]], words[key[3]]])
            losses.append(contrastive_loss(BatchViews(h1, h2), 0.3))
        oracle = expected_loss_oracle(refined1, refined2, books, 0.3)
        assert oracle == pytest.approx(np.mean(losses), rel=1e-12)

    def test_matches_monte_carlo_hard_sampling(self):
        rng = np.random.default_rng(6)
        books = CodebookSet(rng.normal(size=(2, 3, 3)))
        refined1 = rng.normal(size=(2, 6))
        refined2 = rng.normal(size=(2, 6))
        oracle = expected_loss_oracle(refined1, refined2, books, 0.3)
        n = 20_000
        losses = sample_hard_losses(refined1, refined2, books, 0.3, n, seed=7)
        se = losses.std() / np.sqrt(n)
        assert abs(losses.mean() - oracle) <= 3 * se

    def test_soft_sampling_approaches_oracle_at_low_temperature(self):
        rng = np.random.default_rng(8)
        books = CodebookSet(rng.normal(size=(2, 3, 3)))
        refined1 = rng.normal(size=(2, 6))
        refined2 = rng.normal(size=(2, 6))
        oracle = expected_loss_oracle(refined1, refined2, books, 0.3)
        losses = sample_soft_losses(refined1, refined2, books, 0.3, 0.05, 20_000, seed=9)
        assert abs(losses.mean() - oracle) <= 0.05 * abs(oracle)

    def test_too_large_to_enumerate(self):
        rng = np.random.default_rng(10)
        books = CodebookSet(rng.normal(size=(3, 4, 2)))
        refined = rng.normal(size=(3, 6))
        with pytest.raises(TooLargeToEnumerateError):
            expected_loss_oracle(refined, refined, books, 0.3)


class TestLossAndGradients:
    def _instance(self, seed, d_in=3, sub=2, n_books=2, n_words=4, batch=3):
        rng = np.random.default_rng(seed)
        d_out = n_books * sub
        params = EncoderParams(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out) + 0.5)
        books = CodebookSet(rng.normal(size=(n_books, n_words, sub)))
        data = rng.normal(size=(batch, d_in))
        return params, books, data

    def test_matches_finite_differences(self):
        params, books, data = self._instance(11)
        cfg = LossConfig(tau_cl=0.3, tau_gumbel=2.0, alpha=0.1, mi_weight=0.2, p_drop=0.3)
        seed = 13
        _, grads = loss_and_gradients(params, books, data, cfg, seed)

        def loss_of(weight, bias, book_arr):
            values, _ = loss_and_gradients(
                EncoderParams(weight, bias), CodebookSet(book_arr), data, cfg, seed
            )
            return values.total

        step = 1e-4
        weight, bias, book_arr = params.weight, params.bias, books.books
        for arr, grad in ((weight, grads.weight), (bias, grads.bias), (book_arr, grads.books)):
            flat = arr.ravel()
            g = grad.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_of(weight, bias, book_arr)
                flat[i] = orig - step
                down = loss_of(weight, bias, book_arr)
                flat[i] = orig
                fd = (up - down) / (2 * step)
                assert abs(fd - g[i]) <= 1e-4 * max(abs(fd), abs(g[i]), 1e-8)

    def test_deterministic_given_seed(self):
        params, books, data = self._instance(12)
        cfg = LossConfig()
        first = loss_and_gradients(params, books, data, cfg, seed=21)
        second = loss_and_gradients(params, books, data, cfg, seed=21)
        assert first[0].total == second[0].total
        assert np.array_equal(first[1].weight, second[1].weight)
        assert np.array_equal(first[1].books, second[1].books)

    def test_huge_contrastive_temperature_kills_the_gradient(self):
        # with all similarities equally weighted the contrastive gradient vanishes
        params, books, data = self._instance(14)
        cfg = LossConfig(tau_cl=1e6, tau_gumbel=2.0, mi_weight=0.0, p_drop=0.3)
        _, grads = loss_and_gradients(params, books, data, cfg, seed=15)
        for grad in (grads.weight, grads.bias, grads.books):
            assert np.max(np.abs(grad)) < 1e-5

    def test_values_consistent_with_public_surfaces(self):
        """At huge Gumbel temperature the mixtures collapse to codebook
        means, so the graph's loss must match the plain-numpy operations
        evaluated on those known mixtures and probabilities."""
        params, books, data = self._instance(16, batch=4)
        cfg = LossConfig(tau_cl=0.4, tau_gumbel=1e12, alpha=0.1, mi_weight=0.3, p_drop=0.0)
        values, _ = loss_and_gradients(params, books, data, cfg, seed=17)

        refined = forward_batch(params, data)
        sub = books.sub_dim
        means = np.concatenate(
            [np.tile(books.books[m].mean(axis=0), (4, 1)) for m in range(2)], axis=1
        )
        expected_cl = contrastive_loss(BatchViews(means, means), cfg.tau_cl)
        assert values.contrastive == pytest.approx(expected_cl, rel=1e-6)

        for m in range(books.n_codebooks):
            probs = np.stack(
                [
                    assign_probs(refined[i, m * sub:(m + 1) * sub], books.books[m])
                    for i in range(4)
                ]
            )
            stats = mi_term(np.concatenate([probs, probs]), cfg.alpha)
            assert values.mi_per_book[m] == pytest.approx(stats.mi, rel=1e-9)
        assert values.total == pytest.approx(
            values.contrastive - cfg.mi_weight * values.mi_per_book.sum(), rel=1e-12
        )

    def test_minimum_batch_of_one_allowed(self):
        params, books, data = self._instance(18, batch=1)
        values, _ = loss_and_gradients(params, books, data, LossConfig(), seed=19)
        assert values.contrastive == pytest.approx(0.0, abs=1e-12)
