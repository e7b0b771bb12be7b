import numpy as np
import pytest

from micpq.encoder import RefinedEmbedding
from micpq.errors import (
    IndexOutOfRangeError,
    KNotPowerOfTwoError,
    NonPositiveTemperatureError,
)
from micpq.quantizer import (
    CodebookSet,
    QuantCode,
    assign_probs,
    gumbel_from_uniform,
    hard_assign,
    hard_assign_batch,
    pack_codes,
    pack_codes_batch,
    packed_code_nbytes,
    quantize_document,
    reconstruct,
    sample_assignment,
    sample_gumbel,
    soft_assign,
    soft_codeword,
    unpack_codes,
    unpack_codes_batch,
)


class TestAssignProbs:
    def test_equidistant_codewords_split_evenly(self):
        book = np.array([[1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(assign_probs(np.zeros(2), book), [0.5, 0.5])

    def test_exact_match_against_unit_distance(self):
        # p = exp(0) / (exp(0) + exp(-1)) = 1 / (1 + e^-1)
        book = np.array([[2.0, 2.0], [2.0, 3.0]])
        probs = assign_probs(np.array([2.0, 2.0]), book)
        np.testing.assert_allclose(probs[0], 1.0 / (1.0 + np.exp(-1.0)), rtol=1e-6)
        np.testing.assert_allclose(probs[0], 0.73106, atol=1e-5)

    def test_identical_codewords_give_uniform(self):
        book = np.tile(np.array([[3.0, -1.0]]), (5, 1))
        np.testing.assert_allclose(assign_probs(np.array([0.5, 0.5]), book), np.full(5, 0.2))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            probs = assign_probs(rng.normal(size=4), rng.normal(size=(8, 4)))
            assert abs(probs.sum() - 1.0) < 1e-6
            assert np.all(probs >= 0)

    def test_float32_matches_float64_recompute(self):
        rng = np.random.default_rng(1)
        seg = rng.normal(size=6).astype(np.float32)
        book = rng.normal(size=(16, 6)).astype(np.float32)
        p32 = assign_probs(seg, book)
        p64 = assign_probs(seg.astype(np.float64), book.astype(np.float64))
        np.testing.assert_allclose(p32, p64, rtol=1e-4)


class TestGumbel:
    def test_median_uniform_maps_to_known_value(self):
        # -log(-log(0.5)) = -log(log 2)
        np.testing.assert_allclose(
            gumbel_from_uniform(np.array([0.5]))[0], 0.36651, atol=1e-5
        )

    def test_draws_always_finite(self):
        assert np.all(np.isfinite(gumbel_from_uniform(np.array([0.0, 1.0, 0.5]))))
        assert np.all(np.isfinite(sample_gumbel(10_000, seed=3)))

    def test_sample_mean_matches_euler_mascheroni(self):
        draws = sample_gumbel(1_000_000, seed=4)
        assert abs(draws.mean() - 0.5772) < 0.01

    def test_deterministic(self):
        assert np.array_equal(sample_gumbel(64, seed=9), sample_gumbel(64, seed=9))


class TestSoftAssign:
    def test_zero_noise_unit_temperature_reduces_to_assign_probs(self):
        rng = np.random.default_rng(2)
        seg = rng.normal(size=3)
        book = rng.normal(size=(5, 3))
        soft = soft_assign(seg, book, temperature=1.0, gumbel=np.zeros(5))
        np.testing.assert_allclose(soft.probs, assign_probs(seg, book), rtol=1e-12)

    def test_low_temperature_approaches_one_hot(self):
        rng = np.random.default_rng(3)
        seg = rng.normal(size=3)
        book = rng.normal(size=(4, 3))
        noise = sample_gumbel(4, seed=5)
        soft = soft_assign(seg, book, temperature=1e-4, gumbel=noise)
        d2 = ((book - seg) ** 2).sum(axis=1)
        winner = int(np.argmin(d2 + noise))
        assert soft.probs[winner] > 1.0 - 1e-6

    def test_high_temperature_approaches_uniform(self):
        rng = np.random.default_rng(4)
        soft = soft_assign(
            rng.normal(size=3), rng.normal(size=(6, 3)), temperature=1e9,
            gumbel=np.zeros(6),
        )
        np.testing.assert_allclose(soft.probs, np.full(6, 1 / 6), atol=1e-7)

    def test_joint_rescaling_is_invariant(self):
        """Scaling distances-plus-noise and the temperature together
        leaves the weights unchanged (softmax scale property)."""
        rng = np.random.default_rng(5)
        seg = rng.normal(size=3)
        book = rng.normal(size=(4, 3))
        noise = sample_gumbel(4, seed=6)
        c = 3.7
        base = soft_assign(seg, book, 2.0, noise).probs
        scaled = soft_assign(np.sqrt(c) * seg, np.sqrt(c) * book, c * 2.0, c * noise).probs
        np.testing.assert_allclose(scaled, base, rtol=1e-10)

    def test_nonpositive_temperature_rejected(self):
        with pytest.raises(NonPositiveTemperatureError):
            soft_assign(np.zeros(2), np.zeros((2, 2)), 0.0, np.zeros(2))


class TestHardAssign:
    def test_exact_codeword_wins(self):
        book = np.random.default_rng(6).normal(size=(5, 3))
        assert hard_assign(book[2], book) == 2

    def test_tie_breaks_to_lowest_index(self):
        book = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [1.0, 0.0]])
        assert hard_assign(np.array([1.0, 0.0]), book) == 0
        # codewords 0 and 3 are identical; 0 wins

    def test_agrees_with_argmax_of_assign_probs(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            seg = rng.normal(size=4)
            book = rng.normal(size=(6, 4))
            assert hard_assign(seg, book) == int(np.argmax(assign_probs(seg, book)))

    def test_batch_agrees_with_scalar(self):
        rng = np.random.default_rng(8)
        book = rng.normal(size=(7, 3))
        segments = rng.normal(size=(20, 3))
        batch = hard_assign_batch(segments, book)
        assert [hard_assign(s, book) for s in segments] == batch.tolist()


class TestSampling:
    def test_gumbel_argmax_frequencies_match_assign_probs(self):
        """Empirical draw frequencies stay within 3-sigma multinomial
        bounds of the assignment distribution."""
        rng = np.random.default_rng(9)
        seg = rng.normal(size=2)
        book = rng.normal(size=(4, 2))
        probs = assign_probs(seg.astype(np.float64), book.astype(np.float64))
        n = 100_000
        noise = gumbel_from_uniform(np.random.default_rng(10).random((n, 4)))
        d2 = ((book - seg) ** 2).sum(axis=1)
        draws = np.argmax(-d2[None, :] + noise, axis=1)
        counts = np.bincount(draws, minlength=4)
        sigma = np.sqrt(n * probs * (1 - probs))
        assert np.all(np.abs(counts - n * probs) <= 3 * sigma + 1)

    def test_sample_assignment_uses_the_argmax_rule(self):
        rng = np.random.default_rng(11)
        seg = rng.normal(size=3)
        book = rng.normal(size=(5, 3))
        noise = sample_gumbel(5, seed=12)
        d2 = ((book - seg) ** 2).sum(axis=1)
        assert sample_assignment(seg, book, noise) == int(np.argmax(-d2 + noise))


class TestSoftCodeword:
    def test_one_hot_recovers_codeword(self):
        book = np.random.default_rng(12).normal(size=(4, 3))
        one_hot = np.zeros(4)
        one_hot[2] = 1.0
        soft = soft_assign(book[2], book, 1.0, np.zeros(4))
        soft.probs = one_hot
        np.testing.assert_array_equal(soft_codeword(book, soft), book[2])

    def test_uniform_two_codewords_gives_midpoint(self):
        book = np.array([[0.0, 0.0], [2.0, 4.0]])
        soft = soft_assign(np.ones(2), book, 1.0, np.zeros(2))
        soft.probs = np.array([0.5, 0.5])
        np.testing.assert_allclose(soft_codeword(book, soft), [1.0, 2.0])

    def test_mixture_stays_in_codeword_bounding_box(self):
        rng = np.random.default_rng(13)
        book = rng.normal(size=(6, 4))
        for _ in range(30):
            probs = rng.dirichlet(np.ones(6))
            soft = soft_assign(rng.normal(size=4), book, 1.0, np.zeros(6))
            soft.probs = probs
            mix = soft_codeword(book, soft)
            assert np.all(mix >= book.min(axis=0) - 1e-12)
            assert np.all(mix <= book.max(axis=0) + 1e-12)


class TestQuantizeDocument:
    def test_single_book(self):
        books = CodebookSet(np.random.default_rng(14).normal(size=(1, 4, 3)))
        refined = RefinedEmbedding(books.books[0, 1].copy(), sub_dim=3)
        assert quantize_document(refined, books).indices.tolist() == [1]

    def test_exact_concatenated_codewords(self):
        books = CodebookSet(np.random.default_rng(15).normal(size=(2, 4, 3)))
        vec = np.concatenate([books.books[0, 3], books.books[1, 1]])
        code = quantize_document(RefinedEmbedding(vec, 3), books)
        assert code.indices.tolist() == [3, 1]

    def test_matches_brute_force_over_all_combinations(self):
        """Per-segment argmin equals the exhaustive argmin over all K^M
        concatenations, because squared distance decomposes over segments."""
        rng = np.random.default_rng(16)
        books = CodebookSet(rng.normal(size=(2, 2, 3)))
        for _ in range(20):
            vec = rng.normal(size=6)
            code = quantize_document(RefinedEmbedding(vec, 3), books)
            combos = [
                (a, b, np.concatenate([books.books[0, a], books.books[1, b]]))
                for a in range(2)
                for b in range(2)
            ]
            best = min(combos, key=lambda c: ((c[2] - vec) ** 2).sum())
            assert code.indices.tolist() == [best[0], best[1]]

    def test_reconstruct_concatenates_codewords(self):
        books = CodebookSet(np.random.default_rng(17).normal(size=(3, 4, 2)))
        code = QuantCode(np.array([1, 0, 3], dtype=np.uint16), 4)
        expected = np.concatenate([books.books[0, 1], books.books[1, 0], books.books[2, 3]])
        np.testing.assert_array_equal(reconstruct(books, code), expected)


class TestPacking:
    def test_four_nibbles(self):
        assert pack_codes(np.array([1, 2, 3, 4]), 16) == b"\x21\x43"

    def test_eight_bits(self):
        assert pack_codes(np.array([1, 0, 0, 0, 0, 0, 0, 1]), 2) == b"\x81"

    def test_round_trip_random(self):
        rng = np.random.default_rng(18)
        for n_words in (2, 4, 8, 16, 256):
            for n_books in (1, 3, 8, 32):
                idx = rng.integers(0, n_words, size=(20, n_books))
                packed = pack_codes_batch(idx, n_words)
                assert packed.shape[1] == packed_code_nbytes(n_books, n_words)
                assert np.array_equal(unpack_codes_batch(packed, n_books, n_words), idx)

    def test_single_code_round_trip(self):
        idx = np.array([5, 0, 15, 9], dtype=np.uint16)
        assert np.array_equal(unpack_codes(pack_codes(idx, 16), 4, 16), idx)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(KNotPowerOfTwoError):
            pack_codes(np.array([0, 1]), 3)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(IndexOutOfRangeError):
            pack_codes(np.array([4]), 4)

    def test_table_of_code_sizes(self):
        # 16 codewords, 4/8/16/32 books -> 16/32/64/128-bit codes
        expected = {4: 2, 8: 4, 16: 8, 32: 16}
        for n_books, n_bytes in expected.items():
            assert packed_code_nbytes(n_books, 16) == n_bytes
