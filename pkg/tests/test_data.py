import numpy as np
import pytest
from scipy import stats

from scoretok.data import (BOS, Batcher, SyntheticSpec, gen_synthetic, ingest_corpus, make_batch,
                           make_lexicon, read_boundaries, read_documents, write_boundaries,
                           write_documents, zipf_probs)


class TestIngest:
    def test_filter_edge(self, tmp_path):
        path = tmp_path / "c.txt"
        write_documents(path, [b"x" * 9, b"y" * 10, b"z" * 11])
        out = ingest_corpus(path, min_len=10, target_len=10)
        assert out.shape == (2, 10)
        assert sorted(bytes(r) for r in out) == [b"y" * 10, b"z" * 10]

    def test_long_document_gives_one_row(self, tmp_path):
        path = tmp_path / "c.txt"
        write_documents(path, [bytes(range(97, 123)) * 4])
        out = ingest_corpus(path, min_len=8, target_len=8)
        assert out.shape == (1, 8) and bytes(out[0]) == b"abcdefgh"

    def test_byte_conservation(self, tmp_path):
        rng = np.random.default_rng(0)
        docs = [bytes(rng.integers(0, 256, size=int(n)).astype(np.uint8)) for n in rng.integers(1, 60, 40)]
        path = tmp_path / "c.bin"
        write_documents(path, docs, fmt="binary")
        out = ingest_corpus(path, min_len=20, target_len=16, fmt="binary")
        expected = sum(min(len(d), 16) for d in docs if len(d) >= 20)
        assert out.size == expected
        # the multiset of emitted rows is exactly the truncated kept documents
        assert sorted(bytes(r) for r in out) == sorted(d[:16] for d in docs if len(d) >= 20)

    def test_shuffle_is_seeded(self, tmp_path):
        path = tmp_path / "c.txt"
        write_documents(path, [bytes([97 + i]) * 5 for i in range(20)])
        a = ingest_corpus(path, 5, 5, seed=3)
        np.testing.assert_array_equal(a, ingest_corpus(path, 5, 5, seed=3))
        assert not np.array_equal(a, ingest_corpus(path, 5, 5, seed=4))

    def test_errors(self, tmp_path):
        with pytest.raises(OSError):
            ingest_corpus(tmp_path / "missing.txt", 4, 4)
        path = tmp_path / "c.txt"
        write_documents(path, [b"ab"])
        with pytest.raises(ValueError, match="no documents"):
            ingest_corpus(path, 4, 4)
        with pytest.raises(ValueError, match="min_len"):
            ingest_corpus(path, 2, 4)


class TestFormats:
    def test_binary_round_trip_with_newlines(self, tmp_path):
        docs = [b"a\nb", bytes(range(256)), b""]
        write_documents(tmp_path / "d.bin", docs, fmt="binary")
        assert read_documents(tmp_path / "d.bin", fmt="binary") == docs

    def test_lines_reject_newlines(self, tmp_path):
        with pytest.raises(ValueError, match="binary"):
            write_documents(tmp_path / "d.txt", [b"a\nb"])

    def test_truncated_binary(self, tmp_path):
        (tmp_path / "d.bin").write_bytes(b"\x05\x00\x00\x00ab")
        with pytest.raises(ValueError, match="truncated"):
            read_documents(tmp_path / "d.bin", fmt="binary")

    def test_boundaries_round_trip(self, tmp_path):
        starts = [np.array([0, 3, 9]), np.array([0])]
        write_boundaries(tmp_path / "b.txt", starts)
        assert (tmp_path / "b.txt").read_text() == "0,3,9\n0\n"
        for a, b in zip(read_boundaries(tmp_path / "b.txt"), starts):
            np.testing.assert_array_equal(a, b)


class TestSynthetic:
    def test_period_two_tiling(self):
        corpus = gen_synthetic(SyntheticSpec([b"ab"], "none", seed=0), 2, 10)
        assert bytes(corpus.docs[0]) == b"ababababab"
        np.testing.assert_array_equal(corpus.starts[0], [0, 2, 4, 6, 8])
        np.testing.assert_array_equal(corpus.labels()[0], [1, 0] * 5)

    def test_labels_start_words(self):
        lex = make_lexicon(30, seed=0)
        corpus = gen_synthetic(SyntheticSpec(lex, "space", seed=1), 5, 200)
        assert corpus.docs.shape == (5, 200)
        for doc, st, wi in zip(corpus.docs, corpus.starts, corpus.word_ids):
            for s, w in zip(st, wi):
                seg = b" " + lex[w]
                assert bytes(doc[s:s + len(seg)]) == seg[: 200 - s]

    def test_zipf_frequencies(self):
        n, draws = 20, 100_000
        spec = SyntheticSpec([bytes([97 + i]) for i in range(n)], "none", zipf_s=1.2, seed=5)
        corpus = gen_synthetic(spec, 1, draws)
        counts = np.bincount(corpus.word_ids[0], minlength=n)
        assert counts.sum() == draws
        _, pval = stats.chisquare(counts, zipf_probs(n, 1.2) * draws)
        assert pval > 0.01

    def test_repeats_keep_zipf_marginal(self):
        n, draws, q = 20, 200_000, 0.5
        probs = zipf_probs(n, 1.2)
        spec = SyntheticSpec([bytes([97 + i]) for i in range(n)], "none", zipf_s=1.2, seed=6,
                             repeat_prob=q, repeat_lag=2)
        w = gen_synthetic(spec, 1, draws).word_ids[0]
        # a word equals the one two back if it was copied, or if a fresh draw collides
        same = (w[2:] == w[:-2]).mean()
        expect = q + (1 - q) * (probs ** 2).sum()
        assert abs(same - expect) < 4 * np.sqrt(expect * (1 - expect) / draws)
        freq = np.bincount(w, minlength=n) / draws
        np.testing.assert_allclose(freq, probs, atol=0.006)

    def test_repeat_settings_validated(self):
        with pytest.raises(ValueError):
            SyntheticSpec([b"a"], "none", repeat_prob=1.0)
        with pytest.raises(ValueError):
            SyntheticSpec([b"a"], "none", repeat_lag=0)

    def test_reproducible(self):
        spec = SyntheticSpec(make_lexicon(10), "space", seed=2)
        np.testing.assert_array_equal(gen_synthetic(spec, 3, 50).docs, gen_synthetic(spec, 3, 50).docs)

    def test_lexicon(self):
        lex = make_lexicon(50, seed=0, min_len=2, max_len=12)
        assert len(set(lex)) == 50
        assert all(2 <= len(w) <= 12 for w in lex)
        assert [len(w) for w in lex] == sorted(len(w) for w in lex)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            SyntheticSpec([b"a"], "tab")
        with pytest.raises(ValueError):
            gen_synthetic(SyntheticSpec([], "none"), 1, 4)


class TestBatching:
    def test_shapes_and_shift(self):
        b = make_batch(np.arange(12).reshape(2, 6))
        assert b.ids.shape == (2, 7) and b.targets.shape == (2, 6)
        assert np.all(b.ids[:, 0] == BOS)
        np.testing.assert_array_equal(b.targets, b.ids[:, 1:])
        np.testing.assert_array_equal(b.inputs, b.ids[:, :-1])

    def test_out_of_range_bytes(self):
        with pytest.raises(ValueError):
            make_batch(np.array([[1, 300]]))

    def test_determinism_and_epochs(self):
        seqs = np.arange(70).reshape(7, 10) % 256
        a = [x.ids for x in Batcher(seqs, 3, seed=1, epochs=2)]
        b = [x.ids for x in Batcher(seqs, 3, seed=1, epochs=2)]
        assert len(a) == 4  # 7 // 3 = 2 per epoch, partial batch dropped
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        # within an epoch no row repeats
        rows = np.concatenate([x[:, 1] for x in a[:2]])
        assert len(set(rows.tolist())) == 6

    def test_iter_from_matches_batch(self):
        bt = Batcher(np.arange(40).reshape(8, 5), 2, seed=0)
        it = bt.iter_from(5)
        for k in range(5, 9):
            np.testing.assert_array_equal(next(it).ids, bt.batch(k).ids)

    def test_too_few_sequences(self):
        with pytest.raises(ValueError):
            Batcher(np.zeros((1, 4)), 2)
