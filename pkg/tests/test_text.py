import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irlm.text import (
    CLS, MASK, PAD, SEP, SPECIAL_TOKENS, UNK,
    Vocab, WhitespaceTokenizer, build_vocab, decode, encode, make_batches, pad_batch,
)


@pytest.fixture
def aab(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("a a b\n", encoding="utf-8")
    return path


class TestBuildVocab:
    def test_frequency_order(self, aab):
        v = build_vocab(aab)
        assert v.itos == [*SPECIAL_TOKENS, "a", "b"]

    def test_threshold_excludes_all(self, aab):
        assert build_vocab(aab, min_frequency=3).itos == list(SPECIAL_TOKENS)

    def test_truncation(self, aab):
        assert build_vocab(aab, max_size=1).itos == [*SPECIAL_TOKENS, "a"]

    def test_ties_break_lexicographically(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("zeta alpha\nmid\n", encoding="utf-8")
        assert build_vocab(path).itos[5:] == ["alpha", "mid", "zeta"]

    def test_empty_corpus(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("\n\n", encoding="utf-8")
        with pytest.raises(ValueError, match="empty"):
            build_vocab(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            build_vocab(tmp_path / "nope.txt")

    def test_round_trip(self, tmp_path, aab):
        v = build_vocab(aab)
        v.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt") == v
        assert (tmp_path / "vocab.txt").read_text(encoding="utf-8").splitlines()[:5] == list(SPECIAL_TOKENS)

    def test_load_rejects_missing_specials(self, tmp_path):
        (tmp_path / "v.txt").write_text("a\nb\n", encoding="utf-8")
        with pytest.raises(ValueError):
            Vocab.load(tmp_path / "v.txt")


class TestEncodeDecode:
    vocab = Vocab(["hello", "world"])

    def test_empty(self):
        assert encode("", self.vocab) == [CLS, SEP]

    def test_in_vocab(self):
        assert encode("hello world", self.vocab) == [CLS, 5, 6, SEP]

    def test_oov_is_unk(self):
        assert encode("hello there", self.vocab) == [CLS, 5, UNK, SEP]

    def test_lowercases(self):
        assert WhitespaceTokenizer().tokenize("Hello  WORLD") == ["hello", "world"]

    def test_truncates_to_max_len(self):
        ids = encode("hello world hello world", self.vocab, max_len=4)
        assert ids == [CLS, 5, 6, SEP]

    def test_decode_specials_omitted(self):
        assert decode([CLS, SEP], self.vocab) == ""

    def test_decode_renders_unk(self):
        assert decode([CLS, 5, UNK, SEP], self.vocab) == "hello [UNK]"

    def test_decode_renders_mask(self):
        assert decode([CLS, MASK, 6, SEP, PAD], self.vocab) == "[MASK] world"

    def test_decode_invalid_id(self):
        with pytest.raises(ValueError):
            decode([CLS, 99], self.vocab)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(["hello", "world"]), max_size=20))
    def test_round_trip(self, words):
        text = " ".join(words)
        assert decode(encode(text, self.vocab, max_len=32), self.vocab) == text


class TestBatches:
    seqs = [[CLS] + [5] * (i % 5) + [SEP] for i in range(10)]

    def test_sizes(self):
        batches = make_batches(self.seqs, 4, np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_fixed_seed_same_order(self):
        a = make_batches(self.seqs, 4, np.random.default_rng(3))
        b = make_batches(self.seqs, 4, np.random.default_rng(3))
        assert all(np.array_equal(x.ids, y.ids) and np.array_equal(x.indices, y.indices) for x, y in zip(a, b))

    def test_every_sequence_once(self):
        batches = make_batches(self.seqs, 4, np.random.default_rng(1))
        assert sorted(i for b in batches for i in b.indices) == list(range(10))
        for b in batches:
            assert [self.seqs[i] for i in b.indices] == b.sequences()

    def test_mask_sums_equal_lengths(self):
        for b in make_batches(self.seqs, 4, np.random.default_rng(2)):
            np.testing.assert_array_equal(b.attention_mask.sum(axis=1), b.lengths)
            assert b.ids.shape[1] == b.lengths.max()

    def test_empty(self):
        assert make_batches([], 4, np.random.default_rng(0)) == []

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            make_batches(self.seqs, 0, np.random.default_rng(0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.integers(5, 50), max_size=12), min_size=1, max_size=8))
    def test_no_pad_inside_true_prefix(self, bodies):
        b = pad_batch([[CLS, *x, SEP] for x in bodies])
        for i, n in enumerate(b.lengths):
            assert PAD not in b.ids[i, :n]
            assert np.all(b.ids[i, n:] == PAD)
