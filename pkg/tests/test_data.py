import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hslnet.data import (
    PAD_ID, UNK_ID, Dataset, ObjectFeatureSet, TokenSequence, build_vocab, gen_synthetic, load_features,
    load_relevance, load_word_vectors, pad_features, pad_tokens, save_features, split_words, tokenize,
)


class TestVocabulary:
    def test_lowercase_and_threshold(self):
        vocab = build_vocab(["Red Dress red dress red"], min_count=2)
        assert vocab.tokens == ["<pad>", "<unk>", "red", "dress"]
        assert vocab.counts == {"red": 3, "dress": 2}
        assert vocab.lookup("Red".lower()) == 2

    def test_min_count_one_keeps_all(self):
        vocab = build_vocab(["a b", "c a", "d"], min_count=1)
        assert set(vocab.tokens[2:]) == {"a", "b", "c", "d"}
        assert vocab.tokens[2] == "a"

    def test_rare_token_maps_to_unk(self):
        vocab = build_vocab(["shoe " * 5 + "hat " * 4], min_count=5)
        assert "shoe" in vocab
        assert "hat" not in vocab
        assert vocab.lookup("hat") == UNK_ID

    def test_reserved_tokens_never_match_text(self):
        vocab = build_vocab(["a a"], min_count=1)
        assert vocab.lookup("<pad>") == UNK_ID
        assert "<unk>" not in vocab

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])
        with pytest.raises(ValueError):
            build_vocab(["  ", "!!"])

    @given(st.lists(st.text(alphabet="abcAB ,.", max_size=20), min_size=1, max_size=8))
    @settings(max_examples=40, deadline=None)
    def test_deterministic_and_threshold(self, corpus):
        if not any(split_words(t) for t in corpus):
            return
        a, b = build_vocab(corpus, 2), build_vocab(list(corpus), 2)
        assert a.tokens == b.tokens
        assert all(c >= 2 for c in a.counts.values())


class TestTokenize:
    vocab = build_vocab(["red dress red dress"], min_count=1)

    def test_known_words(self):
        seq = tokenize("Red DRESS", self.vocab)
        np.testing.assert_array_equal(seq.ids, [self.vocab.lookup("red"), self.vocab.lookup("dress")])

    def test_unknown_words(self):
        np.testing.assert_array_equal(tokenize("blue shirt", self.vocab).ids, [UNK_ID, UNK_ID])

    def test_truncation(self):
        seq = tokenize("red dress red dress red", self.vocab, max_tokens=3)
        assert seq.m == 3
        assert seq.original_length == 5

    def test_punctuation(self):
        assert split_words("Red, dress!  (slim)") == ["red", "dress", "slim"]

    def test_empty(self):
        with pytest.raises(ValueError):
            tokenize("   ", self.vocab)


class TestFeatureFile:
    def test_worked_row(self, tmp_path):
        (tmp_path / "f.tsv").write_text("img1\t2\t1.0,0.0,0.0,1.0\n")
        feats = load_features(tmp_path / "f.tsv", d0=2)
        np.testing.assert_array_equal(feats["img1"].features, [[1.0, 0.0], [0.0, 1.0]])

    def test_duplicate_id(self, tmp_path):
        (tmp_path / "f.tsv").write_text("img1\t1\t1.0,2.0\nimg1\t1\t3.0,4.0\n")
        with pytest.raises(ValueError, match="duplicate image_id img1"):
            load_features(tmp_path / "f.tsv")

    def test_count_mismatch(self, tmp_path):
        (tmp_path / "f.tsv").write_text("img1\t2\t1.0,0.0,0.0\n")
        with pytest.raises(ValueError, match=r":1: img1 declares n=2"):
            load_features(tmp_path / "f.tsv", d0=2)

    def test_malformed_row_line_number(self, tmp_path):
        (tmp_path / "f.tsv").write_text("a\t1\t1.0\nb\t1\tx\n")
        with pytest.raises(ValueError, match=":2: malformed"):
            load_features(tmp_path / "f.tsv")

    def test_round_trip_exact(self, tmp_path, rng):
        sets = [ObjectFeatureSet(f"i{k}", rng.standard_normal((k + 1, 5)) * 10.0 ** rng.integers(-8, 8)) for k in range(4)]
        save_features(sets, tmp_path / "f.tsv")
        loaded = load_features(tmp_path / "f.tsv", d0=5)
        for s in sets:
            np.testing.assert_array_equal(loaded[s.image_id].features, s.features)

    def test_negative_grade(self, tmp_path):
        (tmp_path / "r.tsv").write_text("q\ti\t-1\n")
        with pytest.raises(ValueError, match="negative grade"):
            load_relevance(tmp_path / "r.tsv")


class TestWordVectors:
    def test_known_rows_loaded(self, tmp_path, rng):
        vocab = build_vocab(["red dress"], min_count=1)
        (tmp_path / "v.txt").write_text("RED 1 2 3\nblue 4 5 6\n")
        table = load_word_vectors(tmp_path / "v.txt", vocab, 3, rng)
        assert table.shape == (len(vocab), 3)
        np.testing.assert_array_equal(table[vocab.lookup("red")], [1, 2, 3])

    def test_width_mismatch(self, tmp_path, rng):
        vocab = build_vocab(["red"], min_count=1)
        (tmp_path / "v.txt").write_text("red 1 2\n")
        with pytest.raises(ValueError, match="expected 3"):
            load_word_vectors(tmp_path / "v.txt", vocab, 3, rng)


class TestSynthetic:
    def test_zero_noise_within_class_identical(self):
        ds = gen_synthetic(classes=3, pairs_per_class=6, noise=0.0, seed=1)
        for c in range(3):
            rows = np.concatenate([s.features for i, s in ds.images.items() if ds.classes[i] == c])
            np.testing.assert_array_equal(rows, np.broadcast_to(rows[0], rows.shape))

    def test_same_seed_same_bytes(self, tmp_path):
        gen_synthetic(seed=7).save(tmp_path / "a")
        gen_synthetic(seed=7).save(tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_class_token_sets_disjoint(self):
        ds = gen_synthetic(classes=8, seed=7)
        words = {c: set() for c in range(8)}
        for qid, text in {**ds.train_queries, **ds.eval_queries}.items():
            words[ds.classes[qid]].update(text.split())
        for a in range(8):
            for b in range(a + 1, 8):
                assert not words[a] & words[b]

    def test_structure(self):
        ds = gen_synthetic(classes=8, pairs_per_class=25, n=4, m=6, d0=16, seed=7)
        assert len(ds.images) == 200
        assert len(ds.train_pairs) == 160
        assert len(ds.eval_pools) == 40
        for s in ds.images.values():
            assert 1 <= s.n <= 4 and s.features.shape[1] == 16
        for qid, pool in ds.eval_pools.items():
            assert len(pool) == 30
            for iid, g in pool.items():
                assert g == int(ds.classes[iid] == ds.classes[qid])
            assert 1 <= len(ds.eval_queries[qid].split()) <= 6

    def test_nearest_prototype_recovers_classes(self):
        ds = gen_synthetic(classes=8, seed=7)
        clean = gen_synthetic(classes=8, seed=7, noise=0.0)
        protos = np.array([next(s.features[0] for i, s in clean.images.items() if clean.classes[i] == c)
                           for c in range(8)])
        for iid, s in ds.images.items():
            dist = ((s.features.mean(axis=0)[None] - protos) ** 2).sum(axis=1)
            assert int(np.argmin(dist)) == ds.classes[iid]

    def test_preconditions(self):
        with pytest.raises(ValueError):
            gen_synthetic(classes=1)
        with pytest.raises(ValueError, match="vocab_size"):
            gen_synthetic(classes=8, vocab_size=10, tokens_per_class=4)

    def test_dataset_round_trip(self, tmp_path):
        ds = gen_synthetic(classes=3, pairs_per_class=5, seed=2)
        ds.save(tmp_path)
        back = Dataset.load(tmp_path)
        assert back.train_pairs == ds.train_pairs
        assert back.eval_pools == ds.eval_pools
        assert back.train_queries == ds.train_queries

    def test_dangling_reference(self):
        with pytest.raises(ValueError, match="unknown image"):
            Dataset({}, {"q": "a"}, [("q", "missing")])


class TestPadding:
    def test_shapes_and_masks(self):
        feats, mask = pad_features([ObjectFeatureSet("a", np.ones((2, 3))), ObjectFeatureSet("b", np.ones((4, 3)))])
        assert feats.shape == (2, 4, 3)
        np.testing.assert_array_equal(mask.sum(axis=1), [2, 4])
        assert feats[0, 2:].sum() == 0.0
        ids, tmask = pad_tokens([TokenSequence("q", [5]), TokenSequence("r", [2, 3, 4])])
        np.testing.assert_array_equal(ids, [[5, PAD_ID, PAD_ID], [2, 3, 4]])
        np.testing.assert_array_equal(tmask.sum(axis=1), [1, 3])
