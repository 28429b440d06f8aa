import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3ae.corpus import ANSWERS, INTENSITIES, POSITIONS, QUESTIONS, SHAPES, SIZES, sample_scenes
from m3ae.data import (
    RESERVED,
    EmbeddingTables,
    Vocabulary,
    build_vocab,
    center_crop_resize,
    detokenize,
    embed_image,
    embed_text,
    load_image,
    patchify,
    read_manifest,
    save_image,
    tokenize,
    unpatchify,
    write_manifest,
)
from m3ae.tensor import Tensor


def nn_resize_oracle(img, side):
    """Explicit per-pixel index map."""
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    out = np.zeros((side, side, img.shape[2]), dtype=np.float32)
    for i in range(side):
        for j in range(side):
            out[i, j] = img[top + (i * s) // side, left + (j * s) // side]
    return out


class TestVocabulary:
    def test_small_corpus(self):
        v = build_vocab(["a b", "a c"], max_size=8)
        assert set(v.tokens) == {"a", "b", "c"} | set(RESERVED)
        assert len(v) == 8
        assert v.tokens[5] == "a"  # most frequent first

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([], 10)

    def test_max_size_below_reserved(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], 4)

    def test_dense_ids_and_reserved(self):
        v = build_vocab(["x y z"], 100)
        assert [v.id_of(t) for t in v.tokens] == list(range(len(v)))
        ids = {Vocabulary.pad_id, Vocabulary.unk_id, Vocabulary.start_id, Vocabulary.sep_id, Vocabulary.mask_id}
        assert len(ids) == 5

    def test_deterministic(self):
        corpus = ["b a", "c a", "d"]
        assert build_vocab(corpus, 7) == build_vocab(list(corpus), 7)

    def test_synthetic_corpus_terminals(self):
        caps = [s.caption for s in sample_scenes(100, 3)]
        v = build_vocab(caps, 128)
        terminals = {"a", "in", "the"} | set(SHAPES) | set(INTENSITIES) | set(SIZES)
        terminals |= {w for p in POSITIONS for w in p.split()}
        present = {w for c in caps for w in c.split()}
        assert present <= terminals
        assert present <= set(v.tokens)
        assert len(v) <= 128


class TestTokenize:
    vocab = build_vocab(["opacity in left lung", "left"], 50)

    def test_empty(self):
        seq = tokenize("", self.vocab)
        assert seq.length == 0
        assert list(seq.with_specials) == [Vocabulary.start_id, Vocabulary.sep_id]

    def test_known_words(self):
        seq = tokenize("opacity in left lung", self.vocab)
        assert list(seq.ids) == [self.vocab.tokens.index(w) for w in ["opacity", "in", "left", "lung"]]
        assert len(seq.with_specials) == 6
        assert Vocabulary.unk_id not in seq.ids

    def test_unknown(self):
        assert list(tokenize("zzzz", self.vocab).with_specials) == [2, 1, 3]

    def test_lowercase_and_roundtrip(self):
        seq = tokenize("Opacity IN Left", self.vocab)
        text = detokenize(seq, self.vocab)
        assert text == "opacity in left"
        assert np.array_equal(tokenize(text, self.vocab).with_specials, seq.with_specials)


class TestImages:
    def test_identity(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        np.testing.assert_array_equal(center_crop_resize(img, 16), img)

    def test_downsample_square(self, rng):
        img = rng.random((24, 24, 1)).astype(np.float32)
        out = center_crop_resize(img, 12)
        np.testing.assert_array_equal(out, nn_resize_oracle(img, 12))
        np.testing.assert_array_equal(out, img[::2, ::2])

    def test_rectangular_crop(self, rng):
        img = rng.random((30, 20, 1)).astype(np.float32)
        np.testing.assert_array_equal(center_crop_resize(img, 16), nn_resize_oracle(img, 16))

    def test_uint8_normalised(self):
        img = np.full((4, 4), 255, dtype=np.uint8)
        assert center_crop_resize(img, 2).max() == 1.0

    def test_empty_image(self):
        with pytest.raises(ValueError):
            center_crop_resize(np.zeros((0, 5, 1)), 4)

    def test_patchify_counts(self):
        assert patchify(np.zeros((288, 288, 3)), 16).patches.shape == (324, 768)
        assert patchify(np.zeros((32, 32, 1)), 16).patches.shape == (4, 256)
        with pytest.raises(ValueError):
            patchify(np.zeros((30, 30, 1)), 16)

    def test_patch_pixel_order(self):
        img = np.arange(4 * 4 * 2, dtype=np.float32).reshape(4, 4, 2)
        grid = patchify(img, 2)
        # second patch is rows 0-1, cols 2-3; pixels row-major then channel
        expected = [img[y, x, c] for y in (0, 1) for x in (2, 3) for c in (0, 1)]
        np.testing.assert_array_equal(grid.patches[1], expected)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(0, 2**31))
    def test_round_trip(self, gh, gw, p, c, seed):
        img = np.random.default_rng(seed).random((gh * p, gw * p, c)).astype(np.float32)
        np.testing.assert_array_equal(unpatchify(patchify(img, p)), img)

    def test_pgm_round_trip(self, tmp_path):
        img = (np.arange(16).reshape(4, 4, 1) / 15.0).astype(np.float32)
        save_image(tmp_path / "x.pgm", img)
        back = center_crop_resize(load_image(tmp_path / "x.pgm"), 4)
        np.testing.assert_allclose(back, img, atol=1 / 255)


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.tsv", [("images/a.pgm", "a bright cross"), ("b.pgm", "x y")])
    recs = read_manifest(tmp_path / "m.tsv")
    assert recs == [(tmp_path / "images/a.pgm", "a bright cross"), (tmp_path / "b.pgm", "x y")]
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.tsv")


class TestEmbeddings:
    def tables(self, rng, dim=32, n=4, m=8):
        return EmbeddingTables(dim, 16, n, 20, m, rng)

    def test_text_shapes(self, rng):
        t = self.tables(rng)
        v = build_vocab(["a b c d"], 20)
        assert embed_text(tokenize("", v), t).shape == (2, 32)
        assert embed_text(tokenize("a b c d", v), t).shape == (6, 32)

    def test_text_rows_are_token_plus_position(self, rng):
        t = self.tables(rng)
        ids = np.array([2, 7, 9, 11, 3])
        x = embed_text(ids, t).data
        np.testing.assert_allclose(x[0], t.text_start.data + t.text_pos.data[0], rtol=1e-6)
        np.testing.assert_allclose(x[2], t.token.data[9] + t.text_pos.data[2], rtol=1e-6)
        np.testing.assert_allclose(x[4], t.text_sep.data + t.text_pos.data[4], rtol=1e-6)

    def test_swapping_tokens_changes_only_those_rows(self, rng):
        t = self.tables(rng)
        a = embed_text(np.array([2, 7, 9, 11, 3]), t).data
        b = embed_text(np.array([2, 11, 9, 7, 3]), t).data
        assert np.array_equal(a[[0, 2, 4]], b[[0, 2, 4]])
        np.testing.assert_allclose(a[1] - t.text_pos.data[1], b[3] - t.text_pos.data[3], atol=1e-7)

    def test_overlong_text_truncates_keeping_boundary(self, rng):
        t = self.tables(rng, m=3)
        ids = np.array([2, 5, 6, 7, 8, 9, 3])
        x = embed_text(ids, t).data
        assert x.shape == (5, 32)
        np.testing.assert_allclose(x[-1], t.text_sep.data + t.text_pos.data[4], rtol=1e-6)

    def test_image_shape_and_aggregation_row(self, rng):
        t = self.tables(rng)
        t.image_pos.data[:] = 0
        x = embed_image(np.zeros((4, 16)), t).data
        assert x.shape == (5, 32)
        np.testing.assert_array_equal(x[0], t.image_agg.data)
        np.testing.assert_array_equal(x[1:], 0)

    def test_image_capacity(self, rng):
        with pytest.raises(ValueError):
            embed_image(np.zeros((5, 16)), self.tables(rng))

    def test_identical_patches_differ_only_by_position(self, rng):
        t = self.tables(rng)
        p = np.tile(rng.random(16), (4, 1))
        x = embed_image(p, t).data
        np.testing.assert_allclose(x[1] - t.image_pos.data[1], x[3] - t.image_pos.data[3], atol=1e-6)

    def test_batched_matches_single(self, rng):
        t = self.tables(rng)
        p = rng.random((3, 4, 16)).astype(np.float32)
        xb = embed_image(p, t).data
        for i in range(3):
            np.testing.assert_allclose(xb[i], embed_image(p[i], t).data, rtol=1e-6)


def test_question_and_answer_words_tokenize(rng):
    v = build_vocab(list(QUESTIONS.values()) + list(ANSWERS), 64)
    for q in QUESTIONS.values():
        assert Vocabulary.unk_id not in tokenize(q, v).ids
    assert isinstance(embed_text(tokenize("how big is the shape", v).with_specials,
                                 EmbeddingTables(8, 4, 1, len(v), 8, rng)), Tensor)
