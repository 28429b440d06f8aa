import numpy as np
import pytest

from m3ae.corpus import (
    ANSWERS,
    ATTRIBUTE_GRID,
    QUESTIONS,
    SceneSpec,
    gen_corpus,
    manifest_captions,
    qa_items,
    sample_scenes,
    vocabulary_texts,
)
from m3ae.data import center_crop_resize, load_image, read_manifest


def test_grid_size():
    assert len(ATTRIBUTE_GRID) == len(set(ATTRIBUTE_GRID)) == 48
    assert len(set(ANSWERS)) == len(ANSWERS) == 11


class TestScenes:
    def test_caption_round_trip(self):
        for attrs in ATTRIBUTE_GRID:
            spec = SceneSpec(*attrs)
            assert SceneSpec.from_caption(spec.caption) == spec
            assert len(spec.caption.split()) == 8

    def test_bad_captions(self):
        with pytest.raises(ValueError):
            SceneSpec.from_caption("a shape")
        with pytest.raises(ValueError):
            SceneSpec.from_caption("a bright large triangle in the upper left")

    @pytest.mark.parametrize("side", [16, 32])
    def test_distinct_scenes_render_distinct_images(self, side):
        imgs = {SceneSpec(*a).render(side).tobytes() for a in ATTRIBUTE_GRID}
        assert len(imgs) == 48

    def test_render_properties(self):
        img = SceneSpec("square", "dark", "lower right", "small").render(16)
        assert img.shape == (16, 16, 1)
        assert set(np.unique(img)) == {0.0, 0.5}
        assert img[:8].sum() == 0 and img[:, :8].sum() == 0

    def test_noise_is_seeded_and_clipped(self):
        s = SceneSpec("circle", "bright", "upper left", "large")
        a, b = s.render(16, seed=1, noise=0.2), s.render(16, seed=1, noise=0.2)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1
        assert not np.array_equal(a, s.render(16, seed=2, noise=0.2))

    def test_sampling(self):
        assert sample_scenes(10, 4) == sample_scenes(10, 4)
        assert len(set(sample_scenes(48, 0, unique=True))) == 48
        with pytest.raises(ValueError):
            sample_scenes(49, 0, unique=True)
        with pytest.raises(ValueError):
            sample_scenes(0, 0)


def test_gen_corpus(tmp_path):
    scenes = gen_corpus(5, 3, 16, tmp_path, patch=4)
    recs = read_manifest(tmp_path / "manifest.tsv")
    assert [c for _, c in recs] == [s.caption for s in scenes]
    np.testing.assert_allclose(center_crop_resize(load_image(recs[2][0]), 16), scenes[2].render(16), atol=1 / 255)
    assert manifest_captions(tmp_path / "manifest.tsv") == [s.caption for s in scenes]
    with pytest.raises(ValueError):
        gen_corpus(2, 0, 10, tmp_path / "x", patch=4)


def test_qa_items():
    caps = [s.caption for s in sample_scenes(3, 0, unique=True)]
    items = qa_items(caps)
    assert len(items) == 3 * len(QUESTIONS)
    for it in items:
        scene = SceneSpec.from_caption(caps[it.image_index])
        kind = next(k for k, q in QUESTIONS.items() if q == it.question)
        assert ANSWERS[it.label] == scene.answer(kind)
    assert vocabulary_texts(caps)[:3] == caps
