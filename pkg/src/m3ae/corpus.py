"""Synthetic shape/caption corpus and the closed-set question-answering task built on it."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_manifest, save_image, write_manifest

SHAPES = ("square", "circle", "cross")
INTENSITIES = ("bright", "dark")
POSITIONS = ("upper left", "upper right", "lower left", "lower right")
SIZES = ("small", "large")
ATTRIBUTE_GRID = list(itertools.product(SHAPES, INTENSITIES, POSITIONS, SIZES))

_LEVEL = {"bright": 1.0, "dark": 0.5}

QUESTIONS = {
    "shape": "what shape is shown here",
    "intensity": "how bright is the shape",
    "position": "where is the shape located",
    "size": "how big is the shape",
}
ANSWERS = SHAPES + INTENSITIES + POSITIONS + SIZES


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    intensity: str
    position: str
    size: str

    @property
    def caption(self) -> str:
        return f"a {self.intensity} {self.size} {self.shape} in the {self.position}"

    @property
    def index(self) -> int:
        return ATTRIBUTE_GRID.index((self.shape, self.intensity, self.position, self.size))

    @classmethod
    def from_caption(cls, caption: str) -> SceneSpec:
        words = caption.split()
        if len(words) != 8 or words[0] != "a" or words[4:6] != ["in", "the"]:
            raise ValueError(f"not a scene caption: {caption!r}")
        spec = cls(shape=words[3], intensity=words[1], position=" ".join(words[6:]), size=words[2])
        if (spec.shape, spec.intensity, spec.position, spec.size) not in ATTRIBUTE_GRID:
            raise ValueError(f"unknown attribute in {caption!r}")
        return spec

    def render(self, side: int = 16, seed: int = 0, noise: float = 0.0) -> np.ndarray:
        """side x side x 1 image in [0, 1]; deterministic given attributes and seed."""
        yy, xx = np.mgrid[0:side, 0:side] + 0.5
        cy = side / 4 if self.position.startswith("upper") else 3 * side / 4
        cx = side / 4 if self.position.endswith("left") else 3 * side / 4
        r = side / 8 if self.size == "small" else 3 * side / 16
        dy, dx = yy - cy, xx - cx
        if self.shape == "square":
            on = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        elif self.shape == "circle":
            on = dy * dy + dx * dx <= r * r
        else:
            # arms reach past the circle's radius so small crosses and circles never coincide
            arm, reach = max(r / 3, 0.5), r + 1
            on = ((np.abs(dy) <= reach) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= reach) & (np.abs(dy) <= arm))
        img = on.astype(np.float32) * _LEVEL[self.intensity]
        if noise > 0:
            rng = np.random.default_rng([seed, self.index])
            img = np.clip(img + rng.normal(0, noise, img.shape), 0, 1).astype(np.float32)
        return img[:, :, None]

    def answer(self, question_kind: str) -> str:
        return getattr(self, question_kind)


def sample_scenes(n: int, seed: int, unique: bool = False) -> list[SceneSpec]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if unique:
        if n > len(ATTRIBUTE_GRID):
            raise ValueError(f"only {len(ATTRIBUTE_GRID)} distinct scenes exist")
        idx = rng.permutation(len(ATTRIBUTE_GRID))[:n]
    else:
        idx = rng.integers(len(ATTRIBUTE_GRID), size=n)
    return [SceneSpec(*ATTRIBUTE_GRID[i]) for i in idx]


def gen_corpus(
    n: int,
    seed: int,
    image_side: int,
    out_dir: str | Path,
    patch: int = 4,
    unique: bool = False,
    noise: float = 0.0,
) -> list[SceneSpec]:
    """Render ``n`` scenes to ``out_dir/images/*.pgm`` and write ``out_dir/manifest.tsv``."""
    if image_side % patch:
        raise ValueError(f"image_side {image_side} not divisible by patch {patch}")
    scenes = sample_scenes(n, seed, unique)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, scene in enumerate(scenes):
        rel = f"images/{i:05d}.pgm"
        save_image(out / rel, scene.render(image_side, seed, noise))
        records.append((rel, scene.caption))
    write_manifest(out / "manifest.tsv", records)
    return scenes


def vocabulary_texts(captions) -> list[str]:
    """Captions plus the fixed question templates, so one vocabulary serves both tasks."""
    return list(captions) + list(QUESTIONS.values())


@dataclass(frozen=True)
class QAItem:
    image_index: int
    question: str
    label: int


def qa_items(captions, kinds=tuple(QUESTIONS)) -> list[QAItem]:
    """One question per (image, kind); the label indexes ``ANSWERS``."""
    items = []
    for i, cap in enumerate(captions):
        scene = SceneSpec.from_caption(cap)
        for kind in kinds:
            items.append(QAItem(i, QUESTIONS[kind], ANSWERS.index(scene.answer(kind))))
    return items


def manifest_captions(path) -> list[str]:
    return [cap for _, cap in read_manifest(path)]
