"""Text and image frontends: vocabulary, tokenizer, crop/resize, patchify, embeddings."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import tensor as T
from .nn import Linear, Module, trunc_normal
from .tensor import Parameter, Tensor

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[: len(RESERVED)] != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id_of(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    pad_id = 0
    unk_id = 1
    start_id = 2
    sep_id = 3
    mask_id = 4
    first_regular_id = len(RESERVED)


def build_vocab(corpus: Iterable[str], max_size: int = 30000) -> Vocabulary:
    """Word-level vocabulary ranked by frequency, ties broken alphabetically."""
    texts = list(corpus)
    if not texts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise ValueError(f"max_size {max_size} smaller than the {len(RESERVED)} reserved tokens")
    counts = Counter(w for t in texts for w in t.lower().split())
    for r in RESERVED:
        counts.pop(r.lower(), None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    words = [w for w, _ in ranked[: max_size - len(RESERVED)]]
    return Vocabulary(RESERVED + tuple(words))


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray  # (M,) without specials
    with_specials: np.ndarray  # (M + 2,)

    @property
    def length(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    ids = np.array([vocab.id_of(w) for w in text.lower().split()], dtype=np.int64)
    full = np.concatenate([[vocab.start_id], ids, [vocab.sep_id]]).astype(np.int64)
    return TokenSequence(ids=ids, with_specials=full)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return " ".join(vocab.tokens[int(i)] for i in ids)


def sequence_from_specials(with_specials: np.ndarray) -> TokenSequence:
    full = np.asarray(with_specials, dtype=np.int64)
    return TokenSequence(ids=full[1:-1].copy(), with_specials=full.copy())


# -- images -----------------------------------------------------------------


def to_unit_range(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float32) / np.iinfo(arr.dtype).max
    if arr.dtype == bool:
        return arr.astype(np.float32)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def center_crop_resize(image: np.ndarray, side: int) -> np.ndarray:
    """Square center crop on the shorter dimension, then nearest-neighbour resize.

    Output pixel (i, j) samples crop pixel (i * s // side, j * s // side).
    """
    if side <= 0:
        raise ValueError("side must be positive")
    arr = to_unit_range(image)
    h, w = arr.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty image")
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = arr[top : top + s, left : left + s]
    idx = (np.arange(side) * s) // side
    return crop[idx][:, idx].copy()


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (N, P*P*C)
    grid: tuple[int, int]
    height: int
    width: int
    channels: int
    patch: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def patchify(image: np.ndarray, patch: int) -> PatchGrid:
    arr = image if image.ndim == 3 else image[:, :, None]
    h, w, c = arr.shape
    if patch <= 0 or h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    patches = arr.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)
    return PatchGrid(patches=patches.copy(), grid=(gh, gw), height=h, width=w, channels=c, patch=patch)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid
    p, c = grid.patch, grid.channels
    return grid.patches.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(grid.height, grid.width, c)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    return arr if arr.ndim == 3 else arr[:, :, None]


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit PGM (1 channel) or PPM (3 channels)."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr8).save(path)


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Tab-separated ``image_path<TAB>caption`` lines; paths are relative to the manifest."""
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image<TAB>caption'")
        records.append((path.parent / parts[0], parts[1]))
    return records


def write_manifest(path: str | Path, records: Iterable[tuple[str, str]]) -> None:
    lines = [f"{img}\t{cap}\n" for img, cap in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


# -- embeddings -------------------------------------------------------------


class EmbeddingTables(Module):
    def __init__(self, dim: int, patch_dim: int, n_patches: int, vocab_size: int, max_text_len: int, rng):
        self.patch_proj = Linear(patch_dim, dim, rng, bias=False)
        self.image_pos = Parameter(trunc_normal(rng, (n_patches + 1, dim)))
        self.image_agg = Parameter(trunc_normal(rng, (dim,)))
        self.image_mask = Parameter(trunc_normal(rng, (dim,)))
        self.token = Parameter(trunc_normal(rng, (vocab_size, dim)))
        self.text_pos = Parameter(trunc_normal(rng, (max_text_len + 2, dim)))
        self.text_start = Parameter(trunc_normal(rng, (dim,)))
        self.text_sep = Parameter(trunc_normal(rng, (dim,)))

    @property
    def dim(self) -> int:
        return self.token.shape[1]

    @property
    def text_capacity(self) -> int:
        return self.text_pos.shape[0]


def truncate_ids(with_specials: np.ndarray, capacity: int) -> np.ndarray:
    """Cut the middle so at most ``capacity`` rows remain, keeping the boundary id last."""
    ids = np.asarray(with_specials)
    if ids.shape[-1] <= capacity:
        return ids
    return np.concatenate([ids[..., : capacity - 1], ids[..., -1:]], axis=-1)


def embed_text(seq: TokenSequence | np.ndarray, tables: EmbeddingTables) -> Tensor:
    """(M+2) x D (or B x (M+2) x D) text input: token + position, dedicated start/sep vectors."""
    ids = seq.with_specials if isinstance(seq, TokenSequence) else np.asarray(seq)
    ids = truncate_ids(ids.astype(np.int64), tables.text_capacity)
    batched = ids.ndim == 2
    ids2 = ids if batched else ids[None]
    b, length = ids2.shape
    d = tables.dim
    middle = tables.token[ids2[:, 1:-1]]
    start = T.broadcast_to(tables.text_start.reshape(1, 1, d), (b, 1, d))
    sep = T.broadcast_to(tables.text_sep.reshape(1, 1, d), (b, 1, d))
    x = T.concat([start, middle, sep], axis=1) + tables.text_pos[:length]
    return x if batched else x.reshape(length, d)


def embed_image(patches: PatchGrid | np.ndarray, tables: EmbeddingTables) -> Tensor:
    """(N+1) x D (or B x (N+1) x D): aggregation row then projected patches, plus positions."""
    arr = patches.patches if isinstance(patches, PatchGrid) else np.asarray(patches)
    batched = arr.ndim == 3
    arr3 = arr if batched else arr[None]
    b, n, _ = arr3.shape
    d = tables.dim
    if n + 1 > tables.image_pos.shape[0]:
        raise ValueError(f"{n} patches exceed position capacity {tables.image_pos.shape[0] - 1}")
    proj = tables.patch_proj(Tensor(arr3, dtype=tables.image_pos.dtype))
    agg = T.broadcast_to(tables.image_agg.reshape(1, 1, d), (b, 1, d))
    x = T.concat([agg, proj], axis=1) + tables.image_pos[: n + 1]
    return x if batched else x.reshape(n + 1, d)
