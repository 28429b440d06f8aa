"""Masking, representation selection, the two decoders and the MIM/MLM/ITM losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import EmbeddingTables, TokenSequence, Vocabulary
from .nn import LayerNorm, Linear, Module, TransformerStack, trunc_normal
from .tensor import Parameter, Tensor
from .transformer import FusionTrace

MASK_TOKEN, RANDOM_TOKEN, KEEP_TOKEN = "mask", "random", "keep"
CORRUPTION_SPLIT = (0.8, 0.1, 0.1)


def n_masked(n_maskable: int, rho: float) -> int:
    # round first so 0.15 * 20 counts as 3, not 4
    return min(n_maskable, math.ceil(round(rho * n_maskable, 9)))


@dataclass(frozen=True)
class MaskPlan:
    modality: str
    masked_positions: tuple[int, ...]
    corruption: tuple[str, ...] = ()
    seed: int = 0

    def __len__(self) -> int:
        return len(self.masked_positions)

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.masked_positions, dtype=np.int64)


def draw_mask_indices(n_maskable: int, rho: float, rng: np.random.Generator, count: int = 1) -> np.ndarray:
    """``count`` independent uniform subsets, returned as (count, k) sorted 1-based row indices.

    Row 0 (and, for text, the trailing boundary row) is never a candidate.
    """
    k = n_masked(n_maskable, rho)
    if k == 0:
        return np.zeros((count, 0), dtype=np.int64)
    order = np.argsort(rng.random((count, n_maskable)), axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64) + 1


def draw_corruption(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    p_mask, p_rand, _ = CORRUPTION_SPLIT
    return np.where(u < p_mask, 0, np.where(u < p_mask + p_rand, 1, 2))


_CORRUPTION_NAMES = (MASK_TOKEN, RANDOM_TOKEN, KEEP_TOKEN)


def sample_mask_plan(n_maskable: int, rho: float, modality: str, seed: int) -> MaskPlan:
    if modality not in ("image", "text"):
        raise ValueError(f"unknown modality {modality!r}")
    rng = np.random.default_rng(seed)
    positions = draw_mask_indices(n_maskable, rho, rng)[0]
    corruption: tuple[str, ...] = ()
    if modality == "text":
        corruption = tuple(_CORRUPTION_NAMES[c] for c in draw_corruption(rng, len(positions)))
    return MaskPlan(modality, tuple(int(p) for p in positions), corruption, seed)


def force_corruption(plan: MaskPlan, kind: str) -> MaskPlan:
    return replace(plan, corruption=(kind,) * len(plan))


def image_mask_array(plans: Sequence[MaskPlan], n_rows: int) -> np.ndarray:
    mask = np.zeros((len(plans), n_rows), dtype=bool)
    for b, plan in enumerate(plans):
        pos = plan.positions
        if len(pos) and (pos.min() < 1 or pos.max() >= n_rows):
            raise ValueError(f"image mask position outside 1..{n_rows - 1}")
        mask[b, pos] = True
    return mask


def apply_image_mask(x: Tensor, plan: MaskPlan | Sequence[MaskPlan], tables: EmbeddingTables) -> Tensor:
    """Replace masked rows with the shared mask embedding plus that row's position embedding."""
    batched = x.ndim == 3
    plans = list(plan) if batched else [plan]
    n_rows = x.shape[-2]
    mask = image_mask_array(plans, n_rows)
    if not mask.any():
        return x
    fill = tables.image_mask + tables.image_pos[:n_rows]
    cond = mask[:, :, None] if batched else mask[0][:, None]
    return T.where(cond, fill, x)


def apply_text_mask(seq: TokenSequence, plan: MaskPlan, vocab: Vocabulary | int) -> TokenSequence:
    """Corrupt the planned positions (1-based in ``with_specials``) per the plan's draws."""
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    full = seq.with_specials.copy()
    m = len(seq.ids)
    pos = plan.positions
    if len(pos) and (pos.min() < 1 or pos.max() > m):
        raise ValueError(f"text mask position outside 1..{m}")
    rng = np.random.default_rng([plan.seed, 1])
    lo = Vocabulary.first_regular_id
    for p, kind in zip(pos, plan.corruption):
        if kind == MASK_TOKEN:
            full[p] = Vocabulary.mask_id
        elif kind == RANDOM_TOKEN:
            full[p] = rng.integers(lo, vocab_size) if vocab_size > lo else Vocabulary.mask_id
    return TokenSequence(ids=full[1:-1].copy(), with_specials=full)


def select_representation(trace: FusionTrace, k: int) -> Tensor:
    if not 0 <= k <= trace.depth:
        raise ValueError(f"layer index {k} outside [0, {trace.depth}]")
    return trace.visual_layers[k]


# -- decoders and heads --------------------------------------------------------


class VisionDecoder(Module):
    def __init__(self, dim: int, width: int, depth: int, heads: int, n_rows: int, patch_dim: int, rng):
        self.proj_in = Linear(dim, width, rng)
        self.pos = Parameter(trunc_normal(rng, (n_rows, width)))
        self.blocks = TransformerStack(width, heads, depth, rng)
        self.proj_out = Linear(width, patch_dim, rng)


class LanguageDecoder(Module):
    def __init__(self, dim: int, vocab_size: int, rng):
        self.dense = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.out = Linear(dim, vocab_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(self.norm(T.gelu(self.dense(x))))


class PairHead(Module):
    """Two-layer map over the pooled pair vector [z_I ; z_T]."""

    def __init__(self, dim: int, n_out: int, rng):
        self.fc1 = Linear(2 * dim, dim, rng)
        self.fc2 = Linear(dim, n_out, rng)

    @property
    def n_out(self) -> int:
        return self.fc2.weight.shape[1]

    def __call__(self, pooled: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(pooled)))


def _positions_for(z: Tensor, plan) -> np.ndarray:
    if isinstance(plan, MaskPlan):
        return plan.positions
    if isinstance(plan, np.ndarray):
        return plan.astype(np.int64)
    return np.stack([p.positions for p in plan])


def decode_vision(z: Tensor, plan, decoder: VisionDecoder) -> Tensor:
    """Pixel predictions (K x P*P*C, or B x K x P*P*C) at the masked rows."""
    n_rows = decoder.pos.shape[0]
    if z.shape[-2] != n_rows or z.shape[-1] != decoder.proj_in.weight.shape[0]:
        raise ValueError(f"vision decoder expects (..., {n_rows}, {decoder.proj_in.weight.shape[0]}), got {z.shape}")
    h = decoder.blocks(decoder.proj_in(z) + decoder.pos)
    idx = _positions_for(z, plan)
    return decoder.proj_out(T.take_rows(h, idx))


def decode_language(z: Tensor, plan, decoder: LanguageDecoder) -> Tensor:
    """Vocabulary logits (K x V, or B x K x V) at the masked text positions."""
    if z.shape[-1] != decoder.dense.weight.shape[0]:
        raise ValueError(f"language decoder expects width {decoder.dense.weight.shape[0]}, got {z.shape}")
    idx = _positions_for(z, plan)
    if idx.size and idx.max() >= z.shape[-2] - 1:
        raise ValueError("text mask position hits the boundary row")
    return decoder(T.take_rows(z, idx))


# -- losses -------------------------------------------------------------------


@dataclass
class ReconstructionTargets:
    image_targets: np.ndarray | None = None
    text_targets: np.ndarray | None = None


def image_targets(patches: np.ndarray, plan) -> np.ndarray:
    """Original pixels of the masked patches; plan rows are 1-based, patches 0-based."""
    idx = _positions_for(None, plan) - 1
    if patches.ndim == 2:
        return patches[idx]
    return patches[np.arange(patches.shape[0])[:, None], idx]


def text_targets(ids_with_specials: np.ndarray, plan) -> np.ndarray:
    idx = _positions_for(None, plan)
    if ids_with_specials.ndim == 1:
        return ids_with_specials[idx]
    return ids_with_specials[np.arange(ids_with_specials.shape[0])[:, None], idx]


def mim_loss(pred: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets)
    if pred.shape != targets.shape:
        raise ValueError(f"prediction {pred.shape} and target {targets.shape} misaligned")
    if pred.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    diff = pred - Tensor(targets, dtype=pred.dtype)
    return (diff * diff).mean()


def mlm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the target ids; zero when nothing is masked."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} misaligned")
    if targets.size == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    v = logits.shape[-1]
    if targets.min() < 0 or targets.max() >= v:
        raise ValueError("target id outside the vocabulary")
    flat = logits.reshape(-1, v)
    logp = T.log_softmax(flat, axis=-1)
    picked = logp[np.arange(flat.shape[0]), targets.reshape(-1)]
    return -picked.mean()


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross-entropy from raw match logits; label 1 means a true pair."""
    labels = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    sign = Tensor(1.0 - 2.0 * labels, dtype=logits.dtype)  # +1 for negatives, -1 for positives
    return T.softplus(logits * sign).mean()


def itm_forward_loss(zv_agg: Tensor, zl_agg: Tensor, label, head: PairHead) -> Tensor:
    pooled = T.concat([zv_agg, zl_agg], axis=-1)
    logits = head(pooled)
    return itm_loss(logits, np.broadcast_to(np.asarray(label), logits.shape))


def sample_itm_pairs(captions: Sequence[str], rng: np.random.Generator, p_negative: float = 0.5):
    """Per sample, with probability ``p_negative`` pair the image with a different caption.

    Returns (text_index, labels). Only captions whose text differs count as
    negatives, so duplicate scenes never produce mislabelled pairs.
    """
    n = len(captions)
    text_index = np.arange(n)
    labels = np.ones(n, dtype=np.int64)
    for i in range(n):
        if rng.random() >= p_negative:
            continue
        candidates = [j for j in range(n) if captions[j] != captions[i]]
        if not candidates:
            continue
        text_index[i] = candidates[int(rng.integers(len(candidates)))]
        labels[i] = 0
    return text_index, labels


@dataclass
class LossReport:
    mim: float = 0.0
    mlm: float = 0.0
    itm: float = 0.0
    weights: dict[str, float] = field(default_factory=lambda: {"mim": 1.0, "mlm": 1.0, "itm": 1.0})
    total: float = 0.0
    counts: dict[str, int] = field(default_factory=lambda: {"mim": 0, "mlm": 0, "itm": 0})

    def as_row(self) -> dict[str, float]:
        return {"L_mim": self.mim, "L_mlm": self.mlm, "L_itm": self.itm, "total": self.total}
