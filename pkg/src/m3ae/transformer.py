"""Model configuration, uni-modal encoders and the dual-stream co-attention fusion."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

from . import tensor as T
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention, TransformerStack, scaled_dot_attention
from .tensor import Tensor

attention = scaled_dot_attention


@dataclass
class ModelConfig:
    dim: int = 768
    heads: int = 12
    vision_layers: int = 12
    text_layers: int = 12
    fusion_layers: int = 6
    patch: int = 16
    image_side: int = 288
    channels: int = 3
    max_text_len: int = 64
    vocab_size: int = 50265
    rho_image: float = 0.75
    rho_text: float = 0.15
    mim_layer: int = 3
    decoder_depth: int = 2
    decoder_width: int = 384
    dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0 <= self.mim_layer <= self.fusion_layers:
            raise ValueError(f"mim_layer {self.mim_layer} outside [0, {self.fusion_layers}]")
        for name in ("rho_image", "rho_text"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.image_side % self.patch:
            raise ValueError(f"image_side {self.image_side} not divisible by patch {self.patch}")
        if self.decoder_depth > 0 and self.decoder_width % self.heads:
            raise ValueError(f"decoder_width {self.decoder_width} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        base = dict(
            dim=64, heads=4, vision_layers=2, text_layers=2, fusion_layers=2, patch=4,
            image_side=16, channels=1, max_text_len=16, vocab_size=32, mim_layer=1,
            decoder_depth=2, decoder_width=32,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> ModelConfig:
        base = dict(
            dim=16, heads=2, vision_layers=1, text_layers=1, fusion_layers=1, patch=4,
            image_side=8, channels=1, max_text_len=4, vocab_size=16, mim_layer=1,
            decoder_depth=1, decoder_width=8,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EncoderOutputs:
    vision: Tensor
    text: Tensor


@dataclass
class FusionTrace:
    visual_layers: list[Tensor]
    textual_layers: list[Tensor]

    @property
    def z_v(self) -> Tensor:
        return self.visual_layers[-1]

    @property
    def z_l(self) -> Tensor:
        return self.textual_layers[-1]

    @property
    def depth(self) -> int:
        return len(self.visual_layers) - 1


class StreamBlock(Module):
    """One modality's half of a fusion layer: self-attn, cross-attn, feedforward."""

    def __init__(self, dim: int, heads: int, rng):
        self.norm_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_query = LayerNorm(dim)
        self.norm_context = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, rng)

    def self_step(self, x: Tensor) -> Tensor:
        h = self.norm_self(x)
        return x + self.self_attn(h, h)

    def cross_step(self, x: Tensor, other: Tensor) -> Tensor:
        return x + self.cross_attn(self.norm_query(x), self.norm_context(other))

    def ff_step(self, x: Tensor) -> Tensor:
        return x + self.ff(self.norm_ff(x))


class CoAttentionLayer(Module):
    def __init__(self, dim: int, heads: int, rng):
        self.vision = StreamBlock(dim, heads, rng)
        self.text = StreamBlock(dim, heads, rng)

    def __call__(self, hv: Tensor, hl: Tensor) -> tuple[Tensor, Tensor]:
        vs = self.vision.self_step(hv)
        ls = self.text.self_step(hl)
        # both cross sub-layers read the post-self-attention states of the other stream
        vc = self.vision.cross_step(vs, ls)
        lc = self.text.cross_step(ls, vs)
        return self.vision.ff_step(vc), self.text.ff_step(lc)


class FusionModule(Module):
    def __init__(self, dim: int, heads: int, depth: int, rng):
        self.layers = [CoAttentionLayer(dim, heads, rng) for _ in range(depth)]

    def __call__(self, hv: Tensor, hl: Tensor) -> FusionTrace:
        return fuse(hv, hl, self)


def _check_pair(hv: Tensor, hl: Tensor) -> None:
    if hv.ndim != hl.ndim or hv.ndim not in (2, 3):
        raise ValueError(f"fusion inputs must both be 2-D or 3-D, got {hv.shape} and {hl.shape}")
    if hv.shape[-1] != hl.shape[-1]:
        raise ValueError(f"fusion width mismatch: {hv.shape} vs {hl.shape}")
    if hv.ndim == 3 and hv.shape[0] != hl.shape[0]:
        raise ValueError(f"fusion batch mismatch: {hv.shape} vs {hl.shape}")


def fuse(hv: Tensor, hl: Tensor, module: FusionModule) -> FusionTrace:
    """Run every co-attention layer, recording both streams after each one.

    Index 0 of each list is the input itself, so ``visual_layers[0] is hv``.
    """
    _check_pair(hv, hl)
    vis, txt = [hv], [hl]
    for layer in module.layers:
        hv, hl = layer(hv, hl)
        vis.append(hv)
        txt.append(hl)
    return FusionTrace(vis, txt)


def encode(x: Tensor, encoder: TransformerStack, dim: int) -> Tensor:
    if x.shape[-1] != dim:
        raise ValueError(f"encoder expects width {dim}, got {x.shape}")
    return encoder(x)


def pool(trace: FusionTrace) -> Tensor:
    """Concatenate the aggregation rows [z_I ; z_T] of the final fused streams."""
    zv, zl = trace.z_v, trace.z_l
    return T.concat([zv[..., 0, :], zl[..., 0, :]], axis=-1)

