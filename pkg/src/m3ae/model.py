"""The full backbone plus decoders and the image-text matching head."""

from __future__ import annotations

import numpy as np

from .data import EmbeddingTables, embed_image, embed_text
from .nn import Module, TransformerStack
from .objectives import (
    LanguageDecoder,
    MaskPlan,
    PairHead,
    VisionDecoder,
    apply_image_mask,
    decode_language,
    decode_vision,
    image_targets,
    select_representation,
    text_targets,
)
from .tensor import Tensor
from .transformer import FusionModule, FusionTrace, ModelConfig, encode, fuse, pool


class M3AE(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.embeddings = EmbeddingTables(c.dim, c.patch_dim, c.n_patches, c.vocab_size, c.max_text_len, rng)
        self.vision_encoder = TransformerStack(c.dim, c.heads, c.vision_layers, rng, c.dropout)
        self.text_encoder = TransformerStack(c.dim, c.heads, c.text_layers, rng, c.dropout)
        self.fusion = FusionModule(c.dim, c.heads, c.fusion_layers, rng)
        self.vision_decoder = VisionDecoder(
            c.dim, c.decoder_width, c.decoder_depth, c.heads, c.n_patches + 1, c.patch_dim, rng
        )
        self.language_decoder = LanguageDecoder(c.dim, c.vocab_size, rng)
        self.itm_head = PairHead(c.dim, 1, rng)

    # -- stages -----------------------------------------------------------
    def embed_image(self, patches: np.ndarray) -> Tensor:
        return embed_image(patches, self.embeddings)

    def embed_text(self, ids: np.ndarray) -> Tensor:
        return embed_text(ids, self.embeddings)

    def encode_vision(self, xv: Tensor) -> Tensor:
        return encode(xv, self.vision_encoder, self.config.dim)

    def encode_language(self, xl: Tensor) -> Tensor:
        return encode(xl, self.text_encoder, self.config.dim)

    def fuse(self, hv: Tensor, hl: Tensor) -> FusionTrace:
        return fuse(hv, hl, self.fusion)

    def trace(self, xv: Tensor, xl: Tensor) -> FusionTrace:
        return self.fuse(self.encode_vision(xv), self.encode_language(xl))

    # -- task forwards ----------------------------------------------------
    def forward_mim(self, patches: np.ndarray, ids: np.ndarray, plans: list[MaskPlan] | MaskPlan, k: int | None = None):
        """Masked image + full text -> (pixel predictions, pixel targets)."""
        k = self.config.mim_layer if k is None else k
        xv = apply_image_mask(self.embed_image(patches), plans, self.embeddings)
        trace = self.trace(xv, self.embed_text(ids))
        pred = decode_vision(select_representation(trace, k), plans, self.vision_decoder)
        return pred, image_targets(patches, plans)

    def forward_mlm(self, patches: np.ndarray, masked_ids: np.ndarray, original_ids: np.ndarray, plans):
        """Full image + corrupted text -> (vocab logits, original ids) at masked positions."""
        trace = self.trace(self.embed_image(patches), self.embed_text(masked_ids))
        logits = decode_language(trace.z_l, plans, self.language_decoder)
        return logits, text_targets(original_ids, plans)

    def pooled(self, patches: np.ndarray, ids: np.ndarray) -> Tensor:
        return pool(self.trace(self.embed_image(patches), self.embed_text(ids)))

    def forward_itm(self, patches: np.ndarray, ids: np.ndarray) -> Tensor:
        """Raw match logits, shape (B, 1) or (1,)."""
        return self.itm_head(self.pooled(patches, ids))
