"""
Fusion + goal-branch decoder.

fuse_text runs multi-stage bidirectional image<->text cross-attention on the
input branch. decode lets the (possibly fully masked) goal branch query the
fused input features and returns the per-patch representation h.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
from timm.layers import Mlp
from timm.models.vision_transformer import Attention

from visact.models.errors import ShapeMismatchError
from visact.models.schemas import FusionConfig
from visact.nets.encoders import CrossAttention, TextEmbedding, TokenSequence


@dataclass
class FusedFeatures:
    """h is the decoder output; pre_decoder is the text-fused input branch."""
    h: torch.Tensor  # (B, N, decoder_dim)
    pre_decoder: torch.Tensor  # (B, N, D)

    @property
    def token_count(self) -> int:
        return self.h.shape[1]

    def pooled(self) -> torch.Tensor:
        """Mean over tokens of the pre-decoder features, (B, D)."""
        return self.pre_decoder.mean(dim=1)


# =============================================================================
# TEXT FUSION
# =============================================================================

class FusionStage(nn.Module):
    """One image->text and text->image cross-attention pair with residuals."""

    def __init__(self, image_dim: int, text_dim: int, heads: int):
        super().__init__()
        self.norm_v = nn.LayerNorm(image_dim)
        self.norm_e = nn.LayerNorm(text_dim)
        self.image_to_text = CrossAttention(image_dim, text_dim, heads)
        self.norm_v2 = nn.LayerNorm(image_dim)
        self.norm_e2 = nn.LayerNorm(text_dim)
        self.text_to_image = CrossAttention(text_dim, image_dim, heads)

    def forward(
        self,
        v: torch.Tensor,
        e: torch.Tensor,
        padding_mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        v = v + self.image_to_text(self.norm_v(v), self.norm_e(e), key_padding_mask=padding_mask)
        e = e + self.text_to_image(self.norm_e2(e), self.norm_v2(v))
        return v, e


class TextFusion(nn.Module):
    def __init__(self, image_dim: int, text_dim: int, cfg: FusionConfig):
        super().__init__()
        if cfg.n_fusion_stages < 1:
            raise ValueError("text fusion needs at least one stage")
        self.image_dim = image_dim
        self.text_dim = text_dim
        self.stages = nn.ModuleList([
            FusionStage(image_dim, text_dim, cfg.heads) for _ in range(cfg.n_fusion_stages)
        ])

    def forward(self, v, e, padding_mask=None):
        for stage in self.stages:
            v, e = stage(v, e, padding_mask)
        return v, e


def fuse_text(
    v_s: TokenSequence,
    e: TextEmbedding,
    fusion: TextFusion,
) -> Tuple[TokenSequence, TextEmbedding]:
    """
    Fuse the instruction into the input-image branch.

    Each stage lets image tokens attend to text tokens and then text tokens
    attend to the updated image tokens. Updated text only feeds the next stage.

    Args:
        v_s: Encoded input-image tokens (B, N, D).
        e: Text embedding (B, L, D_t).
        fusion: Fusion stack built from a FusionConfig.

    Returns:
        (fused_v, fused_e) with unchanged shapes.
    """
    if len(fusion.stages) == 0:
        raise ValueError("text fusion needs at least one stage")
    if v_s.source != "input_image":
        raise ValueError(f"text fusion runs on the input-image branch, got {v_s.source!r}")
    if v_s.dim != fusion.image_dim or e.token_embeddings.shape[-1] != fusion.text_dim:
        raise ShapeMismatchError(
            f"fusion expects widths ({fusion.image_dim}, {fusion.text_dim}), "
            f"got ({v_s.dim}, {e.token_embeddings.shape[-1]})"
        )
    if e.token_embeddings.shape[0] != v_s.tokens.shape[0]:
        raise ShapeMismatchError("image and text batch sizes differ")

    v, t = fusion(v_s.tokens, e.token_embeddings, e.padding_mask)
    pooled_mask = (~e.padding_mask).unsqueeze(-1).to(t.dtype)
    pooled = (t * pooled_mask).sum(dim=1) / pooled_mask.sum(dim=1).clamp(min=1.0)
    return (
        TokenSequence(tokens=v, source="input_image", pos=v_s.pos),
        TextEmbedding(
            token_embeddings=t,
            pooled=pooled,
            padding_mask=e.padding_mask,
            vocabulary_id=e.vocabulary_id,
        ),
    )


# =============================================================================
# GOAL-BRANCH DECODER
# =============================================================================

class DecoderBlock(nn.Module):
    """Self-attention over goal queries, cross-attention into the context, MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads=heads, qkv_bias=True)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_context = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio))

    def forward(self, x, context, context_padding_mask=None):
        x = x + self.attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_context(context), key_padding_mask=context_padding_mask)
        x = x + self.mlp(self.norm3(x))
        return x


class GoalDecoder(nn.Module):
    """
    Goal tokens (queries) attend to the fused input features (keys/values).

    In 'decoder_text' mode the projected text tokens are appended to the
    keys/values instead of running a separate fusion stack.
    """

    def __init__(self, image_dim: int, text_dim: int, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        self.image_dim = image_dim
        self.query_embed = nn.Linear(image_dim, cfg.decoder_dim)
        self.context_embed = nn.Linear(image_dim, cfg.decoder_dim)
        self.text_embed = nn.Linear(text_dim, cfg.decoder_dim) if cfg.mode == "decoder_text" else None
        self.blocks = nn.ModuleList([
            DecoderBlock(cfg.decoder_dim, cfg.heads) for _ in range(cfg.decoder_depth)
        ])
        self.norm = nn.LayerNorm(cfg.decoder_dim)

    def forward(
        self,
        fused_v: torch.Tensor,
        v_f: torch.Tensor,
        text: Optional[TextEmbedding] = None,
    ) -> torch.Tensor:
        context = self.context_embed(fused_v)
        padding = None
        if self.text_embed is not None:
            if text is None:
                raise ValueError("decoder_text mode needs the text embedding")
            context = torch.cat([context, self.text_embed(text.token_embeddings)], dim=1)
            image_pad = torch.zeros(fused_v.shape[:2], dtype=torch.bool, device=fused_v.device)
            padding = torch.cat([image_pad, text.padding_mask], dim=1)

        x = self.query_embed(v_f)
        for blk in self.blocks:
            x = blk(x, context, padding)
        return self.norm(x)


def decode(
    fused_v: TokenSequence,
    v_f: TokenSequence,
    decoder: GoalDecoder,
    text: Optional[TextEmbedding] = None,
) -> FusedFeatures:
    """
    Run the goal-branch decoder.

    Returns:
        FusedFeatures with h (B, N, decoder_dim) and pre_decoder = fused_v.
    """
    if fused_v.token_count != v_f.token_count:
        raise ShapeMismatchError(
            f"branch token counts differ: input {fused_v.token_count}, goal {v_f.token_count}"
        )
    if fused_v.dim != decoder.image_dim or v_f.dim != decoder.image_dim:
        raise ShapeMismatchError(f"decoder expects width {decoder.image_dim}")
    h = decoder(fused_v.tokens, v_f.tokens, text)
    return FusedFeatures(h=h, pre_decoder=fused_v.tokens)
