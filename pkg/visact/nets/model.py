"""
Composite visual-action model: Siamese encoder, text encoder, fusion, goal
decoder and all output heads behind one module.
"""

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from visact.models.schemas import MaskSpec, ModelConfig, PatchGrid
from visact.nets.encoders import (
    MaskLike,
    PatchEmbed,
    SiameseEncoder,
    TextEmbedding,
    TextEncoder,
    TextEncoderState,
    TokenSequence,
    Vocabulary,
    apply_mask,
    embed_texts,
    encode_siamese,
    full_mask,
    patchify,
    replace_rows,
    sincos_pos_embed_2d,
)
from visact.nets.fusion import FusedFeatures, GoalDecoder, TextFusion, decode, fuse_text
from visact.nets.heads import (
    ActionHead,
    AffordanceHead,
    AffordanceStack,
    BBoxHead,
    GoalHead,
    GoalPrediction,
    action_vector,
    affordance,
    bbox_regress,
    predict_goal,
)

logger = logging.getLogger(__name__)

ImageBatch = Union[torch.Tensor, np.ndarray, Sequence[np.ndarray]]

BACKBONE_PREFIXES = (
    "patch_embed", "mask_token", "encoder", "text_encoder", "fusion", "decoder",
)
HEAD_PREFIXES = {
    "affordance": ("goal_head", "affordance_head"),
    "action": ("action_head",),
    "bbox": ("bbox_head",),
}


def forward_phi(
    o_s: TokenSequence,
    o_f_masked: TokenSequence,
    e: TextEmbedding,
    model: "VisualActionModel",
) -> FusedFeatures:
    """
    The composite representation: decode(fuse_text(encode_siamese(...))).

    Args:
        o_s: Embedded input-image tokens with positional codes.
        o_f_masked: Embedded goal tokens after apply_mask.
        e: Instruction embedding.
        model: Provides the weights.
    """
    v_s, v_f = encode_siamese(o_s, o_f_masked, model.encoder)
    if model.config.fusion.mode == "fused":
        fused_v, _ = fuse_text(v_s, e, model.fusion)
        return decode(fused_v, v_f, model.decoder)
    return decode(v_s, v_f, model.decoder, text=e)


class VisualActionModel(nn.Module):
    def __init__(self, config: ModelConfig, vocabulary: Vocabulary):
        super().__init__()
        self.config = config
        self.vocabulary = vocabulary
        grid = config.grid
        enc = config.encoder

        self.patch_embed = PatchEmbed(grid.patch_dim, enc.embed_dim)
        pos = sincos_pos_embed_2d(enc.embed_dim, grid.grid_height, grid.grid_width)
        self.register_buffer("pos_embed", torch.from_numpy(pos).float().unsqueeze(0), persistent=True)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, enc.embed_dim))

        self.encoder = SiameseEncoder(enc)
        self.text_encoder = TextEncoder(len(vocabulary), config.text)
        self.fusion = TextFusion(enc.embed_dim, config.text.text_dim, config.fusion)
        self.decoder = GoalDecoder(enc.embed_dim, config.text.text_dim, config.fusion)

        self.goal_head = GoalHead(config.fusion.decoder_dim, grid.patch_dim)
        self.affordance_head = AffordanceHead(config.fusion.decoder_dim + 2 * grid.channels, config.heads)
        self.action_head = ActionHead(enc.embed_dim, config.heads)
        self.bbox_head = BBoxHead(enc.embed_dim, config.text.text_dim, config.heads)

        self.initialize_weights()

    def initialize_weights(self) -> None:
        w = self.patch_embed.proj.weight.data
        nn.init.xavier_uniform_(w.view([w.shape[0], -1]))
        torch.nn.init.normal_(self.mask_token, std=0.02)
        self.apply(self._init_weights)
        nn.init.normal_(self.text_encoder.token_embed.weight, std=0.02)

    def _init_weights(self, m):
        if isinstance(m, nn.Linear):
            torch.nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0)
        elif isinstance(m, nn.LayerNorm):
            nn.init.constant_(m.bias, 0)
            nn.init.constant_(m.weight, 1.0)

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    @property
    def grid(self) -> PatchGrid:
        return self.config.grid

    @property
    def dtype(self) -> torch.dtype:
        return self.mask_token.dtype

    @property
    def device(self) -> torch.device:
        return self.mask_token.device

    @property
    def text_state(self) -> TextEncoderState:
        return TextEncoderState(encoder=self.text_encoder, vocabulary=self.vocabulary)

    def as_batch(self, images: ImageBatch) -> torch.Tensor:
        """Stack H x W x C images in [0, 1] into a (B, H, W, C) tensor on the model."""
        if isinstance(images, (list, tuple)):
            images = np.stack([np.asarray(im) for im in images])
        x = torch.as_tensor(images)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return x.to(device=self.device, dtype=self.dtype)

    def embed_images(self, images: torch.Tensor, source: str) -> TokenSequence:
        patches = patchify(images, self.grid).to(self.dtype)
        pos = self.pos_embed.to(self.dtype)
        return TokenSequence(tokens=self.patch_embed(patches) + pos, source=source, pos=pos)

    def encode_text(self, instructions: Sequence[str]) -> TextEmbedding:
        return embed_texts(list(instructions), self.text_state)

    def backbone_state(self):
        """Copies of every backbone parameter, keyed by name."""
        return {n: p.detach().clone() for n, p in self.named_parameters() if n.startswith(BACKBONE_PREFIXES)}

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def forward_phi(
        self,
        o_s: torch.Tensor,
        o_f: Optional[torch.Tensor],
        goal_mask: MaskLike,
        text: TextEmbedding,
        input_mask: Optional[MaskLike] = None,
    ) -> FusedFeatures:
        """
        Embed, mask and run the composite representation.

        o_f may be None only with a full goal mask (inference).
        """
        tokens_s = self.embed_images(o_s, "input_image")
        if input_mask is not None:
            tokens_s = replace_rows(tokens_s, input_mask, self.mask_token)
        if o_f is None:
            o_f = torch.zeros_like(o_s)
        tokens_f = apply_mask(self.embed_images(o_f, "goal_image"), goal_mask, self.mask_token)
        return forward_phi(tokens_s, tokens_f, text, self)

    def forward_pretext(
        self,
        o_s: torch.Tensor,
        o_f: torch.Tensor,
        instructions: Sequence[str],
        goal_mask: MaskLike,
        input_mask: Optional[MaskLike] = None,
    ) -> Tuple[GoalPrediction, FusedFeatures]:
        text = self.encode_text(instructions)
        feats = self.forward_phi(o_s, o_f, goal_mask, text, input_mask)
        return predict_goal(feats, self.goal_head, self.grid), feats

    def forward_inference(
        self, o_s: torch.Tensor, instructions: Sequence[str]
    ) -> Tuple[GoalPrediction, FusedFeatures, TextEmbedding]:
        """Fully masked goal branch, as at test time."""
        text = self.encode_text(instructions)
        mask: MaskSpec = full_mask(self.grid)
        feats = self.forward_phi(o_s, None, mask, text)
        return predict_goal(feats, self.goal_head, self.grid), feats, text

    def forward_affordance(
        self, o_s: torch.Tensor, instructions: Sequence[str]
    ) -> Tuple[AffordanceStack, GoalPrediction]:
        goal, feats, _ = self.forward_inference(o_s, instructions)
        stack = affordance(feats, o_s, goal, self.affordance_head, self.grid)
        return stack, goal

    def forward_action(
        self,
        o_s: torch.Tensor,
        instructions: Sequence[str],
        proprio: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        _, feats, _ = self.forward_inference(o_s, instructions)
        return action_vector(feats.pooled(), self.action_head, proprio)

    def forward_bbox(self, o_s: torch.Tensor, expressions: Sequence[str]) -> torch.Tensor:
        _, feats, text = self.forward_inference(o_s, expressions)
        return bbox_regress(feats.pooled(), text, self.bbox_head)


def build_model(config: ModelConfig, vocabulary: Vocabulary, seed: int = 0) -> VisualActionModel:
    """Seeded construction so two builds with the same seed hold identical weights."""
    torch.manual_seed(seed)
    model = VisualActionModel(config, vocabulary)
    logger.debug(
        "built model: %d parameters, grid %dx%d",
        sum(p.numel() for p in model.parameters()),
        model.grid.grid_height,
        model.grid.grid_width,
    )
    return model
