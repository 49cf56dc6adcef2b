"""
Encoders - turn images and instructions into token sequences.

Covers patchification, fixed 2D sin-cos positional codes, asymmetric mask
sampling/application, the weight-shared Siamese ViT encoder and the small
trainable text encoder with its whitespace+punctuation vocabulary.

Masked goal tokens are NOT dropped: they are replaced by a learned mask token
and encoded like any other token, so a fully masked goal (the inference case)
goes through exactly the same code path as training.
"""

import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from timm.layers import Mlp
from timm.models.vision_transformer import Attention, Block

from visact.models.errors import MaskError, ShapeMismatchError
from visact.models.schemas import EncoderConfig, MaskSpec, PatchGrid, TextConfig


TokenSource = Literal["input_image", "goal_image", "text"]
MaskLike = Union[MaskSpec, Sequence[MaskSpec], torch.Tensor, np.ndarray]


# =============================================================================
# TOKEN CONTAINERS
# =============================================================================

@dataclass
class TokenSequence:
    """Batched tokens (B x N x D) plus provenance."""
    tokens: torch.Tensor
    source: TokenSource
    pos: Optional[torch.Tensor] = None  # codes already added, broadcastable to tokens

    @property
    def positional(self) -> bool:
        return self.pos is not None

    @property
    def token_count(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class TextEmbedding:
    """Per-token and pooled text features."""
    token_embeddings: torch.Tensor  # (B, L, D_t)
    pooled: torch.Tensor  # (B, D_t)
    padding_mask: torch.Tensor  # (B, L), True at padding
    vocabulary_id: str


# =============================================================================
# PATCH GEOMETRY
# =============================================================================

def patchify(image: Union[torch.Tensor, np.ndarray], grid: PatchGrid) -> torch.Tensor:
    """
    Split an image (H x W x C) or batch (B x H x W x C) into per-patch pixel rows.

    Patches are in row-major patch order; each row is the patch's pixels in
    row-major order with channels interleaved, i.e. (P*P*C) values.

    Returns:
        (N, P*P*C) or (B, N, P*P*C) tensor.
    """
    x = torch.as_tensor(image)
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
    expected = (grid.image_height, grid.image_width, grid.channels)
    if x.dim() != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeMismatchError(f"image shape {tuple(torch.as_tensor(image).shape)} does not match grid {expected}")
    if x.is_floating_point() and not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")

    p = grid.patch_size
    b = x.shape[0]
    x = x.reshape(b, grid.grid_height, p, grid.grid_width, p, grid.channels)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, grid.token_count, grid.patch_dim)
    return x if batched else x[0]


def unpatchify(patches: Union[torch.Tensor, np.ndarray], grid: PatchGrid) -> torch.Tensor:
    """Exact inverse of patchify."""
    x = torch.as_tensor(patches)
    batched = x.dim() == 3
    if not batched:
        x = x.unsqueeze(0)
    if x.dim() != 3 or tuple(x.shape[1:]) != (grid.token_count, grid.patch_dim):
        raise ShapeMismatchError(
            f"patches shape {tuple(torch.as_tensor(patches).shape)} does not match "
            f"grid ({grid.token_count}, {grid.patch_dim})"
        )

    p = grid.patch_size
    b = x.shape[0]
    x = x.reshape(b, grid.grid_height, grid.grid_width, p, p, grid.channels)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, grid.image_height, grid.image_width, grid.channels)
    return x if batched else x[0]


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.einsum("m,d->md", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed_2d(dim: int, grid_height: int, grid_width: int) -> np.ndarray:
    """Fixed 2D sin-cos codes, (grid_height * grid_width, dim), row-major patch order."""
    if dim % 4 != 0:
        raise ValueError(f"dim {dim} must be divisible by 4")
    gy, gx = np.meshgrid(np.arange(grid_height), np.arange(grid_width), indexing="ij")
    emb_h = _sincos_1d(dim // 2, gy.reshape(-1))
    emb_w = _sincos_1d(dim // 2, gx.reshape(-1))
    return np.concatenate([emb_h, emb_w], axis=1)


# =============================================================================
# MASKING
# =============================================================================

def mask_count(token_count: int, ratio: float) -> int:
    """round-half-up(ratio * N)."""
    return int(math.floor(ratio * token_count + 0.5))


def sample_mask(grid: Union[PatchGrid, int], ratio: float, seed: int) -> MaskSpec:
    """
    Uniformly sample round(ratio * N) goal tokens to hide, without replacement.

    The draw depends only on (N, ratio, seed); no global random state is used.
    """
    if not 0.0 <= ratio <= 1.0:
        raise MaskError(f"mask ratio must be in [0, 1], got {ratio}")
    n = grid if isinstance(grid, int) else grid.token_count
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=mask_count(n, ratio), replace=False)
    return MaskSpec(
        masked_indices=tuple(int(i) for i in np.sort(chosen)),
        ratio=ratio,
        seed=seed,
        token_count=n,
    )


def full_mask(grid: Union[PatchGrid, int]) -> MaskSpec:
    """Every token hidden (inference on an unknown goal)."""
    n = grid if isinstance(grid, int) else grid.token_count
    return MaskSpec(masked_indices=tuple(range(n)), ratio=1.0, seed=0, token_count=n)


def mask_tensor(mask: MaskLike, batch: int, token_count: int, device=None) -> torch.Tensor:
    """Normalize any mask representation to a (B, N) bool tensor."""
    if isinstance(mask, MaskSpec):
        rows = np.broadcast_to(mask.as_bool(), (batch, mask.token_count))
        out = torch.from_numpy(np.ascontiguousarray(rows))
    elif isinstance(mask, (torch.Tensor, np.ndarray)):
        out = torch.as_tensor(mask, dtype=torch.bool)
        if out.dim() == 1:
            out = out.unsqueeze(0).expand(batch, -1)
    else:
        specs = list(mask)
        if len(specs) != batch:
            raise MaskError(f"got {len(specs)} masks for a batch of {batch}")
        out = torch.from_numpy(np.stack([m.as_bool() for m in specs]))
    if tuple(out.shape) != (batch, token_count):
        raise MaskError(f"mask shape {tuple(out.shape)} does not match ({batch}, {token_count})")
    return out.to(device)


def replace_rows(tokens: TokenSequence, mask: MaskLike, fill_token: torch.Tensor) -> TokenSequence:
    """Replace masked rows by fill_token (+ positional code). No source check."""
    x = tokens.tokens
    m = mask_tensor(mask, x.shape[0], x.shape[1], device=x.device)
    fill = fill_token.reshape(1, 1, -1).to(x.dtype).expand_as(x)
    if tokens.pos is not None:
        fill = fill + tokens.pos
    out = torch.where(m.unsqueeze(-1), fill, x)
    return TokenSequence(tokens=out, source=tokens.source, pos=tokens.pos)


def apply_mask(tokens: TokenSequence, mask: MaskLike, mask_token: torch.Tensor) -> TokenSequence:
    """
    Hide goal-image tokens.

    Rows at masked indices become mask_token plus that row's positional code;
    all other rows are returned bit-for-bit unchanged. The masked pixels receive
    exactly zero gradient.

    Raises:
        MaskError: if tokens are not goal-image tokens or the mask does not fit.
    """
    if tokens.source != "goal_image":
        raise MaskError(f"image masks apply to goal-image tokens only, got {tokens.source!r}")
    return replace_rows(tokens, mask, mask_token)


# =============================================================================
# VISION ENCODER
# =============================================================================

class PatchEmbed(nn.Module):
    """Linear projection of patchified pixels (equivalent to a stride-P conv)."""

    def __init__(self, patch_dim: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, embed_dim)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return self.proj(patches)


class CrossAttention(nn.Module):
    """Queries from x, keys/values from a context of possibly different width."""

    def __init__(self, dim: int, kv_dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, kdim=kv_dim, vdim=kv_dim, batch_first=True)

    @property
    def out_proj(self) -> nn.Linear:
        return self.attn.out_proj

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        key_padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        out, _ = self.attn(x, context, context, key_padding_mask=key_padding_mask, need_weights=False)
        return out


class BidirectionalBlock(nn.Module):
    """Self-attention, then cross-attention into the other Siamese branch, then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads=heads, qkv_bias=True)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_other = nn.LayerNorm(dim)
        self.cross_attn = CrossAttention(dim, dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_other(other))
        x = x + self.mlp(self.norm3(x))
        return x


class SiameseEncoder(nn.Module):
    """
    Weight-shared ViT over the input and (masked) goal token sequences.

    The first depth_self blocks run on each branch independently; the last
    depth_bidir blocks let each branch attend to the other. Every block is
    applied to both branches with the same weights and from the same prior
    state, so identical inputs give identical outputs.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([
            Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, qkv_bias=True)
            for _ in range(cfg.depth_self)
        ])
        self.bidir_blocks = nn.ModuleList([
            BidirectionalBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth_bidir)
        ])
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x_s: torch.Tensor, x_f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        for blk in self.blocks:
            x_s, x_f = blk(x_s), blk(x_f)
        for blk in self.bidir_blocks:
            x_s, x_f = blk(x_s, x_f), blk(x_f, x_s)
        return self.norm(x_s), self.norm(x_f)


def encode_siamese(
    input_tokens: TokenSequence,
    goal_tokens_masked: TokenSequence,
    encoder: SiameseEncoder,
) -> Tuple[TokenSequence, TokenSequence]:
    """
    Run both branches through the shared encoder.

    Returns:
        (v_s, v_f) with the same shapes as the inputs.
    """
    dim = encoder.cfg.embed_dim
    for seq in (input_tokens, goal_tokens_masked):
        if seq.dim != dim:
            raise ShapeMismatchError(f"{seq.source} tokens have width {seq.dim}, encoder expects {dim}")
        if not seq.positional:
            raise ValueError(f"{seq.source} tokens are missing positional codes")
    v_s, v_f = encoder(input_tokens.tokens, goal_tokens_masked.tokens)
    return (
        TokenSequence(tokens=v_s, source="input_image", pos=input_tokens.pos),
        TokenSequence(tokens=v_f, source="goal_image", pos=goal_tokens_masked.pos),
    )


# =============================================================================
# TEXT ENCODER
# =============================================================================

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase whitespace + punctuation split."""
    return TOKEN_PATTERN.findall(text.lower())


class Vocabulary:
    """Token list where line index = token id; <pad> = 0, <unk> = 1."""

    def __init__(self, tokens: Sequence[str]):
        words = [t for t in tokens if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.tokens: List[str] = [PAD_TOKEN, UNK_TOKEN] + words
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    @property
    def vocabulary_id(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def encode(self, text: str, max_len: int, truncate: bool = True) -> Tuple[List[int], int]:
        """
        Map a string to exactly max_len ids (padded) and its unpadded length.

        Raises:
            ValueError: empty instruction, or too long with truncation disabled.
        """
        words = tokenize(text)
        if not words:
            raise ValueError("instruction is empty")
        if len(words) > max_len:
            if not truncate:
                raise ValueError(f"instruction has {len(words)} tokens, max is {max_len}")
            words = words[:max_len]
        ids = [self._index.get(w, self.unk_id) for w in words]
        return ids + [self.pad_id] * (max_len - len(ids)), len(ids)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def build_vocabulary(texts: Iterable[str]) -> Vocabulary:
    """Sorted unique tokens of every given phrase."""
    words = sorted({w for text in texts for w in tokenize(text)})
    return Vocabulary(words)


class TextBlock(nn.Module):
    """Pre-norm self-attention that ignores padded keys, then MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(in_features=dim, hidden_features=int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_padding_mask=padding_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class TextEncoder(nn.Module):
    """Token embedding + learned positions + small transformer; padded tokens are never attended to."""

    def __init__(self, vocab_size: int, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(vocab_size, cfg.text_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, cfg.text_dim))
        self.blocks = nn.ModuleList([
            TextBlock(cfg.text_dim, cfg.heads) for _ in range(cfg.depth)
        ])
        self.norm = nn.LayerNorm(cfg.text_dim)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.normal_(self.token_embed.weight, std=0.02)

    def forward(self, ids: torch.Tensor, padding_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = self.token_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        # a fully padded row attends to itself rather than to nothing
        attend_mask = padding_mask & ~padding_mask.all(dim=1, keepdim=True)
        for blk in self.blocks:
            x = blk(x, attend_mask)
        x = self.norm(x)
        keep = (~padding_mask).unsqueeze(-1).to(x.dtype)
        pooled = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        return x, pooled


@dataclass
class TextEncoderState:
    """A text encoder together with the vocabulary it was trained on."""
    encoder: TextEncoder
    vocabulary: Vocabulary

    def tokenize_batch(self, instructions: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        cfg = self.encoder.cfg
        rows = [self.vocabulary.encode(text, cfg.max_len, cfg.truncate)[0] for text in instructions]
        ids = torch.tensor(rows, dtype=torch.long, device=self.encoder.pos_embed.device)
        return ids, ids == self.vocabulary.pad_id


def embed_texts(instructions: Sequence[str], state: TextEncoderState) -> TextEmbedding:
    """Batched embed_text."""
    ids, padding_mask = state.tokenize_batch(instructions)
    tokens, pooled = state.encoder(ids, padding_mask)
    return TextEmbedding(
        token_embeddings=tokens,
        pooled=pooled,
        padding_mask=padding_mask,
        vocabulary_id=state.vocabulary.vocabulary_id,
    )


def embed_text(instruction: str, state: TextEncoderState) -> TextEmbedding:
    """
    Encode one instruction.

    Returns:
        TextEmbedding with a batch axis of 1; L is the configured max length.
    """
    if not instruction or not instruction.strip():
        raise ValueError("instruction is empty")
    return embed_texts([instruction], state)
