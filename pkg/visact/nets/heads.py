"""
Output heads: goal-image reconstruction, SE(2) affordance, 9-D action and
referring-expression bounding box.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import matplotlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from visact.models.errors import ShapeMismatchError
from visact.models.schemas import (
    JOINT_ACTION_DIM,
    ROTATION_BINS,
    ROTATION_STEP_DEG,
    BoundingBox,
    HeadConfig,
    JointAction,
    PatchGrid,
    SE2Action,
    SE2Pose,
)
from visact.nets.encoders import TextEmbedding, unpatchify
from visact.nets.fusion import FusedFeatures

MIN_BOX_SIDE = 1e-3
NORMALIZED_TOLERANCE = 1e-5


# =============================================================================
# GOAL IMAGE
# =============================================================================

@dataclass
class GoalPrediction:
    per_patch: torch.Tensor  # (B, N, P*P*C), raw head output
    image: torch.Tensor  # (B, H, W, C), clamped to [0, 1]


class GoalHead(nn.Module):
    """One fully connected layer per token."""

    def __init__(self, decoder_dim: int, patch_dim: int):
        super().__init__()
        self.proj = nn.Linear(decoder_dim, patch_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.proj(h)


def predict_goal(h: FusedFeatures, head: GoalHead, grid: PatchGrid) -> GoalPrediction:
    if h.token_count != grid.token_count:
        raise ShapeMismatchError(f"h has {h.token_count} rows, grid has {grid.token_count} tokens")
    if head.proj.out_features != grid.patch_dim:
        raise ShapeMismatchError(f"goal head emits {head.proj.out_features} values, grid needs {grid.patch_dim}")
    per_patch = head(h.h)
    image = unpatchify(per_patch.clamp(0.0, 1.0), grid)
    return GoalPrediction(per_patch=per_patch, image=image)


# =============================================================================
# AFFORDANCE
# =============================================================================

@dataclass
class AffordanceStack:
    pick_logits: torch.Tensor  # (B, H, W)
    place_logits: torch.Tensor  # (B, 36, H, W)
    normalized: bool = False

    @property
    def batch_size(self) -> int:
        return self.pick_logits.shape[0]


class AffordanceHead(nn.Module):
    """
    Four 3x3 conv layers; a 1x1 projection of the conv1 input is added to the
    conv4 input. Output channel 0 is pick, channels 1..36 are place rotations.
    """

    def __init__(self, in_channels: int, cfg: HeadConfig):
        super().__init__()
        width = cfg.affordance_channels
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, width, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, width, 1)
        self.conv4 = nn.Conv2d(width, 1 + cfg.rotations, 3, padding=1)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.conv1(x))
        y = self.act(self.conv2(y))
        y = self.act(self.conv3(y))
        return self.conv4(y + self.skip(x))


def upsample_tokens(h: torch.Tensor, grid: PatchGrid) -> torch.Tensor:
    """(B, N, D) tokens -> (B, D, H, W) by nearest-neighbour patch broadcast."""
    b, n, d = h.shape
    if n != grid.token_count:
        raise ShapeMismatchError(f"{n} tokens do not fill a {grid.grid_height}x{grid.grid_width} grid")
    x = h.transpose(1, 2).reshape(b, d, grid.grid_height, grid.grid_width)
    p = grid.patch_size
    return x.repeat_interleave(p, dim=2).repeat_interleave(p, dim=3)


def affordance(
    h: FusedFeatures,
    o_s: torch.Tensor,
    goal_pred: GoalPrediction,
    head: AffordanceHead,
    grid: PatchGrid,
) -> AffordanceStack:
    """
    Pick and place logits from [upsampled h, input image, predicted goal].

    Args:
        h: Decoder features.
        o_s: Input images (B, H, W, C) in [0, 1].
        goal_pred: Goal prediction; its clamped image is consumed.
        head: Conv head.
        grid: Patch geometry of both images.

    Returns:
        Unnormalized AffordanceStack.
    """
    feats = upsample_tokens(h.h, grid)
    obs = o_s.permute(0, 3, 1, 2).to(feats.dtype)
    goal = goal_pred.image.permute(0, 3, 1, 2).to(feats.dtype)
    if feats.shape[-2:] != obs.shape[-2:] or obs.shape[-2:] != goal.shape[-2:]:
        raise ShapeMismatchError(
            f"spatial sizes differ: h {tuple(feats.shape[-2:])}, input {tuple(obs.shape[-2:])}, "
            f"goal {tuple(goal.shape[-2:])}"
        )
    out = head(torch.cat([feats, obs, goal], dim=1))
    return AffordanceStack(pick_logits=out[:, 0], place_logits=out[:, 1:], normalized=False)


def normalize(stack: AffordanceStack) -> AffordanceStack:
    """Spatial softmax: pick over H*W, place over 36*H*W."""
    if stack.normalized:
        return stack
    b = stack.batch_size
    dtype = stack.pick_logits.dtype
    pick = F.softmax(stack.pick_logits.reshape(b, -1).double(), dim=-1).to(dtype).reshape_as(stack.pick_logits)
    place = F.softmax(stack.place_logits.reshape(b, -1).double(), dim=-1).to(dtype).reshape_as(stack.place_logits)
    return AffordanceStack(pick_logits=pick, place_logits=place, normalized=True)


def _check_normalized(values: np.ndarray, name: str) -> None:
    if np.isnan(values).any():
        raise ValueError(f"{name} map contains NaN")
    total = values.sum()
    if values.min() < 0 or abs(total - 1.0) > NORMALIZED_TOLERANCE:
        raise ValueError(f"{name} map is not normalized (sum {total:.6f})")


def extract_se2(stack: AffordanceStack, index: int = 0) -> SE2Action:
    """
    Argmax pick and place poses of one sample.

    Pick rotation is always 0; place rotation is 10 degrees times the bin.
    Ties go to the lowest flattened index.
    """
    if not stack.normalized:
        raise ValueError("extract_se2 needs a normalized stack; call normalize() first")
    pick = stack.pick_logits[index].detach().cpu().double().numpy()
    place = stack.place_logits[index].detach().cpu().double().numpy()
    _check_normalized(pick, "pick")
    _check_normalized(place, "place")

    pu, pv = np.unravel_index(int(np.argmax(pick)), pick.shape)
    rot, qu, qv = np.unravel_index(int(np.argmax(place)), place.shape)
    return SE2Action(
        pick=SE2Pose(u=int(pu), v=int(pv), theta=0),
        place=SE2Pose(u=int(qu), v=int(qv), theta=int(rot) * ROTATION_STEP_DEG),
    )


def extract_se2_batch(stack: AffordanceStack) -> List[SE2Action]:
    return [extract_se2(stack, i) for i in range(stack.batch_size)]


def overlay_heatmap(image: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a min-max scaled heat map (jet colormap) over an RGB image; returns uint8."""
    heat = np.asarray(heat, dtype=np.float64)
    span = heat.max() - heat.min()
    scaled = (heat - heat.min()) / span if span > 0 else np.zeros_like(heat)
    colored = matplotlib.colormaps["jet"](scaled)[..., :3]
    base = np.asarray(image, dtype=np.float64)
    if base.max() > 1.0:
        base = base / 255.0
    blended = (1.0 - alpha) * base + alpha * colored
    return np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)


# =============================================================================
# ACTION VECTOR
# =============================================================================

class ActionHead(nn.Module):
    """Shallow MLP policy: pooled pre-decoder features (+ proprio) -> 9 values."""

    def __init__(self, embed_dim: int, cfg: HeadConfig):
        super().__init__()
        self.in_dim = embed_dim + cfg.proprio_dim
        self.proprio_dim = cfg.proprio_dim
        self.fc1 = nn.Linear(self.in_dim, cfg.action_hidden)
        self.fc2 = nn.Linear(cfg.action_hidden, JOINT_ACTION_DIM)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def action_vector(
    pooled: torch.Tensor,
    head: ActionHead,
    proprio_state: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """(B, D) pooled features -> (B, 9)."""
    if proprio_state is not None:
        pooled = torch.cat([pooled, proprio_state.to(pooled.dtype)], dim=-1)
    elif head.proprio_dim:
        raise ShapeMismatchError(f"action head expects {head.proprio_dim} proprio values")
    if pooled.shape[-1] != head.in_dim:
        raise ShapeMismatchError(f"action head expects width {head.in_dim}, got {pooled.shape[-1]}")
    return head(pooled)


def to_joint_actions(values: torch.Tensor) -> List[JointAction]:
    return [JointAction(values=row) for row in values.detach().cpu().double().tolist()]


# =============================================================================
# BOUNDING BOX
# =============================================================================

class BBoxHead(nn.Module):
    def __init__(self, embed_dim: int, text_dim: int, cfg: HeadConfig):
        super().__init__()
        self.in_dim = embed_dim + text_dim
        self.fc1 = nn.Linear(self.in_dim, cfg.bbox_hidden)
        self.fc2 = nn.Linear(cfg.bbox_hidden, 4)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def squash_box(raw: torch.Tensor) -> torch.Tensor:
    """
    Map raw (B, 4) outputs to valid (x, y, w, h).

    w, h land in [1e-3, 1]; x, y are scaled into the space left by w, h.
    """
    s = torch.sigmoid(raw)
    wh = MIN_BOX_SIDE + (1.0 - MIN_BOX_SIDE) * s[:, 2:]
    xy = s[:, :2] * (1.0 - wh)
    return torch.cat([xy, wh], dim=-1).clamp(0.0, 1.0)


def bbox_regress(pooled: torch.Tensor, e: TextEmbedding, head: BBoxHead) -> torch.Tensor:
    """(B, D) image features + pooled text -> (B, 4) normalized boxes."""
    x = torch.cat([pooled, e.pooled.to(pooled.dtype)], dim=-1)
    if x.shape[-1] != head.in_dim:
        raise ShapeMismatchError(f"bbox head expects width {head.in_dim}, got {x.shape[-1]}")
    return squash_box(head(x))


def to_boxes(values: torch.Tensor) -> List[BoundingBox]:
    return [BoundingBox(x=x, y=y, w=w, h=h) for x, y, w, h in values.detach().cpu().double().tolist()]


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of (..., 4) xywh boxes."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., :2] + a[..., 2:], b[..., :2] + b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union.clamp(min=1e-12)


def iou(a: Union[BoundingBox, Sequence[float]], b: Union[BoundingBox, Sequence[float]]) -> float:
    """Intersection over union of two normalized xywh boxes."""
    ax, ay, aw, ah = a.as_list() if isinstance(a, BoundingBox) else a
    bx, by, bw, bh = b.as_list() if isinstance(b, BoundingBox) else b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0
