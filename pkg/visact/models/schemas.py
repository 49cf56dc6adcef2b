"""
Pydantic schemas for configs and value types.

These schemas pin down every contract that crosses a module boundary: model and
training configs (serialized into checkpoints), image/token geometry, scene and
episode metadata (serialized into episode directories) and evaluation reports.
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


TaskName = Literal["packing_seq", "packing_grp"]
SplitName = Literal["train", "intra", "inter"]
ShapeName = Literal["disc", "square", "triangle", "ring"]

ROTATION_BINS = 36
ROTATION_STEP_DEG = 10
JOINT_ACTION_DIM = 9


# =============================================================================
# MODEL CONFIG SCHEMAS
# =============================================================================

class EncoderConfig(BaseModel):
    """Siamese vision encoder sizing."""
    embed_dim: int = Field(default=128, ge=1, description="Token width D")
    depth_self: int = Field(default=2, ge=1, description="Self-attention blocks per branch")
    depth_bidir: int = Field(default=2, ge=1, description="Bi-directional cross-branch blocks")
    heads: int = Field(default=4, ge=1, description="Attention heads")
    mlp_ratio: float = Field(default=4.0, gt=0, description="MLP hidden width / embed_dim")
    patch_size: int = Field(default=8, ge=1, description="Patch side P in pixels")

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4 != 0:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by 4 for 2D sin-cos codes")
        return self


class TextConfig(BaseModel):
    """Tiny trainable text encoder over the instruction vocabulary."""
    text_dim: int = Field(default=64, ge=1, description="Text token width D_t")
    depth: int = Field(default=1, ge=1, description="Transformer blocks")
    heads: int = Field(default=4, ge=1, description="Attention heads")
    max_len: int = Field(default=24, ge=1, description="Padded/truncated token length L")
    truncate: bool = Field(default=True, description="Truncate long instructions instead of failing")

    @model_validator(mode="after")
    def _check_heads(self) -> "TextConfig":
        if self.text_dim % self.heads != 0:
            raise ValueError(f"text_dim {self.text_dim} not divisible by heads {self.heads}")
        return self


class FusionConfig(BaseModel):
    """Text fusion stages and goal-branch decoder sizing."""
    n_fusion_stages: int = Field(default=2, ge=1, description="Image<->text cross-attention stages")
    decoder_depth: int = Field(default=2, ge=1, description="Goal-branch decoder blocks")
    decoder_dim: int = Field(default=128, ge=1, description="Decoder width")
    heads: int = Field(default=4, ge=1, description="Attention heads (fusion and decoder)")
    mode: Literal["fused", "decoder_text"] = Field(
        default="fused",
        description="'fused' runs text fusion before decoding; 'decoder_text' feeds text to the decoder only",
    )

    @model_validator(mode="after")
    def _check_heads(self) -> "FusionConfig":
        if self.decoder_dim % self.heads != 0:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by heads {self.heads}")
        return self


class HeadConfig(BaseModel):
    """Downstream head sizing."""
    affordance_channels: int = Field(default=64, ge=1, description="Hidden conv width")
    rotations: int = Field(default=ROTATION_BINS, description="Place rotation bins")
    action_hidden: int = Field(default=256, ge=1, description="Action MLP hidden width")
    proprio_dim: int = Field(default=0, ge=0, description="Optional proprioceptive input width")
    bbox_hidden: int = Field(default=256, ge=1, description="Box MLP hidden width")

    @field_validator("rotations")
    @classmethod
    def _check_rotations(cls, value: int) -> int:
        if value != ROTATION_BINS:
            raise ValueError(f"rotations must be {ROTATION_BINS}")
        return value


class ModelConfig(BaseModel):
    """Complete architecture description, stored in every checkpoint."""
    image_size: int = Field(default=64, ge=1, description="Square image side H = W")
    channels: int = Field(default=3, description="Image channels")
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    text: TextConfig = Field(default_factory=TextConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    heads: HeadConfig = Field(default_factory=HeadConfig)

    @model_validator(mode="after")
    def _check_grid(self) -> "ModelConfig":
        if self.image_size % self.encoder.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.encoder.patch_size}"
            )
        if self.fusion.mode == "fused" and self.text.text_dim % self.fusion.heads != 0:
            raise ValueError(f"text_dim {self.text.text_dim} not divisible by fusion heads {self.fusion.heads}")
        if self.encoder.embed_dim % self.fusion.heads != 0:
            raise ValueError(f"embed_dim {self.encoder.embed_dim} not divisible by fusion heads {self.fusion.heads}")
        return self

    @property
    def grid(self) -> "PatchGrid":
        return PatchGrid(
            image_height=self.image_size,
            image_width=self.image_size,
            patch_size=self.encoder.patch_size,
            channels=self.channels,
        )

    @classmethod
    def preset(cls, name: str) -> "ModelConfig":
        """
        Named architecture presets.

        desk:  64x64 images, patch 8, D=128, 2+2 encoder blocks, decoder 2x128.
        base:  224x224 images, ViT-Base/16, 6+6 encoder blocks, decoder 8x512.
        """
        if name == "desk":
            return cls()
        if name == "base":
            return cls(
                image_size=224,
                encoder=EncoderConfig(embed_dim=768, depth_self=6, depth_bidir=6, heads=12, patch_size=16),
                text=TextConfig(text_dim=512, depth=4, heads=8, max_len=32),
                fusion=FusionConfig(n_fusion_stages=2, decoder_depth=8, decoder_dim=512, heads=8),
            )
        raise ValueError(f"Unknown model preset: {name}. Use 'desk' or 'base'.")


# =============================================================================
# TRAINING CONFIG SCHEMAS
# =============================================================================

class TrainConfig(BaseModel):
    """Pretext (masked goal-image prediction) training config."""
    mask_ratio: float = Field(default=0.95, ge=0.0, le=1.0, description="Goal-image mask ratio")
    learning_rate: float = Field(default=1e-4, ge=0.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    batch_size: int = Field(default=32, ge=1)
    steps: int = Field(default=3000, description="Optimizer steps")
    seed: int = Field(default=0)
    loss_scope: Literal["all_patches", "masked_only"] = Field(default="all_patches")
    warmup_steps: Optional[int] = Field(default=None, ge=0, description="Defaults to 5% of steps")
    grad_clip: float = Field(default=1.0, gt=0.0, description="Global gradient-norm clip")
    mask_input: bool = Field(default=False, description="Also mask the input image (symmetric-mask ablation)")
    precision: Literal["float32", "float64"] = Field(default="float32")

    @field_validator("steps")
    @classmethod
    def _check_steps(cls, value: int) -> int:
        if value <= 0:
            raise ValueError(f"steps must be > 0, got {value}")
        return value

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * self.steps))


class FinetuneConfig(BaseModel):
    """Downstream head fine-tuning config."""
    task: Literal["affordance", "action", "bbox"] = Field(default="affordance")
    learning_rate: float = Field(default=5e-5, ge=0.0)
    weight_decay: float = Field(default=0.05, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    steps: int = Field(default=1500)
    seed: int = Field(default=0)
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    freeze_backbone: bool = Field(default=False, description="Train the head only")
    train_text_encoder: bool = Field(default=True, description="Update the text encoder when unfrozen")
    init: Literal["pretrained", "scratch"] = Field(
        default="pretrained", description="'scratch' is the no-pretraining control"
    )
    precision: Literal["float32", "float64"] = Field(default="float32")

    @field_validator("steps")
    @classmethod
    def _check_steps(cls, value: int) -> int:
        if value <= 0:
            raise ValueError(f"steps must be > 0, got {value}")
        return value

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(round(0.05 * self.steps))


# =============================================================================
# GEOMETRY SCHEMAS
# =============================================================================

class PatchGrid(BaseModel):
    """Image <-> token geometry."""
    model_config = ConfigDict(frozen=True)

    image_height: int = Field(ge=1)
    image_width: int = Field(ge=1)
    patch_size: int = Field(ge=1)
    channels: int = Field(default=3, ge=1)

    @model_validator(mode="after")
    def _check_multiples(self) -> "PatchGrid":
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"{self.image_height}x{self.image_width} is not a multiple of patch size {self.patch_size}"
            )
        return self

    @property
    def grid_height(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_width(self) -> int:
        return self.image_width // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_height * self.grid_width

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


class MaskSpec(BaseModel):
    """Which goal-image tokens are hidden."""
    model_config = ConfigDict(frozen=True)

    masked_indices: Tuple[int, ...] = Field(description="Sorted unique token indices")
    ratio: float = Field(ge=0.0, le=1.0)
    seed: int
    token_count: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_indices(self) -> "MaskSpec":
        if len(set(self.masked_indices)) != len(self.masked_indices):
            raise ValueError("masked_indices must be unique")
        if any(i < 0 or i >= self.token_count for i in self.masked_indices):
            raise ValueError(f"masked index outside [0, {self.token_count})")
        expected = int(np.floor(self.ratio * self.token_count + 0.5))
        if len(self.masked_indices) != expected:
            raise ValueError(
                f"{len(self.masked_indices)} masked indices, ratio {self.ratio} of {self.token_count} tokens needs {expected}"
            )
        return self

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.token_count, dtype=bool)
        out[list(self.masked_indices)] = True
        return out


# =============================================================================
# ACTION SCHEMAS
# =============================================================================

class SE2Pose(BaseModel):
    """Planar pose in pixel coordinates."""
    u: int = Field(ge=0, description="Pixel row")
    v: int = Field(ge=0, description="Pixel column")
    theta: int = Field(default=0, description="Rotation in degrees, multiple of 10 in [0, 350]")

    @field_validator("theta")
    @classmethod
    def _check_theta(cls, value: int) -> int:
        if value % ROTATION_STEP_DEG != 0 or not 0 <= value < 360:
            raise ValueError(f"theta must be a multiple of {ROTATION_STEP_DEG} in [0, 350], got {value}")
        return value

    def as_list(self) -> List[int]:
        return [self.u, self.v, self.theta]


class SE2Action(BaseModel):
    """Pick and place poses."""
    pick: SE2Pose
    place: SE2Pose

    def to_json_dict(self) -> dict:
        return {"pick": self.pick.as_list(), "place": self.place.as_list()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "SE2Action":
        pick, place = data["pick"], data["place"]
        return cls(
            pick=SE2Pose(u=pick[0], v=pick[1], theta=pick[2]),
            place=SE2Pose(u=place[0], v=place[1], theta=place[2]),
        )


class JointAction(BaseModel):
    """Seven joint angles plus two grasp indicators."""
    values: List[float]

    @field_validator("values")
    @classmethod
    def _check_values(cls, value: List[float]) -> List[float]:
        if len(value) != JOINT_ACTION_DIM:
            raise ValueError(f"JointAction needs exactly {JOINT_ACTION_DIM} values, got {len(value)}")
        if not all(np.isfinite(value)):
            raise ValueError("JointAction values must be finite")
        return value


class BoundingBox(BaseModel):
    """Normalized (x, y, w, h) box; x is the column axis."""
    x: float = Field(ge=0.0, le=1.0)
    y: float = Field(ge=0.0, le=1.0)
    w: float = Field(gt=0.0, le=1.0)
    h: float = Field(gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_extent(self) -> "BoundingBox":
        tol = 1e-6
        if self.x + self.w > 1.0 + tol or self.y + self.h > 1.0 + tol:
            raise ValueError(f"box exceeds the unit square: {self}")
        return self

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]


# =============================================================================
# SCENE SCHEMAS
# =============================================================================

class ObjectSpec(BaseModel):
    """One catalog object instance."""
    model_config = ConfigDict(frozen=True)

    class_name: str = Field(description="Class = (colour family, shape), e.g. 'red disc'")
    instance_id: str
    shape: ShapeName
    color: Tuple[int, int, int]
    diameter: float = Field(ge=4.0, le=40.0, description="Circumscribed diameter in world units")
    texture: Literal["plain", "striped", "dotted"] = "plain"
    description: str = Field(min_length=1, description="Templated appearance phrase")
    phrases: Tuple[str, ...] = Field(default=(), description="Alternative appearance phrases")


def instance_class(instance_id: str) -> str:
    """Class name of an instance id: "red_disc_3" -> "red disc"."""
    return instance_id.rsplit("_", 1)[0].replace("_", " ")


class Region(BaseModel):
    """Axis-aligned rectangle in workspace units."""
    model_config = ConfigDict(frozen=True)

    x0: float
    y0: float
    x1: float
    y1: float
    depth: int = 0

    @model_validator(mode="after")
    def _check_area(self) -> "Region":
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"region has no area: {self}")
        return self

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, other: "Region") -> bool:
        return (
            self.x0 <= other.x0 and self.y0 <= other.y0
            and other.x1 <= self.x1 and other.y1 <= self.y1
        )


class ZoneSpec(BaseModel):
    """Target container drawn as a filled rectangle."""
    color_name: str
    kind: str = Field(description="'box', 'tray' or 'zone'")
    color: Tuple[int, int, int]
    bounds: Region

    @property
    def phrase(self) -> str:
        return f"{self.color_name} {self.kind}"


class Placement(BaseModel):
    """An object instance placed in the scene."""
    uid: str = Field(description="Unique within the scene (identical objects share instance_id)")
    object: ObjectSpec
    x: float
    y: float
    rotation: int = Field(default=0, description="Degrees, multiple of 10")


class SceneSpec(BaseModel):
    """Workspace, regions, zones and placed objects."""
    workspace: Region
    regions: List[Region] = Field(default_factory=list)
    placements: List[Placement] = Field(default_factory=list)
    zones: List[ZoneSpec] = Field(default_factory=list)
    target_zone: int = 0
    target_uids: List[str] = Field(default_factory=list, description="Objects to pack, instruction order")
    task: TaskName = "packing_seq"
    seed: int = 0

    def placement(self, uid: str) -> Placement:
        for p in self.placements:
            if p.uid == uid:
                return p
        raise KeyError(f"No placement with uid {uid!r}")


class ScriptStep(BaseModel):
    """One ground-truth pick-and-place step in world coordinates."""
    uid: str
    pick_x: float
    pick_y: float
    place_x: float
    place_y: float
    place_theta: int = Field(description="Place rotation in degrees")


class SplitAssignment(BaseModel):
    """Class-level train / intra-held-out / inter-held-out split."""
    train_classes: List[str]
    intra_classes: List[str] = Field(description="Train classes with held-out instances")
    intra_heldout_instances: List[str]
    inter_heldout_classes: List[str]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "SplitAssignment":
        train, inter = set(self.train_classes), set(self.inter_heldout_classes)
        if train & inter:
            raise ValueError(f"train and inter classes overlap: {sorted(train & inter)}")
        if not set(self.intra_classes) <= train:
            raise ValueError("intra classes must be training classes")
        intra = set(self.intra_classes)
        stray = sorted(i for i in self.intra_heldout_instances if instance_class(i) not in intra)
        if stray:
            raise ValueError(f"held-out instances outside the intra classes: {stray}")
        return self


class SceneConfig(BaseModel):
    """Procedural tabletop generation parameters."""
    workspace_size: int = Field(default=128, ge=16, description="Square workspace side in world units")
    image_size: int = Field(default=64, ge=8)
    n_regions: int = Field(default=8, ge=3)
    min_leaf_side: int = Field(default=16, ge=4)
    margin: float = Field(default=1.0, ge=1.0, description="Footprint clearance in world units")
    zone_margin: float = Field(default=2.0, ge=0.0)
    max_zone_side: float = Field(default=64.0, gt=0.0)
    group_sizes: Tuple[int, ...] = Field(default=(2, 3))
    distractor_counts: Tuple[int, ...] = Field(default=(1, 2))
    catalog_scope: Literal["full", "narrow"] = "full"

    @property
    def world_to_pixel(self) -> float:
        return self.image_size / self.workspace_size


# =============================================================================
# EPISODE SCHEMAS
# =============================================================================

class EpisodeMeta(BaseModel):
    """Everything needed to score an episode without regenerating it."""
    task: TaskName
    split: SplitName
    seed: int
    world_to_pixel: float
    object_ids: List[str] = Field(description="Instance ids of every object in the scene")
    class_names: List[str] = Field(description="Class names of every object in the scene")
    target_class: str
    target_uids: List[str] = Field(description="Placements whose pixels count as a correct pick")
    target_placements: List[Placement] = Field(description="Start-state placements of the pickable targets")
    zone: Region = Field(description="Instructed zone in world units")
    step_index: int = 0
    n_steps: int = 1
    sequence_instruction: str = ""
    referring_expression: str = ""
    target_box: Optional[List[float]] = Field(
        default=None, description="Normalized pixel box (x, y, w, h) of the picked object in the start image"
    )


@dataclass
class Episode:
    """Start image, goal image, instruction, optional action and metadata."""
    episode_id: str
    start_image: np.ndarray
    goal_image: np.ndarray
    instruction: str
    meta: EpisodeMeta
    action: Optional[SE2Action] = None


# =============================================================================
# EVALUATION SCHEMAS
# =============================================================================

class SuccessRecord(BaseModel):
    episode_id: str = ""
    success: bool
    pick_ok: bool
    place_ok: bool
    rot_ok: bool


class ReconstructionMetrics(BaseModel):
    mse_all: float
    mse_masked: Optional[float] = None
    psnr: Union[float, Literal["inf"]] = Field(description="'inf' marks an exact reconstruction")


class EvalRow(BaseModel):
    split: str
    task: str
    episodes: int
    success_rate: float = Field(ge=0.0, le=1.0)
    pick_rate: float = Field(ge=0.0, le=1.0)
    place_rate: float = Field(ge=0.0, le=1.0)
    rot_rate: float = Field(ge=0.0, le=1.0)
    centroid_in_zone_rate: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    mse_all: Optional[float] = None


class EvalReport(BaseModel):
    rows: List[EvalRow]
    records: List[SuccessRecord]
    checkpoint_hash: str = ""
    config_hash: str = ""
    seed: int = 0
    action_l2: Optional[float] = Field(default=None, description="Mean L2 error of the 9-D action head")
    grounding_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0, description="Fraction with IoU >= 0.25")
    grounding_mean_iou: Optional[float] = Field(default=None, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_counts(self) -> "EvalReport":
        if sum(r.episodes for r in self.rows) != len(self.records):
            raise ValueError("row episode counts do not sum to the record count")
        return self


class AblationRow(BaseModel):
    variant: str
    mask_ratio: float
    success: float
    final_pretext_loss: Optional[float] = None


class AblationReport(BaseModel):
    kind: Literal["mask_ratio", "components"]
    rows: List[AblationRow]
    reference_curve: List[Tuple[float, float]] = Field(default_factory=list)
    plot_path: Optional[str] = None


# =============================================================================
# RUN RESULT SCHEMA
# =============================================================================

class RunResult(BaseModel):
    """Final result of an orchestrated run."""
    status: Literal["SUCCESS", "FAILED"] = Field(description="SUCCESS or FAILED")
    stage: Optional[str] = Field(default=None, description="Stage where a failure occurred")
    outputs: dict = Field(default_factory=dict, description="Produced artifacts and summary numbers")
    issues: Optional[List[str]] = Field(default=None, description="Issues if failed")
