"""
Metrics Skill - reconstruction quality, manipulation success and grounding IoU.

Deterministic scorers used by the benchmark harness, plus the annotation-copying
and uniform-random policies that calibrate them.
"""

import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from visact.models.errors import ShapeMismatchError
from visact.models.schemas import (
    ROTATION_BINS,
    ROTATION_STEP_DEG,
    BoundingBox,
    Episode,
    EvalRow,
    MaskSpec,
    PatchGrid,
    ReconstructionMetrics,
    SE2Action,
    SE2Pose,
    SuccessRecord,
)
from visact.nets.encoders import patchify
from visact.nets.heads import GoalPrediction, iou
from visact.skills.scenegen import object_mask, region_mask

GROUNDING_IOU_THRESHOLD = 0.25
ROTATION_TOLERANCE_DEG = 10
CENTROID_COLOR_TOLERANCE = 0.25

ImageLike = Union[np.ndarray, torch.Tensor]


def _as_array(image: ImageLike) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().double().numpy()
    arr = np.asarray(image, dtype=np.float64)
    return arr[0] if arr.ndim == 4 and arr.shape[0] == 1 else arr


# =============================================================================
# RECONSTRUCTION
# =============================================================================

def reconstruction_metrics(
    pred: Union[GoalPrediction, ImageLike],
    target: ImageLike,
    mask: Optional[MaskSpec] = None,
    grid: Optional[PatchGrid] = None,
) -> ReconstructionMetrics:
    """
    MSE over all pixels, MSE over masked patches and PSNR for [0, 1] images.

    PSNR of an exact reconstruction is reported as the string "inf".
    """
    image = _as_array(pred.image if isinstance(pred, GoalPrediction) else pred)
    target = _as_array(target)
    if image.shape != target.shape:
        raise ShapeMismatchError(f"prediction {image.shape} and target {target.shape} shapes differ")

    mse_all = float(np.mean((image - target) ** 2))
    mse_masked = None
    if mask is not None and mask.masked_indices:
        if grid is None:
            raise ValueError("masked MSE needs the patch grid")
        rows = list(mask.masked_indices)
        diff = patchify(image, grid).numpy()[rows] - patchify(target, grid).numpy()[rows]
        mse_masked = float(np.mean(diff ** 2))
    psnr: Union[float, str] = "inf" if mse_all == 0.0 else 10.0 * math.log10(1.0 / mse_all)
    return ReconstructionMetrics(mse_all=mse_all, mse_masked=mse_masked, psnr=psnr)


# =============================================================================
# MANIPULATION SUCCESS
# =============================================================================

def target_masks(episode: Episode) -> List[np.ndarray]:
    size = episode.start_image.shape[0]
    return [object_mask(p, size, episode.meta.world_to_pixel) for p in episode.meta.target_placements]


def zone_mask(episode: Episode) -> np.ndarray:
    return region_mask(episode.meta.zone, episode.start_image.shape[0], episode.meta.world_to_pixel)


def rotation_error(a: int, b: int) -> int:
    d = abs(a - b) % 360
    return min(d, 360 - d)


def manipulation_success(
    pred: SE2Action,
    episode: Episode,
    rotation_tolerance: int = ROTATION_TOLERANCE_DEG,
) -> SuccessRecord:
    """
    Score a predicted pick-and-place against an annotated episode.

    pick_ok: pick pixel on any remaining target object.
    place_ok: place pixel inside the instructed zone.
    rot_ok: place rotation within the tolerance of the annotation, modulo 360.
    """
    if episode.action is None or not episode.meta.target_placements:
        raise ValueError(f"episode {episode.episode_id} has no action annotation")
    h, w = episode.start_image.shape[:2]

    pick_ok = False
    if 0 <= pred.pick.u < h and 0 <= pred.pick.v < w:
        pick_ok = any(m[pred.pick.u, pred.pick.v] for m in target_masks(episode))
    place_ok = bool(0 <= pred.place.u < h and 0 <= pred.place.v < w and zone_mask(episode)[pred.place.u, pred.place.v])
    rot_ok = rotation_error(pred.place.theta, episode.action.place.theta) <= rotation_tolerance
    return SuccessRecord(
        episode_id=episode.episode_id,
        success=bool(pick_ok and place_ok and rot_ok),
        pick_ok=bool(pick_ok),
        place_ok=place_ok,
        rot_ok=bool(rot_ok),
    )


def oracle_policy(episode: Episode) -> SE2Action:
    """Copies the annotation."""
    if episode.action is None:
        raise ValueError(f"episode {episode.episode_id} has no action annotation")
    return episode.action


def random_policy(episode: Episode, rng: np.random.Generator) -> SE2Action:
    """Uniform pixel and rotation bin for both poses."""
    h, w = episode.start_image.shape[:2]
    return SE2Action(
        pick=SE2Pose(u=int(rng.integers(h)), v=int(rng.integers(w)), theta=0),
        place=SE2Pose(
            u=int(rng.integers(h)),
            v=int(rng.integers(w)),
            theta=int(rng.integers(ROTATION_BINS)) * ROTATION_STEP_DEG,
        ),
    )


def centroid_in_zone(goal_pred: ImageLike, episode: Episode, tolerance: float = CENTROID_COLOR_TOLERANCE) -> bool:
    """
    Does the predicted goal put the target colour inside the instructed zone?

    Pixels matching the target colour in the prediction but not in the start
    image are the moved object; their centroid must fall in the zone.
    """
    if not episode.meta.target_placements:
        return False
    image = _as_array(goal_pred)
    start = np.asarray(episode.start_image, dtype=np.float64)
    color = np.asarray(episode.meta.target_placements[0].object.color, dtype=np.float64) / 255.0
    in_goal = np.max(np.abs(image - color), axis=-1) <= tolerance
    in_start = np.max(np.abs(start - color), axis=-1) <= tolerance
    moved = in_goal & ~in_start
    if not moved.any():
        return False
    rows, cols = np.nonzero(moved)
    u, v = int(np.floor(rows.mean())), int(np.floor(cols.mean()))
    return bool(zone_mask(episode)[u, v])


# =============================================================================
# GROUNDING
# =============================================================================

def grounding_iou(pred: BoundingBox, gt: BoundingBox) -> float:
    return iou(pred, gt)


def grounding_hit(pred: BoundingBox, gt: BoundingBox, threshold: float = GROUNDING_IOU_THRESHOLD) -> bool:
    return grounding_iou(pred, gt) >= threshold


def episode_box(episode: Episode) -> BoundingBox:
    if episode.meta.target_box is None:
        raise ValueError(f"episode {episode.episode_id} has no target box")
    x, y, w, h = episode.meta.target_box
    return BoundingBox(x=x, y=y, w=w, h=h)


# =============================================================================
# ACTION TARGETS
# =============================================================================

def joint_target(action: SE2Action, image_size: int) -> np.ndarray:
    """
    9-D toy action vector derived from an SE(2) annotation.

    Seven joint-angle analogs (pick/place pixels scaled to [-1, 1], sin/cos of
    the place rotation, a fixed 0) followed by the grasp indicators (1, 0).
    """
    scale = max(image_size - 1, 1)
    coords = np.array([action.pick.u, action.pick.v, action.place.u, action.place.v], dtype=np.float64)
    theta = np.deg2rad(action.place.theta)
    return np.concatenate([2.0 * coords / scale - 1.0, [np.sin(theta), np.cos(theta), 0.0, 1.0, 0.0]])


# =============================================================================
# AGGREGATION
# =============================================================================

def aggregate_rows(
    records: Sequence[SuccessRecord],
    episodes: Sequence[Episode],
    centroid_hits: Optional[Dict[str, bool]] = None,
    mse: Optional[Dict[str, float]] = None,
) -> List[EvalRow]:
    """One EvalRow per (split, task), ordered by split then task."""
    groups: Dict[Tuple[str, str], List[SuccessRecord]] = defaultdict(list)
    by_id = {e.episode_id: e for e in episodes}
    for r in records:
        meta = by_id[r.episode_id].meta
        groups[(meta.split, meta.task)].append(r)

    rows = []
    for (split, task), recs in sorted(groups.items()):
        n = len(recs)
        ids = [r.episode_id for r in recs]
        row = EvalRow(
            split=split,
            task=task,
            episodes=n,
            success_rate=sum(r.success for r in recs) / n,
            pick_rate=sum(r.pick_ok for r in recs) / n,
            place_rate=sum(r.place_ok for r in recs) / n,
            rot_rate=sum(r.rot_ok for r in recs) / n,
        )
        if centroid_hits is not None:
            row.centroid_in_zone_rate = sum(centroid_hits[i] for i in ids) / n
        if mse is not None:
            row.mse_all = float(np.mean([mse[i] for i in ids]))
        rows.append(row)
    return rows
