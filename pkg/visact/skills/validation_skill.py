"""
Validation Skill - Scene and episode validation.

This is a deterministic skill (no learning) that checks generated scenes and
episodes for structural correctness before they are written, trained on or
scored.
"""

from typing import Union

import numpy as np

from visact.models.schemas import ROTATION_STEP_DEG, Episode, SceneSpec
from visact.skills.scenegen import footprint_gap, footprint_radius, footprints_overlap, object_mask, region_mask


def validate_scene(scene: Union[SceneSpec, dict], margin: float = 1.0) -> dict:
    """
    Geometric validation of a scene.

    Checks for:
    - Catalog diameter bounds (4 to 40 units)
    - Footprints inside the workspace
    - Pairwise footprint clearance of at least `margin`
    - Target uids present and target zone index valid

    Args:
        scene: A SceneSpec or a dict with the same structure.
        margin: Required clearance between footprints.

    Returns:
        Dictionary with:
            - is_valid: bool
            - issues: list of validation issues found
    """
    if isinstance(scene, dict):
        scene = SceneSpec.model_validate(scene)

    issues = []
    ws = scene.workspace
    for p in scene.placements:
        r = footprint_radius(p.object)
        if not 4.0 <= p.object.diameter <= 40.0:
            issues.append(f"{p.uid}: diameter {p.object.diameter} outside [4, 40]")
        if p.x - r < ws.x0 or p.x + r > ws.x1 or p.y - r < ws.y0 or p.y + r > ws.y1:
            issues.append(f"{p.uid}: footprint leaves the workspace")

    placements = scene.placements
    for i in range(len(placements)):
        for j in range(i + 1, len(placements)):
            a, b = placements[i], placements[j]
            if footprints_overlap(a, b, margin):
                issues.append(f"{a.uid} and {b.uid} are closer than {margin} (gap {footprint_gap(a, b):.3f})")

    uids = {p.uid for p in placements}
    for uid in scene.target_uids:
        if uid not in uids:
            issues.append(f"target {uid} is not placed")
    if scene.zones and not 0 <= scene.target_zone < len(scene.zones):
        issues.append(f"target_zone {scene.target_zone} out of range")

    return {
        "is_valid": len(issues) == 0,
        "issues": issues,
    }


def validate_episode(episode: Episode) -> dict:
    """
    Structural validation of one episode.

    Checks images (same HxWx3 shape, finite, in [0, 1]), instruction text and,
    when an action is present, that the pick lies on a target object and the
    place inside the instructed zone.

    Returns:
        Dictionary with is_valid and issues.
    """
    issues = []
    start, goal = np.asarray(episode.start_image), np.asarray(episode.goal_image)
    if start.shape != goal.shape:
        issues.append(f"start {start.shape} and goal {goal.shape} shapes differ")
    if start.ndim != 3 or start.shape[-1] != 3:
        issues.append(f"start image must be HxWx3, got {start.shape}")
    for name, image in (("start", start), ("goal", goal)):
        if not np.isfinite(image).all():
            issues.append(f"{name} image has non-finite values")
        elif image.size and (image.min() < 0.0 or image.max() > 1.0):
            issues.append(f"{name} image values outside [0, 1]")

    if not episode.instruction.strip():
        issues.append("instruction is empty")

    meta = episode.meta
    if meta.split not in ("train", "intra", "inter"):
        issues.append(f"unknown split {meta.split}")

    if episode.action is not None and start.ndim == 3:
        h, w = start.shape[:2]
        for name, pose in (("pick", episode.action.pick), ("place", episode.action.place)):
            if not (0 <= pose.u < h and 0 <= pose.v < w):
                issues.append(f"{name} ({pose.u}, {pose.v}) outside the {h}x{w} image")
            if pose.theta % ROTATION_STEP_DEG:
                issues.append(f"{name} theta {pose.theta} not a multiple of {ROTATION_STEP_DEG}")
        if not issues and meta.target_placements:
            on_target = any(
                object_mask(p, h, meta.world_to_pixel)[episode.action.pick.u, episode.action.pick.v]
                for p in meta.target_placements
            )
            if not on_target:
                issues.append("pick pixel is not on a target object")
            zone = region_mask(meta.zone, h, meta.world_to_pixel)
            if not zone[episode.action.place.u, episode.action.place.v]:
                issues.append("place pixel is outside the instructed zone")

    return {
        "is_valid": len(issues) == 0,
        "issues": issues,
    }
