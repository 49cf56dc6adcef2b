"""
Scene Generation Skill - procedural tabletop episodes.

Deterministic skill (no learning): builds a catalog of parametric 2D objects,
partitions the workspace with a KD-tree, places objects one per leaf, scripts
packing tasks into a coloured zone and rasterizes top-down start/goal images.

World units map to pixels by a fixed scale (workspace fills the image). x is
the column axis, y the row axis. Every random choice is drawn from a numpy
Generator seeded by the episode seed, so generation is a pure function of
(task, catalog, split, seed).
"""

import json
import logging
import re
import zlib
from collections import deque
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from visact.models.errors import SceneGenerationError
from visact.models.schemas import (
    ROTATION_STEP_DEG,
    Episode,
    EpisodeMeta,
    ObjectSpec,
    Placement,
    Region,
    SceneConfig,
    SceneSpec,
    ScriptStep,
    SE2Action,
    SE2Pose,
    SplitAssignment,
    ZoneSpec,
)

logger = logging.getLogger(__name__)

SHAPES = ("disc", "square", "triangle", "ring")
COLOR_FAMILIES: Dict[str, Tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "green": (40, 160, 60),
    "blue": (40, 70, 200),
    "yellow": (220, 190, 40),
    "purple": (140, 60, 170),
}
ZONE_COLORS: Dict[str, Tuple[int, int, int]] = {
    "brown": (120, 80, 40),
    "gray": (128, 128, 128),
    "black": (30, 30, 30),
    "white": (250, 250, 250),
}
ZONE_KINDS = ("box", "tray", "zone")
TEXTURES = ("plain", "striped", "dotted")
BACKGROUND = (225, 210, 180)
SYMMETRY_PERIOD = {"disc": 0, "ring": 0, "square": 90, "triangle": 120}

INSTRUCTION_TEMPLATE = "put the {target} in the {zone}"
INSTRUCTION_PATTERN = re.compile(r"^put the (?P<target>.+?) in the (?P<zone>\w+ \w+)$")
MAX_ATTEMPTS = 32


# =============================================================================
# CATALOG
# =============================================================================

def _size_word(diameter: float) -> str:
    if diameter < 13:
        return "small"
    if diameter < 16:
        return "medium"
    return "large"


def _shade_word(shade: float) -> str:
    if shade < 0.95:
        return "dark"
    if shade > 1.05:
        return "light"
    return ""


def make_object(
    color_name: str,
    shape: str,
    index: int,
    diameter: float,
    shade: float = 1.0,
    texture: str = "plain",
) -> ObjectSpec:
    """One catalog instance; phrases always end with the class name."""
    class_name = f"{color_name} {shape}"
    base = np.asarray(COLOR_FAMILIES[color_name], dtype=np.float64)
    color = tuple(int(c) for c in np.clip(np.round(base * shade), 0, 255))
    phrases = [f"{_size_word(diameter)} {class_name}"]
    if texture != "plain":
        phrases.append(f"{texture} {class_name}")
    if _shade_word(shade):
        phrases.append(f"{_shade_word(shade)} {class_name}")
    return ObjectSpec(
        class_name=class_name,
        instance_id=f"{color_name}_{shape}_{index}",
        shape=shape,
        color=color,
        diameter=diameter,
        texture=texture,
        description=phrases[0],
        phrases=tuple(phrases),
    )


def build_catalog(instances_per_class: int = 6, seed: int = 0) -> List[ObjectSpec]:
    """
    4 shapes x 5 colour families; each instance varies size, shade and texture.

    Returns:
        Catalog sorted by (class_name, instance_id).
    """
    rng = np.random.default_rng(seed)
    catalog = []
    for color_name in sorted(COLOR_FAMILIES):
        for shape in SHAPES:
            for k in range(instances_per_class):
                diameter = float(np.round(rng.uniform(10.0, 20.0) * 2) / 2)
                shade = float(rng.choice([0.85, 1.0, 1.15]))
                texture = TEXTURES[k % len(TEXTURES)]
                catalog.append(make_object(color_name, shape, k, diameter, shade, texture))
    return sorted(catalog, key=lambda o: (o.class_name, o.instance_id))


def save_catalog(catalog: Sequence[ObjectSpec], path: Union[str, Path]) -> None:
    """One JSON object per line."""
    lines = [json.dumps(o.model_dump(mode="json"), sort_keys=True) for o in catalog]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_catalog(path: Union[str, Path]) -> List[ObjectSpec]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(ObjectSpec.model_validate_json(line))
    return out


def class_names(catalog: Sequence[ObjectSpec]) -> List[str]:
    return sorted({o.class_name for o in catalog})


def instruction_corpus(catalog: Sequence[ObjectSpec]) -> List[str]:
    """Every phrase an instruction can contain (vocabulary source)."""
    texts = [INSTRUCTION_TEMPLATE.format(target="", zone="")]
    for o in catalog:
        texts.extend([o.class_name, o.class_name + "s", o.description, *o.phrases])
    texts.extend(f"{c} {k}" for c in ZONE_COLORS for k in ZONE_KINDS)
    return texts


# =============================================================================
# SPLITS
# =============================================================================

def make_splits(
    catalog: Sequence[ObjectSpec],
    counts: Tuple[int, int, int] = (16, 4, 4),
    seed: int = 0,
    heldout_per_class: int = 2,
) -> SplitAssignment:
    """
    Class-level split: (train classes, train classes with held-out instances,
    unseen classes).

    Raises:
        SceneGenerationError: if the counts do not fit the catalog.
    """
    n_train, n_intra, n_inter = counts
    names = class_names(catalog)
    if min(counts) < 0 or n_train + n_inter > len(names) or n_intra > n_train:
        raise SceneGenerationError(
            f"split counts {counts} exceed the catalog's {len(names)} classes"
        )
    rng = np.random.default_rng(seed)
    order = [names[i] for i in rng.permutation(len(names))]
    train = sorted(order[:n_train])
    inter = sorted(order[n_train:n_train + n_inter])
    intra = sorted(rng.choice(train, size=n_intra, replace=False).tolist()) if n_intra else []

    heldout = []
    for cls in intra:
        ids = sorted(o.instance_id for o in catalog if o.class_name == cls)
        if len(ids) <= heldout_per_class:
            raise SceneGenerationError(f"class {cls!r} has too few instances to hold some out")
        heldout.extend(sorted(rng.choice(ids, size=heldout_per_class, replace=False).tolist()))

    return SplitAssignment(
        train_classes=train,
        intra_classes=intra,
        intra_heldout_instances=sorted(heldout),
        inter_heldout_classes=inter,
    )


def split_pools(
    catalog: Sequence[ObjectSpec],
    assignment: SplitAssignment,
    split: str,
    scope: str = "full",
) -> Tuple[List[ObjectSpec], List[ObjectSpec]]:
    """
    (target pool, distractor pool) for a split.

    Distractors always come from seen instances of training classes, so held-out
    classes and instances only ever appear as targets of their own split.
    """
    heldout = set(assignment.intra_heldout_instances)
    seen = [o for o in catalog if o.class_name in assignment.train_classes and o.instance_id not in heldout]
    if split == "train":
        targets = seen
    elif split == "intra":
        targets = [o for o in catalog if o.instance_id in heldout]
    elif split == "inter":
        targets = [o for o in catalog if o.class_name in assignment.inter_heldout_classes]
    else:
        raise SceneGenerationError(f"Unknown split: {split}")

    if scope == "narrow" and seen:
        shape = sorted({o.shape for o in seen})[0]
        seen = [o for o in seen if o.shape == shape]
        if split == "train":
            targets = seen
    if not targets:
        raise SceneGenerationError(f"split {split!r} has no target objects")
    return targets, seen


# =============================================================================
# KD-TREE PARTITION
# =============================================================================

def partition_regions(
    workspace: Region,
    n_regions: int,
    seed: int,
    min_side: float = 16.0,
) -> List[Region]:
    """
    Split the workspace into n_regions leaves that tile it exactly.

    Leaves are split breadth-first, alternating axes by depth. The split point
    is the integer-rounded median of 3 uniform candidates kept min_side away
    from both edges; a leaf too thin along its axis is tried on the other axis.

    Raises:
        SceneGenerationError: if n_regions leaves of min_side cannot exist.
    """
    if n_regions < 1:
        raise SceneGenerationError(f"n_regions must be >= 1, got {n_regions}")
    bound = int(workspace.width // min_side) * int(workspace.height // min_side)
    if n_regions > bound:
        raise SceneGenerationError(
            f"{n_regions} regions exceed the {bound} leaves of side {min_side} that fit the workspace"
        )

    rng = np.random.default_rng(seed)
    queue = deque([workspace])
    final: List[Region] = []
    while len(queue) + len(final) < n_regions:
        if not queue:
            raise SceneGenerationError(f"could not split the workspace into {n_regions} regions")
        leaf = queue.popleft()
        children = _split_leaf(leaf, rng, min_side)
        if children is None:
            final.append(leaf)
        else:
            queue.extend(children)
    return final + list(queue)


def _split_leaf(leaf: Region, rng: np.random.Generator, min_side: float) -> Optional[Tuple[Region, Region]]:
    for axis in (leaf.depth % 2, 1 - leaf.depth % 2):
        lo, hi = (leaf.x0, leaf.x1) if axis == 0 else (leaf.y0, leaf.y1)
        if hi - lo < 2 * min_side:
            continue
        candidates = rng.uniform(lo + min_side, hi - min_side, size=3)
        cut = float(np.clip(np.round(np.median(candidates)), lo + min_side, hi - min_side))
        d = leaf.depth + 1
        if axis == 0:
            return (
                Region(x0=leaf.x0, y0=leaf.y0, x1=cut, y1=leaf.y1, depth=d),
                Region(x0=cut, y0=leaf.y0, x1=leaf.x1, y1=leaf.y1, depth=d),
            )
        return (
            Region(x0=leaf.x0, y0=leaf.y0, x1=leaf.x1, y1=cut, depth=d),
            Region(x0=leaf.x0, y0=cut, x1=leaf.x1, y1=leaf.y1, depth=d),
        )
    return None


# =============================================================================
# PLACEMENT
# =============================================================================

def footprint_radius(obj: ObjectSpec) -> float:
    return obj.diameter / 2.0


def _random_rotation(obj: ObjectSpec, rng: np.random.Generator) -> int:
    if SYMMETRY_PERIOD[obj.shape] == 0:
        return 0
    return int(rng.integers(0, 360 // ROTATION_STEP_DEG)) * ROTATION_STEP_DEG


def place_objects(
    regions: Sequence[Region],
    objects: Sequence[ObjectSpec],
    seed: int,
    margin: float = 1.0,
    uids: Optional[Sequence[str]] = None,
    workspace: Optional[Region] = None,
) -> SceneSpec:
    """
    Put each object in its own leaf, uniformly inside the margin-shrunk leaf.

    Footprints are circumscribed circles; a sample whose circle leaves the
    shrunk leaf is rejected and redrawn.

    Raises:
        SceneGenerationError: object too large for every free leaf, or more
            objects than leaves.
    """
    if len(objects) > len(regions):
        raise SceneGenerationError(f"{len(objects)} objects do not fit {len(regions)} regions")
    uids = list(uids) if uids is not None else [f"obj{i}" for i in range(len(objects))]
    rng = np.random.default_rng(seed)
    free = [regions[i] for i in rng.permutation(len(regions))]
    placements = []
    for obj, uid in zip(objects, uids):
        r = footprint_radius(obj)
        leaf = next((g for g in free if min(g.width, g.height) >= 2 * (r + margin)), None)
        if leaf is None:
            raise SceneGenerationError(f"object {obj.instance_id} (diameter {obj.diameter}) fits no free region")
        free.remove(leaf)
        x, y = _sample_in(leaf, r, margin, rng)
        placements.append(Placement(uid=uid, object=obj, x=x, y=y, rotation=_random_rotation(obj, rng)))

    if workspace is None:
        workspace = Region(
            x0=min(g.x0 for g in regions), y0=min(g.y0 for g in regions),
            x1=max(g.x1 for g in regions), y1=max(g.y1 for g in regions),
        )
    return SceneSpec(workspace=workspace, regions=list(regions), placements=placements, seed=seed)


def _sample_in(leaf: Region, r: float, margin: float, rng: np.random.Generator) -> Tuple[float, float]:
    inner = (leaf.x0 + margin, leaf.y0 + margin, leaf.x1 - margin, leaf.y1 - margin)
    for _ in range(100):
        x = float(rng.uniform(inner[0], inner[2]))
        y = float(rng.uniform(inner[1], inner[3]))
        if inner[0] <= x - r and x + r <= inner[2] and inner[1] <= y - r and y + r <= inner[3]:
            return x, y
    # rejection fallback: centre of the leaf always fits when the size check passed
    return (leaf.x0 + leaf.x1) / 2.0, (leaf.y0 + leaf.y1) / 2.0


def footprint_gap(a: Placement, b: Placement) -> float:
    """Distance between the two footprint circles; negative when they intersect."""
    return float(np.hypot(a.x - b.x, a.y - b.y)) - footprint_radius(a.object) - footprint_radius(b.object)


def footprints_overlap(a: Placement, b: Placement, margin: float = 0.0) -> bool:
    """True when the footprints are closer than margin."""
    return footprint_gap(a, b) < margin - 1e-9


def _zone_from_leaf(leaf: Region, cfg: SceneConfig) -> Region:
    cx, cy = (leaf.x0 + leaf.x1) / 2.0, (leaf.y0 + leaf.y1) / 2.0
    hw = min(leaf.width / 2.0 - cfg.zone_margin, cfg.max_zone_side / 2.0)
    hh = min(leaf.height / 2.0 - cfg.zone_margin, cfg.max_zone_side / 2.0)
    return Region(x0=cx - hw, y0=cy - hh, x1=cx + hw, y1=cy + hh)


# =============================================================================
# LANGUAGE
# =============================================================================

def make_instruction(
    scene: SceneSpec,
    target: Union[ObjectSpec, str],
    style: str = "name_only",
    plural: bool = False,
) -> str:
    """
    Fill "put the {target} in the {zone}".

    name_only uses the class name; description samples one appearance phrase,
    deterministically per (scene.seed, target instance).
    """
    if isinstance(target, str):
        placement = scene.placement(target)
        target = placement.object
    elif not any(p.object.instance_id == target.instance_id for p in scene.placements):
        raise SceneGenerationError(f"target {target.instance_id} is not in the scene")
    if not scene.zones:
        raise SceneGenerationError("scene has no zones")

    if style == "name_only":
        phrase = target.class_name + ("s" if plural else "")
    elif style == "description":
        phrases = target.phrases or (target.description,)
        rng = np.random.default_rng([scene.seed, zlib.crc32(target.instance_id.encode("utf-8"))])
        phrase = phrases[int(rng.integers(len(phrases)))]
    else:
        raise ValueError(f"Unknown instruction style: {style}")
    return INSTRUCTION_TEMPLATE.format(target=phrase, zone=scene.zones[scene.target_zone].phrase)


def parse_instruction(text: str) -> Tuple[str, str]:
    """Inverse of the template: (target phrase, zone phrase)."""
    match = INSTRUCTION_PATTERN.match(text.strip())
    if match is None:
        raise ValueError(f"instruction does not follow the template: {text!r}")
    return match.group("target"), match.group("zone")


def phrase_class(phrase: str) -> str:
    """Class name carried by a target phrase (its last two words, singular)."""
    color, shape = phrase.split()[-2:]
    if shape.endswith("s") and shape[:-1] in SHAPES:
        shape = shape[:-1]
    return f"{color} {shape}"


# =============================================================================
# TASK SCRIPTING
# =============================================================================

def place_theta(obj: ObjectSpec, rotation: int) -> int:
    """Place rotation that aligns the object with the zone frame."""
    period = SYMMETRY_PERIOD[obj.shape]
    return 0 if period == 0 else (-rotation) % period


def script_task(scene: SceneSpec, task: Optional[str] = None, margin: float = 1.0) -> List[ScriptStep]:
    """
    Ground-truth pick-and-place steps, one per target uid in instruction order.

    Place positions are sampled inside the target zone without overlapping
    earlier places.

    Raises:
        SceneGenerationError: if the zone cannot hold every target.
    """
    if task is not None and task != scene.task:
        raise SceneGenerationError(f"scene task {scene.task} does not match {task}")
    if not scene.target_uids:
        raise SceneGenerationError("scene has no targets")
    zone = scene.zones[scene.target_zone].bounds
    rng = np.random.default_rng([scene.seed, 7])

    steps: List[ScriptStep] = []
    placed: List[Tuple[float, float, float]] = []
    for uid in scene.target_uids:
        p = scene.placement(uid)
        r = footprint_radius(p.object)
        lo_x, hi_x = zone.x0 + r + margin, zone.x1 - r - margin
        lo_y, hi_y = zone.y0 + r + margin, zone.y1 - r - margin
        if lo_x > hi_x or lo_y > hi_y:
            raise SceneGenerationError(f"zone too small for {p.object.instance_id}")
        for _ in range(200):
            x = float(rng.uniform(lo_x, hi_x))
            y = float(rng.uniform(lo_y, hi_y))
            if all(np.hypot(x - qx, y - qy) >= r + qr + margin for qx, qy, qr in placed):
                break
        else:
            raise SceneGenerationError(f"zone too small for all {len(scene.target_uids)} targets")
        placed.append((x, y, r))
        steps.append(ScriptStep(
            uid=uid, pick_x=p.x, pick_y=p.y, place_x=x, place_y=y,
            place_theta=place_theta(p.object, p.rotation),
        ))
    return steps


def apply_steps(scene: SceneSpec, steps: Sequence[ScriptStep]) -> SceneSpec:
    """Scene after executing the given steps."""
    moved = {s.uid: s for s in steps}
    placements = []
    for p in scene.placements:
        s = moved.get(p.uid)
        if s is None:
            placements.append(p)
        else:
            rotation = (p.rotation + s.place_theta) % 360
            placements.append(p.model_copy(update={"x": s.place_x, "y": s.place_y, "rotation": rotation}))
    return scene.model_copy(update={"placements": placements})


# =============================================================================
# RENDERING
# =============================================================================

def _pixel_centers(image_size: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(image_size, dtype=np.float64) + 0.5) / scale
    wy, wx = np.meshgrid(centers, centers, indexing="ij")
    return wx, wy


def object_mask(placement: Placement, image_size: int, scale: float) -> np.ndarray:
    """Boolean mask of pixels whose centres lie inside the object's shape."""
    wx, wy = _pixel_centers(image_size, scale)
    dx, dy = wx - placement.x, wy - placement.y
    a = np.deg2rad(placement.rotation)
    lx = np.cos(a) * dx + np.sin(a) * dy
    ly = -np.sin(a) * dx + np.cos(a) * dy
    r = footprint_radius(placement.object)
    shape = placement.object.shape
    d2 = lx ** 2 + ly ** 2
    if shape == "disc":
        return d2 <= r ** 2
    if shape == "ring":
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    if shape == "square":
        half = r / np.sqrt(2.0)
        return (np.abs(lx) <= half) & (np.abs(ly) <= half)
    # triangle inscribed in the footprint circle; inradius r / 2
    inside = np.ones_like(lx, dtype=bool)
    for deg in (270.0, 30.0, 150.0):
        n = np.deg2rad(deg)
        inside &= lx * np.cos(n) + ly * np.sin(n) <= r / 2.0
    return inside


def region_mask(region: Region, image_size: int, scale: float) -> np.ndarray:
    wx, wy = _pixel_centers(image_size, scale)
    return (wx >= region.x0) & (wx <= region.x1) & (wy >= region.y0) & (wy <= region.y1)


def _texture_mask(texture: str, image_size: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    if texture == "striped":
        return rows % 2 == 0
    if texture == "dotted":
        return (rows + cols) % 3 == 0
    return np.zeros((image_size, image_size), dtype=bool)


def render_masks(scene: SceneSpec, image_size: int = 64) -> Dict[str, np.ndarray]:
    """Per-uid boolean masks (same rasterizer as render)."""
    scale = image_size / scene.workspace.width
    return {p.uid: object_mask(p, image_size, scale) for p in scene.placements}


def render(scene: SceneSpec, image_size: int = 64) -> np.ndarray:
    """
    Top-down rasterization, no anti-aliasing.

    Returns:
        (image_size, image_size, 3) uint8 image.
    """
    scale = image_size / scene.workspace.width
    image = np.empty((image_size, image_size, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    for zone in scene.zones:
        image[region_mask(zone.bounds, image_size, scale)] = zone.color
    masks = render_masks(scene, image_size)
    for p in scene.placements:
        mask = masks[p.uid]
        image[mask] = p.object.color
        dark = mask & _texture_mask(p.object.texture, image_size)
        image[dark] = np.round(np.asarray(p.object.color) * 0.7).astype(np.uint8)
    return image


def to_pixel(x: float, y: float, scale: float, image_size: int) -> Tuple[int, int]:
    """World (x, y) -> pixel (row, col), clipped into the image."""
    u = int(np.clip(np.floor(y * scale), 0, image_size - 1))
    v = int(np.clip(np.floor(x * scale), 0, image_size - 1))
    return u, v


def pick_pixel(placement: Placement, image_size: int, scale: float) -> Tuple[int, int]:
    """Mask pixel nearest the object centre."""
    mask = object_mask(placement, image_size, scale)
    if not mask.any():
        raise SceneGenerationError(f"{placement.uid} covers no pixel")
    rows, cols = np.nonzero(mask)
    d = (((rows + 0.5) / scale - placement.y) ** 2) + (((cols + 0.5) / scale - placement.x) ** 2)
    i = int(np.argmin(d))
    return int(rows[i]), int(cols[i])


def mask_box(mask: np.ndarray) -> List[float]:
    """Normalized (x, y, w, h) pixel box of a boolean mask."""
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    r0, r1, c0, c1 = int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max())
    return [c0 / w, r0 / h, (c1 - c0 + 1) / w, (r1 - r0 + 1) / h]


# =============================================================================
# EPISODES
# =============================================================================

def _compose_scene(
    task: str,
    targets: List[ObjectSpec],
    distractors: List[ObjectSpec],
    rng: np.random.Generator,
    seed: int,
    cfg: SceneConfig,
) -> SceneSpec:
    side = float(cfg.workspace_size)
    workspace = Region(x0=0.0, y0=0.0, x1=side, y1=side)
    regions = partition_regions(workspace, cfg.n_regions, int(rng.integers(2**31)), cfg.min_leaf_side)

    by_area = sorted(range(len(regions)), key=lambda i: (-regions[i].area, i))
    zone_leaves = [regions[i] for i in by_area[:2]]
    free = [regions[i] for i in sorted(by_area[2:])]

    colors = rng.choice(sorted(ZONE_COLORS), size=2, replace=False)
    zones = [
        ZoneSpec(
            color_name=str(c),
            kind=str(rng.choice(ZONE_KINDS)),
            color=ZONE_COLORS[str(c)],
            bounds=_zone_from_leaf(leaf, cfg),
        )
        for c, leaf in zip(colors, zone_leaves)
    ]

    objects = targets + distractors
    uids = [f"obj{i}" for i in range(len(objects))]
    order = rng.permutation(len(objects))
    scene = place_objects(
        free,
        [objects[i] for i in order],
        int(rng.integers(2**31)),
        margin=cfg.margin,
        uids=[uids[i] for i in order],
        workspace=workspace,
    )
    target_uids = uids[: len(targets)]
    target_zone = int(rng.integers(2))
    if task == "packing_grp":
        zc = zone_leaves[target_zone]
        cx, cy = (zc.x0 + zc.x1) / 2.0, (zc.y0 + zc.y1) / 2.0
        target_uids = sorted(
            target_uids,
            key=lambda u: (np.hypot(scene.placement(u).x - cx, scene.placement(u).y - cy), u),
        )
    return scene.model_copy(update={
        "zones": zones,
        "target_zone": target_zone,
        "target_uids": target_uids,
        "task": task,
        "seed": seed,
    })


def _draw_objects(
    task: str,
    target_pool: List[ObjectSpec],
    distractor_pool: List[ObjectSpec],
    rng: np.random.Generator,
    cfg: SceneConfig,
) -> Tuple[List[ObjectSpec], List[ObjectSpec]]:
    group = int(rng.choice(cfg.group_sizes))
    target_classes = sorted({o.class_name for o in target_pool})
    if task == "packing_grp":
        cls = target_classes[int(rng.integers(len(target_classes)))]
        members = [o for o in target_pool if o.class_name == cls]
        obj = members[int(rng.integers(len(members)))]
        targets = [obj] * group
    else:
        n = min(group, len(target_classes))
        chosen = rng.choice(target_classes, size=n, replace=False)
        targets = []
        for cls in chosen:
            members = [o for o in target_pool if o.class_name == cls]
            targets.append(members[int(rng.integers(len(members)))])

    taken = {o.class_name for o in targets}
    others = [o for o in distractor_pool if o.class_name not in taken]
    k = min(int(rng.choice(cfg.distractor_counts)), len({o.class_name for o in others}))
    distractors = []
    for _ in range(k):
        o = others[int(rng.integers(len(others)))]
        distractors.append(o)
        others = [x for x in others if x.class_name != o.class_name]
    return targets, distractors


def generate_sequence(
    task: str,
    catalog: Sequence[ObjectSpec],
    assignment: SplitAssignment,
    split: str,
    seed: int,
    cfg: Optional[SceneConfig] = None,
) -> List[Episode]:
    """
    All per-step episodes of one scripted scene.

    packing_seq: step i moves target i; its goal is the scene after step i.
    packing_grp: every step shares the group instruction and the final goal;
    the remaining instances are all valid picks.
    """
    cfg = cfg or SceneConfig()
    target_pool, distractor_pool = split_pools(catalog, assignment, split, cfg.catalog_scope)

    last_error: Optional[Exception] = None
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        try:
            targets, distractors = _draw_objects(task, target_pool, distractor_pool, rng, cfg)
            scene = _compose_scene(task, targets, distractors, rng, seed, cfg)
            steps = script_task(scene, task, cfg.margin)
            style = "description" if task == "packing_seq" and rng.random() < 0.5 else "name_only"
            return _episodes_from_script(scene, steps, split, style, cfg)
        except SceneGenerationError as e:
            last_error = e
    raise SceneGenerationError(f"no valid scene for seed {seed} after {MAX_ATTEMPTS} attempts: {last_error}")


def _episodes_from_script(
    scene: SceneSpec,
    steps: List[ScriptStep],
    split: str,
    style: str,
    cfg: SceneConfig,
) -> List[Episode]:
    size = cfg.image_size
    scale = cfg.world_to_pixel
    zone = scene.zones[scene.target_zone].bounds
    group = scene.task == "packing_grp"

    if group:
        instructions = [make_instruction(scene, steps[0].uid, "name_only", plural=True)] * len(steps)
    else:
        instructions = [make_instruction(scene, s.uid, style) for s in steps]
    sequence_instruction = "; ".join(f"step {i + 1}: {text}" for i, text in enumerate(instructions))
    final_image = render(apply_steps(scene, steps), size)

    episodes = []
    for i, step in enumerate(steps):
        before = apply_steps(scene, steps[:i])
        start = render(before, size)
        goal = final_image if group else render(apply_steps(scene, steps[: i + 1]), size)
        picked = before.placement(step.uid)
        remaining = [s.uid for s in steps[i:]] if group else [step.uid]

        pu, pv = pick_pixel(picked, size, scale)
        qu, qv = to_pixel(step.place_x, step.place_y, scale, size)
        action = SE2Action(
            pick=SE2Pose(u=pu, v=pv, theta=0),
            place=SE2Pose(u=qu, v=qv, theta=step.place_theta),
        )
        meta = EpisodeMeta(
            task=scene.task,
            split=split,
            seed=scene.seed,
            world_to_pixel=scale,
            object_ids=[p.object.instance_id for p in before.placements],
            class_names=[p.object.class_name for p in before.placements],
            target_class=picked.object.class_name,
            target_uids=remaining,
            target_placements=[before.placement(u) for u in remaining],
            zone=zone,
            step_index=i,
            n_steps=len(steps),
            sequence_instruction=sequence_instruction,
            referring_expression=f"the {picked.object.description}",
            target_box=mask_box(render_masks(before, size)[step.uid]),
        )
        episodes.append(Episode(
            episode_id=f"{scene.task}_{split}_{scene.seed:06d}_{i}",
            start_image=start.astype(np.float32) / 255.0,
            goal_image=goal.astype(np.float32) / 255.0,
            instruction=instructions[i],
            meta=meta,
            action=action,
        ))
    return episodes


def generate_episode(
    task: str,
    catalog: Sequence[ObjectSpec],
    split: str,
    seed: int,
    assignment: Optional[SplitAssignment] = None,
    cfg: Optional[SceneConfig] = None,
) -> Episode:
    """
    One (start, goal, instruction, action) episode; the step is chosen by the seed.

    Args:
        task: packing_seq or packing_grp.
        catalog: Object catalog.
        split: train, intra or inter.
        seed: Sole source of randomness.
        assignment: Class split; defaults to make_splits(catalog).
        cfg: Scene parameters.
    """
    assignment = assignment or make_splits(catalog)
    sequence = generate_sequence(task, catalog, assignment, split, seed, cfg)
    chosen = sequence[int(np.random.default_rng([seed, 11]).integers(len(sequence)))]
    return replace(chosen, episode_id=f"{task}_{split}_{seed:06d}")
