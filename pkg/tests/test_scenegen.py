import numpy as np
import pytest
from pydantic import ValidationError

from visact.models.errors import SceneGenerationError
from visact.models.schemas import Placement, Region, SceneConfig, SceneSpec, SplitAssignment, instance_class
from visact.skills.scenegen import (
    BACKGROUND,
    build_catalog,
    class_names,
    footprint_gap,
    footprint_radius,
    footprints_overlap,
    generate_episode,
    generate_sequence,
    load_catalog,
    make_instruction,
    make_splits,
    mask_box,
    object_mask,
    parse_instruction,
    partition_regions,
    phrase_class,
    place_objects,
    render,
    render_masks,
    save_catalog,
    split_pools,
)
from visact.skills.validation_skill import validate_episode, validate_scene

WORKSPACE = Region(x0=0, y0=0, x1=128, y1=128)


def test_catalog_has_twenty_classes(catalog):
    names = class_names(catalog)
    assert len(names) == 20
    assert all(len(n.split()) == 2 for n in names)
    assert all(4.0 <= o.diameter <= 40.0 for o in catalog)


def test_catalog_file_round_trip(catalog, tmp_path):
    save_catalog(catalog, tmp_path / "catalog.jsonl")
    assert load_catalog(tmp_path / "catalog.jsonl") == list(catalog)


def test_splits_are_disjoint(catalog, assignment):
    train, inter = set(assignment.train_classes), set(assignment.inter_heldout_classes)
    assert len(train) == 16 and len(inter) == 4
    assert not train & inter
    assert set(assignment.intra_classes) <= train
    assert len(assignment.intra_heldout_instances) == 4 * 2


def test_distractors_never_use_heldout_objects(catalog, assignment):
    heldout = set(assignment.intra_heldout_instances)
    for split in ("train", "intra", "inter"):
        targets, distractors = split_pools(catalog, assignment, split)
        assert not {o.instance_id for o in distractors} & heldout
        assert all(o.class_name in assignment.train_classes for o in distractors)
    intra_targets, _ = split_pools(catalog, assignment, "intra")
    assert {o.instance_id for o in intra_targets} == heldout


def test_split_assignment_rejects_instances_outside_intra_classes(assignment):
    data = assignment.model_dump()
    outsider = next(c for c in assignment.train_classes if c not in assignment.intra_classes)
    data["intra_heldout_instances"] = data["intra_heldout_instances"] + [outsider.replace(" ", "_") + "_0"]
    with pytest.raises(ValidationError, match="outside the intra classes"):
        SplitAssignment.model_validate(data)
    assert all(instance_class(i) in assignment.intra_classes for i in assignment.intra_heldout_instances)


def test_split_counts_must_fit_catalog(catalog):
    with pytest.raises(SceneGenerationError):
        make_splits(catalog, counts=(18, 4, 4))


@pytest.mark.parametrize("n", [1, 5, 8, 12])
def test_partition_tiles_the_workspace(n):
    leaves = partition_regions(WORKSPACE, n, seed=n)
    assert len(leaves) == n
    assert sum(g.area for g in leaves) == pytest.approx(WORKSPACE.area)
    assert all(WORKSPACE.contains(g) for g in leaves)
    for i, a in enumerate(leaves):
        for b in leaves[i + 1:]:
            overlap_w = min(a.x1, b.x1) - max(a.x0, b.x0)
            overlap_h = min(a.y1, b.y1) - max(a.y0, b.y0)
            assert overlap_w <= 0 or overlap_h <= 0


def test_partition_is_deterministic():
    assert partition_regions(WORKSPACE, 8, seed=3) == partition_regions(WORKSPACE, 8, seed=3)


def test_partition_rejects_impossible_counts():
    with pytest.raises(SceneGenerationError):
        partition_regions(WORKSPACE, 65, seed=0, min_side=16)


def test_placement_keeps_footprints_apart(catalog):
    leaves = partition_regions(WORKSPACE, 4, seed=1)
    smallest = sorted(catalog, key=lambda o: o.diameter)[:3]
    scene = place_objects(leaves, smallest, seed=2, margin=1.0)
    assert len(scene.placements) == 3
    assert validate_scene(scene, margin=1.0)["is_valid"]


def test_footprints_overlap_respects_margin(catalog):
    obj = catalog[0]
    r = footprint_radius(obj)
    a = Placement(uid="a", object=obj, x=40.0, y=40.0)
    b = Placement(uid="b", object=obj, x=40.0 + 2 * r + 1.0, y=40.0)
    assert footprint_gap(a, b) == pytest.approx(1.0)
    assert not footprints_overlap(a, b, margin=1.0)
    assert footprints_overlap(a, b, margin=1.5)

    crowded = SceneSpec(workspace=WORKSPACE, placements=[a, b])
    report = validate_scene(crowded, margin=1.5)
    assert not report["is_valid"]
    assert any("closer than 1.5" in issue for issue in report["issues"])
    assert validate_scene(crowded, margin=1.0)["is_valid"]


def test_placement_rejects_oversized_objects(catalog):
    tiny = [Region(x0=0, y0=0, x1=8, y1=8)]
    with pytest.raises(SceneGenerationError):
        place_objects(tiny, catalog[:1], seed=0)


def test_instruction_template_round_trip(catalog):
    leaves = partition_regions(WORKSPACE, 4, seed=1)
    scene = place_objects(leaves, sorted(catalog, key=lambda o: o.diameter)[:2], seed=2)
    with pytest.raises(SceneGenerationError):
        make_instruction(scene, "obj0")

    episode = generate_episode("packing_seq", catalog, "train", 4, cfg=SceneConfig(image_size=32))
    target, zone = parse_instruction(episode.instruction)
    assert phrase_class(target) == episode.meta.target_class
    assert zone.split()[-1] in ("box", "tray", "zone")


def test_episode_generation_is_deterministic(catalog, assignment, scene_config):
    a = generate_episode("packing_seq", catalog, "train", 7, assignment, scene_config)
    b = generate_episode("packing_seq", catalog, "train", 7, assignment, scene_config)
    assert a.episode_id == b.episode_id == "packing_seq_train_000007"
    assert np.array_equal(a.start_image, b.start_image)
    assert np.array_equal(a.goal_image, b.goal_image)
    assert a.instruction == b.instruction
    assert a.action == b.action


def test_generated_episodes_are_valid(episodes, heldout_episodes):
    for ep in episodes + heldout_episodes:
        result = validate_episode(ep)
        assert result["is_valid"], (ep.episode_id, result["issues"])
        assert ep.start_image.shape == (32, 32, 3)
        assert ep.start_image.dtype == np.float32


def test_goal_differs_from_start(episodes):
    for ep in episodes:
        assert not np.array_equal(ep.start_image, ep.goal_image)


def test_sequence_steps_chain(catalog, assignment, scene_config):
    steps = generate_sequence("packing_seq", catalog, assignment, "train", 3, scene_config)
    assert len(steps) >= 2
    for prev, nxt in zip(steps, steps[1:]):
        assert np.array_equal(prev.goal_image, nxt.start_image)
    assert all(s.meta.n_steps == len(steps) for s in steps)


def test_group_steps_share_goal(catalog, assignment, scene_config):
    steps = generate_sequence("packing_grp", catalog, assignment, "train", 3, scene_config)
    assert len({s.instruction for s in steps}) == 1
    assert all(np.array_equal(steps[0].goal_image, s.goal_image) for s in steps)
    assert [len(s.meta.target_uids) for s in steps] == list(range(len(steps), 0, -1))


def test_heldout_split_targets(heldout_episodes, assignment):
    intra, inter = heldout_episodes
    assert intra.meta.split == "intra"
    assert set(intra.meta.object_ids) & set(assignment.intra_heldout_instances)
    assert inter.meta.target_class in assignment.inter_heldout_classes


def test_render_draws_background():
    image = render(SceneSpec(workspace=WORKSPACE), image_size=16)
    assert image.dtype == np.uint8
    assert (image == np.array(BACKGROUND, dtype=np.uint8)).all()


def test_narrow_scope_uses_one_shape(assignment):
    catalog = build_catalog(3, seed=0)
    targets, distractors = split_pools(catalog, assignment, "train", scope="narrow")
    assert len({o.shape for o in targets}) == 1
    assert len({o.shape for o in distractors}) == 1


def test_render_masks_match_the_rasterizer(catalog):
    leaves = partition_regions(WORKSPACE, 4, seed=1)
    scene = place_objects(leaves, sorted(catalog, key=lambda o: o.diameter)[:3], seed=2)
    masks = render_masks(scene, image_size=64)
    image = render(scene, image_size=64)
    assert set(masks) == {p.uid for p in scene.placements}
    for p in scene.placements:
        assert np.array_equal(masks[p.uid], object_mask(p, 64, 64 / WORKSPACE.width))
        assert masks[p.uid].any()
    covered = np.any(np.stack(list(masks.values())), axis=0)
    assert (image[~covered] == np.array(BACKGROUND, dtype=np.uint8)).all()


def test_target_box_covers_the_picked_object(episodes):
    for episode in episodes:
        meta = episode.meta
        size = episode.start_image.shape[0]
        expected = mask_box(object_mask(meta.target_placements[0], size, meta.world_to_pixel))
        assert meta.target_box == pytest.approx(expected)
