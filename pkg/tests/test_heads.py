import numpy as np
import pytest
import torch
from pydantic import ValidationError

from visact.models.errors import ShapeMismatchError
from visact.models.schemas import BoundingBox, HeadConfig, JointAction
from visact.nets.heads import (
    MIN_BOX_SIDE,
    NORMALIZED_TOLERANCE,
    ActionHead,
    AffordanceStack,
    GoalHead,
    action_vector,
    bbox_regress,
    box_iou,
    extract_se2,
    iou,
    normalize,
    overlay_heatmap,
    predict_goal,
    to_boxes,
    to_joint_actions,
)

INSTRUCTION = "put the red disc in the blue box"


def _stack(h=4, w=5):
    return AffordanceStack(pick_logits=torch.zeros(1, h, w), place_logits=torch.zeros(1, 36, h, w))


def test_goal_image_is_clamped(model, images):
    with torch.no_grad():
        goal, feats, _ = model.forward_inference(model.as_batch(images), [INSTRUCTION] * 2)
    assert goal.image.shape == (2, 32, 32, 3)
    assert goal.per_patch.shape == (2, 16, 192)
    assert float(goal.image.min()) >= 0.0 and float(goal.image.max()) <= 1.0


def test_goal_head_width_must_match_grid(model, images):
    with torch.no_grad():
        _, feats, _ = model.forward_inference(model.as_batch(images), [INSTRUCTION] * 2)
    with pytest.raises(ShapeMismatchError):
        predict_goal(feats, GoalHead(16, 100), model.grid)


def test_affordance_stack_shapes_and_normalization(model, images):
    with torch.no_grad():
        stack, _ = model.forward_affordance(model.as_batch(images), [INSTRUCTION] * 2)
    assert stack.pick_logits.shape == (2, 32, 32)
    assert stack.place_logits.shape == (2, 36, 32, 32)
    assert not stack.normalized

    probs = normalize(stack)
    assert probs.normalized
    assert torch.allclose(probs.pick_logits.sum(dim=(1, 2)), torch.ones(2), atol=1e-5)
    assert torch.allclose(probs.place_logits.sum(dim=(1, 2, 3)), torch.ones(2), atol=1e-5)


def test_extract_se2_needs_normalized_stack():
    with pytest.raises(ValueError):
        extract_se2(_stack())


def test_extract_se2_picks_argmax():
    stack = _stack()
    stack.pick_logits[0, 2, 3] = 5.0
    stack.place_logits[0, 3, 1, 4] = 5.0
    action = extract_se2(normalize(stack))
    assert action.pick.as_list() == [2, 3, 0]
    assert action.place.as_list() == [1, 4, 30]


def test_extract_se2_breaks_ties_at_lowest_index():
    action = extract_se2(normalize(_stack()))
    assert action.pick.as_list() == [0, 0, 0]
    assert action.place.as_list() == [0, 0, 0]


def test_extract_se2_rejects_nan():
    stack = normalize(_stack())
    stack.pick_logits[0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        extract_se2(stack)


def test_extract_se2_rejects_sum_off_by_more_than_1e_5():
    probs = normalize(_stack())
    off = AffordanceStack(
        pick_logits=probs.pick_logits.double() * (1.0 + 2e-5), place_logits=probs.place_logits.double(), normalized=True
    )
    with pytest.raises(ValueError, match="pick map is not normalized"):
        extract_se2(off)


def test_normalize_full_size_float32_maps_within_tolerance():
    torch.manual_seed(0)
    stack = AffordanceStack(pick_logits=10 * torch.randn(1, 64, 64), place_logits=10 * torch.randn(1, 36, 64, 64))
    probs = normalize(stack)
    assert probs.pick_logits.dtype == torch.float32
    assert abs(probs.place_logits.double().sum().item() - 1.0) <= NORMALIZED_TOLERANCE
    extract_se2(probs)


def test_overlay_heatmap_returns_uint8(images):
    out = overlay_heatmap(images[0], np.linspace(0, 1, 32 * 32).reshape(32, 32))
    assert out.dtype == np.uint8 and out.shape == (32, 32, 3)
    flat = overlay_heatmap(images[0], np.zeros((32, 32)))
    assert flat.shape == (32, 32, 3)


def test_action_vector_has_nine_values(model, images):
    with torch.no_grad():
        values = model.forward_action(model.as_batch(images), [INSTRUCTION] * 2)
    assert values.shape == (2, 9)
    actions = to_joint_actions(values)
    assert len(actions) == 2 and len(actions[0].values) == 9


def test_action_head_checks_proprio_width():
    head = ActionHead(16, HeadConfig(action_hidden=8, proprio_dim=3))
    with pytest.raises(ShapeMismatchError):
        action_vector(torch.zeros(1, 16), head)
    assert action_vector(torch.zeros(1, 16), head, torch.zeros(1, 3)).shape == (1, 9)


def test_joint_action_needs_nine_finite_values():
    with pytest.raises(ValidationError):
        JointAction(values=[0.0] * 8)
    with pytest.raises(ValidationError):
        JointAction(values=[0.0] * 8 + [float("inf")])


def test_bbox_outputs_are_valid_boxes(model, images):
    with torch.no_grad():
        boxes = model.forward_bbox(model.as_batch(images), ["the red disc", "the blue square"])
    assert boxes.shape == (2, 4)
    assert float(boxes.min()) >= 0.0 and float(boxes.max()) <= 1.0
    assert bool(((boxes[:, 0] + boxes[:, 2]) <= 1.0 + 1e-6).all())
    assert all(isinstance(b, BoundingBox) for b in to_boxes(boxes))


def test_bbox_regress_stays_in_unit_square_for_extreme_features(model):
    rng = np.random.default_rng(0)
    pooled = torch.from_numpy(rng.uniform(-100.0, 100.0, size=(64, 16)).astype(np.float32))
    text = model.encode_text(["the red disc"] * 64)
    with torch.no_grad():
        boxes = bbox_regress(pooled, text, model.bbox_head)
    assert torch.isfinite(boxes).all()
    assert float(boxes.min()) >= 0.0 and float(boxes.max()) <= 1.0
    assert bool((boxes[:, 2:] >= MIN_BOX_SIDE - 1e-7).all())
    assert bool(((boxes[:, :2] + boxes[:, 2:]) <= 1.0 + 1e-6).all())


def test_iou_values():
    a = [0.0, 0.0, 0.5, 0.5]
    assert iou(a, a) == pytest.approx(1.0)
    assert iou(a, [0.5, 0.5, 0.5, 0.5]) == 0.0
    assert iou(a, [0.25, 0.0, 0.5, 0.5]) == pytest.approx(1.0 / 3.0)
    t = box_iou(torch.tensor([a]), torch.tensor([[0.25, 0.0, 0.5, 0.5]]))
    assert float(t[0]) == pytest.approx(1.0 / 3.0)


def test_bounding_box_must_fit_unit_square():
    with pytest.raises(ValidationError):
        BoundingBox(x=0.8, y=0.0, w=0.5, h=0.5)
