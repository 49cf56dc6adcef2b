import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import ValidationError

from visact.models.errors import CheckpointError, NonFiniteLossError, ShapeMismatchError
from visact.models.schemas import FinetuneConfig, MaskSpec, ModelConfig, PatchGrid, TrainConfig
from visact.nets.encoders import sample_mask
from visact.nets.heads import GoalPrediction
from visact.nets.model import BACKBONE_PREFIXES, build_model
from visact.skills.dataio import InMemoryDataset
from visact.training.checkpoint import (
    load_checkpoint,
    model_from_checkpoint,
    read_header,
    save_checkpoint,
    vocab_path,
)
from visact.training.gradcheck import (
    gradient_check,
    relative_error,
    run_affordance_gradcheck,
    run_pretext_gradcheck,
    tiny_pretext_instance,
)
from visact.training.trainer import (
    finetune_action,
    finetune_affordance,
    finetune_bbox,
    lr_lambda,
    pretext_loss,
    train_pretext,
)
from visact.utils.logging_setup import read_jsonl

SMALL = PatchGrid(image_height=4, image_width=4, patch_size=2)


def _quick(steps=3, **kw) -> TrainConfig:
    return TrainConfig(steps=steps, batch_size=2, learning_rate=1e-3, warmup_steps=0, **kw)


@pytest.fixture
def pretrained(dataset, model_config, vocabulary):
    return train_pretext(dataset, model_config, _quick(steps=2), vocabulary=vocabulary)


# =============================================================================
# LOSSES / SCHEDULE
# =============================================================================

def test_pretext_loss_scopes():
    target = torch.zeros(1, 4, 4, 3)
    target[0, :2, :2] = 1.0
    pred = GoalPrediction(per_patch=torch.zeros(1, 4, 12), image=torch.zeros(1, 4, 4, 3))
    mask = MaskSpec(masked_indices=(0,), ratio=0.25, seed=0, token_count=4)

    assert float(pretext_loss(pred, target, None, "all_patches", SMALL)) == pytest.approx(0.25)
    assert float(pretext_loss(pred, target, mask, "masked_only", SMALL)) == pytest.approx(1.0)


def test_pretext_loss_errors():
    pred = GoalPrediction(per_patch=torch.zeros(1, 4, 12), image=torch.zeros(1, 4, 4, 3))
    with pytest.raises(ShapeMismatchError):
        pretext_loss(pred, torch.zeros(1, 8, 8, 3), None, "all_patches", PatchGrid(image_height=8, image_width=8, patch_size=2))
    with pytest.raises(ValueError):
        pretext_loss(pred, torch.zeros(1, 4, 4, 3), None, "everything", SMALL)
    with pytest.raises(ValueError):
        pretext_loss(pred, torch.zeros(1, 4, 4, 3), sample_mask(SMALL, 0.0, 0), "masked_only", SMALL)


def test_lr_schedule_warms_up_then_decays():
    fn = lr_lambda(100, 10)
    assert fn(0) == pytest.approx(0.1)
    assert fn(9) == pytest.approx(1.0)
    assert fn(10) == pytest.approx(1.0)
    assert fn(100) == pytest.approx(0.0, abs=1e-12)


def test_zero_steps_is_an_error():
    with pytest.raises(ValidationError):
        TrainConfig(steps=0)
    with pytest.raises(ValidationError):
        FinetuneConfig(steps=0)


# =============================================================================
# PRETEXT TRAINING
# =============================================================================

def test_pretext_training_is_deterministic(dataset, model_config, vocabulary, tmp_path):
    a = train_pretext(dataset, model_config, _quick(), vocabulary=vocabulary, log_path=tmp_path / "a.jsonl")
    b = train_pretext(dataset, model_config, _quick(), vocabulary=vocabulary, log_path=tmp_path / "b.jsonl")

    assert a.extra == b.extra
    for name, array in a.weights.items():
        np.testing.assert_allclose(array, b.weights[name], rtol=0, atol=1e-6, err_msg=name)
    assert [r["loss"] for r in read_jsonl(tmp_path / "a.jsonl")] == [r["loss"] for r in read_jsonl(tmp_path / "b.jsonl")]


def test_pretext_log_records(dataset, model_config, vocabulary, tmp_path):
    out = tmp_path / "pretext.ckpt"
    train_pretext(dataset, model_config, _quick(), out_path=out, vocabulary=vocabulary)
    records = read_jsonl(f"{out}.log.jsonl")
    assert [r["step"] for r in records] == [0, 1, 2]
    assert set(records[0]) == {"step", "loss", "lr", "wall_time"}
    assert out.is_file() and vocab_path(out).is_file()


def test_pretext_loss_decreases_when_overfitting(episodes, model_config, vocabulary):
    small = InMemoryDataset(episodes[:2])
    cfg = TrainConfig(steps=60, batch_size=2, learning_rate=1e-2, warmup_steps=0, mask_ratio=0.5)
    ckpt = train_pretext(small, model_config, cfg, vocabulary=vocabulary)
    assert ckpt.extra["final_loss"] < 0.8 * ckpt.extra["initial_loss"]


def test_symmetric_masking_trains(dataset, model_config, vocabulary):
    ckpt = train_pretext(dataset, model_config, _quick(steps=2, mask_input=True), vocabulary=vocabulary)
    assert ckpt.train_config.mask_input
    assert np.isfinite(ckpt.extra["final_loss"])


def test_zero_learning_rate_leaves_weights_untouched(dataset, model_config, vocabulary):
    config = TrainConfig(steps=1, batch_size=2, learning_rate=0.0, weight_decay=0.05, warmup_steps=0)
    before = build_model(model_config, vocabulary, config.seed).state_dict()
    ckpt = train_pretext(dataset, model_config, config, vocabulary=vocabulary)
    for name, value in before.items():
        assert torch.equal(torch.from_numpy(ckpt.weights[name]), value), name


def test_empty_dataset_is_rejected(model_config, vocabulary):
    with pytest.raises(ValueError):
        train_pretext(InMemoryDataset([]), model_config, _quick(), vocabulary=vocabulary)


def test_diverging_loss_raises(dataset, model_config, vocabulary):
    cfg = TrainConfig(steps=6, batch_size=2, learning_rate=1e30, warmup_steps=0)
    with pytest.raises(NonFiniteLossError) as info:
        train_pretext(dataset, model_config, cfg, vocabulary=vocabulary)
    assert info.value.step >= 1
    assert info.value.last_finite_loss is not None


# =============================================================================
# FINE-TUNING
# =============================================================================

def test_frozen_backbone_is_bit_identical(dataset, pretrained):
    cfg = FinetuneConfig(steps=2, batch_size=2, learning_rate=1e-3, freeze_backbone=True)
    tuned = finetune_affordance(dataset, pretrained, cfg)

    assert tuned.kind == "finetune-affordance"
    for name, array in pretrained.weights.items():
        if name.startswith(BACKBONE_PREFIXES):
            assert np.array_equal(array, tuned.weights[name]), name
    assert not np.array_equal(
        pretrained.weights["affordance_head.conv4.weight"], tuned.weights["affordance_head.conv4.weight"]
    )


def test_finetune_rejects_mismatched_config(dataset, pretrained):
    other = ModelConfig()
    with pytest.raises(CheckpointError):
        finetune_affordance(dataset, pretrained, FinetuneConfig(steps=1), expected_config=other)


def test_scratch_init_differs_from_pretrained(dataset, pretrained):
    cfg = FinetuneConfig(steps=1, batch_size=2, init="scratch", seed=5, freeze_backbone=True)
    tuned = finetune_affordance(dataset, pretrained, cfg)
    assert tuned.extra["init"] == "scratch"
    assert not np.array_equal(pretrained.weights["patch_embed.proj.weight"], tuned.weights["patch_embed.proj.weight"])


def test_action_and_bbox_heads_train(dataset, pretrained):
    cfg = FinetuneConfig(steps=2, batch_size=2, learning_rate=1e-3)
    action = finetune_action(dataset, pretrained, cfg)
    bbox = finetune_bbox(dataset, pretrained, cfg)
    assert action.kind == "finetune-action" and bbox.kind == "finetune-bbox"
    assert np.isfinite(action.extra["final_loss"]) and np.isfinite(bbox.extra["final_loss"])


# =============================================================================
# CHECKPOINTS
# =============================================================================

def test_checkpoint_round_trip(pretrained, images, tmp_path):
    path = save_checkpoint(pretrained, tmp_path / "model.ckpt")
    loaded = load_checkpoint(path, expected_config=pretrained.model_config)

    assert loaded.config_hash == pretrained.config_hash
    assert loaded.vocabulary_id == pretrained.vocabulary_id
    assert loaded.train_config == pretrained.train_config
    assert loaded.rng_state is not None
    assert read_header(path)["kind"] == "pretext"

    a, b = model_from_checkpoint(pretrained).eval(), model_from_checkpoint(loaded).eval()
    with torch.no_grad():
        ga, _, _ = a.forward_inference(a.as_batch(images), ["put the red disc in the blue box"] * 2)
        gb, _, _ = b.forward_inference(b.as_batch(images), ["put the red disc in the blue box"] * 2)
    assert torch.equal(ga.per_patch, gb.per_patch)


def test_checkpoint_save_load_save_is_byte_identical(pretrained, tmp_path):
    first = save_checkpoint(pretrained, tmp_path / "a" / "model.ckpt")
    second = save_checkpoint(load_checkpoint(first), tmp_path / "b" / "model.ckpt")
    assert first.read_bytes() == second.read_bytes()
    assert vocab_path(first).read_bytes() == vocab_path(second).read_bytes()


def test_checkpoint_config_mismatch(pretrained, tmp_path):
    path = save_checkpoint(pretrained, tmp_path / "model.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_config=ModelConfig())


def test_corrupt_checkpoint_is_rejected(pretrained, tmp_path):
    path = save_checkpoint(pretrained, tmp_path / "model.ckpt")
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint_parts(pretrained, tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
    path = save_checkpoint(pretrained, tmp_path / "model.ckpt")
    vocab_path(path).unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


# =============================================================================
# GRADIENT CHECK
# =============================================================================

class _WrongBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return 2.0 * x

    @staticmethod
    def backward(ctx, grad):
        return 3.0 * grad


def test_gradient_check_on_linear_layer():
    torch.manual_seed(0)
    layer = nn.Linear(3, 2).double()
    x, y = torch.randn(4, 3, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64)
    error = gradient_check(layer, lambda m, inst: F.mse_loss(m(inst[0]), inst[1]), (x, y))
    assert error < 1e-6


def test_gradient_check_catches_wrong_gradient():
    module = nn.Module()
    module.w = nn.Parameter(torch.ones(3, dtype=torch.float64))
    error = gradient_check(module, lambda m, _: _WrongBackward.apply(m.w).sum(), None)
    assert error == pytest.approx(1.0 / 3.0)


class _SmallWrongBackward(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return 1e-7 * x

    @staticmethod
    def backward(ctx, grad):
        return 1.5e-7 * grad


def test_gradient_check_catches_wrong_small_gradient():
    module = nn.Module()
    module.w = nn.Parameter(torch.ones(2, dtype=torch.float64))
    error = gradient_check(module, lambda m, _: _SmallWrongBackward.apply(m.w).sum(), None)
    assert error == pytest.approx(0.05, rel=1e-3)


def test_gradient_check_accepts_small_correct_gradient():
    module = nn.Module()
    module.w = nn.Parameter(torch.linspace(-1.0, 1.0, 5, dtype=torch.float64))
    error = gradient_check(module, lambda m, _: 1e-6 * torch.sin(m.w).sum(), None)
    assert error < 1e-6


def test_relative_error_floor():
    assert relative_error(1.5e-6, 1e-6, 1e-6) == pytest.approx(1.0 / 3.0)
    assert relative_error(2e-9, 1e-9, 1e-6) == pytest.approx(1e-3)


def test_gradient_check_argument_errors():
    layer = nn.Linear(2, 1)
    with pytest.raises(ValueError):
        gradient_check(layer.double(), lambda m, _: m.weight.sum(), None, epsilon=0.0)
    with pytest.raises(ValueError):
        gradient_check(nn.Linear(2, 1), lambda m, _: m.weight.sum(), None)


def test_tiny_pretext_instance_is_float64():
    model, loss_fn, instance = tiny_pretext_instance(0)
    assert model.dtype == torch.float64
    assert loss_fn(model, instance).dtype == torch.float64


def test_affordance_head_gradients_match_finite_differences():
    assert run_affordance_gradcheck(seed=0) < 1e-4


def test_composite_representation_gradients_match_finite_differences():
    assert run_pretext_gradcheck(seed=0) < 1e-4
