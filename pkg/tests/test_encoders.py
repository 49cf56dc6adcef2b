import numpy as np
import pytest
import torch
from pydantic import ValidationError
from timm.models.vision_transformer import Block

from visact.models.errors import MaskError, ShapeMismatchError
from visact.models.schemas import MaskSpec, PatchGrid
from visact.nets.encoders import (
    BidirectionalBlock,
    TextBlock,
    TokenSequence,
    Vocabulary,
    apply_mask,
    embed_text,
    encode_siamese,
    full_mask,
    mask_count,
    patchify,
    sample_mask,
    sincos_pos_embed_2d,
    unpatchify,
)
from visact.nets.heads import GoalPrediction
from visact.nets.model import build_model
from visact.training.gradcheck import tiny_model_config
from visact.training.trainer import pretext_loss

GRID = PatchGrid(image_height=32, image_width=32, patch_size=8)


def test_patchify_orders_patches_row_major(images):
    patches = patchify(images[0], GRID)
    assert patches.shape == (16, 8 * 8 * 3)
    top_left = torch.as_tensor(images[0, :8, :8]).reshape(-1)
    second = torch.as_tensor(images[0, :8, 8:16]).reshape(-1)
    assert torch.equal(patches[0], top_left)
    assert torch.equal(patches[1], second)
    assert torch.equal(unpatchify(patches, GRID), torch.as_tensor(images[0]))


def test_patchify_rejects_wrong_size():
    with pytest.raises(ShapeMismatchError):
        patchify(np.zeros((30, 32, 3), dtype=np.float32), GRID)


def test_patchify_rejects_non_finite():
    image = np.zeros((32, 32, 3), dtype=np.float32)
    image[3, 3, 0] = np.nan
    with pytest.raises(ValueError):
        patchify(image, GRID)


def test_sincos_codes_shape_and_divisibility():
    assert sincos_pos_embed_2d(16, 4, 4).shape == (16, 16)
    with pytest.raises(ValueError):
        sincos_pos_embed_2d(14, 4, 4)


@pytest.mark.parametrize("ratio,expected", [(0.0, 0), (0.5, 32), (0.95, 61), (1.0, 64)])
def test_mask_count_rounds_half_up(ratio, expected):
    assert mask_count(64, ratio) == expected
    assert len(sample_mask(64, ratio, seed=3).masked_indices) == expected


def test_sample_mask_is_deterministic_per_seed():
    a = sample_mask(GRID, 0.75, seed=7)
    b = sample_mask(GRID, 0.75, seed=7)
    c = sample_mask(GRID, 0.75, seed=8)
    assert a == b
    assert list(a.masked_indices) == sorted(set(a.masked_indices))
    assert a.masked_indices != c.masked_indices


def test_mask_spec_size_must_match_ratio():
    with pytest.raises(ValidationError, match="needs 2"):
        MaskSpec(masked_indices=(0, 1, 2), ratio=0.125, seed=0, token_count=16)
    assert len(MaskSpec(masked_indices=(3, 5), ratio=0.125, seed=0, token_count=16).masked_indices) == 2
    assert full_mask(GRID).ratio == 1.0


def test_sample_mask_rejects_bad_ratio():
    with pytest.raises(MaskError):
        sample_mask(GRID, 1.2, seed=0)


def test_apply_mask_replaces_only_masked_rows(model, images):
    tokens = model.embed_images(model.as_batch(images), "goal_image")
    mask = sample_mask(GRID, 0.5, seed=1)
    out = apply_mask(tokens, mask, model.mask_token)
    hidden = mask.as_bool()

    assert torch.equal(out.tokens[:, ~hidden], tokens.tokens[:, ~hidden])
    expected = model.mask_token.reshape(1, 1, -1) + tokens.pos
    assert torch.allclose(out.tokens[:, hidden], expected.expand_as(out.tokens)[:, hidden])


def test_apply_mask_with_zero_ratio_is_identity(model, images):
    tokens = model.embed_images(model.as_batch(images), "goal_image")
    out = apply_mask(tokens, sample_mask(GRID, 0.0, seed=0), model.mask_token)
    assert torch.equal(out.tokens, tokens.tokens)


def test_apply_mask_refuses_input_tokens(model, images):
    tokens = model.embed_images(model.as_batch(images), "input_image")
    with pytest.raises(MaskError):
        apply_mask(tokens, full_mask(GRID), model.mask_token)


def test_masked_goal_pixels_get_zero_gradient(model, images):
    o_s = model.as_batch(images)
    o_f = model.as_batch(images[::-1].copy()).requires_grad_(True)
    mask = sample_mask(GRID, 0.75, seed=2)
    pred, _ = model.forward_pretext(o_s, o_f, ["put the red disc in the blue box"] * 2, mask)
    loss = pretext_loss(pred, o_f.detach(), mask, "all_patches", GRID)
    (grad,) = torch.autograd.grad(loss, o_f)

    per_patch = patchify(grad, GRID)
    hidden = torch.from_numpy(mask.as_bool())
    assert torch.count_nonzero(per_patch[:, hidden]) == 0
    assert torch.count_nonzero(per_patch[:, ~hidden]) > 0


def test_siamese_branches_are_symmetric(model, images):
    x = model.embed_images(model.as_batch(images), "input_image")
    goal = TokenSequence(tokens=x.tokens.clone(), source="goal_image", pos=x.pos)
    v_s, v_f = encode_siamese(x, goal, model.encoder)
    assert v_s.tokens.shape == x.tokens.shape
    assert torch.equal(v_s.tokens, v_f.tokens)


def test_siamese_rejects_wrong_width(model):
    x = TokenSequence(tokens=torch.zeros(1, 16, 12), source="input_image", pos=torch.zeros(1, 16, 12))
    goal = TokenSequence(tokens=torch.zeros(1, 16, 12), source="goal_image", pos=torch.zeros(1, 16, 12))
    with pytest.raises(ShapeMismatchError):
        encode_siamese(x, goal, model.encoder)


def test_siamese_requires_positional_codes(model):
    x = TokenSequence(tokens=torch.zeros(1, 16, 16), source="input_image")
    goal = TokenSequence(tokens=torch.zeros(1, 16, 16), source="goal_image", pos=torch.zeros(1, 16, 16))
    with pytest.raises(ValueError):
        encode_siamese(x, goal, model.encoder)


def test_vocabulary_pads_and_maps_unknown_words():
    vocab = Vocabulary(["put", "the", "red", "disc"])
    ids, length = vocab.encode("Put the GREEN disc", max_len=6)
    assert length == 4
    assert ids == [2, 3, vocab.unk_id, 5, 0, 0]


def test_vocabulary_truncation():
    vocab = Vocabulary(["a"])
    ids, length = vocab.encode("a a a a", max_len=2)
    assert ids == [2, 2] and length == 2
    with pytest.raises(ValueError):
        vocab.encode("a a a a", max_len=2, truncate=False)


def test_vocabulary_file_round_trip(tmp_path):
    vocab = Vocabulary(["put", "disc"])
    vocab.save(tmp_path / "vocab.txt")
    loaded = Vocabulary.load(tmp_path / "vocab.txt")
    assert loaded.tokens == vocab.tokens
    assert loaded.vocabulary_id == vocab.vocabulary_id


def test_embed_text_shapes(model):
    e = embed_text("put the red disc in the blue box", model.text_state)
    assert e.token_embeddings.shape == (1, 12, 8)
    assert e.pooled.shape == (1, 8)
    assert e.vocabulary_id == model.vocabulary.vocabulary_id


def test_embed_text_rejects_empty(model):
    with pytest.raises(ValueError):
        embed_text("   ", model.text_state)


def test_pretext_loss_scores_raw_values():
    per_patch = torch.full((1, 16, 192), 2.0)
    pred = GoalPrediction(per_patch=per_patch, image=unpatchify(per_patch.clamp(0, 1), GRID))
    target = torch.ones(1, 32, 32, 3)
    assert float(pretext_loss(pred, target, None, "all_patches", GRID)) == pytest.approx(1.0)


# =============================================================================
# RESIDUAL IDENTITY
# =============================================================================

def _zero(*layers):
    with torch.no_grad():
        for layer in layers:
            layer.weight.zero_()
            layer.bias.zero_()


def test_vit_block_with_zero_output_projections_is_identity():
    torch.manual_seed(0)
    block = Block(16, 2, 2.0, qkv_bias=True)
    _zero(block.attn.proj, block.mlp.fc2)
    x = torch.randn(2, 4, 16)
    assert torch.equal(block(x), x)


def test_bidirectional_block_with_zero_output_projections_is_identity():
    torch.manual_seed(0)
    block = BidirectionalBlock(16, 2, 2.0)
    _zero(block.attn.proj, block.cross_attn.out_proj, block.mlp.fc2)
    x, other = torch.randn(2, 4, 16), torch.randn(2, 4, 16)
    assert torch.equal(block(x, other), x)


def test_text_block_with_zero_output_projections_is_identity():
    torch.manual_seed(0)
    block = TextBlock(8, 2)
    _zero(block.attn.out_proj, block.mlp.fc2)
    x = torch.randn(2, 5, 8)
    padding = torch.tensor([[False, False, False, True, True], [False] * 5])
    assert torch.equal(block(x, padding), x)


def test_encoder_without_attention_reduces_to_mlp_residuals(model, images):
    encoder = model.encoder
    for blk in encoder.blocks:
        _zero(blk.attn.proj)
    for blk in encoder.bidir_blocks:
        _zero(blk.attn.proj, blk.cross_attn.out_proj)
    x = model.embed_images(model.as_batch(images), "input_image")
    goal = model.embed_images(model.as_batch(images[::-1].copy()), "goal_image")
    with torch.no_grad():
        v_s, v_f = encode_siamese(x, goal, encoder)

        def by_hand(t):
            for blk in encoder.blocks:
                t = t + blk.mlp(blk.norm2(t))
            for blk in encoder.bidir_blocks:
                t = t + blk.mlp(blk.norm3(t))
            return encoder.norm(t)

        assert torch.allclose(v_s.tokens, by_hand(x.tokens), atol=1e-6)
        assert torch.allclose(v_f.tokens, by_hand(goal.tokens), atol=1e-6)


# =============================================================================
# NUMERICAL RANGE AND MASKS
# =============================================================================

def test_encoder_outputs_are_finite_for_large_inputs(model):
    rng = np.random.default_rng(0)
    images = rng.uniform(-10.0, 10.0, size=(2, 32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        x = model.embed_images(model.as_batch(images), "input_image")
        goal = apply_mask(model.embed_images(model.as_batch(images[::-1].copy()), "goal_image"),
                          sample_mask(GRID, 0.75, seed=0), model.mask_token)
        v_s, v_f = encode_siamese(x, goal, model.encoder)
        goal_pred, feats, _ = model.forward_inference(model.as_batch(images), ["put the red disc"] * 2)
    for t in (v_s.tokens, v_f.tokens, feats.h, feats.pre_decoder, goal_pred.per_patch):
        assert torch.isfinite(t).all()


def test_outputs_are_finite_across_seeds(vocabulary):
    config = tiny_model_config()
    rng = np.random.default_rng(0)
    for seed in range(100):
        model = build_model(config, vocabulary, seed)
        images = rng.uniform(0.0, 1.0, size=(1, 4, 4, 3)).astype(np.float32)
        with torch.no_grad():
            goal, feats, _ = model.forward_inference(model.as_batch(images), ["put the red disc"])
        assert torch.isfinite(feats.h).all(), seed
        assert torch.isfinite(goal.per_patch).all(), seed


@pytest.mark.parametrize("token_count", [16, 64, 196])
@pytest.mark.parametrize("ratio", [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 1.0])
def test_sample_mask_size_matches_rounded_ratio(token_count, ratio):
    expected = int(np.floor(ratio * token_count + 0.5))
    mask = sample_mask(token_count, ratio, seed=11)
    assert mask_count(token_count, ratio) == expected
    assert len(mask.masked_indices) == expected
    assert all(0 <= i < token_count for i in mask.masked_indices)


def test_sample_mask_differs_across_seed_pairs():
    for seed in range(100):
        a = sample_mask(196, 0.75, seed=seed)
        b = sample_mask(196, 0.75, seed=seed + 1000)
        assert a.masked_indices != b.masked_indices, seed


def test_masked_goal_patch_content_does_not_reach_the_representation(model, images):
    mask = sample_mask(GRID, 0.5, seed=4)
    k = mask.masked_indices[0]
    row, col = divmod(k, GRID.grid_width)
    p = GRID.patch_size
    o_s = model.as_batch(images[:1])
    o_f = model.as_batch(images[1:])
    edited = o_f.clone()
    edited[:, row * p:(row + 1) * p, col * p:(col + 1) * p] = 1.0 - edited[:, row * p:(row + 1) * p, col * p:(col + 1) * p]
    text = model.encode_text(["put the red disc in the blue box"])
    with torch.no_grad():
        a = model.forward_phi(o_s, o_f, mask, text)
        b = model.forward_phi(o_s, edited, mask, text)
    assert torch.equal(a.h, b.h)


# =============================================================================
# TEXT PADDING
# =============================================================================

def test_padding_embedding_does_not_change_real_tokens(model):
    text = "put the red disc"
    before = embed_text(text, model.text_state)
    real = ~before.padding_mask[0]
    assert (~real).any()
    with torch.no_grad():
        model.text_encoder.token_embed.weight[model.vocabulary.pad_id] += 5.0
    after = embed_text(text, model.text_state)
    assert torch.allclose(after.token_embeddings[0, real], before.token_embeddings[0, real], atol=1e-6)
    assert torch.allclose(after.pooled, before.pooled, atol=1e-6)
