"""
Training loops.

train_pretext optimizes the whole representation end to end on masked
goal-image reconstruction. The finetune_* loops train one downstream head with
the goal branch fully masked, exactly as at inference.
"""

import logging
import math
import time
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from visact.models.errors import CheckpointError, NonFiniteLossError, ShapeMismatchError
from visact.models.schemas import (
    ROTATION_STEP_DEG,
    Episode,
    FinetuneConfig,
    MaskSpec,
    ModelConfig,
    PatchGrid,
    TrainConfig,
)
from visact.nets.encoders import MaskLike, Vocabulary, build_vocabulary, mask_tensor, patchify, sample_mask
from visact.nets.heads import GoalPrediction, box_iou
from visact.nets.model import BACKBONE_PREFIXES, HEAD_PREFIXES, VisualActionModel, build_model
from visact.skills.dataio import DatasetIndex, iterate_batches
from visact.skills.metrics import episode_box, joint_target
from visact.training.checkpoint import (
    Checkpoint,
    checkpoint_from_model,
    config_hash,
    model_from_checkpoint,
    save_checkpoint,
)
from visact.utils.logging_setup import JsonlLog

logger = logging.getLogger(__name__)

LossFn = Callable[[List[Episode], int], torch.Tensor]


# =============================================================================
# LOSSES
# =============================================================================

def pretext_loss(
    pred: GoalPrediction,
    target: torch.Tensor,
    mask: Optional[MaskLike],
    scope: str,
    grid: PatchGrid,
) -> torch.Tensor:
    """
    L2 between the raw goal prediction and the ground-truth goal image.

    Args:
        pred: Goal head output; its raw per-patch values are compared.
        target: (B, H, W, C) goal images in [0, 1].
        mask: Goal mask, needed for the masked_only scope.
        scope: all_patches or masked_only.
        grid: Patch geometry.

    Returns:
        Scalar mean squared error.
    """
    target_patches = patchify(target, grid).to(pred.per_patch.dtype)
    if target_patches.dim() == 2:
        target_patches = target_patches.unsqueeze(0)
    if target_patches.shape != pred.per_patch.shape:
        raise ShapeMismatchError(
            f"prediction {tuple(pred.per_patch.shape)} and target {tuple(target_patches.shape)} differ"
        )
    sq = (pred.per_patch - target_patches.detach()) ** 2
    if scope == "all_patches":
        return sq.mean()
    if scope != "masked_only":
        raise ValueError(f"Unknown loss scope: {scope}")
    if mask is None:
        raise ValueError("masked_only scope needs the mask")
    m = mask_tensor(mask, sq.shape[0], sq.shape[1], device=sq.device)
    if not m.any():
        raise ValueError("masked_only scope with an empty mask")
    return sq[m].mean()


def affordance_loss(stack, episodes: Sequence[Episode]) -> torch.Tensor:
    """Cross-entropy of the spatial softmax against the annotated pick and place cells."""
    b, h, w = stack.pick_logits.shape
    pick_idx, place_idx = [], []
    for e in episodes:
        a = e.action
        pick_idx.append(a.pick.u * w + a.pick.v)
        place_idx.append((a.place.theta // ROTATION_STEP_DEG) * h * w + a.place.u * w + a.place.v)
    device = stack.pick_logits.device
    pick_t = torch.tensor(pick_idx, dtype=torch.long, device=device)
    place_t = torch.tensor(place_idx, dtype=torch.long, device=device)
    return (
        F.cross_entropy(stack.pick_logits.reshape(b, -1), pick_t)
        + F.cross_entropy(stack.place_logits.reshape(b, -1), place_t)
    )


def bbox_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 + (1 - IoU)."""
    return F.l1_loss(pred, target) + (1.0 - box_iou(pred, target)).mean()


# =============================================================================
# SCHEDULE / DATA
# =============================================================================

def lr_lambda(steps: int, warmup: int) -> Callable[[int], float]:
    """Linear warmup then cosine decay to zero."""
    def fn(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, steps - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    return fn


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def batch_stream(dataset: DatasetIndex, batch_size: int, seed: int) -> Iterator[List[Episode]]:
    """Endless epochs; epoch k is shuffled with a seed derived from (seed, k)."""
    epoch = 0
    while True:
        yield from iterate_batches(dataset, batch_size, derive_seed(seed, epoch))
        epoch += 1


def step_masks(grid: PatchGrid, ratio: float, seed: int, step: int, batch: int) -> List[MaskSpec]:
    return [sample_mask(grid, ratio, derive_seed(seed, step, i)) for i in range(batch)]


def _images(model: VisualActionModel, episodes: Sequence[Episode], attr: str) -> torch.Tensor:
    return model.as_batch([getattr(e, attr) for e in episodes])


def _run_loop(
    model: VisualActionModel,
    params: List[torch.nn.Parameter],
    loss_fn: LossFn,
    dataset: DatasetIndex,
    cfg: Union[TrainConfig, FinetuneConfig],
    log_path: Optional[Union[str, Path]],
    desc: str,
    progress: bool,
) -> List[float]:
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, betas=(0.9, 0.95))
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda(cfg.steps, cfg.resolved_warmup))
    stream = batch_stream(dataset, cfg.batch_size, cfg.seed)
    losses: List[float] = []
    last_finite: Optional[float] = None
    t0 = time.time()

    model.train()
    with JsonlLog(log_path) as log:
        for step in tqdm(range(cfg.steps), desc=desc, disable=not progress):
            batch = next(stream)
            lr = optimizer.param_groups[0]["lr"]
            loss = loss_fn(batch, step)
            value = float(loss.detach())
            if not math.isfinite(value):
                logger.error("❌ Non-finite loss at step %d", step)
                raise NonFiniteLossError(step, last_finite)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            scheduler.step()

            last_finite = value
            losses.append(value)
            log.write(step=step, loss=value, lr=lr, wall_time=round(time.time() - t0, 4))
    model.eval()
    return losses


def _set_precision(model: VisualActionModel, precision: str) -> VisualActionModel:
    return model.double() if precision == "float64" else model.float()


# =============================================================================
# PRETEXT
# =============================================================================

def train_pretext(
    dataset: DatasetIndex,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_path: Optional[Union[str, Path]] = None,
    vocabulary: Optional[Vocabulary] = None,
    device: str = "cpu",
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Masked goal-image prediction training.

    Each sample gets its own goal mask seeded by (seed, step, sample index);
    with mask_input the input image is masked the same way.

    Args:
        dataset: Episodes with start/goal images and instructions.
        model_config: Architecture.
        train_config: Optimization and masking settings.
        out_path: Checkpoint file to write (optional).
        vocabulary: Instruction vocabulary; built from the dataset when None.
        device: Torch device.
        log_path: JSONL loss log; defaults to `<out_path>.log.jsonl`.
        progress: Show a tqdm bar.

    Returns:
        Checkpoint of the trained model (extra carries initial/final loss).

    Raises:
        ValueError: empty dataset.
        NonFiniteLossError: NaN or infinite loss.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if vocabulary is None:
        vocabulary = build_vocabulary(e.instruction for e in dataset.episodes())
    if log_path is None and out_path is not None:
        log_path = f"{out_path}.log.jsonl"

    model = _set_precision(build_model(model_config, vocabulary, train_config.seed), train_config.precision).to(device)
    grid = model.grid
    cfg = train_config

    def loss_fn(batch: List[Episode], step: int) -> torch.Tensor:
        o_s = _images(model, batch, "start_image")
        o_f = _images(model, batch, "goal_image")
        masks = step_masks(grid, cfg.mask_ratio, cfg.seed, step, len(batch))
        input_masks = step_masks(grid, cfg.mask_ratio, cfg.seed + 1, step, len(batch)) if cfg.mask_input else None
        pred, _ = model.forward_pretext(o_s, o_f, [e.instruction for e in batch], masks, input_masks)
        return pretext_loss(pred, o_f, masks, cfg.loss_scope, grid)

    logger.info("🚀 Pretext training: %d episodes, %d steps, mask ratio %.2f", len(dataset), cfg.steps, cfg.mask_ratio)
    losses = _run_loop(
        model, [p for p in model.parameters() if p.requires_grad], loss_fn, dataset, cfg, log_path, "pretext", progress
    )
    logger.info("✅ Pretext training done: loss %.5f -> %.5f", losses[0], losses[-1])

    ckpt = checkpoint_from_model(
        model, cfg, step=cfg.steps, kind="pretext",
        extra={"initial_loss": losses[0], "final_loss": losses[-1]},
    )
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt


# =============================================================================
# FINE-TUNING
# =============================================================================

def _finetune_model(
    ckpt: Checkpoint,
    cfg: FinetuneConfig,
    expected_config: Optional[ModelConfig],
    device: str,
) -> Tuple[VisualActionModel, List[torch.nn.Parameter]]:
    if expected_config is not None and config_hash(expected_config) != ckpt.config_hash:
        raise CheckpointError("checkpoint model config does not match the fine-tuning config")
    if cfg.init == "scratch":
        model = build_model(ckpt.model_config, ckpt.vocabulary, cfg.seed)
    else:
        model = model_from_checkpoint(ckpt)
    model = _set_precision(model, cfg.precision).to(device)

    params = []
    for name, p in model.named_parameters():
        in_backbone = name.startswith(BACKBONE_PREFIXES)
        trainable = name.startswith(HEAD_PREFIXES[cfg.task]) or (
            in_backbone
            and not cfg.freeze_backbone
            and (cfg.train_text_encoder or not name.startswith("text_encoder"))
        )
        p.requires_grad_(trainable)
        if trainable:
            params.append(p)
    return model, params


def _require(episodes: Sequence[Episode], check: Callable[[Episode], bool], what: str) -> None:
    missing = [e.episode_id for e in episodes if not check(e)]
    if missing:
        raise ValueError(f"{len(missing)} episodes lack {what} (first: {missing[0]})")


def _finetune(
    dataset: DatasetIndex,
    ckpt: Checkpoint,
    cfg: FinetuneConfig,
    loss_builder: Callable[[VisualActionModel], LossFn],
    out_path: Optional[Union[str, Path]],
    expected_config: Optional[ModelConfig],
    device: str,
    log_path: Optional[Union[str, Path]],
    progress: bool,
) -> Checkpoint:
    if len(dataset) == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    if log_path is None and out_path is not None:
        log_path = f"{out_path}.log.jsonl"
    model, params = _finetune_model(ckpt, cfg, expected_config, device)

    logger.info(
        "🔧 Fine-tuning %s head: %d episodes, %d steps, init=%s, frozen backbone=%s",
        cfg.task, len(dataset), cfg.steps, cfg.init, cfg.freeze_backbone,
    )
    losses = _run_loop(model, params, loss_builder(model), dataset, cfg, log_path, f"finetune-{cfg.task}", progress)
    logger.info("✅ Fine-tuning done: loss %.5f -> %.5f", losses[0], losses[-1])

    out = checkpoint_from_model(
        model, cfg, step=cfg.steps, kind=f"finetune-{cfg.task}",
        extra={"initial_loss": losses[0], "final_loss": losses[-1], "init": cfg.init},
    )
    if out_path is not None:
        save_checkpoint(out, out_path)
    return out


def finetune_affordance(
    dataset: DatasetIndex,
    ckpt: Checkpoint,
    config: Optional[FinetuneConfig] = None,
    out_path: Optional[Union[str, Path]] = None,
    expected_config: Optional[ModelConfig] = None,
    device: str = "cpu",
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Train the affordance head with cross-entropy on one-hot pick/place cells.

    The goal head stays in the loop so the affordance head sees the predicted
    goal image.

    Raises:
        ValueError: episodes without pick/place annotations.
        CheckpointError: checkpoint config differs from expected_config.
    """
    cfg = (config or FinetuneConfig()).model_copy(update={"task": "affordance"})
    _require(dataset.episodes(), lambda e: e.action is not None, "pick/place annotations")

    def builder(model: VisualActionModel) -> LossFn:
        def loss_fn(batch: List[Episode], step: int) -> torch.Tensor:
            stack, _ = model.forward_affordance(_images(model, batch, "start_image"), [e.instruction for e in batch])
            return affordance_loss(stack, batch)
        return loss_fn

    return _finetune(dataset, ckpt, cfg, builder, out_path, expected_config, device, log_path, progress)


def finetune_action(
    dataset: DatasetIndex,
    ckpt: Checkpoint,
    config: Optional[FinetuneConfig] = None,
    out_path: Optional[Union[str, Path]] = None,
    expected_config: Optional[ModelConfig] = None,
    device: str = "cpu",
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> Checkpoint:
    """Train the 9-D action head with an L2 loss on targets derived from the annotations."""
    cfg = (config or FinetuneConfig()).model_copy(update={"task": "action"})
    _require(dataset.episodes(), lambda e: e.action is not None, "action annotations")

    def builder(model: VisualActionModel) -> LossFn:
        size = model.config.image_size

        def loss_fn(batch: List[Episode], step: int) -> torch.Tensor:
            pred = model.forward_action(_images(model, batch, "start_image"), [e.instruction for e in batch])
            target = torch.tensor(
                np.stack([joint_target(e.action, size) for e in batch]), dtype=pred.dtype, device=pred.device
            )
            return F.mse_loss(pred, target)
        return loss_fn

    return _finetune(dataset, ckpt, cfg, builder, out_path, expected_config, device, log_path, progress)


def finetune_bbox(
    dataset: DatasetIndex,
    ckpt: Checkpoint,
    config: Optional[FinetuneConfig] = None,
    out_path: Optional[Union[str, Path]] = None,
    expected_config: Optional[ModelConfig] = None,
    device: str = "cpu",
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> Checkpoint:
    """Train the box head on (start image, referring expression, target box) triples."""
    cfg = (config or FinetuneConfig()).model_copy(update={"task": "bbox"})
    _require(
        dataset.episodes(),
        lambda e: e.meta.target_box is not None and bool(e.meta.referring_expression),
        "referring expressions with boxes",
    )

    def builder(model: VisualActionModel) -> LossFn:
        def loss_fn(batch: List[Episode], step: int) -> torch.Tensor:
            pred = model.forward_bbox(
                _images(model, batch, "start_image"), [e.meta.referring_expression for e in batch]
            )
            target = torch.tensor(
                [episode_box(e).as_list() for e in batch], dtype=pred.dtype, device=pred.device
            )
            return bbox_loss(pred, target)
        return loss_fn

    return _finetune(dataset, ckpt, cfg, builder, out_path, expected_config, device, log_path, progress)


FINETUNERS = {
    "affordance": finetune_affordance,
    "action": finetune_action,
    "bbox": finetune_bbox,
}
