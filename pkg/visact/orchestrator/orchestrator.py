"""
Orchestrator for the visual-action learner

Coordinates the flow of:
1. Corpus generation (scenes -> episodes -> index, catalog and split snapshot)
2. Pretext training (masked goal-image prediction)
3. Head fine-tuning (affordance / action / bbox)
4. Benchmarking (seen / intra / inter rows, fully masked inference)
5. Ablations (masking ratio sweep, component variants)
6. Single-sample prediction with image artifacts
7. Gradient verification

Every run returns a RunResult; a failing stage yields status=FAILED with the
stage name and the issues, never a traceback.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from visact.models.errors import CheckpointError, ShapeMismatchError
from visact.models.schemas import (
    AblationReport,
    AblationRow,
    Episode,
    EvalReport,
    FinetuneConfig,
    ModelConfig,
    ObjectSpec,
    RunResult,
    SceneConfig,
    SplitAssignment,
    SuccessRecord,
    TrainConfig,
)
from visact.nets.encoders import Vocabulary, build_vocabulary
from visact.nets.heads import extract_se2_batch, normalize, overlay_heatmap, to_boxes
from visact.nets.model import VisualActionModel
from visact.skills.dataio import (
    DatasetIndex,
    build_index,
    episode_dir,
    load_index,
    save_episode,
    save_index,
    scan_corpus,
)
from visact.skills.metrics import (
    aggregate_rows,
    centroid_in_zone,
    episode_box,
    grounding_hit,
    grounding_iou,
    joint_target,
    manipulation_success,
    reconstruction_metrics,
)
from visact.skills.scenegen import (
    build_catalog,
    generate_episode,
    instruction_corpus,
    load_catalog,
    make_splits,
    save_catalog,
)
from visact.training.checkpoint import (
    Checkpoint,
    config_hash,
    file_hash,
    load_checkpoint,
    model_from_checkpoint,
)
from visact.training.gradcheck import DEFAULT_EPSILON, run_affordance_gradcheck, run_pretext_gradcheck
from visact.training.trainer import FINETUNERS, train_pretext
from visact.utils.settings import cache_path, get_settings

logger = logging.getLogger(__name__)

TASKS = ("packing_seq", "packing_grp")
CATALOG_FILE = "catalog.jsonl"
SPLITS_FILE = "splits.json"
GRADCHECK_TOLERANCE = 1e-4
EVAL_BATCH_SIZE = 32

# Masking-ratio sweep reported for the full-scale system: (ratio, success).
REFERENCE_MASK_CURVE: List[Tuple[float, float]] = [
    (0.75, 0.66), (0.85, 0.69), (0.90, 0.79), (0.95, 0.83), (1.00, 0.63),
]
COMPONENT_VARIANTS = ("full", "no_fusion", "symmetric_mask", "narrow_data")

SPLIT_DEFAULTS: Dict[str, object] = {
    "train_classes": 16,
    "intra_classes": 4,
    "inter_classes": 4,
    "heldout_per_class": 2,
    "instances_per_class": 6,
    "catalog_seed": 0,
    "train_fraction": 0.8,
    "intra_fraction": 0.1,
    "inter_fraction": 0.1,
    "image_size": 64,
    "catalog_scope": "full",
}


def _failed(stage: str, error: Exception) -> RunResult:
    logger.error("❌ Stage %s failed: %s", stage, error)
    return RunResult(status="FAILED", stage=stage, issues=[f"{type(error).__name__}: {error}"])


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if hasattr(data, "model_dump"):
        data = data.model_dump(mode="json")
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# =============================================================================
# CORPUS GENERATION
# =============================================================================

def split_plan(episodes: int, split: str, options: Dict[str, object]) -> List[str]:
    """Split tag of every episode index: all train first, then intra, then inter."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    if split != "all":
        return [split] * episodes
    n_intra = int(round(episodes * float(options["intra_fraction"])))
    n_inter = int(round(episodes * float(options["inter_fraction"])))
    n_train = episodes - n_intra - n_inter
    if n_train < 0:
        raise ValueError("split fractions exceed 1.0")
    return ["train"] * n_train + ["intra"] * n_intra + ["inter"] * n_inter


def task_for(task: str, index: int) -> str:
    return TASKS[index % len(TASKS)] if task == "mixed" else task


def episode_seed(seed: int, index: int) -> int:
    return seed * 100_000 + index


def _generate_one(job: tuple) -> Episode:
    task, catalog, split, seed, assignment, cfg = job
    return generate_episode(task, catalog, split, seed, assignment, cfg)


def generate_corpus(
    out: Union[str, Path],
    task: str = "packing_seq",
    episodes: int = 100,
    seed: int = 0,
    split: str = "all",
    split_options: Optional[Dict[str, object]] = None,
    force: bool = False,
    workers: int = 1,
    catalog: Optional[List[ObjectSpec]] = None,
    assignment: Optional[SplitAssignment] = None,
) -> RunResult:
    """
    Generate an episode corpus with its index, catalog and split snapshot.

    Args:
        out: Output directory; must be empty unless force is set.
        task: packing_seq, packing_grp or mixed (alternating).
        episodes: Number of episode directories to write.
        seed: Corpus seed; episode i uses seed * 100000 + i.
        split: train, intra, inter, or all (fractions from split_options).
        split_options: Overrides of SPLIT_DEFAULTS.
        force: Overwrite a non-empty output directory.
        workers: Generation processes; the corpus is identical for any count.
        catalog: Reuse an existing catalog instead of building one.
        assignment: Reuse an existing class split.

    Returns:
        RunResult with the corpus path and per-split counts.
    """
    logger.info("\n🧱 CORPUS GENERATION STARTED")
    options = {**SPLIT_DEFAULTS, **(split_options or {})}
    out = Path(out)

    # 1️⃣ Output directory
    if out.exists() and any(out.iterdir()) and not force:
        return _failed("output", FileExistsError(f"{out} is not empty; pass --force to overwrite"))
    if out.exists() and force:
        for old in out.glob("ep_*"):
            for f in old.iterdir():
                f.unlink()
            old.rmdir()
    out.mkdir(parents=True, exist_ok=True)

    # 2️⃣ Catalog and class split
    try:
        if catalog is None:
            catalog = build_catalog(int(options["instances_per_class"]), int(options["catalog_seed"]))
        if assignment is None:
            counts = (int(options["train_classes"]), int(options["intra_classes"]), int(options["inter_classes"]))
            assignment = make_splits(catalog, counts, int(options["catalog_seed"]), int(options["heldout_per_class"]))
        save_catalog(catalog, out / CATALOG_FILE)
        _write_json(out / SPLITS_FILE, assignment)
        logger.info("✅ Catalog ready: %d objects, %d train classes", len(catalog), len(assignment.train_classes))
    except Exception as e:
        return _failed("catalog", e)

    # 3️⃣ Episodes
    try:
        cfg = SceneConfig(image_size=int(options["image_size"]), catalog_scope=str(options["catalog_scope"]))
        plan = split_plan(episodes, split, options)
        jobs = [
            (task_for(task, i), catalog, s, episode_seed(seed, i), assignment, cfg)
            for i, s in enumerate(plan)
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                generated = list(executor.map(_generate_one, jobs, chunksize=8))
        else:
            generated = [_generate_one(job) for job in jobs]
        for ep in generated:
            save_episode(ep, episode_dir(out, ep.episode_id))
        logger.info("✅ %d episodes written", len(generated))
    except Exception as e:
        return _failed("episodes", e)

    # 4️⃣ Index + validation
    index = build_index(out)
    save_index(index)
    check = scan_corpus(out)
    if not check["is_valid"]:
        return RunResult(status="FAILED", stage="validation", issues=check["issues"])
    logger.info("✅ Corpus validated")

    counts = {s: plan.count(s) for s in sorted(set(plan))}
    return RunResult(status="SUCCESS", outputs={"out": str(out), "episodes": len(index), "splits": counts})


def load_corpus_catalog(root: Union[str, Path]) -> Tuple[Optional[List[ObjectSpec]], Optional[SplitAssignment]]:
    root = Path(root)
    catalog = load_catalog(root / CATALOG_FILE) if (root / CATALOG_FILE).is_file() else None
    assignment = None
    if (root / SPLITS_FILE).is_file():
        assignment = SplitAssignment.model_validate_json((root / SPLITS_FILE).read_text(encoding="utf-8"))
    return catalog, assignment


def corpus_vocabulary(root: Union[str, Path], dataset: DatasetIndex) -> Vocabulary:
    """Vocabulary over the whole catalog when one is stored, else over the dataset's instructions."""
    catalog, _ = load_corpus_catalog(root)
    if catalog is not None:
        return build_vocabulary(instruction_corpus(catalog))
    return build_vocabulary(e.instruction for e in dataset.episodes())


# =============================================================================
# TRAINING RUNS
# =============================================================================

def model_config_for(preset: str, dataset: DatasetIndex, fusion_mode: Optional[str] = None) -> ModelConfig:
    """Preset architecture with the image size taken from the data."""
    data = ModelConfig.preset(preset).model_dump()
    data["image_size"] = int(dataset.get(dataset.ids[0]).start_image.shape[0])
    if fusion_mode is not None:
        data["fusion"]["mode"] = fusion_mode
    return ModelConfig.model_validate(data)


def pretrain(
    data: Union[str, Path],
    out: Union[str, Path],
    train_config: TrainConfig,
    preset: str = "desk",
    fusion_mode: Optional[str] = None,
    device: Optional[str] = None,
    progress: bool = False,
) -> RunResult:
    logger.info("\n🧠 PRETRAINING STARTED")
    try:
        dataset = load_index(data, split="train")
        if len(dataset) == 0:
            raise ValueError(f"no training episodes under {data}")
        vocabulary = corpus_vocabulary(data, dataset)
        model_config = model_config_for(preset, dataset, fusion_mode)
        logger.info("✅ Data loaded: %d episodes, vocabulary %d words", len(dataset), len(vocabulary))
    except Exception as e:
        return _failed("data", e)

    try:
        ckpt = train_pretext(
            dataset, model_config, train_config, out, vocabulary,
            device=device or get_settings().device, progress=progress,
        )
    except Exception as e:
        return _failed("pretrain", e)

    return RunResult(status="SUCCESS", outputs={
        "checkpoint": str(out),
        "log": f"{out}.log.jsonl",
        "initial_loss": ckpt.extra["initial_loss"],
        "final_loss": ckpt.extra["final_loss"],
        "config_hash": ckpt.config_hash,
    })


def finetune(
    data: Union[str, Path],
    checkpoint: Union[str, Path],
    out: Union[str, Path],
    config: FinetuneConfig,
    device: Optional[str] = None,
    progress: bool = False,
) -> RunResult:
    logger.info("\n🔧 FINE-TUNING STARTED (%s)", config.task)
    try:
        ckpt = load_checkpoint(checkpoint)
        logger.info("✅ Checkpoint loaded: %s step %d", ckpt.kind, ckpt.step)
    except Exception as e:
        return _failed("checkpoint", e)

    try:
        dataset = load_index(data, split="train")
    except Exception as e:
        return _failed("data", e)

    try:
        tuned = FINETUNERS[config.task](
            dataset, ckpt, config, out, device=device or get_settings().device, progress=progress
        )
    except Exception as e:
        return _failed("finetune", e)

    return RunResult(status="SUCCESS", outputs={
        "checkpoint": str(out),
        "task": config.task,
        "initial_loss": tuned.extra["initial_loss"],
        "final_loss": tuned.extra["final_loss"],
    })


# =============================================================================
# BENCHMARK
# =============================================================================

def _batches(items: Sequence, size: int) -> List[Sequence]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def _score_batch(model: VisualActionModel, episodes: Sequence[Episode]) -> List[Tuple[SuccessRecord, bool, float]]:
    """Fully masked inference on one batch: success record, centroid hit and goal MSE per episode."""
    with torch.no_grad():
        o_s = model.as_batch([e.start_image for e in episodes])
        stack, goal = model.forward_affordance(o_s, [e.instruction for e in episodes])
        actions = extract_se2_batch(normalize(stack))
    images = goal.image.detach().cpu().double().numpy()
    out = []
    for ep, action, image in zip(episodes, actions, images):
        out.append((
            manipulation_success(action, ep),
            centroid_in_zone(image, ep),
            reconstruction_metrics(image, ep.goal_image).mse_all,
        ))
    return out


def evaluate_action_head(model: VisualActionModel, episodes: Sequence[Episode]) -> float:
    """Mean L2 distance between predicted 9-D actions and the derived targets."""
    errors = []
    with torch.no_grad():
        for batch in _batches(list(episodes), EVAL_BATCH_SIZE):
            pred = model.forward_action(model.as_batch([e.start_image for e in batch]), [e.instruction for e in batch])
            target = np.stack([joint_target(e.action, model.config.image_size) for e in batch])
            errors.extend(np.linalg.norm(pred.cpu().double().numpy() - target, axis=1).tolist())
    return float(np.mean(errors))


def evaluate_grounding(model: VisualActionModel, episodes: Sequence[Episode]) -> Tuple[float, float]:
    """(accuracy at IoU >= 0.25, mean IoU) on referring-expression boxes."""
    hits, ious = [], []
    with torch.no_grad():
        for batch in _batches(list(episodes), EVAL_BATCH_SIZE):
            pred = model.forward_bbox(
                model.as_batch([e.start_image for e in batch]), [e.meta.referring_expression for e in batch]
            )
            for box, ep in zip(to_boxes(pred), batch):
                gt = episode_box(ep)
                hits.append(grounding_hit(box, gt))
                ious.append(grounding_iou(box, gt))
    return float(np.mean(hits)), float(np.mean(ious))


def run_benchmark(
    checkpoint: Union[str, Path, Checkpoint],
    dataset: DatasetIndex,
    split: Optional[str] = None,
    task: Optional[str] = None,
    workers: int = 1,
    seed: int = 0,
    device: Optional[str] = None,
) -> EvalReport:
    """
    Score a checkpoint with the goal branch fully masked.

    Args:
        checkpoint: Path or loaded checkpoint.
        dataset: Episodes to score.
        split: Restrict to one split.
        task: Restrict to one task.
        workers: Scoring threads; records are ordered by episode id regardless.
        seed: Recorded in the report; seeds torch for reproducible inference.
        device: Torch device.

    Raises:
        ValueError: split absent, or the filter selects nothing (available splits listed).
    """
    torch.manual_seed(seed)
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    ckpt_hash = file_hash(checkpoint) if not isinstance(checkpoint, Checkpoint) else ""

    selected = dataset.filter(split=split, task=task) if (split or task) else dataset
    if len(selected) == 0:
        raise ValueError(
            f"no episodes for split={split!r} task={task!r}; available splits: {dataset.available_splits()}"
        )
    episodes = sorted(selected.episodes(), key=lambda e: e.episode_id)

    model = model_from_checkpoint(ckpt, device or get_settings().device)
    model.eval()
    batches = _batches(episodes, EVAL_BATCH_SIZE)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            scored = [r for chunk in executor.map(lambda b: _score_batch(model, b), batches) for r in chunk]
    else:
        scored = [r for b in batches for r in _score_batch(model, b)]

    records = [r[0] for r in scored]
    centroid = {ep.episode_id: r[1] for ep, r in zip(episodes, scored)}
    mse = {ep.episode_id: r[2] for ep, r in zip(episodes, scored)}
    report = EvalReport(
        rows=aggregate_rows(records, episodes, centroid, mse),
        records=records,
        checkpoint_hash=ckpt_hash,
        config_hash=ckpt.config_hash,
        seed=seed,
    )
    if ckpt.kind == "finetune-action":
        report.action_l2 = evaluate_action_head(model, episodes)
    if ckpt.kind == "finetune-bbox":
        report.grounding_accuracy, report.grounding_mean_iou = evaluate_grounding(model, episodes)
    return report


def success_rate(report: EvalReport) -> float:
    return sum(r.success for r in report.records) / len(report.records)


def evaluate(
    checkpoint: Union[str, Path],
    data: Union[str, Path],
    out: Union[str, Path],
    split: Optional[str] = None,
    task: Optional[str] = None,
    workers: int = 1,
    seed: int = 0,
    device: Optional[str] = None,
) -> RunResult:
    logger.info("\n📏 BENCHMARK STARTED")
    if not Path(checkpoint).is_file():
        return _failed("checkpoint", CheckpointError(f"checkpoint not found: {checkpoint}"))
    try:
        dataset = load_index(data)
    except Exception as e:
        return _failed("data", e)

    try:
        report = run_benchmark(checkpoint, dataset, split, task, workers, seed, device)
    except Exception as e:
        return _failed("benchmark", e)

    _write_json(Path(out), report)
    for row in report.rows:
        logger.info("✅ %-6s %-12s n=%-4d success %.3f", row.split, row.task, row.episodes, row.success_rate)
    return RunResult(status="SUCCESS", outputs={
        "report": str(out),
        "episodes": len(report.records),
        "success_rate": success_rate(report),
        "rows": [r.model_dump(mode="json") for r in report.rows],
    })


# =============================================================================
# ABLATIONS
# =============================================================================

def _heldout(dataset: DatasetIndex) -> DatasetIndex:
    """Evaluation episodes: every non-train split, or the train split when nothing is held out."""
    ids = [i for i in dataset.ids if dataset.splits[i] != "train"]
    if not ids:
        return dataset
    return DatasetIndex(
        root=dataset.root,
        ids=ids,
        splits={i: dataset.splits[i] for i in ids},
        tasks={i: dataset.tasks[i] for i in ids if i in dataset.tasks},
        _cache=dataset._cache,
    )


def _pretrain_finetune_score(
    name: str,
    train_set: DatasetIndex,
    eval_set: DatasetIndex,
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: TrainConfig,
    finetune_config: FinetuneConfig,
    device: str,
    progress: bool,
) -> Tuple[float, float]:
    """(success rate, final pretext loss) of one ablation variant."""
    pre_path = cache_path("ablations", name, "pretext.ckpt")
    pre = train_pretext(train_set, model_config, train_config, pre_path, vocabulary, device, progress=progress)
    tuned = FINETUNERS["affordance"](
        train_set, pre, finetune_config, cache_path("ablations", name, "affordance.ckpt"),
        device=device, progress=progress,
    )
    report = run_benchmark(tuned, eval_set, seed=train_config.seed, device=device)
    return success_rate(report), float(pre.extra["final_loss"])


def plot_mask_ablation(report: AblationReport, path: Union[str, Path]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.6), constrained_layout=True)
    xs = [r.mask_ratio for r in report.rows]
    ax.plot(xs, [r.success for r in report.rows], marker="o", label="toy sweep")
    if report.reference_curve:
        ref_x, ref_y = zip(*report.reference_curve)
        ax.plot(ref_x, ref_y, marker="s", linestyle="--", label="reference")
    ax.set_xlabel("Mask ratio")
    ax.set_ylabel("Success rate")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def run_mask_ratio_ablation(
    ratios: Sequence[float],
    data: Union[str, Path],
    out_dir: Union[str, Path],
    train_config: TrainConfig,
    finetune_config: FinetuneConfig,
    preset: str = "desk",
    device: Optional[str] = None,
    progress: bool = False,
) -> AblationReport:
    """
    One pretext model per ratio, identical fine-tune and benchmark.

    Intermediate checkpoints go under the cache dir (LAVAMAN_CACHE); the report
    and plot go to out_dir.

    Raises:
        ValueError: empty ratio list or a ratio outside [0, 1].
    """
    if not ratios:
        raise ValueError("ratio list is empty")
    bad = [r for r in ratios if not 0.0 <= r <= 1.0]
    if bad:
        raise ValueError(f"mask ratios must lie in [0, 1], got {bad}")
    device = device or get_settings().device
    dataset = load_index(data)
    train_set = dataset.filter(split="train")
    eval_set = _heldout(dataset)
    vocabulary = corpus_vocabulary(data, train_set)
    model_config = model_config_for(preset, train_set)

    rows = []
    for ratio in ratios:
        cfg = train_config.model_copy(update={"mask_ratio": float(ratio)})
        name = f"mask-{ratio:.2f}-seed{cfg.seed}"
        success, loss = _pretrain_finetune_score(
            name, train_set, eval_set, vocabulary, model_config, cfg, finetune_config, device, progress
        )
        logger.info("✅ Mask ratio %.2f: success %.3f", ratio, success)
        rows.append(AblationRow(variant=name, mask_ratio=float(ratio), success=success, final_pretext_loss=loss))

    out_dir = Path(out_dir)
    report = AblationReport(kind="mask_ratio", rows=rows, reference_curve=list(REFERENCE_MASK_CURVE))
    report.plot_path = str(plot_mask_ablation(report, out_dir / "mask_ratio_ablation.png"))
    _write_json(out_dir / "mask_ratio_ablation.json", report)
    return report


def narrow_corpus(data: Union[str, Path], train_set: DatasetIndex, seed: int) -> DatasetIndex:
    """Training corpus of the same size and task mix drawn from a single-shape catalog."""
    catalog, assignment = load_corpus_catalog(data)
    if catalog is None or assignment is None:
        raise ValueError(f"{data} has no catalog snapshot; regenerate it with gen-data")
    tasks = sorted(set(train_set.tasks.values()))
    size = int(train_set.get(train_set.ids[0]).start_image.shape[0])
    out = get_settings().cache_dir / "ablations" / f"narrow-seed{seed}" / "data"
    result = generate_corpus(
        out,
        task=tasks[0] if len(tasks) == 1 else "mixed",
        episodes=len(train_set),
        seed=seed,
        split="train",
        split_options={"image_size": size, "catalog_scope": "narrow"},
        force=True,
        catalog=catalog,
        assignment=assignment,
    )
    if result.status != "SUCCESS":
        raise ValueError(f"narrow corpus generation failed: {result.issues}")
    return load_index(out, split="train")


def run_component_ablation(
    variants: Sequence[str],
    data: Union[str, Path],
    out_dir: Union[str, Path],
    train_config: TrainConfig,
    finetune_config: FinetuneConfig,
    preset: str = "desk",
    device: Optional[str] = None,
    progress: bool = False,
) -> AblationReport:
    """
    Same seeds and budgets for every variant:

        full            the default pipeline
        no_fusion       text joins the decoder only, no fusion stages
        symmetric_mask  the input image is masked like the goal
        narrow_data     pretext and fine-tune on a single-shape corpus
    """
    if not variants:
        raise ValueError("variant list is empty")
    unknown = sorted(set(variants) - set(COMPONENT_VARIANTS))
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {list(COMPONENT_VARIANTS)}")
    device = device or get_settings().device
    dataset = load_index(data)
    train_set = dataset.filter(split="train")
    eval_set = _heldout(dataset)
    vocabulary = corpus_vocabulary(data, train_set)

    rows = []
    for variant in variants:
        model_config = model_config_for(preset, train_set, "decoder_text" if variant == "no_fusion" else None)
        cfg = train_config.model_copy(update={"mask_input": variant == "symmetric_mask"})
        variant_train = narrow_corpus(data, train_set, cfg.seed) if variant == "narrow_data" else train_set
        success, loss = _pretrain_finetune_score(
            f"{variant}-seed{cfg.seed}", variant_train, eval_set, vocabulary,
            model_config, cfg, finetune_config, device, progress,
        )
        logger.info("✅ Variant %s: success %.3f", variant, success)
        rows.append(AblationRow(variant=variant, mask_ratio=cfg.mask_ratio, success=success, final_pretext_loss=loss))

    report = AblationReport(kind="components", rows=rows)
    _write_json(Path(out_dir) / "component_ablation.json", report)
    return report


def ablate(kind: str, out_dir: Union[str, Path], **kwargs) -> RunResult:
    """Staged wrapper shared by both ablation subcommands."""
    logger.info("\n🧪 ABLATION STARTED (%s)", kind)
    runner = run_mask_ratio_ablation if kind == "mask_ratio" else run_component_ablation
    try:
        report = runner(out_dir=out_dir, **kwargs)
    except Exception as e:
        return _failed("ablation", e)
    return RunResult(status="SUCCESS", outputs={
        "out": str(out_dir),
        "plot": report.plot_path,
        "rows": [r.model_dump(mode="json") for r in report.rows],
    })


# =============================================================================
# PREDICTION
# =============================================================================

def read_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).astype(np.float32) / 255.0


def predict(
    image: Union[str, Path],
    instruction: str,
    checkpoint: Union[str, Path],
    out_dir: Union[str, Path],
    device: Optional[str] = None,
) -> RunResult:
    """
    Goal prediction, pick/place overlays and the extracted SE(2) action for one image.

    Writes goal_prediction.png, pick_overlay.png, place_overlay.png and action.json.
    """
    logger.info("\n🔮 PREDICTION STARTED")
    if not Path(checkpoint).is_file():
        return _failed("checkpoint", CheckpointError(f"checkpoint not found: {checkpoint}"))
    try:
        model = model_from_checkpoint(load_checkpoint(checkpoint), device or get_settings().device)
        model.eval()
    except Exception as e:
        return _failed("checkpoint", e)

    try:
        o_s = read_image(image)
        size = model.config.image_size
        if o_s.shape[:2] != (size, size):
            raise ShapeMismatchError(f"image is {o_s.shape[1]}x{o_s.shape[0]}, model expects {size}x{size}")
    except Exception as e:
        return _failed("input", e)

    try:
        with torch.no_grad():
            stack, goal = model.forward_affordance(model.as_batch(o_s), [instruction])
            probs = normalize(stack)
            action = extract_se2_batch(probs)[0]
    except Exception as e:
        return _failed("inference", e)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    goal_image = goal.image[0].detach().cpu().double().numpy()
    pick = probs.pick_logits[0].detach().cpu().double().numpy()
    place = probs.place_logits[0].detach().cpu().double().numpy().max(axis=0)
    files = {
        "goal": out_dir / "goal_prediction.png",
        "pick_overlay": out_dir / "pick_overlay.png",
        "place_overlay": out_dir / "place_overlay.png",
    }
    Image.fromarray(np.clip(np.round(goal_image * 255.0), 0, 255).astype(np.uint8)).save(files["goal"])
    Image.fromarray(overlay_heatmap(o_s, pick)).save(files["pick_overlay"])
    Image.fromarray(overlay_heatmap(o_s, place)).save(files["place_overlay"])
    files["action"] = _write_json(out_dir / "action.json", action.to_json_dict())
    logger.info("✅ Pick %s, place %s", action.pick.as_list(), action.place.as_list())

    return RunResult(status="SUCCESS", outputs={
        **{k: str(v) for k, v in files.items()},
        "action": action.to_json_dict(),
    })


# =============================================================================
# GRADIENT CHECK
# =============================================================================

def gradcheck(seed: int = 0, epsilon: float = DEFAULT_EPSILON, tolerance: float = GRADCHECK_TOLERANCE) -> RunResult:
    logger.info("\n🔬 GRADIENT CHECK STARTED")
    try:
        pretext_error = run_pretext_gradcheck(seed, epsilon)
        affordance_error = run_affordance_gradcheck(seed, epsilon)
    except Exception as e:
        return _failed("gradcheck", e)

    outputs = {
        "pretext_max_relative_error": pretext_error,
        "affordance_max_relative_error": affordance_error,
        "tolerance": tolerance,
    }
    worst = max(pretext_error, affordance_error)
    if worst >= tolerance:
        return RunResult(
            status="FAILED",
            stage="gradcheck",
            outputs=outputs,
            issues=[f"max relative error {worst:.3e} exceeds {tolerance:.0e}"],
        )
    logger.info("✅ Gradients match finite differences (worst %.3e)", worst)
    return RunResult(status="SUCCESS", outputs=outputs)


if __name__ == "__main__":
    result = gradcheck()
    print("\n📊 RUN RESULT:")
    print(f"Status: {result.status}")
    print(json.dumps(result.outputs, indent=2))
