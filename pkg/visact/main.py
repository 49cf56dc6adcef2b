"""
Command-line entry point for the visual-action learner.

One program, one subcommand per operation:

    python -m visact.main gen-data --out data/toy --episodes 2000 --seed 0
    python -m visact.main pretrain --data data/toy --out runs/pretext.ckpt
    python -m visact.main finetune --data data/toy --checkpoint runs/pretext.ckpt --out runs/aff.ckpt
    python -m visact.main eval --checkpoint runs/aff.ckpt --data data/toy --out runs/report.json
    python -m visact.main ablate-mask --data data/toy --out runs/ablation --ratios 0.75 0.95 1.0
    python -m visact.main ablate-components --data data/toy --out runs/components
    python -m visact.main predict --image start.png --instruction "put the red disc in the brown box" \
        --checkpoint runs/aff.ckpt --out runs/predict
    python -m visact.main gradcheck

Every option can also come from a flat KEY=value file passed with --config
(keys are option names with '_' for '-'); a flag on the command line wins over
the file, the file wins over the default. The run result is printed as JSON on
stdout. A failed run prints one JSON line to stderr and exits 1; a usage error
prints the same kind of line with stage "usage" and exits 2.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
from pydantic import ValidationError

from visact.models.schemas import FinetuneConfig, RunResult, TrainConfig
from visact.orchestrator import orchestrator
from visact.training.gradcheck import DEFAULT_EPSILON
from visact.utils.logging_setup import configure_logging
from visact.utils.settings import get_settings, merge_options, read_config_file

_TRAIN = TrainConfig()
_FINETUNE = FinetuneConfig()


@dataclass
class Option:
    flag: str
    default: object = None
    help: str = ""
    kwargs: dict = field(default_factory=dict)

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _switch(flag: str, help: str) -> Option:
    return Option(flag, False, help, {"action": "store_const", "const": True})


COMMON = [
    Option("--seed", 0, "Seed for every random choice of the run", {"type": int}),
    Option("--log-level", "INFO", "Logging level (VISACT_LOG_LEVEL overrides the default)"),
]

PRETRAIN_KNOBS = [
    Option("--preset", "desk", "Architecture preset", {"choices": ["desk", "base"]}),
    Option("--mask-ratio", _TRAIN.mask_ratio, "Goal-image mask ratio", {"type": float}),
    Option("--lr", _TRAIN.learning_rate, "Pretext learning rate", {"type": float}),
    Option("--weight-decay", _TRAIN.weight_decay, "AdamW weight decay", {"type": float}),
    Option("--batch-size", _TRAIN.batch_size, "Episodes per step", {"type": int}),
    Option("--steps", _TRAIN.steps, "Pretext optimizer steps", {"type": int}),
    Option("--loss-scope", _TRAIN.loss_scope, "Pixels scored by the L2 loss",
           {"choices": ["all_patches", "masked_only"]}),
    Option("--warmup-steps", None, "Linear warmup steps (default 5%% of steps)", {"type": int}),
    Option("--grad-clip", _TRAIN.grad_clip, "Global gradient-norm clip", {"type": float}),
    Option("--precision", _TRAIN.precision, "Parameter precision", {"choices": ["float32", "float64"]}),
    Option("--device", None, "Torch device (VISACT_DEVICE, else cpu)"),
    _switch("--progress", "Show progress bars"),
]

FINETUNE_KNOBS = [
    Option("--finetune-steps", _FINETUNE.steps, "Fine-tuning optimizer steps", {"type": int}),
    Option("--finetune-lr", _FINETUNE.learning_rate, "Fine-tuning learning rate", {"type": float}),
    Option("--finetune-batch-size", _FINETUNE.batch_size, "Fine-tuning episodes per step", {"type": int}),
]


@dataclass
class Command:
    summary: str
    options: List[Option]
    required: Sequence[str]
    handler: Callable[[dict], RunResult]


# =============================================================================
# HANDLERS
# =============================================================================

def _train_config(o: dict, **overrides) -> TrainConfig:
    return TrainConfig(
        mask_ratio=o["mask_ratio"],
        learning_rate=o["lr"],
        weight_decay=o["weight_decay"],
        batch_size=o["batch_size"],
        steps=o["steps"],
        seed=o["seed"],
        loss_scope=o["loss_scope"],
        warmup_steps=o["warmup_steps"],
        grad_clip=o["grad_clip"],
        precision=o["precision"],
        **overrides,
    )


def _ablation_finetune_config(o: dict) -> FinetuneConfig:
    return FinetuneConfig(
        task="affordance",
        learning_rate=o["finetune_lr"],
        batch_size=o["finetune_batch_size"],
        steps=o["finetune_steps"],
        seed=o["seed"],
        precision=o["precision"],
    )


def run_gen_data(o: dict) -> RunResult:
    split_options = {}
    if o["split_config"]:
        values = read_config_file(o["split_config"], orchestrator.SPLIT_DEFAULTS.keys())
        split_options = merge_options({}, values, orchestrator.SPLIT_DEFAULTS)
    return orchestrator.generate_corpus(
        o["out"],
        task=o["task"],
        episodes=o["episodes"],
        seed=o["seed"],
        split=o["split"],
        split_options=split_options,
        force=bool(o["force"]),
        workers=o["workers"],
    )


def run_pretrain(o: dict) -> RunResult:
    return orchestrator.pretrain(
        o["data"],
        o["out"],
        _train_config(o, mask_input=bool(o["mask_input"])),
        preset=o["preset"],
        fusion_mode=o["fusion_mode"],
        device=o["device"],
        progress=bool(o["progress"]),
    )


def run_finetune(o: dict) -> RunResult:
    config = FinetuneConfig(
        task=o["task"],
        learning_rate=o["lr"],
        weight_decay=o["weight_decay"],
        batch_size=o["batch_size"],
        steps=o["steps"],
        seed=o["seed"],
        warmup_steps=o["warmup_steps"],
        grad_clip=o["grad_clip"],
        freeze_backbone=bool(o["freeze_backbone"]),
        train_text_encoder=not o["freeze_text_encoder"],
        init=o["init"],
        precision=o["precision"],
    )
    return orchestrator.finetune(
        o["data"], o["checkpoint"], o["out"], config, device=o["device"], progress=bool(o["progress"])
    )


def run_eval(o: dict) -> RunResult:
    return orchestrator.evaluate(
        o["checkpoint"], o["data"], o["out"],
        split=o["split"], task=o["task"], workers=o["workers"], seed=o["seed"], device=o["device"],
    )


def run_ablate_mask(o: dict) -> RunResult:
    return orchestrator.ablate(
        "mask_ratio",
        o["out"],
        ratios=[float(r) for r in o["ratios"]],
        data=o["data"],
        train_config=_train_config(o),
        finetune_config=_ablation_finetune_config(o),
        preset=o["preset"],
        device=o["device"],
        progress=bool(o["progress"]),
    )


def run_ablate_components(o: dict) -> RunResult:
    return orchestrator.ablate(
        "components",
        o["out"],
        variants=list(o["variants"]),
        data=o["data"],
        train_config=_train_config(o),
        finetune_config=_ablation_finetune_config(o),
        preset=o["preset"],
        device=o["device"],
        progress=bool(o["progress"]),
    )


def run_predict(o: dict) -> RunResult:
    torch.manual_seed(o["seed"])
    return orchestrator.predict(o["image"], o["instruction"], o["checkpoint"], o["out"], device=o["device"])


def run_gradcheck(o: dict) -> RunResult:
    return orchestrator.gradcheck(seed=o["seed"], epsilon=o["epsilon"], tolerance=o["tolerance"])


COMMANDS: Dict[str, Command] = {
    "gen-data": Command(
        "Generate a procedural tabletop episode corpus",
        [
            Option("--out", None, "Corpus directory"),
            Option("--task", "packing_seq", "Scripted task",
                   {"choices": ["packing_seq", "packing_grp", "mixed"]}),
            Option("--episodes", 100, "Number of episodes", {"type": int}),
            Option("--split", "all", "Split tag of the episodes; 'all' uses the split fractions",
                   {"choices": ["train", "intra", "inter", "all"]}),
            Option("--split-config", None, "KEY=value file overriding class counts and split fractions"),
            _switch("--force", "Overwrite a non-empty output directory"),
            Option("--workers", 1, "Generation processes", {"type": int}),
        ],
        ("out",),
        run_gen_data,
    ),
    "pretrain": Command(
        "Masked goal-image prediction pretraining",
        [
            Option("--data", None, "Corpus directory (train split is used)"),
            Option("--out", None, "Checkpoint path"),
            Option("--fusion-mode", None, "Override the text-conditioning mode",
                   {"choices": ["fused", "decoder_text"]}),
            _switch("--mask-input", "Mask the input image too (symmetric masking)"),
            *PRETRAIN_KNOBS,
        ],
        ("data", "out"),
        run_pretrain,
    ),
    "finetune": Command(
        "Fine-tune one downstream head from a checkpoint",
        [
            Option("--data", None, "Corpus directory (train split is used)"),
            Option("--checkpoint", None, "Pretext checkpoint"),
            Option("--out", None, "Output checkpoint path"),
            Option("--task", _FINETUNE.task, "Head to train", {"choices": ["affordance", "action", "bbox"]}),
            Option("--lr", _FINETUNE.learning_rate, "Learning rate", {"type": float}),
            Option("--weight-decay", _FINETUNE.weight_decay, "AdamW weight decay", {"type": float}),
            Option("--batch-size", _FINETUNE.batch_size, "Episodes per step", {"type": int}),
            Option("--steps", _FINETUNE.steps, "Optimizer steps", {"type": int}),
            Option("--warmup-steps", None, "Linear warmup steps (default 5%% of steps)", {"type": int}),
            Option("--grad-clip", _FINETUNE.grad_clip, "Global gradient-norm clip", {"type": float}),
            Option("--init", _FINETUNE.init, "Start from the checkpoint or from random weights",
                   {"choices": ["pretrained", "scratch"]}),
            _switch("--freeze-backbone", "Train the head only"),
            _switch("--freeze-text-encoder", "Keep the text encoder fixed"),
            Option("--precision", _FINETUNE.precision, "Parameter precision", {"choices": ["float32", "float64"]}),
            Option("--device", None, "Torch device (VISACT_DEVICE, else cpu)"),
            _switch("--progress", "Show progress bars"),
        ],
        ("data", "checkpoint", "out"),
        run_finetune,
    ),
    "eval": Command(
        "Benchmark a checkpoint with the goal branch fully masked",
        [
            Option("--checkpoint", None, "Checkpoint to score"),
            Option("--data", None, "Corpus directory"),
            Option("--out", None, "EvalReport JSON path"),
            Option("--split", None, "Only this split", {"choices": ["train", "intra", "inter"]}),
            Option("--task", None, "Only this task", {"choices": ["packing_seq", "packing_grp"]}),
            Option("--workers", 1, "Scoring threads", {"type": int}),
            Option("--device", None, "Torch device (VISACT_DEVICE, else cpu)"),
        ],
        ("checkpoint", "data", "out"),
        run_eval,
    ),
    "ablate-mask": Command(
        "Masking-ratio sweep: pretrain, fine-tune and score one model per ratio",
        [
            Option("--data", None, "Corpus directory"),
            Option("--out", None, "Directory for the report and plot"),
            Option("--ratios", [0.75, 0.95, 1.0], "Mask ratios", {"type": float, "nargs": "+"}),
            *PRETRAIN_KNOBS,
            *FINETUNE_KNOBS,
        ],
        ("data", "out"),
        run_ablate_mask,
    ),
    "ablate-components": Command(
        "Component ablation with shared seeds and budgets",
        [
            Option("--data", None, "Corpus directory"),
            Option("--out", None, "Directory for the report"),
            Option("--variants", list(orchestrator.COMPONENT_VARIANTS), "Variants to run",
                   {"nargs": "+", "choices": list(orchestrator.COMPONENT_VARIANTS)}),
            *PRETRAIN_KNOBS,
            *FINETUNE_KNOBS,
        ],
        ("data", "out"),
        run_ablate_components,
    ),
    "predict": Command(
        "Goal image, affordance overlays and SE(2) action for one image",
        [
            Option("--image", None, "Start image (PNG, model image size)"),
            Option("--instruction", None, "Instruction text"),
            Option("--checkpoint", None, "Fine-tuned affordance checkpoint"),
            Option("--out", None, "Output directory"),
            Option("--device", None, "Torch device (VISACT_DEVICE, else cpu)"),
        ],
        ("image", "instruction", "checkpoint", "out"),
        run_predict,
    ),
    "gradcheck": Command(
        "Finite-difference gradient check on tiny 64-bit instances",
        [
            Option("--epsilon", DEFAULT_EPSILON, "Finite-difference step (relative-error floor is its square)",
                   {"type": float}),
            Option("--tolerance", orchestrator.GRADCHECK_TOLERANCE, "Largest accepted relative error",
                   {"type": float}),
        ],
        (),
        run_gradcheck,
    ),
}


# =============================================================================
# PARSER
# =============================================================================

class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are one JSON failure line on stderr."""

    def error(self, message: str) -> None:
        print(json.dumps({"status": "FAILED", "stage": "usage", "error": message}), file=sys.stderr)
        self.exit(2)


def build_parser() -> CliParser:
    parser = CliParser(
        prog="visact",
        description="Goal-image prediction pretraining for language-conditioned manipulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=CliParser)
    for name, command in COMMANDS.items():
        p = sub.add_parser(name, help=command.summary, description=command.summary)
        p.add_argument("--config", default=None, help="Flat KEY=value option file (default: None)")
        for opt in COMMON + command.options:
            p.add_argument(opt.flag, default=None, help=f"{opt.help} (default: {opt.default})", **opt.kwargs)
    return parser


def _emit_failure(result: RunResult) -> None:
    error = "; ".join(result.issues or []) or "unknown error"
    print(json.dumps({"status": "FAILED", "stage": result.stage, "error": error}), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = COMMANDS[args.command]
    options = COMMON + command.options
    defaults = {o.dest: o.default for o in options}
    if args.log_level is None:
        defaults["log_level"] = get_settings().log_level

    try:
        file_values = read_config_file(args.config, defaults.keys()) if args.config else {}
    except (FileNotFoundError, ValueError) as e:
        _emit_failure(RunResult(status="FAILED", stage="config", issues=[str(e)]))
        return 1

    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    opts = merge_options(flags, file_values, defaults)
    missing = [k for k in command.required if opts.get(k) in (None, "")]
    if missing:
        parser.error(f"{args.command}: missing required option(s) " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))

    configure_logging(opts["log_level"])
    try:
        result = command.handler(opts)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        result = RunResult(status="FAILED", stage="config", issues=[str(e)])
    except Exception as e:
        _emit_failure(RunResult(status="FAILED", stage="run", issues=[f"{type(e).__name__}: {e}"]))
        return 1

    print(json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True))
    if result.status != "SUCCESS":
        _emit_failure(result)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
