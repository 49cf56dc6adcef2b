"""
Finite-difference gradient verification on tiny 64-bit instances.

Numeric gradients use the fourth-order central stencil

    (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h

and the relative error of one element is |a - n| / max(|a|, |n|, h^2). With the
default h = 1e-3 the floor is 1e-6: gradients at least that large are held to
the relative tolerance, smaller ones to tolerance * 1e-6 in absolute terms.
"""

import logging
from typing import Any, Callable, Iterable, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from visact.models.schemas import (
    EncoderConfig,
    FusionConfig,
    HeadConfig,
    ModelConfig,
    TextConfig,
)
from visact.nets.encoders import Vocabulary, sample_mask
from visact.nets.heads import AffordanceHead
from visact.nets.model import VisualActionModel, build_model
from visact.training.trainer import pretext_loss

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-3
GRADCHECK_HEADS = ("affordance_head", "action_head", "bbox_head")


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    module: nn.Module,
    loss_fn: Callable[[nn.Module, Any], torch.Tensor],
    instance: Any,
    epsilon: float = DEFAULT_EPSILON,
    parameters: Optional[Iterable[nn.Parameter]] = None,
) -> float:
    """
    Compare autograd against central finite differences for every parameter element.

    Args:
        module: Module whose parameters are perturbed.
        loss_fn: loss_fn(module, instance) -> scalar tensor.
        instance: Fixed inputs passed to loss_fn.
        epsilon: Finite-difference step h; the relative-error floor is h^2.
        parameters: Subset of parameters to check; defaults to all.

    Returns:
        Worst relative error.

    Raises:
        ValueError: epsilon <= 0 or a parameter not in float64.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    params = list(parameters) if parameters is not None else list(module.parameters())
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient checks need float64 parameters")

    module.zero_grad(set_to_none=True)
    loss = loss_fn(module, instance)
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    def shifted(flat: torch.Tensor, i: int, orig: float, step: float) -> float:
        flat[i] = orig + step
        return loss_fn(module, instance).item()

    floor = epsilon * epsilon
    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.view(-1)
            g = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                near = shifted(flat, i, orig, epsilon) - shifted(flat, i, orig, -epsilon)
                far = shifted(flat, i, orig, 2 * epsilon) - shifted(flat, i, orig, -2 * epsilon)
                flat[i] = orig
                numeric = (8.0 * near - far) / (12.0 * epsilon)
                worst = max(worst, relative_error(g[i].item(), numeric, floor))
    return worst


# =============================================================================
# TINY INSTANCES
# =============================================================================

def tiny_model_config() -> ModelConfig:
    """4x4 images, patch 2 (N=4), D=16, L=3, one fusion stage, one decoder block."""
    return ModelConfig(
        image_size=4,
        encoder=EncoderConfig(embed_dim=16, depth_self=1, depth_bidir=1, heads=2, mlp_ratio=2.0, patch_size=2),
        text=TextConfig(text_dim=8, depth=1, heads=2, max_len=3),
        fusion=FusionConfig(n_fusion_stages=1, decoder_depth=1, decoder_dim=16, heads=2),
        heads=HeadConfig(affordance_channels=4, action_hidden=8, bbox_hidden=8),
    )


def tiny_pretext_instance(seed: int = 0) -> Tuple[VisualActionModel, Callable, dict]:
    """
    Composite representation + goal head + L2 on a tiny 64-bit instance.

    Returns:
        (model, loss_fn, instance); check only model parameters outside the
        unused downstream heads.
    """
    vocab = Vocabulary(["disc", "put", "red"])
    model = build_model(tiny_model_config(), vocab, seed).double()
    rng = np.random.default_rng(seed)
    instance = {
        "o_s": torch.from_numpy(rng.uniform(0, 1, size=(1, 4, 4, 3))),
        "o_f": torch.from_numpy(rng.uniform(0, 1, size=(1, 4, 4, 3))),
        "instruction": "put red disc",
        "mask": sample_mask(model.grid, 0.5, seed),
    }

    def loss_fn(m: VisualActionModel, inst: dict) -> torch.Tensor:
        pred, _ = m.forward_pretext(inst["o_s"], inst["o_f"], [inst["instruction"]], inst["mask"])
        return pretext_loss(pred, inst["o_f"], inst["mask"], "all_patches", m.grid)

    return model, loss_fn, instance


def pretext_parameters(model: VisualActionModel):
    return [p for n, p in model.named_parameters() if not n.startswith(GRADCHECK_HEADS)]


def tiny_affordance_instance(seed: int = 0) -> Tuple[AffordanceHead, Callable, dict]:
    """Conv affordance head with cross-entropy on an 8x8 instance."""
    torch.manual_seed(seed)
    head = AffordanceHead(5, HeadConfig(affordance_channels=4)).double()
    rng = np.random.default_rng(seed)
    instance = {
        "x": torch.from_numpy(rng.normal(size=(1, 5, 8, 8))),
        "pick": torch.tensor([int(rng.integers(64))]),
        "place": torch.tensor([int(rng.integers(36 * 64))]),
    }

    def loss_fn(m: AffordanceHead, inst: dict) -> torch.Tensor:
        out = m(inst["x"])
        return (
            F.cross_entropy(out[:, 0].reshape(1, -1), inst["pick"])
            + F.cross_entropy(out[:, 1:].reshape(1, -1), inst["place"])
        )

    return head, loss_fn, instance


def run_pretext_gradcheck(seed: int = 0, epsilon: float = DEFAULT_EPSILON) -> float:
    model, loss_fn, instance = tiny_pretext_instance(seed)
    error = gradient_check(model, loss_fn, instance, epsilon, pretext_parameters(model))
    logger.info("🔬 Gradient check (pretext, seed %d): max relative error %.3e", seed, error)
    return error


def run_affordance_gradcheck(seed: int = 0, epsilon: float = DEFAULT_EPSILON) -> float:
    head, loss_fn, instance = tiny_affordance_instance(seed)
    error = gradient_check(head, loss_fn, instance, epsilon)
    logger.info("🔬 Gradient check (affordance head, seed %d): max relative error %.3e", seed, error)
    return error
