"""Saliency-branch initialisation protocols on an abundant base task.

Stage one trains the plain RGB network on the base task. ``scratch`` then
attaches a Xavier-initialised saliency branch; ``pretrained`` first trains
the two-branch network on the base task (with saliency maps generated for
it, RGB layers up to the fusion level held fixed) and transfers every
weight except the classification head.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Sample
from .model import ModelState, NetworkConfig, build, rgb_branch_params, transfer
from .train import Hyperparams, TrainingError, train

log = logging.getLogger(__name__)

SaliencyFn = Callable[[Sample], np.ndarray]


@dataclass
class Pretrained:
    backbone: ModelState
    two_branch: ModelState | None = None
    backbone_losses: list[float] = dataclasses.field(default_factory=list)
    two_branch_losses: list[float] = dataclasses.field(default_factory=list)


def base_config(config: NetworkConfig, num_classes: int, variant: str | None = None) -> NetworkConfig:
    variant = variant or config.variant
    return dataclasses.replace(
        config,
        variant=variant,
        num_classes=num_classes,
        init="none",
        pool_position=config.pool_position if variant == "delayed_fusion" else None,
    )


def with_saliency(samples: Sequence[Sample], saliency_fn: SaliencyFn | None) -> list[Sample]:
    if all(s.saliency is not None for s in samples):
        return list(samples)
    if saliency_fn is None:
        raise TrainingError("pretrained mode needs saliency maps or a saliency generator for the base task")
    return [dataclasses.replace(s, saliency=saliency_fn(s)) for s in samples]


def pretrain_backbone(base: Sequence[Sample], config: NetworkConfig, hyper: Hyperparams, seed: int):
    num_classes = 1 + max(s.label for s in base)
    cfg = base_config(config, num_classes, "baseline_rgb")
    result = train(build(cfg, seed), cfg, base, hyper, seed)
    state = result.state
    state.provenance = {k: f"backbone:{seed}" for k in state.params}
    log.info("backbone pretrained, final loss %.4f", result.losses[-1] if result.losses else float("nan"))
    return state, result.losses


def pretrain_saliency(base: Sequence[Sample], backbone: ModelState, config: NetworkConfig, hyper: Hyperparams,
                      seed: int, saliency_fn: SaliencyFn | None = None):
    if config.variant == "baseline_rgb":
        raise TrainingError("baseline_rgb has no saliency branch to pretrain")
    base = with_saliency(base, saliency_fn)
    num_classes = 1 + max(s.label for s in base)
    cfg = base_config(config, num_classes)
    state = transfer(backbone, cfg, seed, skip_saliency=True)
    # the base-task head is part of the backbone, keep it
    for name in ("fc8.w", "fc8.b"):
        state.params[name] = backbone.params[name].copy()
    frozen = rgb_branch_params(cfg) if cfg.variant == "delayed_fusion" else ()
    result = train(state, cfg, base, hyper, seed, frozen=frozen)
    state = result.state
    state.provenance = {
        k: (f"backbone:{seed}" if k in frozen else f"two-branch:{seed}") for k in state.params
    }
    return state, result.losses


def pretrain_all(base: Sequence[Sample], config: NetworkConfig, mode: str, hyper: Hyperparams, seed: int,
                 saliency_fn: SaliencyFn | None = None) -> Pretrained:
    """Run the base-task stages needed for ``mode`` and keep the results."""
    if mode not in ("scratch", "pretrained"):
        raise TrainingError(f"unknown pretraining mode {mode!r}")
    if mode == "pretrained":
        # fail before the expensive first stage
        with_saliency(base[:1], saliency_fn)
    backbone, losses = pretrain_backbone(base, config, hyper, seed)
    bundle = Pretrained(backbone, backbone_losses=losses)
    if mode == "pretrained":
        bundle.two_branch, bundle.two_branch_losses = pretrain_saliency(
            base, backbone, config, hyper, seed, saliency_fn
        )
    return bundle


def pretrain_protocol(base: Sequence[Sample], config: NetworkConfig, mode: str, seed: int,
                      hyper: Hyperparams | None = None, saliency_fn: SaliencyFn | None = None,
                      target_seed: int | None = None) -> ModelState:
    """Target-task model whose head (and, for ``scratch``, saliency branch) is
    freshly Xavier-initialised from ``target_seed``."""
    hyper = hyper or Hyperparams()
    bundle = pretrain_all(base, config, mode, hyper, seed, saliency_fn)
    target_seed = seed if target_seed is None else target_seed
    if mode == "scratch" or config.variant == "baseline_rgb":
        return transfer(bundle.backbone, config, target_seed, skip_saliency=True)
    return transfer(bundle.two_branch, config, target_seed)
