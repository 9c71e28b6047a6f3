"""Desk-scale smoke pipeline: a short pre-train, fine-tune and evaluation on procedural images.

The recipe keeps every algorithmic setting at its default except the
pre-training rate ``alpha``, which is halved: at 1e-3 the unnormalized
network trained with L1 losses diverges within a few hundred Adam steps on
this tiny corpus, while 5e-4 trains stably.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .adapt_eval import AdaptConfig, evaluate
from .degrade import DegradationSpec
from .meta_train import MetaConfig, TrainState, finetune, pretrain
from .networks import NetworkConfig
from .synthetic import clean_images, noisy_pairs


@dataclass
class SmokeRecipe:
    n_train: int = 16
    image_size: int = 64
    n_val: int = 4
    n_finetune: int = 16
    n_test: int = 8
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pretrain: MetaConfig = field(default_factory=lambda: MetaConfig.pretrain_defaults(
        alpha=5e-4, epochs=5, patch_size=16, patches_per_image=128, val_crop=64))
    finetune: MetaConfig = field(default_factory=lambda: MetaConfig.finetune_defaults(
        epochs=3, patch_size=32, val_crop=64))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)


@dataclass
class SmokeData:
    train: list
    val: list
    finetune: list
    test: list


def smoke_data(recipe: SmokeRecipe) -> SmokeData:
    s, size = recipe.seed, recipe.image_size
    return SmokeData(
        train=clean_images(recipe.n_train, size, seed=s + 1),
        val=noisy_pairs(recipe.n_val, size, seed=s + 2),
        finetune=[p for _, p in noisy_pairs(recipe.n_finetune, size, seed=s + 3)],
        test=noisy_pairs(recipe.n_test, size, seed=s + 4),
    )


def run_pretrain(recipe: SmokeRecipe, data: SmokeData, log_fn=None, on_epoch_end=None) -> tuple[TrainState, float]:
    start = time.perf_counter()
    state = pretrain(data.train, DegradationSpec(), recipe.pretrain, recipe.network,
                     val_pairs=data.val, log_fn=log_fn, on_epoch_end=on_epoch_end)
    return state, time.perf_counter() - start


def run_finetune(recipe: SmokeRecipe, data: SmokeData, state: TrainState, log_fn=None) -> tuple[TrainState, float]:
    start = time.perf_counter()
    state = finetune(state, [data.finetune], recipe.finetune, val_pairs=data.val, log_fn=log_fn)
    return state, time.perf_counter() - start


def run_evaluation(recipe: SmokeRecipe, data: SmokeData, state: TrainState):
    crop = recipe.image_size
    before = evaluate(data.test, state.theta1, state.theta2, "no-adapt", crop)
    after = evaluate(data.test, state.theta1, state.theta2, "adapt", crop, recipe.adapt)
    return before, after
