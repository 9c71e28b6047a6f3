"""Two-stage training: meta-auxiliary pre-training and meta-transfer fine-tuning.

Pre-training (MAXL) alternates over an epoch:

* phase A updates the whole multi-task network with Adam on
  ``L_pri + L_aux(mask)`` while the mask network is frozen;
* phase B takes a plain virtual step ``theta1+ = theta1 - alpha * grad L`` with
  the graph retained, and updates the mask network with Adam on
  ``L_pri(theta1+) + lambda_G * L_G``. The mask enters ``L_pri(theta1+)`` only
  through the virtual step, so this is a second-order gradient.

Fine-tuning (MTL) runs ``K`` plain inner steps on the heads per sample with
``lambda_in * L_aux`` and then one Adam step on everything with
``lambda_out * sum_j L_pri`` evaluated at the adapted heads, differentiating
through all inner steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .degrade import DegradationSpec, degrade_random_sequence
from .errors import ConfigError, TrainingAborted
from .imaging import PatchPair, list_images, load_image, load_paired_folder, sample_patches
from .losses import aux_loss, collapse_score, gradient_loss, primary_loss
from .networks import (
    MaskNetParams,
    NetworkConfig,
    ParamPartition,
    build_maskgen,
    build_network,
    forward_maskgen,
    forward_multitask,
    to_tensor,
)

log = logging.getLogger(__name__)

STAGE_MAXL = "maxl-pretrained"
STAGE_MTL = "mtl-finetuned"
LOG_HEADER = ["epoch", "iter", "phase", "L_pri", "L_aux", "L_G", "collapse_score"]


@dataclass
class MetaConfig:
    """Hyperparameters for either stage.

    The plain defaults are the pre-training values; use
    :meth:`finetune_defaults` for the fine-tuning stage.
    """

    alpha: float = 1e-3
    beta: float = 1e-3
    K: int = 5
    lambda_G: float = 0.01
    lambda_in: float = 10.0
    lambda_out: float = 10.0
    batch_size: int = 16
    meta_batch_N: int = 2
    patch_size: int = 128
    epochs: int = 100
    seed: int = 0
    aux_loss: str = "masked"
    first_order: bool = False
    update_scope: str = "heads"
    patches_per_image: int = 1
    val_crop: int = 256
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.batch_size < 1 or self.meta_batch_N < 1 or self.patch_size < 1:
            raise ConfigError("batch sizes and patch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if min(self.lambda_G, self.lambda_in, self.lambda_out) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.aux_loss not in ("masked", "plain"):
            raise ConfigError(f"aux_loss must be 'masked' or 'plain', got {self.aux_loss!r}")
        if self.update_scope not in ("heads", "all"):
            raise ConfigError(f"update_scope must be 'heads' or 'all', got {self.update_scope!r}")
        if self.patches_per_image < 1 or self.checkpoint_every < 1:
            raise ConfigError("patches_per_image and checkpoint_every must be >= 1")

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "MetaConfig":
        return cls(**overrides)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "MetaConfig":
        base = dict(alpha=5e-5, beta=5e-5, K=5, lambda_in=10.0, lambda_out=10.0, meta_batch_N=2, epochs=150)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def _adam(tensors: list[torch.Tensor]) -> torch.optim.Adam:
    return torch.optim.Adam(tensors, lr=1.0, foreach=False)


@dataclass
class TrainState:
    theta1: ParamPartition
    theta2: MaskNetParams
    opt_theta1: torch.optim.Adam
    opt_theta2: torch.optim.Adam
    epoch: int = 0
    seed: int = 0
    stage: str = STAGE_MAXL
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, theta1: ParamPartition, theta2: MaskNetParams, seed: int = 0, stage: str = STAGE_MAXL):
        for t in theta1.tensors() + theta2.tensors():
            t.requires_grad_(True)
        return cls(theta1, theta2, _adam(theta1.tensors()), _adam(theta2.tensors()), seed=seed, stage=stage)

    def reset_optimizers(self) -> None:
        self.opt_theta1 = _adam(self.theta1.tensors())
        self.opt_theta2 = _adam(self.theta2.tensors())


def init_state(net_cfg: NetworkConfig, seed: int = 0, dtype=torch.float32) -> TrainState:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return TrainState.create(build_network(net_cfg, gen, dtype), build_maskgen(net_cfg, gen, dtype), seed=seed)


def adam_step(opt: torch.optim.Adam, tensors, grads, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr
    for t, g in zip(tensors, grads):
        t.grad = torch.zeros_like(t) if g is None else g.detach()
    opt.step()
    opt.zero_grad(set_to_none=True)


def with_tensors(params: ParamPartition, tensors: Sequence[torch.Tensor], parts=("body", "pri", "aux")):
    """Rebuild a partition, substituting ``tensors`` (in named order) for ``parts``."""
    it = iter(tensors)
    dicts = {}
    for part in ("body", "pri", "aux"):
        src = getattr(params, part)
        dicts[part] = {k: next(it) for k in src} if part in parts else src
    return ParamPartition(params.config, dicts["body"], dicts["pri"], dicts["aux"])


def _scope_parts(scope: str):
    return ("pri", "aux") if scope == "heads" else ("body", "pri", "aux")


def _scope_tensors(params: ParamPartition, parts) -> list[torch.Tensor]:
    return [t for part in parts for t in getattr(params, part).values()]


def _trainable(tensors) -> list[torch.Tensor]:
    for t in tensors:
        if not t.requires_grad:
            t.requires_grad_(True)
    return list(tensors)


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def _log_row(log_fn, epoch, it, phase, l_pri, l_aux, l_g, mask):
    if log_fn is None:
        return
    log_fn({
        "epoch": epoch,
        "iter": it,
        "phase": phase,
        "L_pri": float(l_pri),
        "L_aux": float(l_aux),
        "L_G": float(l_g),
        "collapse_score": float(collapse_score(mask.detach()).mean()),
    })


# -- MAXL -------------------------------------------------------------------


def auxiliary_training_gradients(theta1, theta2, noisy, clean, cfg: MetaConfig):
    """Phase A: gradient of ``L_pri + L_aux`` with respect to all of theta1."""
    with torch.no_grad():
        mask = forward_maskgen(theta2, noisy)
    t1 = _trainable(theta1.tensors())
    clean_hat, noisy_hat = forward_multitask(theta1, noisy)
    l_pri = primary_loss(clean_hat, clean)
    l_aux = aux_loss(cfg.aux_loss, noisy_hat, noisy, mask)
    loss = l_pri + l_aux
    grads = torch.autograd.grad(loss, t1, allow_unused=True)
    return loss, grads, (l_pri.detach(), l_aux.detach(), mask)


def mask_meta_gradients(theta1, theta2, noisy, clean, cfg: MetaConfig):
    """Phase B: gradient for theta2 through a plain virtual step of theta1."""
    t1, t2 = _trainable(theta1.tensors()), _trainable(theta2.tensors())
    clean_hat, noisy_hat = forward_multitask(theta1, noisy)
    mask = forward_maskgen(theta2, noisy)
    l_aux = aux_loss(cfg.aux_loss, noisy_hat, noisy, mask)
    inner = primary_loss(clean_hat, clean) + l_aux
    g1 = torch.autograd.grad(inner, t1, create_graph=not cfg.first_order, allow_unused=True)
    virtual = []
    for t, g in zip(t1, g1):
        if g is None:
            virtual.append(t)
        else:
            virtual.append(t - cfg.alpha * (g.detach() if cfg.first_order else g))
    clean_plus, _ = forward_multitask(with_tensors(theta1, virtual), noisy)
    l_pri = primary_loss(clean_plus, clean)
    l_g = gradient_loss(mask, noisy)
    meta = l_pri + cfg.lambda_G * l_g
    g2 = torch.autograd.grad(meta, t2, allow_unused=True)
    return meta, g2, (l_pri.detach(), l_aux.detach(), l_g.detach(), mask)


def _as_batch(batch, dtype):
    if isinstance(batch, (tuple, list)) and len(batch) == 2 and isinstance(batch[0], torch.Tensor):
        return batch[0].to(dtype), batch[1].to(dtype)
    pairs = list(batch)
    return to_tensor([p.noisy for p in pairs], dtype), to_tensor([p.clean for p in pairs], dtype)


def _dtype(state: TrainState):
    return state.theta1.tensors()[0].dtype


def maxl_epoch(state: TrainState, data, cfg: MetaConfig, log_fn: Callable | None = None,
               phase_b_data=None) -> TrainState:
    """One pass of phase A over ``data`` followed by one pass of phase B.

    ``data`` is a sequence of batches, each either a ``(noisy, clean)`` NCHW
    tensor pair or a list of :class:`PatchPair`. ``phase_b_data`` defaults to
    ``data``.
    """
    dtype = _dtype(state)
    t1, t2 = state.theta1.tensors(), state.theta2.tensors()
    for it, batch in enumerate(data):
        noisy, clean = _as_batch(batch, dtype)
        loss, grads, (l_pri, l_aux, mask) = auxiliary_training_gradients(state.theta1, state.theta2, noisy, clean, cfg)
        if not _finite(loss):
            raise TrainingAborted(f"non-finite loss in auxiliary step (epoch {state.epoch}, iter {it})", state)
        adam_step(state.opt_theta1, t1, grads, cfg.alpha)
        _log_row(log_fn, state.epoch, it, "A", l_pri, l_aux, math.nan, mask)

    for it, batch in enumerate(data if phase_b_data is None else phase_b_data):
        noisy, clean = _as_batch(batch, dtype)
        meta, grads, (l_pri, l_aux, l_g, mask) = mask_meta_gradients(state.theta1, state.theta2, noisy, clean, cfg)
        if not _finite(meta):
            raise TrainingAborted(f"non-finite loss in meta step (epoch {state.epoch}, iter {it})", state)
        adam_step(state.opt_theta2, t2, grads, cfg.beta)
        _log_row(log_fn, state.epoch, it, "B", l_pri, l_aux, l_g, mask)
    return state


# -- MTL --------------------------------------------------------------------


def inner_adapt(theta1: ParamPartition, theta2: MaskNetParams, noisy: torch.Tensor, cfg: MetaConfig,
                scope: str | None = None, create_graph: bool | None = None):
    """Run ``cfg.K`` plain gradient steps of ``lambda_in * L_aux`` on the scoped parameters.

    Returns ``(adapted_partition, losses)``; ``adapted_partition`` is ``None``
    when a loss turns non-finite. With ``create_graph`` the adapted tensors
    stay differentiable functions of theta1 and theta2.
    """
    scope = cfg.update_scope if scope is None else scope
    if create_graph is None:
        create_graph = not cfg.first_order
    parts = _scope_parts(scope)
    _trainable(theta1.tensors())
    _trainable(theta2.tensors())
    current = theta1
    losses = []
    for _ in range(cfg.K):
        clean_hat, noisy_hat = forward_multitask(current, noisy)
        mask = forward_maskgen(theta2, noisy)
        loss = cfg.lambda_in * aux_loss(cfg.aux_loss, noisy_hat, noisy, mask)
        losses.append(float(loss.detach()))
        if not _finite(loss):
            return None, losses
        tensors = _scope_tensors(current, parts)
        grads = torch.autograd.grad(loss, tensors, create_graph=create_graph, allow_unused=True)
        stepped = []
        for t, g in zip(tensors, grads):
            if g is None:
                stepped.append(t)
            else:
                stepped.append(t - cfg.alpha * (g if create_graph else g.detach()))
        current = with_tensors(current, stepped, parts)
    return current, losses


def mtl_meta_gradients(theta1: ParamPartition, theta2: MaskNetParams, meta_batch, cfg: MetaConfig,
                       scope: str | None = None):
    """Outer objective ``lambda_out * sum_j L_pri`` after per-sample inner adaptation, and its gradients.

    Returns ``(outer_loss, grads_theta1, grads_theta2, info)``; ``outer_loss``
    is ``None`` when every sample diverged in its inner loop.
    """
    dtype = theta1.tensors()[0].dtype
    total = None
    info = {"skipped": 0, "inner_losses": [], "masks": []}
    for sample in meta_batch:
        noisy, clean = _as_batch([sample] if isinstance(sample, PatchPair) else sample, dtype)
        adapted, losses = inner_adapt(theta1, theta2, noisy, cfg, scope)
        info["inner_losses"].append(losses)
        if adapted is None:
            log.warning("non-finite inner loss; skipping sample")
            info["skipped"] += 1
            continue
        clean_hat, _ = forward_multitask(adapted, noisy)
        l_pri = primary_loss(clean_hat, clean)
        total = l_pri if total is None else total + l_pri
        with torch.no_grad():
            info["masks"].append(forward_maskgen(theta2, noisy))
    if total is None:
        return None, None, None, info
    outer = cfg.lambda_out * total
    t1, t2 = theta1.tensors(), theta2.tensors()
    grads = torch.autograd.grad(outer, t1 + t2, allow_unused=True)
    return outer, grads[: len(t1)], grads[len(t1):], info


def mtl_step(state: TrainState, meta_batch, cfg: MetaConfig, log_fn: Callable | None = None,
             it: int = 0, scope: str | None = None) -> TrainState:
    outer, g1, g2, info = mtl_meta_gradients(state.theta1, state.theta2, meta_batch, cfg, scope)
    if outer is None:
        log.warning("every sample in the meta-batch diverged; no update")
        return state
    if not _finite(outer):
        raise TrainingAborted(f"non-finite outer loss (epoch {state.epoch}, iter {it})", state)
    adam_step(state.opt_theta1, state.theta1.tensors(), g1, cfg.beta)
    adam_step(state.opt_theta2, state.theta2.tensors(), g2, cfg.beta)
    if log_fn is not None:
        inner = [ls[-1] for ls in info["inner_losses"] if ls and math.isfinite(ls[-1])]
        mask = torch.cat(info["masks"]) if info["masks"] else torch.zeros(1, 1, 1, 1)
        value = float(outer.detach())
        _log_row(log_fn, state.epoch, it, "mtl", value / cfg.lambda_out if cfg.lambda_out else value,
                 float(np.mean(inner)) if inner else math.nan, math.nan, mask)
    return state


# -- data -------------------------------------------------------------------


def _load_clean_corpus(corpus) -> list[np.ndarray]:
    if isinstance(corpus, (str, Path)):
        path = Path(corpus)
        if not path.is_dir():
            raise ConfigError(f"clean corpus {path} is not a directory")
        files = list_images(path)
        if not files:
            raise ConfigError(f"clean corpus {path} contains no images")
        return [load_image(f) for f in files]
    images = list(corpus)
    if not images:
        raise ConfigError("empty clean corpus")
    return images


def _load_paired_corpora(corpora) -> list[PatchPair]:
    pool = []
    for c in corpora:
        if isinstance(c, (str, Path)):
            try:
                pool.extend(p for _, p in load_paired_folder(c))
            except FileNotFoundError as exc:
                raise ConfigError(str(exc)) from exc
        elif isinstance(c, PatchPair):
            pool.append(c)
        else:
            pool.extend(p for p in c)
    if not pool:
        raise ConfigError("fine-tuning corpora contain no image pairs")
    return pool


def synthetic_batches(clean_images, spec: DegradationSpec, cfg: MetaConfig, epoch: int, shuffle_tag: int = 0):
    """Degrade every image (fresh parameters per image and epoch), crop patches and batch them."""
    patches = []
    for i, img in enumerate(clean_images):
        rng = np.random.default_rng([cfg.seed, epoch, i])
        noisy, _ = degrade_random_sequence(img, spec, rng)
        size = min(cfg.patch_size, *img.shape[:2])
        patches.extend(sample_patches(PatchPair(noisy, img), size, cfg.patches_per_image, rng))
    return _shuffle_batches(patches, cfg.batch_size, np.random.default_rng([cfg.seed, epoch, 1_000_003, shuffle_tag]))


def _shuffle_batches(patches, batch_size, rng):
    order = rng.permutation(len(patches))
    batches = []
    for start in range(0, len(order), batch_size):
        batches.append([patches[j] for j in order[start : start + batch_size]])
    return batches


# -- stage drivers ------------------------------------------------------------


def _validate(state: TrainState, val_pairs, cfg: MetaConfig) -> dict:
    from .adapt_eval import validation_metrics

    return validation_metrics(state.theta1, state.theta2, val_pairs, cfg.val_crop)


def _run_epochs(state, cfg, epoch_fn, val_pairs, on_epoch_end):
    start = state.epoch
    if val_pairs:
        metrics = _validate(state, val_pairs, cfg)
        metrics["epoch"] = start
        state.history.append(metrics)
        log.info("epoch %d validation: %s", start, metrics)
    if on_epoch_end is not None:
        on_epoch_end(state)
    for _ in range(cfg.epochs):
        epoch_fn(state)
        state.epoch += 1
        metrics = {"epoch": state.epoch}
        if val_pairs:
            metrics.update(_validate(state, val_pairs, cfg))
            log.info("epoch %d validation: %s", state.epoch, metrics)
        state.history.append(metrics)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def pretrain(corpus, spec: DegradationSpec, cfg: MetaConfig, net_cfg: NetworkConfig | None = None,
             state: TrainState | None = None, val_pairs=None, log_fn=None, on_epoch_end=None) -> TrainState:
    """MAXL pre-training on synthetically degraded clean images.

    ``on_epoch_end(state)`` is called after initialization and after every
    epoch; the command-line driver uses it for checkpointing.
    """
    images = _load_clean_corpus(corpus)
    if state is None:
        state = init_state(net_cfg or NetworkConfig(), cfg.seed)
    state.stage = STAGE_MAXL

    def epoch_fn(st):
        batches_a = synthetic_batches(images, spec, cfg, st.epoch)
        batches_b = synthetic_batches(images, spec, cfg, st.epoch, shuffle_tag=1)
        maxl_epoch(st, batches_a, cfg, log_fn, phase_b_data=batches_b)

    return _run_epochs(state, cfg, epoch_fn, val_pairs, on_epoch_end)


def finetune(state: TrainState, corpora, cfg: MetaConfig, val_pairs=None, log_fn=None,
             on_epoch_end=None, scope: str | None = None) -> TrainState:
    """Meta-transfer fine-tuning over the pooled paired corpora.

    Samples are drawn uniformly from the pool with no task grouping. Adam
    moments are reset when the stage begins.
    """
    pool = _load_paired_corpora(corpora)
    if state.stage != STAGE_MTL:
        state.stage = STAGE_MTL
        state.epoch = 0
        state.reset_optimizers()
    n = cfg.meta_batch_N
    steps = math.ceil(len(pool) / n)

    def epoch_fn(st):
        for it in range(steps):
            rng = np.random.default_rng([cfg.seed, st.epoch, it])
            idx = rng.choice(len(pool), size=n, replace=len(pool) < n)
            batch = []
            for j in idx:
                pair = pool[int(j)]
                size = min(cfg.patch_size, *pair.noisy.shape[:2])
                batch.extend(sample_patches(pair, size, 1, rng))
            mtl_step(st, batch, cfg, log_fn, it=it, scope=scope)

    return _run_epochs(state, cfg, epoch_fn, val_pairs, on_epoch_end)

