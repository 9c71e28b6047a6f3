"""Per-image test-time adaptation, evaluation harness and diagnostic figures."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DomainError
from .imaging import MetricReport, center_crop, load_paired_folder, psnr, save_image, ssim, SSIM_WINDOW
from .losses import aux_loss, collapse_score, primary_loss
from .networks import (
    MaskNetParams,
    ParamPartition,
    clone_heads,
    forward_maskgen,
    forward_multitask,
    map_mask,
    map_partition,
    primary_features,
    replace_heads,
    to_image,
    to_tensor,
)

log = logging.getLogger(__name__)


@dataclass
class AdaptConfig:
    K: int = 5
    alpha: float = 1e-5
    restore_after: bool = True
    aux_loss: str = "masked"

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.aux_loss not in ("masked", "plain"):
            raise ConfigError(f"aux_loss must be 'masked' or 'plain', got {self.aux_loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptTrace:
    # (step, auxiliary loss before the update, predicted clean image after it)
    per_step: list[tuple[int, float, torch.Tensor | None]] = field(default_factory=list)
    final_clean: torch.Tensor | None = None
    initial_clean: torch.Tensor | None = None
    diverged: bool = False


def _frozen(theta1: ParamPartition, theta2: MaskNetParams):
    return map_partition(theta1, torch.Tensor.detach), map_mask(theta2, torch.Tensor.detach)


def _as_input(noisy, dtype) -> torch.Tensor:
    if isinstance(noisy, torch.Tensor):
        return noisy.to(dtype) if noisy.ndim == 4 else noisy.unsqueeze(0).to(dtype)
    return to_tensor(noisy, dtype)


def meta_test_adapt(theta1: ParamPartition, theta2: MaskNetParams, noisy, cfg: AdaptConfig,
                    keep_images: bool = False):
    """Adapt copies of the two heads to one noisy image with plain gradient steps on ``L_aux``.

    The caller's parameters are never modified. Returns ``(adapted_heads, trace)``.
    On a non-finite loss the loop stops and the last finite heads are returned
    with ``trace.diverged`` set.
    """
    body_params, mask_params = _frozen(theta1, theta2)
    x = _as_input(noisy, theta1.tensors()[0].dtype)
    heads = clone_heads(theta1)
    trace = AdaptTrace()
    outputs = []
    for step in range(1, cfg.K + 1):
        with torch.no_grad():
            mask = forward_maskgen(mask_params, x)
        tensors = [t.requires_grad_(True) for part in heads.values() for t in part.values()]
        clean_hat, noisy_hat = forward_multitask(replace_heads(body_params, heads), x)
        outputs.append(clean_hat.detach())
        loss = aux_loss(cfg.aux_loss, noisy_hat, x, mask)
        if not torch.isfinite(loss):
            log.warning("non-finite adaptation loss at step %d; stopping early", step)
            trace.diverged = True
            break
        grads = iter(torch.autograd.grad(loss, tensors, allow_unused=True))
        stepped = {}
        for part, params in heads.items():
            stepped[part] = {}
            for k, t in params.items():
                g = next(grads)
                stepped[part][k] = (t - cfg.alpha * g).detach() if g is not None else t.detach()
        heads = stepped
        trace.per_step.append((step, float(loss.detach()), None))
    heads = {part: {k: t.detach() for k, t in params.items()} for part, params in heads.items()}
    with torch.no_grad():
        final, _ = forward_multitask(replace_heads(body_params, heads), x)
    trace.final_clean = final
    if outputs:
        trace.initial_clean = outputs[0]
    else:
        trace.initial_clean = final
    if keep_images:
        after = outputs[1:] + [final]
        trace.per_step = [(s, l, after[i]) for i, (s, l, _) in enumerate(trace.per_step)]
    return heads, trace


def predict(theta1: ParamPartition, noisy) -> torch.Tensor:
    x = _as_input(noisy, theta1.tensors()[0].dtype)
    with torch.no_grad():
        clean, _ = forward_multitask(map_partition(theta1, torch.Tensor.detach), x)
    return clean


def _resolve_pairs(dataset):
    if isinstance(dataset, (str, Path)):
        pairs = load_paired_folder(dataset)
    else:
        pairs = list(dataset)
    if not pairs:
        raise ConfigError("evaluation dataset is empty")
    return sorted(pairs, key=lambda p: p[0])


def evaluate(dataset, theta1: ParamPartition, theta2: MaskNetParams, mode: str = "no-adapt",
             eval_crop: int = 256, cfg: AdaptConfig | None = None, traces: dict | None = None) -> MetricReport:
    """PSNR/SSIM of the clamped clean prediction on center crops, one row per image id.

    In ``adapt`` mode every image is adapted from the same starting
    parameters. Per-step losses are written into ``traces`` when given.
    """
    if mode not in ("no-adapt", "adapt"):
        raise ConfigError(f"mode must be 'no-adapt' or 'adapt', got {mode!r}")
    cfg = cfg or AdaptConfig()
    if not cfg.restore_after:
        raise ConfigError("restore_after=False is not supported; adaptation is always per image")
    report = MetricReport()
    for image_id, pair in _resolve_pairs(dataset):
        noisy = center_crop(pair.noisy, eval_crop)
        clean = center_crop(pair.clean, eval_crop)
        if mode == "adapt":
            _, trace = meta_test_adapt(theta1, theta2, noisy, cfg)
            pred = trace.final_clean
            if traces is not None:
                traces[image_id] = trace
        else:
            pred = predict(theta1, noisy)
        out = np.clip(to_image(pred).astype(np.float64), 0.0, 1.0)
        s = ssim(out, clean) if min(clean.shape[:2]) >= SSIM_WINDOW else math.nan
        report.per_image.append((image_id, psnr(out, clean), s))
    return report


def validation_metrics(theta1: ParamPartition, theta2: MaskNetParams, pairs, crop: int) -> dict:
    """Mean primary loss, PSNR, SSIM and mask collapse score over validation pairs."""
    items = pairs if isinstance(pairs, (str, Path)) else [
        p if isinstance(p, tuple) else (f"{i:04d}", p) for i, p in enumerate(pairs)
    ]
    items = _resolve_pairs(items)
    dtype = theta1.tensors()[0].dtype
    losses, scores = [], []
    frozen1, frozen2 = _frozen(theta1, theta2)
    with torch.no_grad():
        for _, pair in items:
            x = to_tensor(center_crop(pair.noisy, crop), dtype)
            y = to_tensor(center_crop(pair.clean, crop), dtype)
            clean_hat, _ = forward_multitask(frozen1, x)
            losses.append(float(primary_loss(clean_hat, y)))
            scores.append(float(collapse_score(forward_maskgen(frozen2, x)).mean()))
    report = evaluate(items, theta1, theta2, "no-adapt", crop)
    return {
        "L_pri": float(np.mean(losses)),
        "psnr": report.mean_psnr,
        "ssim": report.mean_ssim,
        "collapse_score": float(np.mean(scores)),
    }


def write_traces(path, traces: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "step", "aux_loss"])
        for image_id in sorted(traces):
            for step, loss, _ in traces[image_id].per_step:
                w.writerow([image_id, step, repr(loss)])


# -- figures ----------------------------------------------------------------


def minmax_normalize(fmap: np.ndarray) -> np.ndarray:
    """Map each channel (last axis) of an HxWxC map to [0, 1]; constant channels become 0."""
    fmap = np.asarray(fmap, dtype=np.float64)
    lo = fmap.min(axis=(0, 1), keepdims=True)
    hi = fmap.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (fmap - lo) / np.where(span > 0, span, 1.0), 0.0)


def tile(images: list[list[np.ndarray]], gap: int = 2) -> np.ndarray:
    """Arrange a grid (rows of HxWx1 arrays) on a black canvas."""
    cell_h = max(im.shape[0] for row in images for im in row)
    cell_w = max(im.shape[1] for row in images for im in row)
    rows, cols = len(images), max(len(r) for r in images)
    sheet = np.zeros((rows * cell_h + (rows - 1) * gap, cols * cell_w + (cols - 1) * gap, 1))
    for r, row in enumerate(images):
        for c, im in enumerate(row):
            top, left = r * (cell_h + gap), c * (cell_w + gap)
            sheet[top : top + im.shape[0], left : left + im.shape[1]] = im
    return sheet


def visualize_masks(theta2_checkpoints: list[MaskNetParams], images, out_dir) -> list[Path]:
    """One grayscale PNG per (checkpoint, image) plus a contact sheet (rows: checkpoints)."""
    if not theta2_checkpoints:
        raise DomainError("need at least one mask-network checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, grid = [], []
    for ci, theta2 in enumerate(theta2_checkpoints):
        frozen = map_mask(theta2, torch.Tensor.detach)
        dtype = theta2.tensors()[0].dtype
        row = []
        for ii, img in enumerate(images):
            with torch.no_grad():
                mask = to_image(forward_maskgen(frozen, _as_input(img, dtype))).astype(np.float64)
            path = out_dir / f"mask_ckpt{ci:02d}_img{ii:02d}.png"
            save_image(mask, path)
            written.append(path)
            row.append(mask)
        grid.append(row)
    sheet = out_dir / "mask_contact_sheet.png"
    save_image(tile(grid), sheet)
    written.append(sheet)
    return written


def visualize_features(theta1: ParamPartition, adapted_heads, noisy, out_dir) -> list[Path]:
    """Primary-head last-layer features before/after adaptation and their absolute difference."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frozen = map_partition(theta1, torch.Tensor.detach)
    x = _as_input(noisy, theta1.tensors()[0].dtype)
    with torch.no_grad():
        before = to_image(primary_features(frozen, x)).astype(np.float64)
        after = to_image(primary_features(replace_heads(frozen, adapted_heads), x)).astype(np.float64)
    diff = np.abs(after - before)
    written = []
    nb, na, nd = minmax_normalize(before), minmax_normalize(after), minmax_normalize(diff)
    for c in range(before.shape[2]):
        for tag, arr in (("before", nb), ("after", na)):
            path = out_dir / f"features_{tag}_c{c:03d}.png"
            save_image(arr[:, :, c : c + 1], path)
            written.append(path)
    cols = max(1, math.ceil(math.sqrt(before.shape[2])))
    cells = [nd[:, :, c : c + 1] for c in range(before.shape[2])]
    grid = [cells[i : i + cols] for i in range(0, len(cells), cols)]
    panel = out_dir / "features_diff_panel.png"
    save_image(tile(grid), panel)
    written.append(panel)
    return written


def unfold_adaptation(theta1: ParamPartition, theta2: MaskNetParams, noisy, cfg: AdaptConfig, out_dir,
                      image_id: str = "image") -> tuple[list[Path], AdaptTrace]:
    """Save the clean prediction before adaptation (step 0) and after each of the K steps."""
    if cfg.K < 1:
        raise DomainError("unfolding needs K >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _, trace = meta_test_adapt(theta1, theta2, noisy, cfg, keep_images=True)
    frames = [trace.initial_clean] + [img for _, _, img in trace.per_step]
    written = []
    for step, frame in enumerate(frames):
        path = out_dir / f"{image_id}_step{step}.png"
        save_image(to_image(frame), path)
        written.append(path)
    csv_path = out_dir / f"{image_id}_trace.csv"
    write_traces(csv_path, {image_id: trace})
    return written, trace
