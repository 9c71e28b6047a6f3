"""Synthetic corruption used to build pre-training pairs from clean images.

Three degradations (Gaussian, speckle, salt-and-pepper) are applied to each
image in a random order with freshly sampled strengths. Sigmas are given on
the 0-255 pixel scale and divided by 255 internally. Every degradation clamps
its output to [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .imaging import as_image

DEGRADATIONS = ("gaussian", "speckle", "salt_pepper")


@dataclass
class DegradationSpec:
    gaussian_sigma_range: tuple[float, float] = (5.0, 50.0)
    speckle_sigma_range: tuple[float, float] = (5.0, 50.0)
    sp_amount_range: tuple[float, float] = (0.0, 0.01)
    sp_salt_prob_range: tuple[float, float] = (0.3, 0.8)

    def __post_init__(self):
        for name in ("gaussian_sigma_range", "speckle_sigma_range", "sp_amount_range", "sp_salt_prob_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not 0.0 <= lo <= hi:
                raise DomainError(f"{name} must satisfy 0 <= low <= high, got ({lo}, {hi})")
            if name.startswith("sp_") and hi > 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got ({lo}, {hi})")
            setattr(self, name, (lo, hi))

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}


@dataclass
class DegradationRecord:
    order: tuple[str, str, str]
    gaussian_sigma: float
    speckle_sigma: float
    sp_amount: float
    sp_salt_prob: float
    seed: int | None = None


def add_gaussian(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    noise = rng.normal(0.0, sigma / 255.0, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


def add_speckle(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    img = as_image(img)
    if sigma == 0:
        return img.copy()
    noise = rng.normal(0.0, sigma / 255.0, size=img.shape)
    return np.clip(img + img * noise, 0.0, 1.0).astype(np.float32)


def add_salt_pepper(img, amount: float, salt_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Corrupt whole pixels (all channels jointly) to 1.0 or 0.0."""
    if not 0.0 <= amount <= 1.0:
        raise DomainError(f"amount must lie in [0, 1], got {amount}")
    if not 0.0 <= salt_prob <= 1.0:
        raise DomainError(f"salt_prob must lie in [0, 1], got {salt_prob}")
    img = as_image(img)
    if amount == 0:
        return img.copy()
    h, w = img.shape[:2]
    hit = rng.random((h, w)) < amount
    salt = rng.random((h, w)) < salt_prob
    out = img.copy()
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def degrade_random_sequence(
    img, spec: DegradationSpec, rng: np.random.Generator
) -> tuple[np.ndarray, DegradationRecord]:
    g_sigma = float(rng.uniform(*spec.gaussian_sigma_range))
    s_sigma = float(rng.uniform(*spec.speckle_sigma_range))
    amount = float(rng.uniform(*spec.sp_amount_range))
    salt_prob = float(rng.uniform(*spec.sp_salt_prob_range))
    order = tuple(DEGRADATIONS[i] for i in rng.permutation(3))

    out = as_image(img)
    for name in order:
        if name == "gaussian":
            out = add_gaussian(out, g_sigma, rng)
        elif name == "speckle":
            out = add_speckle(out, s_sigma, rng)
        else:
            out = add_salt_pepper(out, amount, salt_prob, rng)
    out = np.clip(out, 0.0, 1.0)
    return out, DegradationRecord(order, g_sigma, s_sigma, amount, salt_prob)


RECORD_HEADER = ["image_id", "order", "sigma_g", "sigma_s", "amount", "salt_prob", "seed"]


def write_records(path, records: list[tuple[str, DegradationRecord]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for image_id, r in records:
            w.writerow([
                image_id,
                ">".join(r.order),
                repr(r.gaussian_sigma),
                repr(r.speckle_sigma),
                repr(r.sp_amount),
                repr(r.sp_salt_prob),
                "" if r.seed is None else r.seed,
            ])


def read_records(path) -> list[tuple[str, DegradationRecord]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((
                row["image_id"],
                DegradationRecord(
                    order=tuple(row["order"].split(">")),
                    gaussian_sigma=float(row["sigma_g"]),
                    speckle_sigma=float(row["sigma_s"]),
                    sp_amount=float(row["amount"]),
                    sp_salt_prob=float(row["salt_prob"]),
                    seed=int(row["seed"]) if row["seed"] else None,
                ),
            ))
    return out
