"""Procedural clean images for smoke runs and tests (no dataset download needed)."""

from __future__ import annotations

import numpy as np

from .degrade import DegradationSpec, degrade_random_sequence
from .imaging import PatchPair


def clean_image(size: int, rng: np.random.Generator, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth scene: a color gradient, a few flat shapes and a faint texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    img = np.empty((size, size, channels))
    for c in range(channels):
        a, b, base = rng.uniform(-0.3, 0.3, 3)
        img[:, :, c] = 0.5 + base * 0.5 + a * xx + b * yy
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.05, 0.95, channels)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[inside] = color
    freq = rng.uniform(4, 12)
    img += 0.03 * np.sin(2 * np.pi * freq * (xx + yy))[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def clean_images(n: int, size: int, seed: int = 0, channels: int = 3) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [clean_image(size, rng, channels) for _ in range(n)]


def noisy_pairs(n: int, size: int, seed: int = 0, spec: DegradationSpec | None = None,
                channels: int = 3) -> list[tuple[str, PatchPair]]:
    """Clean images corrupted by the synthetic degradation pipeline, keyed by image id."""
    spec = spec or DegradationSpec()
    out = []
    for i, img in enumerate(clean_images(n, size, seed, channels)):
        noisy, _ = degrade_random_sequence(img, spec, np.random.default_rng([seed, i, 7]))
        out.append((f"img{i:03d}", PatchPair(noisy, img)))
    return out
