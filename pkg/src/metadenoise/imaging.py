"""Image data model, PNG I/O, patch geometry and PSNR/SSIM metrics.

Images are ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}`` and
intensities normalized to ``[0, 1]``. Network outputs may leave that range;
they are clamped only when measured or written to disk.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import DimensionError, ImageFormatError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def as_image(data) -> np.ndarray:
    """Validate and normalize an array to the ``(H, W, C)`` float32 layout."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"expected HxWx1 or HxWx3 image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"empty image of shape {arr.shape}")
    return arr


@dataclass
class PatchPair:
    noisy: np.ndarray
    clean: np.ndarray

    def __post_init__(self):
        self.noisy = as_image(self.noisy)
        self.clean = as_image(self.clean)
        if self.noisy.shape != self.clean.shape:
            raise DimensionError(
                f"noisy {self.noisy.shape} and clean {self.clean.shape} differ in shape"
            )


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for _, p, _ in self.per_image])) if self.per_image else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.per_image])) if self.per_image else math.nan

    def summary(self) -> str:
        return f"mean_psnr={self.mean_psnr:.4f} mean_ssim={self.mean_ssim:.4f} n={len(self.per_image)}"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "psnr_db", "ssim"])
            for image_id, p, s in self.per_image:
                w.writerow([image_id, repr(float(p)), repr(float(s))])
            w.writerow(["mean_psnr", repr(self.mean_psnr)])
            w.writerow(["mean_ssim", repr(self.mean_ssim)])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                if row[0] in ("mean_psnr", "mean_ssim"):
                    continue
                rows.append((row[0], float(row[1]), float(row[2])))
        return cls(rows)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode in ("LA",):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return as_image(arr)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize with round-half-to-even."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path) -> None:
    q = to_uint8(as_image(img))
    if q.shape[2] == 1:
        q = q[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_paired_folder(folder) -> list[tuple[str, PatchPair]]:
    """Load a ``noisy/`` + ``clean/`` corpus, matching files by name.

    Files present on only one side are skipped with a warning.
    """
    folder = Path(folder)
    noisy_dir, clean_dir = folder / "noisy", folder / "clean"
    if not noisy_dir.is_dir() or not clean_dir.is_dir():
        raise FileNotFoundError(f"{folder} lacks noisy/ and clean/ subfolders")
    noisy = {p.name: p for p in list_images(noisy_dir)}
    clean = {p.name: p for p in list_images(clean_dir)}
    unmatched = sorted(set(noisy) ^ set(clean))
    if unmatched:
        log.warning("skipping %d unpaired files in %s: %s", len(unmatched), folder, unmatched)
    pairs = []
    for name in sorted(set(noisy) & set(clean)):
        pairs.append((Path(name).stem, PatchPair(load_image(noisy[name]), load_image(clean[name]))))
    return pairs


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the first two axes
    x = sliding_window_view(x, g.size, axis=0) @ g
    x = sliding_window_view(x, g.size, axis=1) @ g
    return x


def ssim(a, b, peak: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    g = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(0, 1))
    return float(per_channel.mean())


def sample_patches(pair: PatchPair, size: int, count: int, rng: np.random.Generator) -> list[PatchPair]:
    """Crop ``count`` aligned noisy/clean patches at uniformly random offsets."""
    h, w = pair.noisy.shape[:2]
    if size > min(h, w) or size < 1:
        raise DimensionError(f"patch size {size} does not fit a {h}x{w} image")
    out = []
    for _ in range(count):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        sl = (slice(top, top + size), slice(left, left + size))
        out.append(PatchPair(pair.noisy[sl].copy(), pair.clean[sl].copy()))
    return out


def center_crop(img, size: int) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[:2]
    if size > h or size > w:
        log.warning("center crop %d exceeds image %dx%d; using the whole extent", size, h, w)
    sh, sw = min(size, h), min(size, w)
    top, left = (h - sh) // 2, (w - sw) // 2
    return img[top : top + sh, left : left + sw]

