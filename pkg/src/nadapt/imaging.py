"""Image arrays, PNG IO, luma conversion and PSNR/SSIM metrics.

Images are float arrays shaped ``(C, H, W)`` with ``C`` in ``{1, 3}`` and
values nominally in ``[0, 1]``. Metrics are computed in float64.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import _kernels

PSNR_CAP_DB = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ImageFormatError(ValueError):
    """Raised for PNGs whose bit depth or channel layout is not supported."""


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"{name} must be shaped (C,H,W) with C in {{1,3}}, got {img.shape}")
    return img


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"could not decode {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 2:
        arr = raw[None]
    elif raw.shape[2] == 3:
        arr = raw[:, :, ::-1].transpose(2, 0, 1)
    else:
        raise ImageFormatError(f"unsupported channel count {raw.shape[2]} in {path}")
    return np.ascontiguousarray(arr, dtype=np.float32) / np.float32(scale)


def save_image(path, img: np.ndarray, bit_depth: int = 8) -> None:
    """Write ``img`` as PNG, clipping to [0, 1] and rounding to ``bit_depth``."""
    check_image(img)
    if bit_depth == 8:
        dtype, scale = np.uint8, 255.0
    elif bit_depth == 16:
        dtype, scale = np.uint16, 65535.0
    else:
        raise ImageFormatError(f"unsupported bit depth {bit_depth}")
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * scale).astype(dtype)
    q = q[0] if q.shape[0] == 1 else q[::-1].transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


def to_luma(img: np.ndarray) -> np.ndarray:
    """BT.601 luma. Single-channel input is returned unchanged."""
    check_image(img)
    if img.shape[0] == 1:
        return img
    r, g, b = LUMA_WEIGHTS
    return (r * img[0] + g * img[1] + b * img[2])[None]


def _same_shape(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs return ``PSNR_CAP_DB``."""
    _same_shape(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(pred: np.ndarray, target: np.ndarray, y_channel: bool = False) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on [0, 1] data.

    Multi-channel images are scored per channel and averaged, unless
    ``y_channel`` is set, in which case both are converted to BT.601 luma.
    Only fully interior windows contribute.
    """
    _same_shape(pred, target)
    check_image(pred)
    if y_channel:
        pred, target = to_luma(pred), to_luma(target)
    if min(pred.shape[1:]) < SSIM_WIN:
        raise ValueError(f"image {pred.shape[1:]} smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    w = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = [_kernels.ssim_mean(pred[c], target[c], w, c1, c2) for c in range(pred.shape[0])]
    return float(np.mean(vals))


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def add(self, image_id: str, psnr_db: float, ssim_val: float) -> None:
        self.per_image.append((image_id, float(psnr_db), float(ssim_val)))

    @property
    def psnr_db(self) -> float:
        return float(np.mean([r[1] for r in self.per_image])) if self.per_image else float("nan")

    @property
    def ssim(self) -> float:
        return float(np.mean([r[2] for r in self.per_image])) if self.per_image else float("nan")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["image_id", "psnr_db", "ssim"])
            for image_id, p, s in self.per_image:
                wr.writerow([image_id, f"{p:.6f}", f"{s:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rep.add(row["image_id"], float(row["psnr_db"]), float(row["ssim"]))
        return rep
