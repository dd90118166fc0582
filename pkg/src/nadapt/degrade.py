"""Synthetic degradations and the patch streams that feed training.

Every degradation draws its randomness from a per-patch seed that is recorded
alongside the patch, so a logged parameter dict reproduces the degraded patch
bit-exactly via :func:`apply_degradation`.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import _kernels
from .imaging import check_image, load_image

log = logging.getLogger(__name__)

KINDS = ("awgn", "motion_blur", "rain", "poisson_gaussian")


@dataclass
class DegradeSpec:
    kind: str = "awgn"
    sigma_range: tuple[float, float] = (0.0, 75.0)
    kernel_len_range: tuple[int, int] = (5, 21)
    angle_range: tuple[float, float] = (0.0, 180.0)
    streak_count_range: tuple[int, int] = (10, 40)
    streak_len_range: tuple[float, float] = (6.0, 24.0)
    streak_angle_range: tuple[float, float] = (-20.0, 20.0)
    opacity_range: tuple[float, float] = (0.15, 0.45)
    # Poisson-Gaussian family: photon scale and read-noise sigma (8-bit units)
    peak_range: tuple[float, float] = (20.0, 60.0)
    read_sigma_range: tuple[float, float] = (2.0, 10.0)
    clip: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        for name in ("sigma_range", "kernel_len_range", "angle_range", "streak_count_range",
                     "streak_len_range", "streak_angle_range", "opacity_range", "peak_range",
                     "read_sigma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo > hi ({lo} > {hi})")
            setattr(self, name, (lo, hi))
        if self.sigma_range[0] < 0:
            raise ValueError("sigma_range must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeSpec":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# ---------------------------------------------------------------------------
# operators


def awgn(clean: np.ndarray, sigma: float, rng: np.random.Generator, clip: bool = False) -> np.ndarray:
    """Add white Gaussian noise of std ``sigma / 255``."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return clean.copy()
    noise = rng.standard_normal(clean.shape).astype(clean.dtype) * np.asarray(sigma / 255.0, clean.dtype)
    out = clean + noise
    return np.clip(out, 0.0, 1.0) if clip else out


def poisson_gaussian(clean: np.ndarray, peak: float, read_sigma: float, rng: np.random.Generator,
                     clip: bool = False) -> np.ndarray:
    """Signal-dependent shot noise at photon scale ``peak`` plus Gaussian read noise."""
    if peak <= 0 or read_sigma < 0:
        raise ValueError("peak must be > 0 and read_sigma >= 0")
    shot = rng.poisson(np.clip(clean, 0.0, None).astype(np.float64) * peak) / peak
    out = shot + rng.standard_normal(clean.shape) * (read_sigma / 255.0)
    out = out.astype(clean.dtype)
    return np.clip(out, 0.0, 1.0) if clip else out


def motion_kernel(kernel_len: int, angle: float) -> np.ndarray:
    """Normalised linear motion kernel; ``kernel_len`` taps splatted bilinearly."""
    if kernel_len < 1:
        raise ValueError("kernel_len must be >= 1")
    size = kernel_len if kernel_len % 2 else kernel_len + 1
    c = size // 2
    k = np.zeros((size, size))
    th = np.deg2rad(angle)
    for s in np.arange(kernel_len) - (kernel_len - 1) / 2.0:
        x = c + s * np.cos(th)
        y = c - s * np.sin(th)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if wx * wy > 1e-12 and 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    k[y0 + dy, x0 + dx] += wx * wy
    return k / k.sum()


def motion_blur(clean: np.ndarray, kernel_len: int, angle: float, rng=None) -> np.ndarray:
    check_image(clean)
    k = motion_kernel(int(kernel_len), angle)
    if k.shape[0] > min(clean.shape[1:]):
        raise ValueError(f"kernel {k.shape} larger than image {clean.shape[1:]}")
    return np.stack([_kernels.convolve_reflect(ch, k) for ch in clean])


def _streak_geometry(h: int, w: int, spec: DegradeSpec, rng: np.random.Generator):
    n = int(rng.integers(spec.streak_count_range[0], spec.streak_count_range[1] + 1))
    x0 = rng.uniform(0, w, n)
    y0 = rng.uniform(0, h, n)
    length = rng.uniform(*spec.streak_len_range, n)
    ang = np.deg2rad(rng.uniform(*spec.streak_angle_range, n))
    opacity = rng.uniform(*spec.opacity_range, n)
    # angle measured from vertical, streaks fall downward
    return x0, y0, x0 + length * np.sin(ang), y0 + length * np.cos(ang), opacity


def rain_streaks(clean: np.ndarray, spec: DegradeSpec, rng: np.random.Generator) -> np.ndarray:
    """Additive white streaks, clipped to [0, 1]. A zero count range is the identity."""
    check_image(clean)
    if clean.shape[0] != 3:
        raise ValueError("rain_streaks expects a 3-channel image")
    if spec.streak_count_range[1] == 0:
        return clean.copy()
    h, w = clean.shape[1:]
    layer = _kernels.draw_streaks(h, w, *_streak_geometry(h, w, spec, rng))
    return np.clip(clean + layer[None].astype(clean.dtype), 0.0, 1.0)


# ---------------------------------------------------------------------------
# per-patch parameters


def sample_params(spec: DegradeSpec, rng: np.random.Generator) -> dict:
    p: dict = {"kind": spec.kind, "noise_seed": int(rng.integers(2**31))}
    if spec.kind == "awgn":
        p["sigma"] = float(rng.uniform(*spec.sigma_range))
    elif spec.kind == "poisson_gaussian":
        p["peak"] = float(rng.uniform(*spec.peak_range))
        p["read_sigma"] = float(rng.uniform(*spec.read_sigma_range))
    elif spec.kind == "motion_blur":
        p["kernel_len"] = int(rng.integers(spec.kernel_len_range[0], spec.kernel_len_range[1] + 1))
        p["angle"] = float(rng.uniform(*spec.angle_range))
    return p


def apply_degradation(clean: np.ndarray, params: dict, spec: DegradeSpec) -> np.ndarray:
    rng = np.random.default_rng(params["noise_seed"])
    kind = params["kind"]
    if kind == "awgn":
        return awgn(clean, params["sigma"], rng, clip=spec.clip)
    if kind == "poisson_gaussian":
        return poisson_gaussian(clean, params["peak"], params["read_sigma"], rng, clip=spec.clip)
    if kind == "motion_blur":
        return motion_blur(clean, params["kernel_len"], params["angle"])
    if kind == "rain":
        return rain_streaks(clean, spec, rng)
    raise ValueError(f"unknown degradation kind {kind!r}")


# ---------------------------------------------------------------------------
# patch streams


@dataclass
class PatchSample:
    image_id: str
    clean: np.ndarray
    degraded: np.ndarray | None
    params: dict = field(default_factory=dict)


@dataclass
class DomainBatch:
    syn_degraded: np.ndarray
    syn_clean: np.ndarray
    real_degraded: np.ndarray
    clean_pool: np.ndarray | None = None

    def __post_init__(self):
        if self.syn_degraded.shape != self.syn_clean.shape:
            raise ValueError("syn_degraded and syn_clean must share shape")
        size = self.syn_clean.shape[-2:]
        others = [self.real_degraded] + ([self.clean_pool] if self.clean_pool is not None else [])
        if any(o.shape[-2:] != size for o in others):
            raise ValueError("all streams must share patch size")


def list_images(source_dir) -> list[Path]:
    source_dir = Path(source_dir)
    if not source_dir.is_dir():
        raise FileNotFoundError(source_dir)
    return sorted(p for p in source_dir.iterdir() if p.suffix.lower() == ".png")


def load_images(source_dir, min_size: int = 0, ids: list[str] | None = None) -> list[tuple[str, np.ndarray]]:
    """Load PNGs sorted by name, skipping (with a warning) any smaller than ``min_size``."""
    paths = list_images(source_dir)
    if ids is not None:
        keep = set(ids)
        paths = [p for p in paths if p.stem in keep]
    out = []
    for p in paths:
        img = load_image(p)
        if min(img.shape[1:]) < min_size:
            warnings.warn(f"skipping {p.name}: {img.shape[1:]} smaller than patch {min_size}")
            continue
        out.append((p.stem, img))
    if not out:
        raise ValueError(f"no usable images in {source_dir}")
    return out


def augment_patch(patch: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(patch, k=rot, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def make_patch_stream(source, patch: int = 128, spec: DegradeSpec | None = None, augment: bool = True,
                      rng: np.random.Generator | None = None, epochs: int | None = None,
                      log_file=None) -> Iterator[PatchSample]:
    """Yield random ``patch``-sized crops, one per image per epoch, in shuffled order.

    ``source`` is a directory or a preloaded list of ``(image_id, array)``.
    With ``spec`` set each crop is also degraded and its parameters recorded.
    Augmentation applies a 90 degree rotation, a 180 degree rotation and a
    horizontal flip, each independently with probability 0.5, so the four
    orientations are equally likely.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    images = load_images(source, patch) if isinstance(source, (str, Path)) else list(source)
    if not images:
        raise ValueError("empty image source")
    epoch = 0
    while epochs is None or epoch < epochs:
        for idx in rng.permutation(len(images)):
            image_id, img = images[idx]
            h, w = img.shape[1:]
            top = int(rng.integers(0, h - patch + 1))
            left = int(rng.integers(0, w - patch + 1))
            crop = img[:, top:top + patch, left:left + patch]
            params = {"image_id": image_id, "top": top, "left": left, "rot": 0, "flip": False}
            if augment:
                params["rot"] = int(rng.random() < 0.5) + 2 * int(rng.random() < 0.5)
                params["flip"] = bool(rng.random() < 0.5)
                crop = augment_patch(crop, params["rot"], params["flip"])
            else:
                crop = np.ascontiguousarray(crop)
            degraded = None
            if spec is not None:
                params.update(sample_params(spec, rng))
                degraded = apply_degradation(crop, params, spec)
            if log_file is not None:
                log_file.write(json.dumps(params, sort_keys=True) + "\n")
            yield PatchSample(image_id, crop, degraded, params)
        epoch += 1


def stack_batch(samples: list[PatchSample], degraded: bool = False) -> np.ndarray:
    return np.stack([s.degraded if degraded else s.clean for s in samples])
