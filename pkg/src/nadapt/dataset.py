"""On-disk dataset layout and the in-memory splits used for training.

Layout under ``root``::

    syn_clean/NNN.png      clean images for the synthetic (paired) domain
    real_degraded/NNN.png  "real" degraded images, unlabeled during training
    real_gt_eval/NNN.png   ground truth for real_degraded, evaluation only
    clean_pool/NNN.png     unpaired clean images
"""
from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .config import ConfigError
from .degrade import DegradeSpec, apply_degradation, list_images, load_images, sample_params
from .imaging import save_image

SUBDIRS = ("syn_clean", "real_degraded", "clean_pool", "real_gt_eval")
BUILTIN_IMAGES = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry", "retina")
ROLES = ("syn", "real", "pool")


def builtin_corpus(role: str, n: int, size: int, seed: int = 0) -> list[np.ndarray]:
    """Random crops from scikit-image's bundled photographs.

    Each photo is downscaled by two and split into three vertical bands, one
    per role, so the syn/real/pool corpora never share pixels.
    """
    import skimage.data

    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    band = ROLES.index(role)
    rng = np.random.default_rng([seed, band])
    sources = []
    for name in BUILTIN_IMAGES:
        img = getattr(skimage.data, name)()[..., :3]
        img = cv2.resize(img, (img.shape[1] // 2, img.shape[0] // 2), interpolation=cv2.INTER_AREA)
        w3 = img.shape[1] // 3
        part = img[:, band * w3:(band + 1) * w3]
        if min(part.shape[:2]) >= size:
            sources.append(part.astype(np.float32) / 255.0)
    out = []
    for _ in range(n):
        src = sources[int(rng.integers(len(sources)))]
        top = int(rng.integers(0, src.shape[0] - size + 1))
        left = int(rng.integers(0, src.shape[1] - size + 1))
        out.append(np.ascontiguousarray(src[top:top + size, left:left + size].transpose(2, 0, 1)))
    return out


def _source_images(source, role: str, cfg: dict) -> list[np.ndarray]:
    b = cfg["degrade"]["builtin"]
    if source == "builtin":
        return builtin_corpus(role, int(b[role]), int(b["size"]), int(cfg["seed"]))
    try:
        paths = list_images(source)
    except FileNotFoundError:
        raise ConfigError(f"source directory does not exist: {source}") from None
    if not paths:
        raise ConfigError(f"source directory is empty: {source}")
    return [img for _, img in load_images(source)]


def _to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[0] == channels:
        return img
    if channels == 1:
        return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None].astype(img.dtype)
    return np.repeat(img, 3, axis=0)


def build_dataset(cfg: dict, root, force: bool = False) -> dict:
    """Write the dataset layout for ``cfg``; returns per-directory file counts."""
    root = Path(root)
    d = cfg["degrade"]
    if d["source"] is None:
        raise ConfigError("degrade.source is required (a directory or 'builtin')")
    existing = [root / s for s in SUBDIRS if (root / s).exists() and any((root / s).iterdir())]
    if existing and not force:
        raise FileExistsError(f"{root} already holds a dataset; pass --force to overwrite")
    for s in SUBDIRS:
        shutil.rmtree(root / s, ignore_errors=True)
    builtin = d["source"] == "builtin"
    channels = int(cfg["model"]["channels"])
    syn = _source_images(d["source"], "syn", cfg)
    real_src = d["real_source"] or ("builtin" if builtin else d["source"])
    real = _source_images(real_src, "real", cfg)
    pool_src = d["pool_source"] or ("builtin" if builtin else None)
    pool = _source_images(pool_src, "pool", cfg) if pool_src else []

    spec = DegradeSpec.from_dict(d["real"])
    rng = np.random.default_rng([int(cfg["seed"]), 7])
    root.mkdir(parents=True, exist_ok=True)
    log_fh = open(root / "degradations.jsonl", "w") if d["log_degradations"] else None
    try:
        for i, img in enumerate(syn):
            save_image(root / "syn_clean" / f"{i:03d}.png", _to_channels(img, channels))
        for i, img in enumerate(real):
            img = _to_channels(img, channels)
            params = sample_params(spec, rng)
            save_image(root / "real_gt_eval" / f"{i:03d}.png", img)
            save_image(root / "real_degraded" / f"{i:03d}.png", apply_degradation(img, params, spec))
            if log_fh:
                log_fh.write(json.dumps({"image_id": f"{i:03d}", **params}, sort_keys=True) + "\n")
        for i, img in enumerate(pool):
            save_image(root / "clean_pool" / f"{i:03d}.png", _to_channels(img, channels))
    finally:
        if log_fh:
            log_fh.close()
    return {s: len(list_images(root / s)) if (root / s).exists() else 0 for s in SUBDIRS}


@dataclass
class TrainData:
    syn: list            # [(id, clean)]
    syn_val: list        # [(id, degraded, clean)]
    real: list           # [(id, degraded)]
    real_val: list       # [(id, degraded, gt)]
    pool: list | None = None


def _split(items: list, holdout: float) -> tuple[list, list]:
    n_val = int(round(len(items) * holdout))
    if holdout > 0:
        n_val = max(n_val, 1)
    cut = len(items) - n_val
    return items[:cut], items[cut:]


def load_train_data(root, cfg: dict) -> TrainData:
    """Split the dataset into training streams and validation sets.

    The last ``syn_holdout`` / ``real_holdout`` fraction of each sorted
    directory is held out. Real ground truth is read only for held-out images.
    """
    root = Path(root)
    patch = int(cfg["data"]["patch"])
    syn_all = load_images(root / "syn_clean", patch)
    real_all = load_images(root / "real_degraded", patch)
    syn, syn_hold = _split(syn_all, float(cfg["data"]["syn_holdout"]))
    real, real_hold = _split(real_all, float(cfg["data"]["real_holdout"]))
    spec = DegradeSpec.from_dict(cfg["degrade"]["syn"])
    rng = np.random.default_rng([int(cfg["seed"]), 11])
    syn_val = []
    for image_id, clean in syn_hold:
        syn_val.append((image_id, apply_degradation(clean, sample_params(spec, rng), spec), clean))
    real_val = []
    if real_hold:
        gts = dict(load_images(root / "real_gt_eval", 0, ids=[i for i, _ in real_hold]))
        real_val = [(i, img, gts[i]) for i, img in real_hold if i in gts]
    pool = None
    pool_dir = root / "clean_pool"
    if pool_dir.exists() and list_images(pool_dir):
        pool = load_images(pool_dir, patch)
    return TrainData(syn, syn_val, real, real_val, pool)


def load_eval_set(root, cfg: dict, split: str = "real") -> list:
    """Held-out ``(id, degraded, gt)`` triples for ``split`` in {real, syn}."""
    data = load_train_data(root, cfg)
    return data.real_val if split == "real" else data.syn_val
